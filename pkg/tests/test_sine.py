import math

import numpy as np
import pytest
import torch

from gtabench.data import coordinate_map
from gtabench.evaluation import point_symmetry_error, spectrum
from gtabench.ice import IceResources
from gtabench.models import build_classifier, freeze
from gtabench.sine_attack import (
    SineParams,
    SineTrainConfig,
    sa_attack,
    sa_attack_batch,
    sa_train,
    sine_noise,
    sine_noise_tensor,
    sine_outer_loss,
    wave_descriptor,
)
from gtabench.data import to_tensor

from conftest import SmoothNet, make_set


def test_closed_form_values():
    omega = SineParams([[0.3, 0.0, 0.0], [0.0, 0.2, 1.0], [0.1, 0.1, 0.5]])
    z = sine_noise(omega, coordinate_map(4, 5))
    assert z.shape == (4, 5, 3)
    assert abs(z[2, 3, 0] - math.sin(0.9)) < 1e-15
    assert abs(z[2, 3, 1] - math.sin(0.4 + 1.0)) < 1e-15
    assert abs(z[2, 3, 2] - math.sin(0.3 + 0.2 + 0.5)) < 1e-15


def test_tensor_and_array_forms_agree():
    omega = SineParams.random(3)
    z = sine_noise(omega, coordinate_map(7, 9))
    zt = sine_noise_tensor(torch.tensor(omega.values), 7, 9).numpy().transpose(1, 2, 0)
    assert np.allclose(z, zt, atol=1e-12, rtol=0)


def test_wave_descriptor_examples():
    a = 2 * math.pi * 4 / 64
    d = wave_descriptor(SineParams([[a, 0, 0.5], [0, a, 0], [a, a, 0]]))
    assert abs(d.frequency[0] - 1 / 16) < 1e-12
    assert d.direction[0] == 0.0
    assert d.direction[1] == 90.0
    assert abs(d.direction[2] - 45.0) < 1e-12
    assert d.phase.tolist() == [0.5, 0.0, 0.0]
    assert "freq" in d.table()


def spectrum_fidelity(n=20, size=64, seed=0):
    """Off-DC peak distance from the predicted frequency, in bins, plus symmetry error."""
    rng = np.random.default_rng(seed)
    worst_bins, worst_sym = 0.0, 0.0
    coords = coordinate_map(size, size)
    for _ in range(n):
        ab = rng.uniform(-1.2, 1.2, (3, 2))
        # keep away from DC so an off-DC peak exists
        ab[np.hypot(ab[:, 0], ab[:, 1]) < 0.3] *= 3
        omega = SineParams(np.concatenate([ab, rng.uniform(0, 2 * math.pi, (3, 1))], 1))
        diagram = spectrum(sine_noise(omega, coords))
        predicted = wave_descriptor(omega).frequency * size
        peaks = np.asarray(diagram.peak_bin, dtype=float)
        measured = np.hypot(peaks[:, 0], peaks[:, 1])
        worst_bins = max(worst_bins, float(np.abs(measured - predicted).max()))
        worst_sym = max(worst_sym, point_symmetry_error(diagram))
    return worst_bins, worst_sym


def test_spectrum_peak_matches_wave_descriptor():
    bins, sym = spectrum_fidelity()
    assert bins <= 1.0
    assert sym <= 1e-9


def _resources(smooth=False):
    a = make_set("a", 6, 16, 16, 3, seed=1)
    b = make_set("b", 6, 20, 20, 4, seed=2)
    if smooth:
        ma, mb = SmoothNet(3, (16, 16), 1), SmoothNet(4, (20, 20), 2)
    else:
        ma = build_classifier("vgg-mini", 3, (16, 16), seed=1)
        mb = build_classifier("mobilenet-mini", 4, (20, 20), seed=2)
    ma, mb = freeze(ma.double()), freeze(mb.double())
    return IceResources([a, b], [[ma], [mb]]), [a.tensors(torch.float64), b.tensors(torch.float64)]


def omega_gradient_check(h=1e-6, seed=0):
    """Worst relative error over all nine scalars of the sine gradient."""
    res, batches = _resources(smooth=True)
    omega = torch.tensor(SineParams.random(seed).values, requires_grad=True)
    (g,) = torch.autograd.grad(sine_outer_loss(omega, res, batches, 15.0)[0], omega)
    worst = 0.0
    with torch.no_grad():
        for idx in np.ndindex(3, 3):
            plus, minus = omega.detach().clone(), omega.detach().clone()
            plus[idx] += h
            minus[idx] -= h
            fd = (sine_outer_loss(plus, res, batches, 15.0)[0]
                  - sine_outer_loss(minus, res, batches, 15.0)[0]).item() / (2 * h)
            worst = max(worst, abs(fd - g[idx].item()) / max(abs(fd), abs(g[idx].item()), 1e-12))
    return worst


def test_omega_gradient_matches_finite_differences():
    assert omega_gradient_check() <= 1e-4


def test_zero_iterations_keep_init():
    init = SineParams.random(5)
    out = sa_train(_resources()[0], SineTrainConfig(iterations=0, dtype="float64"), init)
    assert np.array_equal(out.omega.values, init.values)


def test_training_moves_omega_and_is_seeded():
    cfg = SineTrainConfig(iterations=3, batch_size=4, learning_rate=0.05,
                          step_rule="normalized", dtype="float64")
    r1 = sa_train(_resources()[0], cfg)
    r2 = sa_train(_resources()[0], cfg)
    assert np.array_equal(r1.omega.values, r2.omega.values)
    step = np.linalg.norm(r1.omega.values - SineParams.random(0).values)
    assert 0 < step <= 3 * 0.05 + 1e-9
    with pytest.raises(ValueError):
        SineTrainConfig(step_rule="adam")


def test_save_load_round_trip(tmp_path):
    omega = SineParams.random(2)
    omega.save(tmp_path / "w.txt", seed=2)
    text = (tmp_path / "w.txt").read_text()
    assert len(text.strip().splitlines()[-1].split()) == 9
    assert np.array_equal(SineParams.load(tmp_path / "w.txt").values, omega.values)
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(ValueError):
        SineParams.load(tmp_path / "bad.txt")
    with pytest.raises(ValueError):
        SineParams([[np.nan] * 3] * 3)


def test_attack_is_sign_of_wave_at_any_resolution():
    omega = SineParams.random(1)
    for h, w in [(16, 16), (40, 24)]:
        img = np.full((h, w, 3), 128.0)
        rec = sa_attack(omega, img, 15.0)
        rec.check()
        z = sine_noise(omega, coordinate_map(h, w))
        assert np.array_equal(rec.noise, 15.0 * np.sign(z))
        batch = sa_attack_batch(omega, to_tensor(img, torch.float64), 15.0)
        assert np.allclose(batch[0].numpy().transpose(1, 2, 0), rec.adversarial, atol=1e-9)
