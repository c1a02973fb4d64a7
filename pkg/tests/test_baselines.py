import numpy as np
import pytest
import torch

from gtabench.attack_core import entropy_ascent, sign_projection
from gtabench.baselines import (
    UAP_SIZE,
    BaselineMethod,
    DiverseInput,
    TranslationSmoothing,
    UapArtifact,
    UapTrainConfig,
    di_extra_pixels,
    ensemble_attack_batch,
    ensemble_transfer_attack,
    gaussian_kernel,
    joint_attack_batch,
    joint_single_image_attack,
    train_uap,
    uap_attack,
    uap_attack_batch,
    uap_noise,
    uap_outer_loss,
)
from gtabench.data import AttackBudget, resize_batch, to_tensor
from gtabench.ice import IceResources
from gtabench.models import build_classifier, freeze

from conftest import SmoothNet, make_set


@pytest.fixture
def zoo():
    a = freeze(build_classifier("vgg-mini", 3, (16, 16), seed=1).double())
    b = freeze(build_classifier("resnet-mini", 5, (20, 20), seed=2).double())
    return [a, b]


def _images(n=3, h=18, w=18, seed=0):
    return to_tensor(np.random.default_rng(seed).uniform(20, 235, (n, h, w, 3)), torch.float64)


def test_di_margin_examples():
    assert di_extra_pixels(32) == 4
    assert di_extra_pixels(56) == 8
    assert di_extra_pixels(84) == 12
    assert di_extra_pixels(8) == 4 and di_extra_pixels(300) == 12


def test_diverse_input_keeps_shape_and_prob_zero_is_identity():
    x = _images()
    assert DiverseInput(1.0, seed=1)(x).shape == x.shape
    assert DiverseInput(0.0)(x) is x


def test_gaussian_kernel_and_smoothing():
    k = gaussian_kernel(5, 1.5)
    assert abs(k.sum().item() - 1.0) < 1e-12
    assert torch.equal(k, k.T)
    g = torch.ones(1, 3, 9, 9, dtype=torch.float64)
    out = TranslationSmoothing(5, 1.5)(g)
    assert torch.allclose(out[..., 2:-2, 2:-2], g[..., 2:-2, 2:-2])


def test_method_validation():
    with pytest.raises(ValueError):
        BaselineMethod("CW")
    with pytest.raises(ValueError):
        BaselineMethod("MI", mu=-1)
    with pytest.raises(ValueError):
        BaselineMethod("TI-DIM", ti_kernel_size=4)


def pipeline_collapses(zoo):
    """Max deviations for the three collapse identities (0 means bit-exact)."""
    x = _images()
    b1, b10 = AttackBudget(15, 1), AttackBudget(15, 10)
    _, fgsm = ensemble_attack_batch(zoo, x, BaselineMethod("FGSM"), b10)
    _, pgd1 = ensemble_attack_batch(zoo, x, BaselineMethod("PGD"), b1)
    _, mi0 = ensemble_attack_batch(zoo, x, BaselineMethod("MI", mu=0.0), b10)
    _, pgd = ensemble_attack_batch(zoo, x, BaselineMethod("PGD"), b10)
    model = zoo[0]
    x16 = _images(h=16, w=16, seed=4)
    _, single = ensemble_attack_batch([model], x16, BaselineMethod("PGD"), b10)
    direct = sign_projection(x16, entropy_ascent(model, x16, b10), 15.0)
    return (
        (fgsm - pgd1).abs().max().item(),
        (mi0 - pgd).abs().max().item(),
        (single - direct).abs().max().item(),
    )


def test_pipeline_collapses(zoo):
    fgsm_gap, mi_gap, single_gap = pipeline_collapses(zoo)
    assert fgsm_gap == 0.0
    assert mi_gap == 0.0
    assert single_gap <= 1e-6


def test_ensemble_matches_manual_composition(zoo):
    x = _images(2, 24, 24)
    b = AttackBudget(15, 4)
    fused, final = ensemble_attack_batch(zoo, x, BaselineMethod("PGD"), b)
    parts = [resize_batch(entropy_ascent(m, resize_batch(x, m.input_resolution), b), (24, 24))
             for m in zoo]
    manual = torch.stack(parts).mean(0)
    assert torch.allclose(fused, manual, atol=1e-12)
    assert torch.equal(final, sign_projection(x, manual, 15.0))


@pytest.mark.parametrize("name", ["FGSM", "PGD", "MI", "DI", "TI-DIM"])
def test_every_method_respects_budget(zoo, name):
    clean = np.random.default_rng(1).uniform(0, 255, (18, 22, 3))
    rec = ensemble_transfer_attack([zoo], clean, BaselineMethod(name), AttackBudget(15, 5))
    rec.check()
    assert rec.adversarial.shape == clean.shape


def test_joint_attack(zoo):
    x = _images(2, 22, 22)
    out = joint_attack_batch(zoo, x, AttackBudget(15, 5))
    assert (out - x).abs().max() <= 15 + 1e-9
    rec = joint_single_image_attack(zoo, x[0].numpy().transpose(1, 2, 0), AttackBudget(15, 3))
    rec.check()
    with pytest.raises(ValueError):
        joint_attack_batch([], x, AttackBudget(15, 1))


def _smooth_resources():
    a = make_set("a", 5, 16, 16, 3, seed=1)
    b = make_set("b", 5, 24, 20, 4, seed=2)
    ma = freeze(SmoothNet(3, (16, 16), 1).double())
    mb = freeze(SmoothNet(4, (24, 20), 2).double())
    return IceResources([a, b], [[ma], [mb]]), [a.tensors(torch.float64), b.tensors(torch.float64)]


def uap_gradient_check(n_entries=10, h=1e-4, seed=0):
    """Worst relative error on sampled entries of the UAP gradient."""
    res, batches = _smooth_resources()
    rng = np.random.default_rng(seed)
    nu = to_tensor(rng.uniform(-1, 1, UAP_SIZE + (3,)), torch.float64).requires_grad_(True)
    (g,) = torch.autograd.grad(uap_outer_loss(nu, res, batches, 15.0)[0], nu)
    # sample where the gradient is not negligible so the relative error is meaningful
    flat = g.abs().reshape(-1)
    candidates = torch.nonzero(flat > flat.max() * 1e-3).reshape(-1).numpy()
    worst = 0.0
    with torch.no_grad():
        for i in rng.choice(candidates, n_entries, replace=False):
            idx = np.unravel_index(i, nu.shape)
            plus, minus = nu.detach().clone(), nu.detach().clone()
            plus[idx] += h
            minus[idx] -= h
            fd = (uap_outer_loss(plus, res, batches, 15.0)[0]
                  - uap_outer_loss(minus, res, batches, 15.0)[0]).item() / (2 * h)
            worst = max(worst, abs(fd - g[idx].item()) / max(abs(fd), abs(g[idx].item())))
    return worst


def test_uap_gradient_matches_finite_differences():
    assert uap_gradient_check() <= 1e-3


def test_uap_training_shape_and_attack():
    res, _ = _smooth_resources()
    out = train_uap(res, UapTrainConfig(iterations=2, batch_size=3, dtype="float64"))
    assert out.artifact.nu.shape == (100, 100, 3)
    assert len(out.metrics) == 2
    assert np.abs(out.artifact.nu).max() > 0
    img = np.full((30, 40, 3), 100.0)
    rec = uap_attack(out.artifact, img, 15.0)
    rec.check()
    assert np.array_equal(rec.noise, 15.0 * uap_noise(out.artifact, (30, 40)))
    batch = uap_attack_batch(out.artifact, to_tensor(img, torch.float64), 15.0)
    assert np.allclose(batch[0].numpy().transpose(1, 2, 0), rec.adversarial)


def test_uap_artifact_round_trip(tmp_path):
    art = UapArtifact(np.random.default_rng(0).normal(size=(100, 100, 3)))
    art.save(tmp_path / "u.ckpt", seed=1)
    assert np.array_equal(UapArtifact.load(tmp_path / "u.ckpt").nu, art.nu)
    with pytest.raises(ValueError):
        UapArtifact(np.zeros((100, 100)))
