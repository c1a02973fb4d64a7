import numpy as np

from gtabench.plotting import minmax, noise_and_spectrum

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def test_minmax():
    assert minmax(np.array([2.0, 4.0, 3.0])).tolist() == [0.0, 1.0, 0.5]
    assert minmax(np.full((2, 2), 7.0)).tolist() == [[0.5, 0.5], [0.5, 0.5]]


def test_noise_and_spectrum_writes_deterministic_pngs(tmp_path):
    noise = 15.0 * np.sign(np.random.default_rng(0).normal(size=(24, 24, 3)))
    first = noise_and_spectrum(noise, tmp_path / "a", "ice")
    second = noise_and_spectrum(noise, tmp_path / "b", "ice")
    names = sorted(p.name for p in first)
    assert names == ["ice-noise.png", "ice-spectrum-B.png", "ice-spectrum-G.png",
                     "ice-spectrum-R.png"]
    for p, q in zip(first, second):
        data = p.read_bytes()
        assert data.startswith(PNG_MAGIC)
        assert data == q.read_bytes()
