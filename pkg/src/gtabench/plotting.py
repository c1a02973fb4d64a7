"""Noise and spectrum panels rendered to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import SpectrumDiagram, spectrum  # noqa: E402

CHANNELS = ("R", "G", "B")


def minmax(a: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant array maps to 0.5."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full_like(a, 0.5)
    return (a - lo) / (hi - lo)


def noise_panel(noise: np.ndarray, path, title: str = "") -> Path:
    """The noise as an RGB image next to its three channels."""
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
    axes[0].imshow(minmax(noise), interpolation="nearest")
    axes[0].set_title(title or "noise")
    for ax, c, name in zip(axes[1:], range(3), CHANNELS):
        ax.imshow(minmax(noise[..., c]), cmap="gray", interpolation="nearest")
        ax.set_title(name)
    for ax in axes:
        ax.set_axis_off()
    return _save(fig, path)


def spectrum_panels(diagram: SpectrumDiagram, out_dir, stem: str) -> list[Path]:
    """One log-magnitude PNG per channel, DC bin at the centre, peak marked."""
    cy, cx = diagram.center
    paths = []
    for mag, name, peak in zip(diagram.magnitude, CHANNELS, diagram.peak_bin):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        ax.imshow(minmax(np.log1p(mag)), cmap="magma", interpolation="nearest")
        ax.plot([cx + peak[0], cx - peak[0]], [cy + peak[1], cy - peak[1]], "c+", ms=8)
        ax.set_title(f"{stem} {name} peak {peak}", fontsize=8)
        ax.set_axis_off()
        paths.append(_save(fig, Path(out_dir) / f"{stem}-spectrum-{name}.png"))
    return paths


def noise_and_spectrum(noise: np.ndarray, out_dir, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [noise_panel(noise, out_dir / f"{stem}-noise.png", stem),
            *spectrum_panels(spectrum(noise), out_dir, stem)]


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
