"""
Sine attack: one planar sine wave per colour channel, nine scalars in total.

Channel ``j`` of the noise at pixel (row ``i``, column ``k``) is
``sin(a_j * k + b_j * i + c_j)``. The same nine numbers extend to any image
size, which makes the perturbation universal across images and resolutions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attack_core import PerturbationRecord, clip_pixels
from .data import AttackBudget, CoordinateMap, coordinate_map
from .ice import BatchSampler, IceResources, mean_source_loss

log = logging.getLogger(__name__)

CHANNELS = ("R", "G", "B")
STEP_RULES = ("plain", "normalized")


@dataclass
class SineParams:
    """``values[j] = (a_j, b_j, c_j)`` for channels R, G, B."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(3, 3)
        if not np.isfinite(self.values).all():
            raise ValueError("sine parameters must be finite")

    @classmethod
    def from_flat(cls, flat) -> "SineParams":
        return cls(np.asarray(flat, dtype=np.float64).reshape(3, 3))

    @classmethod
    def random(cls, seed: int = 0) -> "SineParams":
        rng = np.random.default_rng(seed)
        ab = rng.uniform(0.05, 0.5, size=(3, 2))
        c = rng.uniform(0.0, 2 * math.pi, size=(3, 1))
        return cls(np.concatenate([ab, c], axis=1))

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1).copy()

    def save(self, path, **metadata) -> None:
        """Header lines ``# key: value`` then ``aR bR cR aG bG cG aB bB cB``."""
        lines = ["# gtabench sine parameters"]
        lines += [f"# {k}: {v}" for k, v in metadata.items()]
        lines.append(" ".join(repr(float(v)) for v in self.flat()))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SineParams":
        rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
        if len(rows) != 1:
            raise ValueError(f"{path}: expected one parameter line, found {len(rows)}")
        vals = [float(v) for v in rows[0].split()]
        if len(vals) != 9:
            raise ValueError(f"{path}: expected 9 values, found {len(vals)}")
        return cls.from_flat(vals)


def sine_noise_tensor(omega: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """``3 x H x W`` noise from a ``3 x 3`` parameter tensor; differentiable in ``omega``."""
    dtype = omega.dtype
    ys = torch.arange(height, dtype=dtype).reshape(1, -1, 1)
    xs = torch.arange(width, dtype=dtype).reshape(1, 1, -1)
    a, b, c = (omega[:, i].reshape(3, 1, 1) for i in range(3))
    return torch.sin(a * xs + b * ys + c)


def sine_noise(omega: SineParams, coords: CoordinateMap) -> np.ndarray:
    """``H x W x 3`` noise in [-1, 1]."""
    v = omega.values
    arg = (v[:, 0, None, None] * coords.x_map[None] + v[:, 1, None, None] * coords.y_map[None]
           + v[:, 2, None, None])
    return np.sin(arg).transpose(1, 2, 0)


@dataclass
class WaveDescriptor:
    frequency: np.ndarray  # cycles per pixel, per channel
    direction: np.ndarray  # degrees, per channel
    phase: np.ndarray

    def table(self) -> str:
        rows = ["channel  freq(cyc/px)  direction(deg)  phase(rad)"]
        for j, ch in enumerate(CHANNELS):
            rows.append(f"{ch:>7}  {self.frequency[j]:12.4f}  {self.direction[j]:14.2f}"
                        f"  {self.phase[j]:10.4f}")
        return "\n".join(rows)


def _direction(a: float, b: float) -> float:
    if a == 0.0:
        return 90.0 if b != 0.0 else 0.0
    return math.degrees(math.atan(b / a))


def wave_descriptor(omega: SineParams) -> WaveDescriptor:
    v = omega.values
    freq = np.hypot(v[:, 0], v[:, 1]) / (2 * math.pi)
    direction = np.array([_direction(a, b) for a, b in v[:, :2]])
    return WaveDescriptor(freq, direction, v[:, 2].copy())


@dataclass
class SineTrainConfig:
    iterations: int = 1500
    batch_size: int = 64
    learning_rate: float = 0.01
    epsilon: float = 15.0
    init_seed: int = 0
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 50
    # "plain": omega += lr * g; "normalized": omega += lr * g / |g|_2
    step_rule: str = "plain"

    def __post_init__(self):
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"unknown step_rule {self.step_rule!r}; expected one of {STEP_RULES}")


@dataclass
class SineTrainResult:
    omega: SineParams
    metrics: list[dict] = field(default_factory=list)


def sine_outer_loss(omega_t: torch.Tensor, resources: IceResources, batches, epsilon: float):
    """Mean source cross-entropy on ``clip(x + eps * Z(omega))`` (no sign)."""

    def perturb(k, x):
        z = sine_noise_tensor(omega_t, x.shape[-2], x.shape[-1])
        return clip_pixels(x + epsilon * z)

    return mean_source_loss(resources, perturb, batches)


def sa_train(resources: IceResources, config: SineTrainConfig | None = None,
             init: SineParams | None = None) -> SineTrainResult:
    """Gradient ascent on the nine sine parameters against all source models."""
    cfg = config or SineTrainConfig()
    dtype = getattr(torch, cfg.dtype)
    omega0 = init if init is not None else SineParams.random(cfg.init_seed)
    omega_t = torch.tensor(omega0.values, dtype=dtype, requires_grad=True)
    for m in resources.flat_models():
        m.to(dtype).eval()
        for p in m.parameters():
            p.requires_grad_(False)
    sampler = BatchSampler(resources.source_datasets, cfg.batch_size, cfg.seed + 2, dtype)
    metrics = []
    for it in range(cfg.iterations):
        batches = [sampler(k) for k in range(len(resources.source_datasets))]
        total, per_ds = sine_outer_loss(omega_t, resources, batches, cfg.epsilon)
        if not torch.isfinite(total):
            raise FloatingPointError(
                f"sine outer loss is {total.item()} at iteration {it}; "
                f"omega={omega_t.detach().tolist()}"
            )
        (g,) = torch.autograd.grad(total, omega_t)
        if cfg.step_rule == "normalized":
            norm = g.norm()
            g = g / norm if norm > 0 else g
        with torch.no_grad():
            omega_t.add_(g, alpha=cfg.learning_rate)
        row = {"iteration": it, "outer_loss": float(total.detach())}
        for ds, v in zip(resources.source_datasets, per_ds):
            row[f"loss[{ds.name}]"] = float(v.detach())
        metrics.append(row)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("sa iter %d outer loss %.4f", it, float(total.detach()))
    return SineTrainResult(SineParams(omega_t.detach().double().numpy()), metrics)


def sa_attack_batch(omega: SineParams, images: torch.Tensor, epsilon: float) -> torch.Tensor:
    z = sine_noise_tensor(torch.tensor(omega.values, dtype=images.dtype), *images.shape[-2:])
    return clip_pixels(images + epsilon * torch.sign(z))


def sa_attack(omega: SineParams, image, epsilon: float) -> PerturbationRecord:
    clean = np.asarray(image, dtype=np.float64)
    z = sine_noise(omega, coordinate_map(*clean.shape[:2]))
    adv = clip_pixels(clean + epsilon * np.sign(z))
    return PerturbationRecord(clean, adv, "SA", AttackBudget(epsilon, 1))


__all__ = [
    "SineParams", "sine_noise", "sine_noise_tensor", "WaveDescriptor", "wave_descriptor",
    "SineTrainConfig", "SineTrainResult", "sa_train", "sa_attack", "sa_attack_batch",
    "sine_outer_loss",
]
