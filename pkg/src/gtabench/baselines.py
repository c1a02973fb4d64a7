"""
Ensemble transfer baselines adapted to unknown victims.

The default pipeline resizes the victim image to every source model's input
shape, runs a label-free (entropy) ascent on each model separately, resizes the
results back, averages them and sign-projects the fused perturbation. A joint
variant optimises one image against all models at once, and a universal
perturbation (UAP) is trained on the source datasets and resized per victim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .attack_core import (
    PerturbationRecord,
    clip_pixels,
    entropy_ascent,
    momentum_sign_ascent,
    project_to_images,
)
from .data import AttackBudget, resize_batch, to_tensor
from .ice import BatchSampler, IceResources, mean_source_loss
from .models import entropy_from_logits, load_arrays, save_arrays

METHODS = ("FGSM", "PGD", "MI", "DI", "TI-DIM")
UAP_SIZE = (100, 100)


@dataclass(frozen=True)
class BaselineMethod:
    name: str = "PGD"
    mu: float = 1.0
    di_prob: float = 1.0
    ti_kernel_size: int = 5
    ti_sigma: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown baseline {self.name!r}; expected one of {METHODS}")
        if self.mu < 0 or not 0 <= self.di_prob <= 1:
            raise ValueError("mu must be >= 0 and di_prob in [0, 1]")
        if self.ti_kernel_size < 1 or self.ti_kernel_size % 2 == 0 or self.ti_sigma <= 0:
            raise ValueError("TI kernel size must be odd and positive, sigma positive")


def di_extra_pixels(size: int) -> int:
    """Padding margin for diverse inputs: 4 px at 32, 8 px at 56, 12 px at 84."""
    return int(min(12, max(4, round(4 + (size - 32) * 8 / 52))))


class DiverseInput:
    """Random resize to ``[H, H + extra]``, random zero-pad to ``H + extra``, resize back.

    Resizing back keeps the transform compatible with fixed-resolution models.
    """

    def __init__(self, prob: float = 1.0, seed: int = 0):
        self.prob = prob
        self.gen = torch.Generator().manual_seed(seed)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if torch.rand((), generator=self.gen).item() >= self.prob:
            return x
        h, w = x.shape[-2:]
        extra = di_extra_pixels(min(h, w))
        rnd = int(torch.randint(0, extra + 1, (), generator=self.gen))
        rh, rw = h + rnd, w + rnd
        left = int(torch.randint(0, extra - rnd + 1, (), generator=self.gen))
        top = int(torch.randint(0, extra - rnd + 1, (), generator=self.gen))
        out = F.interpolate(x, size=(rh, rw), mode="nearest")
        out = F.pad(out, (left, extra - rnd - left, top, extra - rnd - top))
        return resize_batch(out, (h, w))


def gaussian_kernel(size: int = 5, sigma: float = 1.5) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    k = torch.outer(g, g)
    return k / k.sum()


class TranslationSmoothing:
    """Depthwise Gaussian smoothing of the gradient (translation-invariant attack)."""

    def __init__(self, size: int = 5, sigma: float = 1.5):
        self.kernel = gaussian_kernel(size, sigma)
        self.pad = size // 2

    def __call__(self, g: torch.Tensor) -> torch.Tensor:
        c = g.shape[1]
        k = self.kernel.to(g.dtype).expand(c, 1, *self.kernel.shape)
        return F.conv2d(g, k, padding=self.pad, groups=c)


def _groups(source_models) -> list[list]:
    """Accept a flat model list or a per-dataset list of lists."""
    if not source_models:
        raise ValueError("need at least one source model")
    if isinstance(source_models[0], (list, tuple)):
        groups = [list(g) for g in source_models if g]
    else:
        groups = [[m] for m in source_models]
    if not groups:
        raise ValueError("need at least one source model")
    return groups


def _group_mean(values: list[list[torch.Tensor]]) -> torch.Tensor:
    return torch.stack([torch.stack(v).mean(0) for v in values]).mean(0)


def run_method(model, x: torch.Tensor, method: BaselineMethod, budget: AttackBudget,
               loss_mode: str = "entropy") -> torch.Tensor:
    """The method's ascent on one model at the model's own resolution."""
    if method.name == "FGSM":
        return entropy_ascent(model, x, AttackBudget(budget.epsilon, 1), loss_mode,
                              seed=method.seed)
    if method.name == "PGD":
        return entropy_ascent(model, x, budget, loss_mode, seed=method.seed)
    if method.name == "MI":
        return momentum_sign_ascent(model, x, budget, method.mu, loss_mode, seed=method.seed)
    di = DiverseInput(method.di_prob, method.seed)
    if method.name == "DI":
        return entropy_ascent(model, x, budget, loss_mode, input_transform=di, seed=method.seed)
    ti = TranslationSmoothing(method.ti_kernel_size, method.ti_sigma)
    return momentum_sign_ascent(model, x, budget, method.mu, loss_mode,
                                input_transform=di, grad_transform=ti, seed=method.seed)


def ensemble_attack_batch(source_models, images: torch.Tensor, method: BaselineMethod,
                          budget: AttackBudget, loss_mode: str = "entropy",
                          sign_project: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(fused, final)``: the averaged per-model results and the SP output."""
    groups = _groups(source_models)
    size = images.shape[-2:]
    results = []
    for models in groups:
        row = []
        for m in models:
            m.eval()
            x_m = resize_batch(images, m.input_resolution)
            adv_m = run_method(m, x_m, method, budget, loss_mode)
            row.append(resize_batch(adv_m, size))
        results.append(row)
    fused = _group_mean(results)
    if not sign_project:
        return fused, clip_pixels(fused)
    return fused, clip_pixels(images + budget.epsilon * torch.sign(fused - images))


def _record(clean, x, attacked, budget, name, sign_project=True):
    if sign_project:
        adv = project_to_images(clean, x, attacked, budget.epsilon)[0]
    else:
        adv = clip_pixels(clean + (attacked - x).detach().double().numpy()[0].transpose(1, 2, 0))
    return PerturbationRecord(clean, adv, name, budget)


def ensemble_transfer_attack(source_models, image, method: BaselineMethod,
                             budget: AttackBudget, loss_mode: str = "entropy",
                             sign_project: bool = True) -> PerturbationRecord:
    dtype = next(_groups(source_models)[0][0].parameters()).dtype
    clean = np.asarray(image, dtype=np.float64)
    x = to_tensor(clean, dtype)
    fused, _ = ensemble_attack_batch(source_models, x, method, budget, loss_mode, sign_project)
    return _record(clean, x, fused, budget, method.name, sign_project)


def joint_attack_batch(source_models, images: torch.Tensor, budget: AttackBudget,
                       sign_project: bool = True) -> torch.Tensor:
    """One image optimised against all models through differentiable resizes."""
    groups = _groups(source_models)
    for models in groups:
        for m in models:
            m.eval()
    x0 = images.detach()
    x = x0.clone()
    step = budget.epsilon / budget.steps
    for _ in range(budget.steps):
        x.requires_grad_(True)
        losses = [[entropy_from_logits(m(resize_batch(x, m.input_resolution))).sum()
                   for m in models] for models in groups]
        (g,) = torch.autograd.grad(_group_mean(losses), x)
        x = clip_pixels(x.detach() + step * torch.sign(g))
    if not sign_project:
        return x
    return clip_pixels(x0 + budget.epsilon * torch.sign(x - x0))


def joint_single_image_attack(source_models, image, budget: AttackBudget) -> PerturbationRecord:
    dtype = next(_groups(source_models)[0][0].parameters()).dtype
    clean = np.asarray(image, dtype=np.float64)
    x = to_tensor(clean, dtype)
    x_t = joint_attack_batch(source_models, x, budget, sign_project=False)
    return _record(clean, x, x_t, budget, "joint")


# --------------------------------------------------------------------------
# universal adversarial perturbation
# --------------------------------------------------------------------------

@dataclass
class UapArtifact:
    nu: np.ndarray  # 100 x 100 x 3

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=np.float64)
        if self.nu.ndim != 3 or self.nu.shape[-1] != 3:
            raise ValueError(f"UAP must be H x W x 3, got {self.nu.shape}")
        if not np.isfinite(self.nu).all():
            raise ValueError("UAP has non-finite entries")

    def tensor(self, dtype=torch.float64) -> torch.Tensor:
        return to_tensor(self.nu, dtype)

    def save(self, path, **metadata) -> None:
        save_arrays(path, "uap", {"nu": self.nu}, metadata)

    @classmethod
    def load(cls, path) -> "UapArtifact":
        meta, arrays = load_arrays(path)
        if meta.get("kind") != "uap":
            raise ValueError(f"{path}: holds a {meta.get('kind')!r}, not a UAP")
        return cls(arrays["nu"])


@dataclass
class UapTrainConfig:
    iterations: int = 2000
    batch_size: int = 128
    learning_rate: float = 0.01
    epsilon: float = 15.0
    init_scale: float = 0.0
    seed: int = 0
    dtype: str = "float32"


@dataclass
class UapTrainResult:
    artifact: UapArtifact
    metrics: list[dict] = field(default_factory=list)


def uap_outer_loss(nu_t: torch.Tensor, resources: IceResources, batches, epsilon: float):
    """Mean source cross-entropy on ``clip(x + eps * resize(nu))``; ``nu_t`` is ``1x3xHxW``."""

    def perturb(k, x):
        return clip_pixels(x + epsilon * resize_batch(nu_t, x.shape[-2:]))

    return mean_source_loss(resources, perturb, batches)


def train_uap(resources: IceResources, config: UapTrainConfig | None = None,
              init: UapArtifact | None = None) -> UapTrainResult:
    cfg = config or UapTrainConfig()
    dtype = getattr(torch, cfg.dtype)
    if init is None:
        rng = np.random.default_rng(cfg.seed)
        init = UapArtifact(cfg.init_scale * rng.uniform(-1, 1, size=UAP_SIZE + (3,)))
    nu_t = init.tensor(dtype).requires_grad_(True)
    for m in resources.flat_models():
        m.to(dtype).eval()
        for p in m.parameters():
            p.requires_grad_(False)
    sampler = BatchSampler(resources.source_datasets, cfg.batch_size, cfg.seed + 3, dtype)
    metrics = []
    for it in range(cfg.iterations):
        batches = [sampler(k) for k in range(len(resources.source_datasets))]
        total, per_ds = uap_outer_loss(nu_t, resources, batches, cfg.epsilon)
        if not torch.isfinite(total):
            raise FloatingPointError(f"UAP outer loss is {total.item()} at iteration {it}")
        (g,) = torch.autograd.grad(total, nu_t)
        with torch.no_grad():
            nu_t.add_(g, alpha=cfg.learning_rate)
        row = {"iteration": it, "outer_loss": float(total.detach())}
        for ds, v in zip(resources.source_datasets, per_ds):
            row[f"loss[{ds.name}]"] = float(v.detach())
        metrics.append(row)
    nu = nu_t.detach().double().numpy()[0].transpose(1, 2, 0)
    return UapTrainResult(UapArtifact(nu), metrics)


def uap_noise(artifact: UapArtifact, size) -> np.ndarray:
    """``sign(resize(nu))`` at the victim's ``(H, W)``, as ``H x W x 3``."""
    resized = resize_batch(artifact.tensor(torch.float64), size)
    return torch.sign(resized)[0].numpy().transpose(1, 2, 0)


def uap_attack_batch(artifact: UapArtifact, images: torch.Tensor, epsilon: float) -> torch.Tensor:
    resized = resize_batch(artifact.tensor(images.dtype), images.shape[-2:])
    return clip_pixels(images + epsilon * torch.sign(resized))


def uap_attack(artifact: UapArtifact, image, epsilon: float) -> PerturbationRecord:
    clean = np.asarray(image, dtype=np.float64)
    adv = clip_pixels(clean + epsilon * uap_noise(artifact, clean.shape[:2]))
    return PerturbationRecord(clean, adv, "UAP", AttackBudget(epsilon, 1))


__all__ = [
    "METHODS", "BaselineMethod", "DiverseInput", "TranslationSmoothing", "gaussian_kernel",
    "run_method", "ensemble_attack_batch", "ensemble_transfer_attack", "joint_attack_batch",
    "joint_single_image_attack", "UapArtifact", "UapTrainConfig", "train_uap", "uap_attack",
    "uap_attack_batch",
    "uap_noise", "uap_outer_loss", "di_extra_pixels",
]
