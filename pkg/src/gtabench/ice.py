"""
Image Classification Eraser: bi-level meta-training of a resolution-agnostic
surrogate and the entropy-ascent attack that uses it.

Inner loop: perturb a source batch by ascending the surrogate's prediction
entropy (one differentiable customized-FGSM step). Outer loop: measure how
badly the perturbed batch confuses every white-box source model (cross-entropy
against the true labels) and move the surrogate weights uphill on that loss,
differentiating through the inner step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .attack_core import (
    PerturbationRecord,
    customized_fgsm_step,
    entropy_ascent,
    project_to_images,
    sign_projection,
)
from .data import AttackBudget, LabeledImageSet, to_images, to_tensor
from .models import Classifier, SurrogateModel, build_surrogate

log = logging.getLogger(__name__)

# the reference schedule decays eps_c every 3000 of 50000 iterations
_DECAY_FRACTION = 3000 / 50000
STEP_RULES = ("plain", "normalized")


@dataclass
class IceResources:
    """White-box resources: source datasets and, per dataset, models trained on it."""

    source_datasets: list[LabeledImageSet]
    source_models: list[list[Classifier]]

    def __post_init__(self):
        if not self.source_datasets:
            raise ValueError("need at least one source dataset")
        if len(self.source_models) != len(self.source_datasets):
            raise ValueError("need one model list per source dataset")
        for ds, models in zip(self.source_datasets, self.source_models):
            if not models:
                raise ValueError(f"{ds.name}: no source models")
            for m in models:
                if tuple(m.input_resolution) != ds.resolution:
                    raise ValueError(
                        f"{m.architecture_id} expects {m.input_resolution}, "
                        f"{ds.name} is {ds.resolution}"
                    )

    def flat_models(self) -> list[Classifier]:
        return [m for models in self.source_models for m in models]

    def to(self, dtype) -> "IceResources":
        for m in self.flat_models():
            m.to(dtype)
        return self


class BatchSampler:
    """Seeded with-replacement mini-batch sampler, one stream per dataset."""

    def __init__(self, datasets, batch_size, seed, dtype):
        self.gen = torch.Generator().manual_seed(int(seed))
        self.data = [ds.tensors(dtype) for ds in datasets]
        self.batch_size = batch_size

    def __call__(self, k):
        x, y = self.data[k]
        idx = torch.randint(len(x), (min(self.batch_size, len(x)),), generator=self.gen)
        return x[idx], y[idx]


def mean_source_loss(resources: IceResources, make_adv, batches) -> tuple[torch.Tensor, list]:
    """Dataset-mean of model-mean cross-entropy on adversarial batches.

    ``make_adv(k, x)`` crafts the adversarial version of source batch ``x`` from
    dataset ``k``. Returns the total and the per-dataset losses.
    """
    per_dataset = []
    for k, (x, y) in enumerate(batches):
        x_adv = make_adv(k, x)
        losses = [F.cross_entropy(m(x_adv), y) for m in resources.source_models[k]]
        per_dataset.append(torch.stack(losses).mean())
    return torch.stack(per_dataset).mean(), per_dataset


@dataclass
class IceTrainConfig:
    iterations: int = 3000
    batch_size: int = 64
    learning_rate: float = 0.01
    eps_c: float = 3000.0
    eps_c_decay: float = 0.9
    eps_c_period: int | None = None  # default: 3000/50000 of the run
    gamma1: float = 0.01
    gamma2: float = 0.01
    inner_steps: int = 1
    output_dim: int = 1000
    block_widths: tuple = (32, 64, 128, 256)
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 50
    # "plain": theta += lr * g; "normalized": theta += lr * g / |g|_2 (global norm)
    step_rule: str = "plain"

    def __post_init__(self):
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"unknown step_rule {self.step_rule!r}; expected one of {STEP_RULES}")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.learning_rate <= 0 or self.eps_c <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate, eps_c and batch_size must be positive")

    @property
    def period(self) -> int:
        if self.eps_c_period:
            return int(self.eps_c_period)
        return max(1, round(self.iterations * _DECAY_FRACTION))

    def eps_c_at(self, iteration: int) -> float:
        return self.eps_c * self.eps_c_decay ** (iteration // self.period)


@dataclass
class IceTrainResult:
    surrogate: SurrogateModel
    metrics: list[dict] = field(default_factory=list)


def inner_attack(surrogate, x, config: IceTrainConfig, eps_c: float) -> torch.Tensor:
    x_adv = x
    for _ in range(config.inner_steps):
        x_adv = customized_fgsm_step(surrogate, x_adv, eps_c, config.gamma1, config.gamma2,
                                     create_graph=True)
    if x_adv.grad_fn is None:
        raise RuntimeError("inner perturbation is not connected to the surrogate weights")
    return x_adv


def outer_loss(surrogate, resources: IceResources, batches, config: IceTrainConfig,
               eps_c: float):
    """Outer objective for one iteration; differentiable w.r.t. surrogate weights."""
    return mean_source_loss(
        resources, lambda k, x: inner_attack(surrogate, x, config, eps_c), batches
    )


def train_ice(resources: IceResources, config: IceTrainConfig | None = None,
              surrogate: SurrogateModel | None = None) -> IceTrainResult:
    """Meta-train the universal surrogate by plain gradient ascent on the outer loss."""
    cfg = config or IceTrainConfig()
    dtype = getattr(torch, cfg.dtype)
    if surrogate is None:
        surrogate = build_surrogate(cfg.output_dim, cfg.block_widths, cfg.seed)
    surrogate = surrogate.to(dtype)
    min_res = min(min(ds.resolution) for ds in resources.source_datasets)
    if min_res < SurrogateModel.MIN_SIZE:
        raise ValueError(f"source resolution {min_res} below surrogate minimum")
    for m in resources.flat_models():
        m.to(dtype).eval()
        for p in m.parameters():
            p.requires_grad_(False)
    sampler = BatchSampler(resources.source_datasets, cfg.batch_size, cfg.seed + 1, dtype)
    params = [p for p in surrogate.parameters()]
    metrics = []
    surrogate.train()
    for it in range(cfg.iterations):
        eps_c = cfg.eps_c_at(it)
        batches = [sampler(k) for k in range(len(resources.source_datasets))]
        total, per_ds = outer_loss(surrogate, resources, batches, cfg, eps_c)
        if not torch.isfinite(total):
            raise FloatingPointError(
                f"ICE outer loss is {total.item()} at iteration {it} "
                f"(eps_c={eps_c:.4g}, per-dataset={[float(v.detach()) for v in per_ds]})"
            )
        grads = torch.autograd.grad(total, params, allow_unused=True)
        if it == 0 and all(g is None or not g.any() for g in grads):
            log.warning("meta-gradient is exactly zero at eps_c=%g: the inner step saturates "
                        "the pixel clip, so the surrogate cannot learn", eps_c)
        scale = cfg.learning_rate
        if cfg.step_rule == "normalized":
            norm = torch.sqrt(sum((g**2).sum() for g in grads if g is not None))
            scale = cfg.learning_rate / float(norm) if norm > 0 else 0.0
        with torch.no_grad():
            for p, g in zip(params, grads):
                if g is not None:
                    p.add_(g, alpha=scale)
        row = {"iteration": it, "eps_c": eps_c, "outer_loss": float(total.detach())}
        for ds, v in zip(resources.source_datasets, per_ds):
            row[f"loss[{ds.name}]"] = float(v.detach())
        metrics.append(row)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("ice iter %d eps_c %.1f outer loss %.4f", it, eps_c, float(total.detach()))
    surrogate.eval()
    return IceTrainResult(surrogate, metrics)


def write_metrics(metrics: list[dict], path) -> None:
    if not metrics:
        fields = ["iteration"]
    else:
        fields = list(metrics[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in metrics:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def ice_attack_batch(surrogate, images: torch.Tensor, budget: AttackBudget,
                     sign_project: bool = True, loss_mode: str = "entropy") -> torch.Tensor:
    """Entropy ascent on the surrogate at the images' own resolution, then SP."""
    h, w = images.shape[-2:]
    if min(h, w) < SurrogateModel.MIN_SIZE:
        raise ValueError(f"image {h}x{w} is below the surrogate minimum of "
                         f"{SurrogateModel.MIN_SIZE}x{SurrogateModel.MIN_SIZE}")
    surrogate.eval()
    x_t = entropy_ascent(surrogate, images, budget, loss_mode)
    if not sign_project:
        return x_t
    return sign_projection(images, x_t, budget.epsilon)


def ice_attack(surrogate, image: np.ndarray, budget: AttackBudget,
               sign_project: bool = True) -> PerturbationRecord:
    dtype = next(surrogate.parameters()).dtype
    clean = np.asarray(image, dtype=np.float64)
    x = to_tensor(clean, dtype)
    x_t = ice_attack_batch(surrogate, x, budget, sign_project=False)
    if sign_project:
        adv = project_to_images(clean, x, x_t, budget.epsilon)[0]
    else:
        adv = clean + (to_images(x_t)[0] - to_images(x)[0])
    return PerturbationRecord(clean, adv, "ICE", budget)
