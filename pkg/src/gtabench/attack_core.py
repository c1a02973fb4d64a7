"""
Attack primitives shared by the universal surrogate, the sine attacker and the
transfer baselines.

Every routine works on ``N x 3 x H x W`` tensors of raw pixels. Per-image
quantities (gradient norms, entropies) are computed per sample, so a batch is
just several independent attacks run side by side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .data import PIXEL_MAX, AttackBudget
from .models import entropy_from_logits, kl_divergence

LOSS_MODES = ("entropy", "kl_vs_clean")

# KL against the clean prediction has an exactly vanishing gradient at the clean
# image, so kl mode starts from a tiny seeded offset (far below one grey level).
KL_START_SCALE = 1e-3


@dataclass
class PerturbationRecord:
    clean: np.ndarray
    adversarial: np.ndarray
    method: str
    budget: AttackBudget
    extra: dict = field(default_factory=dict)

    @property
    def noise(self) -> np.ndarray:
        return self.adversarial - self.clean

    def check(self, atol: float = 1e-9) -> None:
        if np.abs(self.noise).max(initial=0.0) > self.budget.epsilon + atol:
            raise AssertionError(f"{self.method}: perturbation exceeds epsilon")
        if self.adversarial.min() < 0 or self.adversarial.max() > PIXEL_MAX:
            raise AssertionError(f"{self.method}: adversarial pixels outside [0, 255]")


def clip_pixels(x):
    if isinstance(x, torch.Tensor):
        return x.clamp(0.0, PIXEL_MAX)
    return np.clip(x, 0.0, PIXEL_MAX)


def _per_sample(t: torch.Tensor) -> torch.Tensor:
    """Reshape a per-sample statistic for broadcasting against ``t``'s batch."""
    return t.reshape(-1, *([1] * 3))


def customized_fgsm_step(surrogate, batch: torch.Tensor, eps_c: float,
                         gamma1: float = 0.01, gamma2: float = 0.01,
                         create_graph: bool = True) -> torch.Tensor:
    """One entropy-ascent step mixing a normalised, a squashed and a signed gradient.

    With ``g`` the gradient of the surrogate's prediction entropy w.r.t. the
    pixels, returns ``clip(x + eps_c * (gamma1 * g / sum|g| + gamma2 * (2/pi) *
    arctan(g / mean|g|) + sign(g)))`` per image. The result stays in the
    autograd graph of the surrogate parameters when ``create_graph`` is set, which
    is what lets the outer loop differentiate through this step. Images whose
    gradient vanishes everywhere are returned unchanged.
    """
    if eps_c <= 0:
        raise ValueError(f"eps_c must be positive, got {eps_c}")
    # a batch already in the graph (earlier inner steps) is differentiated as is
    x = batch if batch.requires_grad else batch.detach().requires_grad_(True)
    base = batch if batch.requires_grad else batch.detach()
    loss = entropy_from_logits(surrogate(x)).sum()
    (g,) = torch.autograd.grad(loss, x, create_graph=create_graph)
    abs_sum = g.abs().flatten(1).sum(1)
    live = _per_sample(abs_sum > 0)
    total = _per_sample(torch.where(abs_sum > 0, abs_sum, torch.ones_like(abs_sum)))
    mean = total / g[0].numel()
    step = (
        gamma1 * g / total
        + gamma2 * (2.0 / math.pi) * torch.atan(g / mean)
        + torch.sign(g)
    )
    out = clip_pixels(base + eps_c * step)
    return torch.where(live, out, base)


def _loss(model, x, mode, clean_probs):
    logits = model(x)
    if mode == "entropy":
        return entropy_from_logits(logits).sum()
    return kl_divergence(torch.softmax(logits, -1), clean_probs).sum()


def _ascent(model, images, budget, loss_mode, mu, input_transform, grad_transform, seed):
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"unknown loss_mode {loss_mode!r}; expected one of {LOSS_MODES}")
    x0 = images.detach()
    if budget.epsilon == 0:
        return x0.clone()
    step = budget.epsilon / budget.steps
    clean_probs = None
    x = x0.clone()
    if loss_mode == "kl_vs_clean":
        with torch.no_grad():
            clean_probs = torch.softmax(model(x0), -1)
        gen = torch.Generator().manual_seed(seed)
        x = clip_pixels(x + KL_START_SCALE * torch.randn(x.shape, generator=gen, dtype=x.dtype))
    momentum = torch.zeros_like(x0) if mu is not None else None
    for _ in range(budget.steps):
        x.requires_grad_(True)
        fed = input_transform(x) if input_transform is not None else x
        (g,) = torch.autograd.grad(_loss(model, fed, loss_mode, clean_probs), x)
        if grad_transform is not None:
            g = grad_transform(g)
        if momentum is not None:
            norm = _per_sample(g.abs().flatten(1).sum(1))
            momentum = mu * momentum + torch.where(norm > 0, g / torch.where(norm > 0, norm, 1), 0)
            g = momentum
        x = x.detach() + step * torch.sign(g)
        # the kl random start can leave x off the ball's lattice; keep it inside
        x = clip_pixels(torch.minimum(torch.maximum(x, x0 - budget.epsilon), x0 + budget.epsilon))
    return x.detach()


def entropy_ascent(model, images: torch.Tensor, budget: AttackBudget,
                   loss_mode: str = "entropy",
                   input_transform: Optional[Callable] = None,
                   grad_transform: Optional[Callable] = None,
                   seed: int = 0) -> torch.Tensor:
    """``T`` signed steps of size ``eps / T`` ascending the prediction entropy.

    ``loss_mode="kl_vs_clean"`` ascends the KL divergence from the clean
    prediction instead. ``input_transform`` is applied to the image before each
    forward pass and ``grad_transform`` to each raw gradient; both hooks exist for
    the diverse-input and translation-invariant decorators.
    """
    return _ascent(model, images, budget, loss_mode, None, input_transform, grad_transform, seed)


def momentum_sign_ascent(model, images: torch.Tensor, budget: AttackBudget, mu: float = 1.0,
                         loss_mode: str = "entropy",
                         input_transform: Optional[Callable] = None,
                         grad_transform: Optional[Callable] = None,
                         seed: int = 0) -> torch.Tensor:
    """Momentum-iterative ascent: ``m <- mu m + g / |g|_1``, step along ``sign(m)``."""
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    return _ascent(model, images, budget, loss_mode, float(mu), input_transform, grad_transform,
                   seed)


def sign_projection(clean, attacked, epsilon: float):
    """Move every pixel by exactly ``epsilon`` in the direction it was attacked, then clip."""
    if tuple(clean.shape) != tuple(attacked.shape):
        raise ValueError(f"shape mismatch: {tuple(clean.shape)} vs {tuple(attacked.shape)}")
    if isinstance(clean, torch.Tensor):
        return clip_pixels(clean + epsilon * torch.sign(attacked - clean))
    clean = np.asarray(clean, dtype=np.float64)
    return clip_pixels(clean + epsilon * np.sign(np.asarray(attacked, dtype=np.float64) - clean))


def project_to_images(clean: np.ndarray, clean_t: torch.Tensor, attacked_t: torch.Tensor,
                      epsilon: float) -> np.ndarray:
    """Sign-projection in float64 pixel space from a direction found in model precision.

    ``clean`` is ``N x H x W x 3`` (float64); ``clean_t``/``attacked_t`` are the
    model-dtype tensors the attack actually ran on.
    """
    direction = torch.sign(attacked_t.detach() - clean_t.detach())
    direction = direction.cpu().numpy().transpose(0, 2, 3, 1).astype(np.float64)
    return clip_pixels(np.asarray(clean, dtype=np.float64).reshape(direction.shape)
                       + epsilon * direction)
