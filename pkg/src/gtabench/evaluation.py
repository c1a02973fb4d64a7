"""
Success-rate protocol, universality transfer studies, spectra and reports.

A victim counts only if the target classifies its clean version correctly;
an attack succeeds when the target's argmax prediction changes. Attack
callables receive nothing but pixel arrays, and the target is wrapped so that
any attempt to query it while an attack is being crafted raises.
"""

from __future__ import annotations

import contextlib
import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attack_core import PerturbationRecord, clip_pixels
from .data import LabeledImageSet, crop_top_left, to_tensor
from .models import predict

REPORT_FIELDS = ["method", "target_model", "evaluated", "successes", "rate", "epsilon", "T", "seed"]


class FirewallViolation(RuntimeError):
    """A target model was queried from inside attack crafting."""


class _Firewall:
    crafting = False


@contextlib.contextmanager
def crafting():
    """Marks a region in which target models must not be touched."""
    prev = _Firewall.crafting
    _Firewall.crafting = True
    try:
        yield
    finally:
        _Firewall.crafting = prev


def _refuse_while_crafting(module, inputs):
    if _Firewall.crafting:
        raise FirewallViolation(
            f"target {getattr(module, 'architecture_id', 'model')!r} ran during attack crafting"
        )


class FirewalledTarget:
    """Prediction-only handle on a target; refuses use during attack crafting."""

    def __init__(self, model, name: str | None = None):
        self._model = model
        self.name = name or getattr(model, "architecture_id", "target")
        self.input_resolution = tuple(getattr(model, "input_resolution", ()))
        # guard the module itself too, so a leaked reference cannot be queried either
        if not getattr(model, "_gta_guarded", False):
            model.register_forward_pre_hook(_refuse_while_crafting)
            model._gta_guarded = True

    def predict(self, images: np.ndarray) -> np.ndarray:
        if _Firewall.crafting:
            raise FirewallViolation(f"target {self.name!r} queried during attack crafting")
        dtype = next(self._model.parameters()).dtype
        return predict(self._model, to_tensor(images, dtype)).numpy()


def _as_target(target) -> FirewalledTarget:
    return target if isinstance(target, FirewalledTarget) else FirewalledTarget(target)


@dataclass
class TargetResult:
    target_model: str
    evaluated: int
    successes: int

    @property
    def rate(self) -> float:
        return self.successes / self.evaluated if self.evaluated else 0.0


@dataclass
class GTAReport:
    method: str
    results: list[TargetResult] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def rate(self, target_model: str) -> float:
        for r in self.results:
            if r.target_model == target_model:
                return r.rate
        raise KeyError(target_model)

    @property
    def mean_rate(self) -> float:
        return float(np.mean([r.rate for r in self.results])) if self.results else 0.0


def merge_reports(reports: list[GTAReport], method: str | None = None) -> GTAReport:
    """Concatenate per-target results of several reports for one method."""
    if not reports:
        raise ValueError("nothing to merge")
    out = GTAReport(method or reports[0].method, metadata=dict(reports[0].metadata))
    for r in reports:
        out.results.extend(r.results)
    return out


def _predict_chunks(target: FirewalledTarget, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    if len(images) == 0:
        return np.empty(0, dtype=np.int64)
    return np.concatenate([target.predict(images[i:i + chunk]) for i in range(0, len(images), chunk)])


def gta_success_rate(target, clean_set: LabeledImageSet,
                     attack_fn: Callable[[np.ndarray], np.ndarray],
                     method: str = "attack", batch_size: int = 64, **metadata) -> GTAReport:
    """Success rate of ``attack_fn`` against ``target`` on correctly classified images.

    ``attack_fn`` maps an ``N x H x W x 3`` pixel array to its adversarial
    version; it is handed a copy of the images and nothing else.
    """
    target = _as_target(target)
    if target.input_resolution and tuple(target.input_resolution) != clean_set.resolution:
        raise ValueError(
            f"target {target.name} expects {target.input_resolution}, "
            f"dataset is {clean_set.resolution}"
        )
    clean_pred = _predict_chunks(target, clean_set.images)
    correct = np.flatnonzero(clean_pred == clean_set.labels)
    successes = 0
    for start in range(0, len(correct), batch_size):
        idx = correct[start:start + batch_size]
        with crafting():
            adv = np.asarray(attack_fn(clean_set.images[idx].copy()), dtype=np.float64)
        if adv.shape != clean_set.images[idx].shape:
            raise ValueError(f"attack returned shape {adv.shape}")
        successes += int((_predict_chunks(target, adv) != clean_pred[idx]).sum())
    return GTAReport(method, [TargetResult(target.name, len(correct), successes)], metadata)


def _apply_noise(victims: np.ndarray, direction: np.ndarray, epsilon: float) -> np.ndarray:
    return clip_pixels(victims + epsilon * direction[None])


def transfer_within_dataset(records: list[PerturbationRecord], clean_set: LabeledImageSet,
                            target, method: str = "ICE_A_I") -> GTAReport:
    """Transplant the noise crafted for image ``i`` onto every other image ``j``.

    ``records[i]`` must be the attack on ``clean_set.images[i]``. Victims a target
    misclassifies when clean are skipped.
    """
    if not records:
        raise ValueError("need at least one perturbation record")
    target = _as_target(target)
    res = clean_set.resolution
    for r in records:
        if r.noise.shape[:2] != res:
            raise ValueError(f"record at {r.noise.shape[:2]} does not match dataset {res}")
    clean_pred = _predict_chunks(target, clean_set.images)
    correct = clean_pred == clean_set.labels
    evaluated = successes = 0
    for i, rec in enumerate(records):
        victims = np.flatnonzero(correct & (np.arange(len(clean_set)) != i))
        if not len(victims):
            continue
        adv = _apply_noise(clean_set.images[victims], np.sign(rec.noise), rec.budget.epsilon)
        successes += int((_predict_chunks(target, adv) != clean_pred[victims]).sum())
        evaluated += len(victims)
    return GTAReport(method, [TargetResult(target.name, evaluated, successes)],
                     {"pairs": "within", "records": len(records)})


def transfer_cross_dataset(records_a: list[PerturbationRecord], clean_set_b: LabeledImageSet,
                           epsilon: float, target_b, method: str = "ICE_C") -> GTAReport:
    """Apply ``eps * sign(crop(noise_a))`` (top-left crop) to every image of ``b``."""
    if not records_a:
        raise ValueError("need at least one perturbation record")
    target = _as_target(target_b)
    hb, wb = clean_set_b.resolution
    for r in records_a:
        ha, wa = r.noise.shape[:2]
        if ha < hb or wa < wb:
            raise ValueError(
                f"source noise {ha}x{wa} is smaller than victim resolution {hb}x{wb}"
            )
    clean_pred = _predict_chunks(target, clean_set_b.images)
    victims = np.flatnonzero(clean_pred == clean_set_b.labels)
    evaluated = successes = 0
    for rec in records_a:
        if not len(victims):
            break
        direction = np.sign(crop_top_left(rec.noise, (hb, wb)))
        adv = _apply_noise(clean_set_b.images[victims], direction, epsilon)
        successes += int((_predict_chunks(target, adv) != clean_pred[victims]).sum())
        evaluated += len(victims)
    return GTAReport(method, [TargetResult(target.name, evaluated, successes)],
                     {"pairs": "cross", "records": len(records_a)})


# --------------------------------------------------------------------------
# spectra
# --------------------------------------------------------------------------

@dataclass
class SpectrumDiagram:
    magnitude: np.ndarray  # 3 x H x W, DC at (H // 2, W // 2)
    peak_bin: list[tuple[int, int]]  # per channel (fx, fy) offset from DC

    @property
    def center(self) -> tuple[int, int]:
        return self.magnitude.shape[1] // 2, self.magnitude.shape[2] // 2

    def peak_radius(self) -> np.ndarray:
        return np.array([np.hypot(*p) for p in self.peak_bin])


def _canonical(fx: int, fy: int) -> tuple[int, int]:
    """Pick one of the two mirror peaks: fx > 0, or fx == 0 and fy >= 0."""
    if fx < 0 or (fx == 0 and fy < 0):
        return -fx, -fy
    return fx, fy


def spectrum(noise: np.ndarray) -> SpectrumDiagram:
    """Unnormalised 2-D DFT magnitude per channel, zero frequency centred."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 3 or noise.shape[0] < 2 or noise.shape[1] < 2:
        raise ValueError(f"spectrum needs an H x W x C noise with H, W >= 2, got {noise.shape}")
    mags = np.abs(np.fft.fftshift(np.fft.fft2(noise.transpose(2, 0, 1)), axes=(-2, -1)))
    cy, cx = mags.shape[1] // 2, mags.shape[2] // 2
    peaks = []
    for m in mags:
        off = m.copy()
        off[cy, cx] = -np.inf
        iy, ix = np.unravel_index(np.argmax(off), off.shape)
        peaks.append(_canonical(int(ix - cx), int(iy - cy)))
    return SpectrumDiagram(mags, peaks)


def point_symmetry_error(diagram: SpectrumDiagram) -> float:
    """Largest ``| |F(k)| - |F(-k)| |`` over all bins and channels."""
    m = diagram.magnitude
    _, h, w = m.shape
    cy, cx = h // 2, w // 2
    iy = (2 * cy - np.arange(h)) % h
    ix = (2 * cx - np.arange(w)) % w
    return float(np.abs(m - m[:, iy][:, :, ix]).max())


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _fmt(rate: float) -> str:
    return f"{rate:.6g}"


def build_report(reports: list[GTAReport], format: str = "csv") -> str:
    """Render reports as delimited text.

    ``csv``: one row per (method, target) with the full schema.
    ``table``: one row per method, one rate column per target model.
    """
    if not reports:
        raise ValueError("no reports to render")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if format == "csv":
        w.writerow(REPORT_FIELDS)
        for rep in reports:
            md = rep.metadata
            for r in rep.results:
                w.writerow([rep.method, r.target_model, r.evaluated, r.successes, _fmt(r.rate),
                            md.get("epsilon", ""), md.get("T", ""), md.get("seed", "")])
    elif format == "table":
        targets = []
        for rep in reports:
            for r in rep.results:
                if r.target_model not in targets:
                    targets.append(r.target_model)
        w.writerow(["method", *targets])
        for rep in reports:
            rates = {r.target_model: _fmt(r.rate) for r in rep.results}
            w.writerow([rep.method, *(rates.get(t, "") for t in targets)])
    else:
        raise ValueError(f"unknown report format {format!r}; expected 'csv' or 'table'")
    return buf.getvalue()


__all__ = [
    "GTAReport", "TargetResult", "FirewalledTarget", "FirewallViolation", "crafting",
    "gta_success_rate", "transfer_within_dataset", "transfer_cross_dataset", "merge_reports",
    "SpectrumDiagram", "spectrum", "point_symmetry_error", "build_report", "REPORT_FIELDS",
]
