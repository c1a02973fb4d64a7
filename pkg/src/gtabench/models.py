"""
Classifier zoo, the fully convolutional universal surrogate, training and the
probability-space losses shared by every attack.

All networks take raw pixels in [0, 255] (``N x 3 x H x W``) and return logits;
input standardisation happens inside the network so that gradients are always
taken with respect to pixel values.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetError, LabeledImageSet

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"GTACKPT1"


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# losses on prediction distributions
# --------------------------------------------------------------------------

def entropy(d: torch.Tensor) -> torch.Tensor:
    """Shannon entropy (nats) over the last axis, with 0 log 0 = 0."""
    d = torch.as_tensor(d)
    return -(d * torch.log(d.clamp_min(PROB_FLOOR))).sum(-1)


def entropy_from_logits(logits: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum(-1)


def cross_entropy(d: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``-y . log d`` for a one-hot ``y`` of matching length."""
    d, y = torch.as_tensor(d), torch.as_tensor(y, dtype=torch.as_tensor(d).dtype)
    if d.shape != y.shape:
        raise ValueError(f"length mismatch: {tuple(d.shape)} vs {tuple(y.shape)}")
    return -(y * torch.log(d.clamp_min(PROB_FLOOR))).sum(-1)


def kl_divergence(d: torch.Tensor, d0: torch.Tensor) -> torch.Tensor:
    """``sum d log(d / d0)`` with ``d0`` floored at 1e-12."""
    d, d0 = torch.as_tensor(d), torch.as_tensor(d0)
    if d.shape != d0.shape:
        raise ValueError(f"length mismatch: {tuple(d.shape)} vs {tuple(d0.shape)}")
    return (d * (torch.log(d.clamp_min(PROB_FLOOR)) - torch.log(d0.clamp_min(PROB_FLOOR)))).sum(-1)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

class PixelStandardize(nn.Module):
    """Maps [0, 255] pixels to roughly zero-mean, unit-scale inputs."""

    def forward(self, x):
        return (x - 127.5) / 64.0


def _conv(cin, cout, k=3, stride=1, groups=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, groups=groups)


class ResidualBlock(nn.Module):
    """conv-relu-conv with a 1x1 projection shortcut, then pooling."""

    def __init__(self, cin, cout, pool: str = "max"):
        super().__init__()
        self.conv1 = _conv(cin, cout)
        self.conv2 = _conv(cout, cout)
        self.shortcut = nn.Conv2d(cin, cout, 1)
        self.pool = pool

    def forward(self, x):
        out = self.conv2(F.relu(self.conv1(x)))
        out = F.relu(out + self.shortcut(x))
        if self.pool == "max":
            return F.max_pool2d(out, 2, 2)
        return F.adaptive_avg_pool2d(out, 1)


# --------------------------------------------------------------------------
# universal surrogate
# --------------------------------------------------------------------------

class SurrogateModel(nn.Module):
    """Fully convolutional surrogate: four residual blocks, a 1x1 conv head, softmax.

    Blocks 1-3 halve the resolution with 2x2 max pooling, block 4 ends in global
    average pooling, so the output length is ``output_dim`` for every input of at
    least 8x8 pixels. ``forward`` returns logits; ``predict_proba`` the softmax.
    """

    MIN_SIZE = 8

    def __init__(self, output_dim: int = 1000, block_widths=(32, 64, 128, 256)):
        super().__init__()
        if output_dim < 2:
            raise ValueError(f"output_dim must be >= 2, got {output_dim}")
        if len(block_widths) != 4:
            raise ValueError("surrogate needs exactly four block widths")
        self.output_dim = int(output_dim)
        self.block_widths = tuple(int(w) for w in block_widths)
        self.architecture_id = "ice-surrogate"
        self.norm = PixelStandardize()
        widths = (3,) + self.block_widths
        self.blocks = nn.ModuleList(
            ResidualBlock(widths[i], widths[i + 1], "max" if i < 3 else "avg") for i in range(4)
        )
        self.head = nn.Conv2d(widths[-1], self.output_dim, 1)

    def config(self) -> dict:
        return {"output_dim": self.output_dim, "block_widths": list(self.block_widths)}

    def forward(self, x):
        if x.shape[-1] < self.MIN_SIZE or x.shape[-2] < self.MIN_SIZE:
            raise ValueError(
                f"surrogate needs inputs of at least {self.MIN_SIZE}x{self.MIN_SIZE}, "
                f"got {x.shape[-2]}x{x.shape[-1]}"
            )
        h = self.norm(x)
        for block in self.blocks:
            h = block(h)
        return self.head(h).flatten(1)

    def predict_proba(self, x):
        return F.softmax(self(x), dim=-1)


def build_surrogate(output_dim: int = 1000, block_widths=(32, 64, 128, 256), seed: int = 0):
    torch.manual_seed(seed)
    return SurrogateModel(output_dim, block_widths)


# --------------------------------------------------------------------------
# classifier zoo (desk-scale analogues of VGG / ResNet / MobileNet / DenseNet)
# --------------------------------------------------------------------------

class Classifier(nn.Module):
    """A classifier bound to one input resolution and label-set size."""

    def __init__(self, architecture_id, num_classes, input_resolution, body, feat_dim):
        super().__init__()
        self.architecture_id = architecture_id
        self.num_classes = int(num_classes)
        self.input_resolution = (int(input_resolution[0]), int(input_resolution[1]))
        self.norm = PixelStandardize()
        self.body = body
        self.fc = nn.Linear(feat_dim, self.num_classes)
        self.metrics: dict = {}

    def config(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_resolution": list(self.input_resolution),
        }

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.input_resolution:
            raise ValueError(
                f"{self.architecture_id} expects {self.input_resolution[0]}x"
                f"{self.input_resolution[1]} inputs, got {x.shape[-2]}x{x.shape[-1]}"
            )
        h = self.body(self.norm(x))
        return self.fc(F.adaptive_avg_pool2d(h, 1).flatten(1))

    def predict_proba(self, x):
        return F.softmax(self(x), dim=-1)


def _cbr(cin, cout, k=3, stride=1, groups=1, act=nn.ReLU):
    return [_conv(cin, cout, k, stride, groups), nn.BatchNorm2d(cout), act()]


def _vgg_body():
    return nn.Sequential(
        *_cbr(3, 16), *_cbr(16, 16), nn.MaxPool2d(2),
        *_cbr(16, 32), *_cbr(32, 32), nn.MaxPool2d(2),
        *_cbr(32, 64), *_cbr(64, 64),
    ), 64


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.c1 = nn.Sequential(*_cbr(cin, cout, stride=stride))
        self.c2 = nn.Sequential(_conv(cout, cout), nn.BatchNorm2d(cout))
        if cin == cout and stride == 1:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride), nn.BatchNorm2d(cout))

    def forward(self, x):
        return F.relu(self.c2(self.c1(x)) + self.skip(x))


def _resnet_body():
    return nn.Sequential(
        *_cbr(3, 16),
        _BasicBlock(16, 16, 1), _BasicBlock(16, 32, 2), _BasicBlock(32, 64, 2),
    ), 64


class _InvertedResidual(nn.Module):
    def __init__(self, cin, cout, stride, expand=3):
        super().__init__()
        mid = cin * expand
        self.net = nn.Sequential(
            *_cbr(cin, mid, 1, act=nn.Hardswish),
            *_cbr(mid, mid, 3, stride, groups=mid, act=nn.Hardswish),
            nn.Conv2d(mid, cout, 1), nn.BatchNorm2d(cout),
        )
        self.residual = cin == cout and stride == 1

    def forward(self, x):
        out = self.net(x)
        return out + x if self.residual else out


def _mobilenet_body():
    return nn.Sequential(
        *_cbr(3, 16, stride=2, act=nn.Hardswish),
        _InvertedResidual(16, 16, 1), _InvertedResidual(16, 24, 2),
        _InvertedResidual(24, 24, 1), _InvertedResidual(24, 48, 1),
        *_cbr(48, 96, 1, act=nn.Hardswish),
    ), 96


class _DenseLayer(nn.Module):
    def __init__(self, cin, growth):
        super().__init__()
        self.net = nn.Sequential(nn.BatchNorm2d(cin), nn.ReLU(), _conv(cin, growth))

    def forward(self, x):
        return torch.cat([x, self.net(x)], 1)


def _densenet_body(growth=12):
    layers, c = [_conv(3, 24)], 24
    for stage in range(3):
        for _ in range(2):
            layers.append(_DenseLayer(c, growth))
            c += growth
        if stage < 2:
            layers += [nn.BatchNorm2d(c), nn.ReLU(), nn.Conv2d(c, c // 2, 1), nn.AvgPool2d(2)]
            c //= 2
    layers += [nn.BatchNorm2d(c), nn.ReLU()]
    return nn.Sequential(*layers), c


ARCHITECTURES = {
    "vgg-mini": _vgg_body,
    "resnet-mini": _resnet_body,
    "mobilenet-mini": _mobilenet_body,
    "densenet-mini": _densenet_body,
}


def build_classifier(architecture_id: str, num_classes: int, input_resolution, seed: int = 0):
    if architecture_id not in ARCHITECTURES:
        raise KeyError(
            f"unknown architecture {architecture_id!r}; registered: {sorted(ARCHITECTURES)}"
        )
    torch.manual_seed(seed)
    body, feat = ARCHITECTURES[architecture_id]()
    return Classifier(architecture_id, num_classes, input_resolution, body, feat)


def build_model(architecture_id: str, config: dict, seed: int = 0) -> nn.Module:
    """Rebuild any registered network (classifier or surrogate) from its config."""
    if architecture_id == "ice-surrogate":
        return build_surrogate(config["output_dim"], tuple(config["block_widths"]), seed)
    return build_classifier(
        architecture_id, config["num_classes"], tuple(config["input_resolution"]), seed
    )


# --------------------------------------------------------------------------
# supervised training
# --------------------------------------------------------------------------

@dataclass
class TrainHParams:
    lr: float = 0.01
    weight_decay: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 15
    seed: int = 0


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Argmax labels; ``torch.argmax`` returns the lowest index on ties."""
    model.eval()
    out = [model(images[i:i + batch_size]).argmax(-1) for i in range(0, len(images), batch_size)]
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def accuracy(model: nn.Module, dataset: LabeledImageSet) -> float:
    x, y = dataset.tensors(next(model.parameters()).dtype)
    return float((predict(model, x) == y).double().mean())


def train_classifier(model: Classifier, train_set: LabeledImageSet, hparams=None,
                     test_set: LabeledImageSet | None = None) -> Classifier:
    """SGD training in place; records ``train_acc``/``test_acc``/``final_loss`` in ``model.metrics``."""
    hp = hparams or TrainHParams()
    if len(train_set) == 0:
        raise DatasetError(f"{train_set.name}: cannot train on an empty dataset")
    if train_set.resolution != model.input_resolution:
        raise DatasetError(
            f"{train_set.name} is {train_set.resolution}, model expects {model.input_resolution}"
        )
    if train_set.labels.max() >= model.num_classes:
        raise DatasetError(f"{train_set.name} has more classes than the model outputs")
    dtype = next(model.parameters()).dtype
    x, y = train_set.tensors(dtype)
    gen = torch.Generator().manual_seed(hp.seed)
    opt = torch.optim.SGD(model.parameters(), lr=hp.lr, momentum=hp.momentum,
                          weight_decay=hp.weight_decay)
    steps_per_epoch = math.ceil(len(x) / hp.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, hp.epochs * steps_per_epoch))
    loss = torch.tensor(float("nan"))
    model.train()
    for epoch in range(hp.epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), hp.batch_size):
            idx = perm[i:i + hp.batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"{model.architecture_id}: training diverged at epoch {epoch}")
        log.debug("%s epoch %d loss %.4f", model.architecture_id, epoch, loss.item())
    model.eval()
    model.metrics = {"final_loss": float(loss.detach()), "train_acc": accuracy(model, train_set)}
    if test_set is not None:
        model.metrics["test_acc"] = accuracy(model, test_set)
    return model


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _pack(header: dict, arrays: dict) -> bytes:
    meta = dict(header)
    meta["tensors"] = [[k, list(v.shape)] for k, v in arrays.items()]
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    body = struct.pack("<Q", len(meta_raw)) + meta_raw + payload
    return CHECKPOINT_MAGIC + body + hashlib.sha256(body).digest()


def _unpack(raw: bytes) -> tuple[dict, dict]:
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = raw[8:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    buf = io.BytesIO(body)
    (n,) = struct.unpack("<Q", buf.read(8))
    meta = json.loads(buf.read(n))
    arrays = {}
    for name, shape in meta.pop("tensors"):
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).copy()
    return meta, arrays


def save_arrays(path, kind: str, arrays: dict, extra: dict | None = None) -> None:
    """Write named float64 arrays in the checkpoint container."""
    header = {"kind": kind, **(extra or {})}
    Path(path).write_bytes(_pack(header, {k: np.asarray(v) for k, v in arrays.items()}))


def load_arrays(path) -> tuple[dict, dict]:
    return _unpack(Path(path).read_bytes())


def save_checkpoint(model: nn.Module, path) -> None:
    state = {k: v.detach().cpu().double().numpy() for k, v in model.state_dict().items()}
    save_arrays(path, "model", state, {
        "architecture_id": model.architecture_id,
        "config": model.config(),
        "metrics": getattr(model, "metrics", {}),
    })


def load_checkpoint(path, dtype=torch.float64) -> nn.Module:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: holds a {meta.get('kind')!r}, not a model")
    model = build_model(meta["architecture_id"], meta["config"]).to(dtype)
    model.load_state_dict({k: torch.from_numpy(v).to(dtype) for k, v in arrays.items()})
    if hasattr(model, "metrics"):
        model.metrics = meta.get("metrics", {})
    return model.eval()


def describe(model: nn.Module) -> dict:
    out = {"architecture_id": model.architecture_id, **model.config()}
    out["parameters"] = sum(p.numel() for p in model.parameters())
    return out


__all__ = [
    "entropy", "entropy_from_logits", "cross_entropy", "kl_divergence",
    "SurrogateModel", "build_surrogate", "Classifier", "build_classifier", "build_model",
    "ARCHITECTURES", "TrainHParams", "train_classifier", "predict", "accuracy", "freeze",
    "save_checkpoint", "load_checkpoint", "save_arrays", "load_arrays", "CheckpointError",
    "describe",
]
