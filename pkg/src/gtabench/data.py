"""
Datasets, resizing and coordinate maps.

Images live in the real-valued pixel domain [0, 255] as ``H x W x 3`` float64
arrays. Batches handed to models are ``N x 3 x H x W`` torch tensors; use
:func:`to_tensor` / :func:`to_images` to move between the two layouts.
"""

from __future__ import annotations

import io
import os
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

__all__ = [
    "LabeledImageSet",
    "DeskSpec",
    "CoordinateMap",
    "AttackBudget",
    "DatasetError",
    "generate_desk_dataset",
    "desk_train_test",
    "load_external_dataset",
    "save_archive",
    "resize",
    "resize_batch",
    "coordinate_map",
    "crop_top_left",
    "to_tensor",
    "to_images",
]

PIXEL_MAX = 255.0
ARCHIVE_MAGIC = b"GTADSET1"


class DatasetError(ValueError):
    """Raised for malformed dataset specs, archives or image sets."""


@dataclass(frozen=True)
class AttackBudget:
    """L-infinity radius (pixel units) and number of ascent steps."""

    epsilon: float = 15.0
    steps: int = 10

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if int(self.steps) < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def step_size(self) -> float:
        return self.epsilon / self.steps


@dataclass
class LabeledImageSet:
    name: str
    images: np.ndarray  # N x H x W x 3, float64 in [0, 255]
    labels: np.ndarray  # N, int64
    num_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.images.shape[1]), int(self.images.shape[2])

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def validate(self) -> None:
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DatasetError(
                f"{self.name}: images must be N x H x W x 3, got {self.images.shape}"
            )
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError(
                f"{self.name}: {self.labels.shape[0]} labels for {self.images.shape[0]} images"
            )
        if self.num_classes < 1:
            raise DatasetError(f"{self.name}: num_classes must be positive")
        if self.images.size and (
            not np.isfinite(self.images).all()
            or self.images.min() < 0
            or self.images.max() > PIXEL_MAX
        ):
            raise DatasetError(f"{self.name}: pixel values outside [0, 255]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"{self.name}: label outside [0, {self.num_classes})")

    def subset(self, indices, name: str | None = None) -> "LabeledImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(
            name or self.name,
            self.images[indices],
            self.labels[indices],
            self.num_classes,
            dict(self.metadata),
        )

    def tensors(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        return to_tensor(self.images, dtype=dtype), torch.from_numpy(self.labels)


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """``(N x) H x W x 3`` array -> ``N x 3 x H x W`` tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_images(batch: torch.Tensor) -> np.ndarray:
    """``N x 3 x H x W`` tensor -> ``N x H x W x 3`` float64 array."""
    return batch.detach().cpu().double().numpy().transpose(0, 2, 3, 1).copy()


# --------------------------------------------------------------------------
# desk-scale synthetic datasets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DeskSpec:
    """Recipe for a synthetic dataset of textured, coloured shapes on smooth backgrounds."""

    name: str
    resolution: tuple[int, int] = (32, 32)
    num_classes: int = 10
    samples_per_class: int = 200
    seed: int = 0
    noise_std: float = 4.0

    def __post_init__(self):
        h, w = self.resolution
        if h < 16 or w < 16:
            raise DatasetError(f"desk resolution must be at least 16x16, got {h}x{w}")
        if self.num_classes < 2:
            raise DatasetError(f"need at least 2 classes, got {self.num_classes}")
        if self.num_classes > len(_SHAPES) * len(_TEXTURES):
            raise DatasetError(f"at most {len(_SHAPES) * len(_TEXTURES)} classes supported")
        if self.samples_per_class < 1:
            raise DatasetError("samples_per_class must be positive")


def _disk(u, v, s):
    return u**2 + v**2 <= s**2


def _square(u, v, s):
    return np.maximum(np.abs(u), np.abs(v)) <= 0.85 * s


def _triangle(u, v, s):
    return (v <= 0.8 * s) & (v >= -0.8 * s + 2 * np.abs(u) * 1.0) & (np.abs(u) <= s)


def _ring(u, v, s):
    r = np.sqrt(u**2 + v**2)
    return (r <= s) & (r >= 0.55 * s)


def _cross(u, v, s):
    arm = 0.3 * s
    return ((np.abs(u) <= arm) & (np.abs(v) <= s)) | ((np.abs(v) <= arm) & (np.abs(u) <= s))


def _diamond(u, v, s):
    return np.abs(u) + np.abs(v) <= 1.1 * s


def _bar(u, v, s):
    return (np.abs(u) <= s) & (np.abs(v) <= 0.35 * s)


def _frame(u, v, s):
    m = np.maximum(np.abs(u), np.abs(v))
    return (m <= 0.9 * s) & (m >= 0.55 * s)


_SHAPES = (_disk, _square, _triangle, _ring, _cross, _diamond, _bar, _frame)


def _flat(u, v, period):
    return np.zeros_like(u)


def _hstripes(u, v, period):
    return np.sin(2 * np.pi * v / period)


def _vstripes(u, v, period):
    return np.sin(2 * np.pi * u / period)


def _diagonal(u, v, period):
    return np.sin(2 * np.pi * (u + v) / (period * np.sqrt(2)))


def _checks(u, v, period):
    return np.sign(np.sin(2 * np.pi * u / period) * np.sin(2 * np.pi * v / period))


def _rings(u, v, period):
    return np.sin(2 * np.pi * np.sqrt(u**2 + v**2) / period)


# textures are zero-mean patterns in [-1, 1] modulating the shape's colour
_TEXTURES = (_flat, _hstripes, _vstripes, _diagonal, _checks, _rings)

# hue anchors spread around the colour wheel; drawn per image
_PALETTE = np.array(
    [
        [220, 60, 50],
        [50, 170, 70],
        [60, 90, 220],
        [225, 200, 50],
        [170, 60, 200],
        [40, 190, 200],
        [235, 130, 40],
        [140, 140, 140],
        [200, 90, 140],
        [110, 70, 40],
    ],
    dtype=np.float64,
)


def _class_recipes(spec: DeskSpec) -> list[tuple[int, int]]:
    """(shape, texture) per class; depends only on ``spec.seed``.

    Classes take distinct textures first, so texture is the primary cue and
    shape separates classes that share one.
    """
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    shapes = rng.permutation(len(_SHAPES))
    textures = rng.permutation(len(_TEXTURES))
    combos = [(int(shapes[(k + k // len(_TEXTURES)) % len(_SHAPES)]),
               int(textures[k % len(_TEXTURES)]))
              for k in range(len(_SHAPES) * len(_TEXTURES))]
    return combos[: spec.num_classes]


def _render(h, w, shape_id, texture_id, rng, noise_std):
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    # background: smooth random gradient in a muted colour
    bg = rng.uniform(60, 190, size=3)
    tilt = rng.uniform(-35, 35, size=(2, 3))
    img = bg + xx[..., None] * tilt[0] + yy[..., None] * tilt[1]

    cx, cy = rng.uniform(-0.3, 0.3, size=2)
    size = rng.uniform(0.5, 0.7)
    angle = rng.uniform(-0.3, 0.3)
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    mask = _SHAPES[shape_id](u, v, size)
    # texture period is a fixed number of pixels, whatever the resolution
    period = rng.uniform(4.0, 6.0) * 2.0 / w
    tex = _TEXTURES[texture_id](u, v, period) * rng.uniform(25, 45)
    # colour is a nuisance variable: classes differ only in shape and texture
    colour = np.clip(_PALETTE[rng.integers(len(_PALETTE))] + rng.normal(0, 18, size=3), 0, 255)
    img = np.where(mask[..., None], colour + tex[..., None], img)
    img = img + rng.normal(0, noise_std, size=img.shape)
    return np.clip(img, 0, PIXEL_MAX)


def generate_desk_dataset(spec: DeskSpec, split: str = "train") -> LabeledImageSet:
    """Render ``spec.samples_per_class`` images per class.

    Classes are fixed by ``spec.seed``; the ``split`` name selects an independent
    random stream, so "train" and "test" sets never share a sample.
    """
    h, w = spec.resolution
    recipes = _class_recipes(spec)
    stream = {"train": 1, "test": 2}.get(split)
    if stream is None:
        raise DatasetError(f"unknown split {split!r}")
    rng = np.random.default_rng([spec.seed, stream])
    n = spec.num_classes * spec.samples_per_class
    labels = np.tile(np.arange(spec.num_classes), spec.samples_per_class)
    images = np.empty((n, h, w, 3))
    for i, k in enumerate(labels):
        s, t = recipes[k]
        images[i] = _render(h, w, s, t, rng, spec.noise_std)
    return LabeledImageSet(
        f"{spec.name}-{split}",
        images,
        labels,
        spec.num_classes,
        {"source": "desk", "seed": spec.seed, "split": split},
    )


def desk_train_test(spec: DeskSpec, test_per_class: int | None = None):
    """Disjoint train/test pair sharing one class definition."""
    test_spec = spec
    if test_per_class is not None:
        test_spec = DeskSpec(
            spec.name, spec.resolution, spec.num_classes, test_per_class, spec.seed, spec.noise_std
        )
    return generate_desk_dataset(spec, "train"), generate_desk_dataset(test_spec, "test")


# --------------------------------------------------------------------------
# archives and external readers
# --------------------------------------------------------------------------

def save_archive(dataset: LabeledImageSet, path) -> None:
    """Single-file archive: header (name, resolution, num_classes), then records.

    Each record is one little-endian int32 label followed by H*W*3 float64 pixels.
    """
    h, w = dataset.resolution
    name = dataset.name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", len(name)))
        fh.write(name)
        fh.write(struct.pack("<IIII", h, w, dataset.num_classes, len(dataset)))
        for img, lab in zip(dataset.images, dataset.labels):
            fh.write(struct.pack("<i", int(lab)))
            fh.write(np.ascontiguousarray(img, dtype="<f8").tobytes())


def _read_archive(path) -> LabeledImageSet:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(8) != ARCHIVE_MAGIC:
        raise DatasetError(f"{path}: not a dataset archive")
    try:
        (n_name,) = struct.unpack("<I", buf.read(4))
        name = buf.read(n_name).decode("utf-8")
        h, w, k, n = struct.unpack("<IIII", buf.read(16))
        rec = 4 + h * w * 3 * 8
        body = buf.read()
        if len(body) != n * rec:
            raise DatasetError(f"{path}: truncated archive ({len(body)} bytes, expected {n * rec})")
        labels = np.empty(n, dtype=np.int64)
        images = np.empty((n, h, w, 3))
        for i in range(n):
            chunk = body[i * rec:(i + 1) * rec]
            labels[i] = struct.unpack("<i", chunk[:4])[0]
            images[i] = np.frombuffer(chunk[4:], dtype="<f8").reshape(h, w, 3)
    except struct.error as exc:
        raise DatasetError(f"{path}: corrupt archive header") from exc
    return LabeledImageSet(name, images, labels, k, {"source": str(path)})


def _read_cifar(path) -> LabeledImageSet:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 channel-major pixel bytes.

    ``path`` may be one ``.bin`` file or a directory of them. Python-pickle batches
    (``data_batch_*`` without extension) are accepted too.
    """
    path = Path(path)
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files and path.is_dir():
        files = sorted(p for p in path.iterdir() if p.name.startswith(("data_batch", "test_batch")))
    if not files:
        raise DatasetError(f"{path}: no CIFAR batches found")
    images, labels = [], []
    for f in files:
        raw = f.read_bytes()
        if raw[:1] == b"\x80":  # pickle protocol marker
            try:
                batch = pickle.loads(raw, encoding="bytes")
            except Exception as exc:
                raise DatasetError(f"{f}: corrupt pickle batch") from exc
            data = np.asarray(batch[b"data"], dtype=np.uint8)
            labels.append(np.asarray(batch[b"labels"], dtype=np.int64))
            images.append(data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
            continue
        if len(raw) % 3073:
            raise DatasetError(f"{f}: size {len(raw)} is not a multiple of 3073")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
        labels.append(arr[:, 0].astype(np.int64))
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    labs = np.concatenate(labels)
    if labs.max() >= 10:
        raise DatasetError(f"{path}: label {labs.max()} out of range for CIFAR-10")
    return LabeledImageSet(path.stem, np.concatenate(images).astype(np.float64), labs, 10,
                           {"source": str(path)})


def _read_png_dir(path) -> LabeledImageSet:
    """``root/<class>/*.png``; classes are sorted subfolder names."""
    root = Path(path)
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root}: no class subfolders")
    images, labels = [], []
    for k, d in enumerate(classes):
        for f in sorted(d.glob("*.png")):
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
            images.append(arr)
            labels.append(k)
    if not images:
        raise DatasetError(f"{root}: no PNG files")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{root}: mixed image shapes {sorted(shapes)}")
    return LabeledImageSet(root.name, np.stack(images), np.asarray(labels), len(classes),
                           {"source": str(root), "classes": [d.name for d in classes]})


_READERS = {"archive": _read_archive, "cifar": _read_cifar, "png-dir": _read_png_dir}


def load_external_dataset(path, format: str) -> LabeledImageSet:
    if format not in _READERS:
        raise DatasetError(f"unknown dataset format {format!r}; known: {sorted(_READERS)}")
    if not os.path.exists(path):
        raise DatasetError(f"{path}: no such file or directory")
    return _READERS[format](path)


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

def resize_batch(batch: torch.Tensor, size) -> torch.Tensor:
    """Differentiable bilinear resize of an ``N x C x H x W`` batch (no clipping)."""
    size = (int(size[0]), int(size[1]))
    if tuple(batch.shape[-2:]) == size:
        return batch
    return F.interpolate(batch, size=size, mode="bilinear", align_corners=False)


def resize(image, target) -> np.ndarray:
    """Bilinear resize of an ``H x W x 3`` image, clipped to [0, 255].

    Pixel centres are aligned (half-pixel convention), so a 2x downscale averages
    2x2 blocks and a same-shape resize returns the input unchanged.
    """
    h, w = int(target[0]), int(target[1])
    if h < 1 or w < 1:
        raise ValueError(f"resize target must be positive, got {target}")
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] == (h, w):
        return image.copy()
    out = resize_batch(to_tensor(image, torch.float64), (h, w))
    return np.clip(to_images(out)[0], 0, PIXEL_MAX)


@dataclass(frozen=True)
class CoordinateMap:
    x_map: np.ndarray
    y_map: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.x_map.shape


def coordinate_map(height: int, width: int) -> CoordinateMap:
    if height < 1 or width < 1:
        raise ValueError(f"coordinate map needs positive dims, got {height}x{width}")
    y_map, x_map = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return CoordinateMap(x_map.astype(np.float64), y_map.astype(np.float64))


def crop_top_left(noise, target) -> np.ndarray:
    noise = np.asarray(noise)
    h, w = int(target[0]), int(target[1])
    if h > noise.shape[0] or w > noise.shape[1]:
        raise ValueError(
            f"cannot crop {noise.shape[0]}x{noise.shape[1]} noise to larger {h}x{w}"
        )
    return noise[:h, :w].copy()
