"""Desk-scale datasets, a tiny convolutional classifier, and the synthetic
rotation task used to verify the search end to end.

Supported on-disk formats:

* ``cifar-binary``: the standard 3073-byte record layout (1 label byte
  followed by 3072 channel-planar pixel bytes of a 32x32 RGB image).
* ``simple-container``: magic ``FAUG``, u32 count, u32 C, H, W, u32
  class_count, then per record a u16 label and C*H*W row-major RGB bytes.
  Little-endian throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"FAUG"


@dataclass
class LabeledDataset:
    images: np.ndarray  # (B, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (B,) int64
    class_count: int
    split: str = ""

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels are misaligned")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label out of range for class_count")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> "LabeledDataset":
        return LabeledDataset(
            self.images[indices], self.labels[indices], self.class_count, self.split
        )


def load_raw_dataset(path: str, format: str) -> LabeledDataset:
    if format == "cifar-binary":
        return _load_cifar_binary(path)
    if format == "simple-container":
        return load_simple_container(path)
    raise ValueError(f"unknown dataset format '{format}'")


def _load_cifar_binary(path: str) -> LabeledDataset:
    raw = np.fromfile(path, dtype=np.uint8)
    record = 3073
    if raw.size == 0 or raw.size % record != 0:
        raise ValueError(
            f"truncated cifar-binary file: {raw.size} bytes is not a multiple of {record}"
        )
    n = raw.size // record
    rows = raw.reshape(n, record)
    labels = rows[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"cifar-binary label out of range: {labels.max()}")
    images = rows[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, 10)


def save_simple_container(path: str, ds: LabeledDataset) -> None:
    n, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIII", n, c, h, w, ds.class_count))
        pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
        for i in range(n):
            fh.write(struct.pack("<H", int(ds.labels[i])))
            fh.write(pixels[i].tobytes())


def load_simple_container(path: str) -> LabeledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    n, c, h, w, classes = struct.unpack_from("<IIIII", blob, 4)
    rec = 2 + c * h * w
    need = 24 + n * rec
    if len(blob) != need:
        raise ValueError(f"truncated container: {len(blob)} bytes, expected {need}")
    labels = np.empty(n, dtype=np.int64)
    images = np.empty((n, c, h, w), dtype=np.float64)
    off = 24
    for i in range(n):
        (labels[i],) = struct.unpack_from("<H", blob, off)
        pix = np.frombuffer(blob, dtype=np.uint8, count=c * h * w, offset=off + 2)
        images[i] = pix.reshape(c, h, w) / 255.0
        off += rec
    if labels.size and labels.max() >= classes:
        raise ValueError(f"label {labels.max()} out of range for {classes} classes")
    return LabeledDataset(images, labels, classes)


def split_half(ds: LabeledDataset, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Class-balanced disjoint halves, reproducible by seed.

    Datasets tagged ``ordered-halves`` are split by position instead: the
    first half is the training block by construction.
    """
    if len(ds) < 2:
        raise ValueError("dataset too small to split")
    if ds.split == "ordered-halves":
        mid = len(ds) // 2
        return ds.take(np.arange(mid)), ds.take(np.arange(mid, len(ds)))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5BA17]))
    train_idx, val_idx = [], []
    for cls in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == cls)
        rng.shuffle(idx)
        half = len(idx) // 2
        train_idx.append(idx[:half])
        val_idx.append(idx[half:])
    train = np.sort(np.concatenate(train_idx))
    val = np.sort(np.concatenate(val_idx))
    return ds.take(train), ds.take(val)


def subset(ds: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """Class-balanced subset of n samples (ordered datasets keep block order)."""
    if n >= len(ds):
        return ds
    if ds.split == "ordered-halves":
        mid = len(ds) // 2
        per = n // 2
        keep = np.concatenate([np.arange(per), np.arange(mid, mid + (n - per))])
        return ds.take(keep)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B5E7]))
    per = n // ds.class_count
    keep = []
    for cls in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == cls)
        rng.shuffle(idx)
        keep.append(idx[:per])
    keep = np.sort(np.concatenate(keep))
    return ds.take(keep)


# ---------------------------------------------------------------------------
# synthetic rotation task
# ---------------------------------------------------------------------------


_SUPERSAMPLE = 2
_TRAIN_MAX_ANGLE = 3.0
_VAL_ANGLE = (12.0, 30.0)
_JITTER = 2.0
_PIXEL_NOISE = 0.05


def _ring_glyph(angle_deg: float, mirrored: bool, jitter, polarity: bool,
                rng) -> np.ndarray:
    """Antialiased 32x32 chiral glyph: a ring with a radial spoke and a
    tangential outer arc running clockwise or counterclockwise from it.

    The class (arc sense) is rotation-invariant, but templates learned at one
    spoke orientation do not transfer to others. Shears deform the ring into
    an ellipse unseen at validation, so rotation is the uniquely matched
    augmentation for closing the orientation gap. Polarity and photometric
    jitter make intensity transforms label-neutral, so uniform random
    policies are mildly helpful rather than destructive.
    """
    h = w = 32
    ss = _SUPERSAMPLE
    c = (h * ss - 1) / 2.0
    yy, xx = np.meshgrid((np.arange(h * ss) - c) / ss, (np.arange(w * ss) - c) / ss,
                         indexing="ij")
    xj = xx - jitter[0]
    yj = yy - jitter[1]
    radius = np.hypot(xj, yj)
    theta = np.arctan2(yj, xj)
    phi0 = np.deg2rad(angle_deg)
    rel = np.angle(np.exp(1j * (theta - phi0)))
    ring = (radius >= 5.0) & (radius <= 7.0)
    spoke = (np.abs(rel) <= np.deg2rad(10.0)) & (radius >= 5.0) & (radius <= 11.0)
    sense = rel if mirrored else -rel
    arc = (
        (sense >= np.deg2rad(8.0))
        & (sense <= np.deg2rad(60.0))
        & (radius >= 8.5)
        & (radius <= 10.5)
    )
    mask = (ring | spoke | arc).astype(np.float64)
    mask = mask.reshape(h, ss, w, ss).mean(axis=(1, 3))
    bg, fg = (0.15, 0.85) if polarity else (0.85, 0.15)
    img = bg + (fg - bg) * mask
    contrast = rng.uniform(0.75, 1.1)
    shift = rng.uniform(-0.12, 0.12)
    img = 0.5 + (img - 0.5) * contrast + shift
    img = img + rng.normal(0.0, _PIXEL_NOISE, size=(h, w))
    return np.clip(img, 0.0, 1.0)


def synth_rotation_task(n: int, seed: int) -> LabeledDataset:
    """Two-class chiral-glyph dataset whose first half (the training block)
    only covers spoke orientations within a few degrees of zero while the
    second half spans up to +-30 degrees, so rotation augmentation closes
    the generalization gap by construction. Tagged ``ordered-halves``.
    """
    if n < 200:
        raise ValueError(f"synthetic task needs n >= 200, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0507A7]))
    half = n // 2
    images = np.empty((n, 3, 32, 32), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    pos = 0
    for block, count in enumerate((half, n - half)):
        for i in range(count):
            label = i % 2
            if block == 0:
                angle = rng.uniform(-_TRAIN_MAX_ANGLE, _TRAIN_MAX_ANGLE)
            else:
                angle = rng.uniform(*_VAL_ANGLE) * rng.choice([-1.0, 1.0])
            jitter = rng.uniform(-_JITTER, _JITTER, size=2)
            img = _ring_glyph(angle, label == 1, jitter, bool(rng.integers(2)), rng)
            images[pos] = img[None].repeat(3, axis=0)
            labels[pos] = label
            pos += 1
    return LabeledDataset(images, labels, 2, split="ordered-halves")


# ---------------------------------------------------------------------------
# tiny classifier
# ---------------------------------------------------------------------------


class TinyClassifier:
    """Two stride-2 conv layers and a linear head; enough to overfit the
    synthetic task without augmentation while training in minutes on CPU."""

    def __init__(self, in_shape=(3, 32, 32), classes=2, seed: int = 0, channels=(8, 16)):
        c, h, w = in_shape
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC1A55]))
        c1, c2 = channels
        self.in_shape = in_shape
        self.classes = classes
        self.w1 = Tensor(rng.normal(0, np.sqrt(2.0 / (c * 9)), (c1, c, 3, 3)), requires_grad=True)
        self.b1 = Tensor(np.zeros(c1), requires_grad=True)
        self.w2 = Tensor(rng.normal(0, np.sqrt(2.0 / (c1 * 9)), (c2, c1, 3, 3)), requires_grad=True)
        self.b2 = Tensor(np.zeros(c2), requires_grad=True)
        h2, w2_ = (h + 1) // 2, (w + 1) // 2
        h4, w4 = (h2 + 1) // 2, (w2_ + 1) // 2
        flat = c2 * h4 * w4
        self.w3 = Tensor(rng.normal(0, np.sqrt(1.0 / flat), (flat, classes)), requires_grad=True)
        self.b3 = Tensor(np.zeros(classes), requires_grad=True)

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        x = x - 0.5  # center [0,1] pixels
        h = ad.relu(ad.conv2d(x, self.w1, stride=2, padding=1) + ad.reshape(self.b1, (1, -1, 1, 1)))
        h = ad.relu(ad.conv2d(h, self.w2, stride=2, padding=1) + ad.reshape(self.b2, (1, -1, 1, 1)))
        h = ad.reshape(h, (h.shape[0], -1))
        return ad.matmul(h, self.w3) + ad.reshape(self.b3, (1, -1))

    def set_params(self, values: list[np.ndarray]) -> None:
        for p, v in zip(self.params(), values):
            p.data = np.asarray(v, dtype=np.float64)

    def param_values(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params()]


def classifier_forward(model: TinyClassifier, x) -> Tensor:
    return model.forward(x)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"class id out of range for {c} classes")
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[np.arange(n), labels]
    return ad.negative(ad.mean(picked))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = logits.data if isinstance(logits, Tensor) else logits
    return float((logits.argmax(axis=1) == labels).mean())
