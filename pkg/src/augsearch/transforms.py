"""The 14 elementary image transformations with differentiable kernels.

Images are (B, C, H, W) tensors with values in [0, 1], RGB channel order.
Every kernel preserves shape and clamps its output back into [0, 1].
Geometric transforms are inverse affine warps with bilinear sampling and
zero fill outside the source. Posterize and Solarize are not differentiable
in their magnitude, so ``apply`` adds a straight-through term giving the
output a unit gradient per pixel with respect to the sampled magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor


@dataclass(frozen=True)
class TransformSpec:
    name: str
    native_range: Optional[tuple[float, float]]
    magnitude_differentiable: bool
    kernel: Callable

    @property
    def has_magnitude(self) -> bool:
        return self.native_range is not None


def _per_image(v, batch: int) -> Tensor:
    """Shape a per-image scalar to (B, 1, 1, 1) for pixel arithmetic."""
    v = ad.as_tensor(v)
    if v.ndim == 0:
        v = ad.reshape(v, (1,))
    if v.shape[0] != batch:
        v = ad.broadcast_to(v, (batch,))
    return ad.reshape(v, (batch, 1, 1, 1))


# bilinear warps of [0,1] images with zero fill are convex combinations of
# in-range values, so they stay in range without an explicit clamp


def _shear_x(x: Tensor, m: Tensor) -> Tensor:
    return ad.affine_sample(x, 1.0, m, 0.0, 1.0, 0.0, 0.0)


def _shear_y(x: Tensor, m: Tensor) -> Tensor:
    return ad.affine_sample(x, 1.0, 0.0, m, 1.0, 0.0, 0.0)


def _translate_x(x: Tensor, m: Tensor) -> Tensor:
    return ad.affine_sample(x, 1.0, 0.0, 0.0, 1.0, m * float(x.shape[3]), 0.0)


def _translate_y(x: Tensor, m: Tensor) -> Tensor:
    return ad.affine_sample(x, 1.0, 0.0, 0.0, 1.0, 0.0, m * float(x.shape[2]))


def _rotate(x: Tensor, m: Tensor) -> Tensor:
    ang = m * (np.pi / 180.0)
    ca, sa = ad.cos(ang), ad.sin(ang)
    return ad.affine_sample(x, ca, sa, ad.negative(sa), ca, 0.0, 0.0)


def _solarize(x: Tensor, m: Tensor) -> Tensor:
    thr = _per_image(m, x.shape[0])
    inverted = Tensor((x.data >= thr.data).astype(np.float64))
    # x below the threshold, 1 - x at or above it
    return x + inverted * (1.0 - 2.0 * x)


def _posterize(x: Tensor, m: Tensor) -> Tensor:
    bits = np.clip(np.floor(m.data), 2, 8).astype(np.int64).reshape(-1)
    q = np.clip(np.rint(x.data * 255.0), 0, 255).astype(np.int64)
    shift = (8 - bits)[:, None, None, None]
    kept = (q >> shift) << shift
    target = kept.astype(np.float64) / 255.0
    # straight-through to the input pixels: forward the quantized view,
    # backward the identity
    return x + Tensor(target - x.data)


def _contrast(x: Tensor, m: Tensor) -> Tensor:
    return ad.clamp(x * _per_image(m, x.shape[0]), 0.0, 1.0)


def _gray(x: Tensor) -> Tensor:
    if x.shape[1] != 3:
        return ad.mean(x, axis=1, keepdims=True)
    r = x[:, 0:1]
    g = x[:, 1:2]
    b = x[:, 2:3]
    return 0.299 * r + 0.587 * g + 0.114 * b


def _color(x: Tensor, m: Tensor) -> Tensor:
    gray = _gray(x)
    f = _per_image(m, x.shape[0])
    return ad.clamp(gray + f * (x - gray), 0.0, 1.0)


def _brightness(x: Tensor, m: Tensor) -> Tensor:
    return ad.clamp(x + _per_image(m, x.shape[0]), 0.0, 1.0)


def _sharpness(x: Tensor, m: Tensor) -> Tensor:
    smooth = ad.smooth3x3(x)
    f = _per_image(m, x.shape[0])
    return ad.clamp(smooth + f * (x - smooth), 0.0, 1.0)


def _autocontrast(x: Tensor, _m=None) -> Tensor:
    lo = x.data.min(axis=(2, 3), keepdims=True)
    hi = x.data.max(axis=(2, 3), keepdims=True)
    span = hi - lo
    usable = span > 1e-8
    scale = np.where(usable, 1.0 / np.where(usable, span, 1.0), 1.0)
    offset = np.where(usable, -lo * scale, 0.0)
    return ad.clamp(x * Tensor(scale) + Tensor(offset), 0.0, 1.0)


def _invert(x: Tensor, _m=None) -> Tensor:
    return 1.0 - x


def _equalize(x: Tensor, _m=None) -> Tensor:
    """Per-channel histogram equalization on the 256-bin quantized view,
    straight-through to the input pixels."""
    B, C, H, W = x.shape
    q = np.clip(np.rint(x.data * 255.0), 0, 255).astype(np.int64)
    planes = q.reshape(B * C, H * W)
    offsets = np.arange(B * C)[:, None] * 256
    hist = np.bincount((planes + offsets).ravel(), minlength=B * C * 256).reshape(B * C, 256)
    # classic cumulative-count remap: last occupied bin is excluded from the
    # step so full-range channels map back onto the full range
    occupied = hist > 0
    last_count = np.where(
        occupied.any(axis=1),
        np.take_along_axis(hist, 255 - np.argmax(occupied[:, ::-1], axis=1)[:, None], 1)[:, 0],
        0,
    )
    step = (hist.sum(axis=1) - last_count) // 255
    prev_cum = np.cumsum(hist, axis=1) - hist
    safe_step = np.maximum(step, 1)[:, None]
    lut = np.minimum((step[:, None] // 2 + prev_cum) // safe_step, 255)
    identity = np.broadcast_to(np.arange(256), (B * C, 256))
    degenerate = (step == 0) | (occupied.sum(axis=1) <= 1)
    lut = np.where(degenerate[:, None], identity, lut)
    mapped = np.take_along_axis(lut, planes, axis=1).reshape(B, C, H, W) / 255.0
    return x + Tensor(mapped - x.data)


_REGISTRY: tuple[TransformSpec, ...] = (
    TransformSpec("ShearX", (-0.6, 0.6), True, _shear_x),
    TransformSpec("ShearY", (-0.6, 0.6), True, _shear_y),
    TransformSpec("TranslateX", (-0.5, 0.5), True, _translate_x),
    TransformSpec("TranslateY", (-0.5, 0.5), True, _translate_y),
    TransformSpec("Rotate", (-30.0, 30.0), True, _rotate),
    TransformSpec("Solarize", (0.6, 1.0), False, _solarize),
    TransformSpec("Posterize", (2.0, 8.0), False, _posterize),
    TransformSpec("Contrast", (0.4, 2.0), True, _contrast),
    TransformSpec("Color", (0.0, 1.0), True, _color),
    TransformSpec("Brightness", (-0.4, 0.4), True, _brightness),
    TransformSpec("Sharpness", (0.0, 2.0), True, _sharpness),
    TransformSpec("AutoContrast", None, False, _autocontrast),
    TransformSpec("Invert", None, False, _invert),
    TransformSpec("Equalize", None, False, _equalize),
)


def registry() -> tuple[TransformSpec, ...]:
    """The ordered transform registry; its length fixes N."""
    return _REGISTRY


def spec_by_name(name: str) -> TransformSpec:
    for spec in _REGISTRY:
        if spec.name == name:
            return spec
    raise KeyError(f"unknown transform '{name}'")


def scale_magnitude(spec: TransformSpec, m01):
    """Affine map of a normalized magnitude in (0,1) onto the native range."""
    if spec.native_range is None:
        raise ValueError(f"transform '{spec.name}' takes no magnitude")
    low, high = spec.native_range
    return low + ad.as_tensor(m01) * (high - low)


def apply(spec: TransformSpec, x, m01=None) -> Tensor:
    """Apply one transform to a batch with per-image normalized magnitudes.

    ``m01`` is ignored for magnitude-free transforms. For transforms whose
    kernel is not differentiable in the magnitude, the output carries a
    straight-through term with unit per-pixel gradient toward ``m01``.
    """
    x = ad.as_tensor(x)
    if x.ndim != 4:
        raise ad.ShapeMismatchError(f"expected (B,C,H,W) images, got {x.shape}")
    try:
        if spec.native_range is None:
            return spec.kernel(x)
        m01 = ad.as_tensor(m01)
        out = spec.kernel(x, scale_magnitude(spec, m01))
        if not spec.magnitude_differentiable and m01.requires_grad:
            m = _per_image(m01, x.shape[0])
            out = out + (m - ad.stop_grad(m))
        return out
    except NonFiniteError as err:
        raise NonFiniteError(f"{spec.name}: {err}") from err
