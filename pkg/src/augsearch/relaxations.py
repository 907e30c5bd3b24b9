"""Differentiable sampling relaxations for discrete policy choices.

Three mechanisms: a hardened Gumbel-softmax over the number of augmentation
layers, a Gumbel-Sinkhorn draw of a near-permutation assigning transform
types to layers (rectangular logits padded to square, truncated after
normalization), and a uniform reparameterized draw of per-cell magnitudes
between learnable sigmoid bounds.

All samplers accept either an explicit noise array or an rng; passing the
same noise twice rebuilds the identical sample on a fresh tape, which the
bilevel finite-difference probes rely on.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GUMBEL_EPS = 1e-12
# Large negative constant occupying the padding columns, applied before the
# temperature division; exp() of the scaled value underflows, and the floor
# keeps Sinkhorn inputs strictly positive.
PAD_VALUE = -1e3
SINKHORN_FLOOR = 1e-30
GAUSSIAN_CLAMP = 1e-6


def _check_temperature(t: float) -> float:
    t = float(t)
    if not t > 0.0:
        raise ValueError(f"temperature must be positive, got {t}")
    return t


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel draws g = -log(-log(u)), u clamped away from {0, 1}."""
    u = rng.uniform(size=shape)
    u = np.clip(u, GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def one_hot(indices: np.ndarray, depth: int, axis: int = -1) -> np.ndarray:
    eye = np.eye(depth, dtype=np.float64)
    hot = eye[indices]
    return np.moveaxis(hot, -1, axis) if axis != -1 else hot


def gumbel_softmax_hard(delta, t: float, rng=None, noise=None) -> Tensor:
    """Hardened Gumbel-softmax draw over the trailing axis of ``delta``.

    Forward value is the one-hot argmax of softmax((delta + g) / t); the
    backward pass flows through the soft vector.
    """
    t = _check_temperature(t)
    delta = ad.as_tensor(delta)
    if noise is None:
        noise = sample_gumbel(delta.shape, rng)
    soft = ad.softmax((delta + Tensor(noise)) / t, axis=-1)
    hard = one_hot(soft.data.argmax(axis=-1), delta.shape[-1])
    return ad.straight_through(Tensor(hard), soft)


def pad_logits(pi, pad_value: float = PAD_VALUE) -> Tensor:
    """Pad (..., N, K) logits with N-K constant columns into a square matrix."""
    pi = ad.as_tensor(pi)
    n, k = pi.shape[-2], pi.shape[-1]
    if k > n:
        raise ValueError(f"layer count {k} exceeds transform count {n}")
    if k == n:
        return pi
    pad = Tensor(np.full(pi.shape[:-1] + (n - k,), pad_value))
    return ad.concatenate([pi, pad], axis=-1)


def sinkhorn_normalize(m, iters: int) -> Tensor:
    """Alternate row and column normalization of a positive matrix.

    One iteration is one row-then-column pair. ``iters=0`` returns the input
    unchanged. Accepts stacked matrices on leading axes.
    """
    m = ad.as_tensor(m)
    if iters < 0:
        raise ValueError(f"iteration count must be >= 0, got {iters}")
    if np.any(m.data <= 0.0):
        raise ValueError("sinkhorn_normalize requires strictly positive entries")
    for _ in range(iters):
        m = m / ad.sum_(m, axis=-1, keepdims=True)
        m = m / ad.sum_(m, axis=-2, keepdims=True)
    return m


def gumbel_sinkhorn_sample(
    pi, t: float, iters: int, rng=None, noise=None
) -> tuple[Tensor, Tensor]:
    """Sample a soft and hardened near-permutation of shape (..., N, K).

    Gumbel noise perturbs the full padded square matrix, the scaled exponent
    is Sinkhorn-normalized, the result is truncated to the first K columns
    and each column is hardened to the one-hot argmax with a straight-through
    backward pass.
    """
    t = _check_temperature(t)
    if iters < 1:
        raise ValueError(f"sinkhorn iteration count must be >= 1, got {iters}")
    pi = ad.as_tensor(pi)
    n, k = pi.shape[-2], pi.shape[-1]
    padded = pad_logits(pi)
    if noise is None:
        noise = sample_gumbel(padded.shape, rng)
    scaled = (padded + Tensor(noise)) / t
    with np.errstate(under="ignore"):
        positive = ad.clamp(ad.exp(scaled), lo=SINKHORN_FLOOR)
    full = sinkhorn_normalize(positive, iters)
    soft = full[..., :, :k] if k < n else full
    hard = one_hot(soft.data.argmax(axis=-2), n, axis=-2)
    return soft, ad.straight_through(Tensor(hard), soft)


def sample_magnitude(mu, rng=None, noise=None) -> Tensor:
    """Uniform reparameterized magnitudes from bounds ``mu`` (..., 2).

    Returns sigma(upper - lower interval) samples: (s(u) - s(l)) * eps + s(l)
    with eps ~ U(0,1) drawn independently per cell. The result always lies
    between the two sigmoid bounds regardless of their ordering.
    """
    mu = ad.as_tensor(mu)
    low = ad.sigmoid(mu[..., 0])
    high = ad.sigmoid(mu[..., 1])
    if noise is None:
        noise = rng.uniform(size=low.shape)
    return (high - low) * Tensor(np.asarray(noise)) + low


def sample_magnitude_gaussian(mean, std, rng=None, noise=None) -> Tensor:
    """Gaussian reparameterized magnitudes, clamped into (0, 1)."""
    mean, std = ad.as_tensor(mean), ad.as_tensor(std)
    if np.any(std.data <= 0.0):
        raise ValueError("gaussian magnitude std must be strictly positive")
    if noise is None:
        noise = rng.standard_normal(size=mean.shape)
    m = std * Tensor(np.asarray(noise)) + mean
    return ad.clamp(m, lo=GAUSSIAN_CLAMP, hi=1.0 - GAUSSIAN_CLAMP)


def exact_sigmoid_logit(p: float) -> float:
    """Logit x whose engine sigmoid reproduces p exactly, found by ulp search."""

    def sig(x: float) -> float:
        return float(ad.sigmoid(Tensor(np.float64(x))).data)

    x = float(np.log(p / (1.0 - p)))
    if sig(x) == p:
        return x
    for direction in (np.inf, -np.inf):
        cand = x
        for _ in range(64):
            cand = float(np.nextafter(cand, direction))
            if sig(cand) == p:
                return cand
    return x
