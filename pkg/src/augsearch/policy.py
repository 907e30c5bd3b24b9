"""Per-image policy sampling and layered application.

A policy draw is a triple: a one-hot depth vector d of length K+1, a hardened
near-permutation P of shape N x K assigning transform types to layers, and a
magnitude matrix M in (0,1). Application computes, layer by layer,

    X_k = sum_i P[i,k] * kernel_i(X_{k-1}, M[i,k]),   X' = sum_k d[k] * X_k

so gradients reach the depth logits, the permutation logits and the magnitude
bounds through the straight-through soft paths. During search every layer
evaluates all N transforms; the evaluation path executes only the selected
transform per layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import relaxations as rx
from . import transforms as tfm
from .autodiff import Tensor

POLICY_VERSION = "1"

# default initialization of the magnitude interval, chosen so the sigmoid
# bounds evaluate to exactly (0.125, 0.875)
MAG_INIT = (0.125, 0.875)
GAUSS_INIT_MEAN = 0.5
GAUSS_INIT_STD = 0.1875
GATE_INIT_PROB = 0.75


class PolicyFormatError(ValueError):
    """Malformed policy document."""


@dataclass
class PolicyParams:
    """Learnable policy parameters: depth logits, type/order logits and
    magnitude bounds, plus the optional ablation-variant parameters."""

    delta: Tensor  # (K+1,)
    pi: Tensor  # (N, K)
    mu: Tensor  # (N, K, 2) unconstrained (lower, upper)
    mag_mean: Optional[Tensor] = None  # (N, K), gaussian magnitude variant
    mag_std: Optional[Tensor] = None
    gate_logits: Optional[Tensor] = None  # (K,), bernoulli depth variant
    magnitude_dist: str = "uniform"
    depth_mode: str = "categorical"

    @property
    def num_types(self) -> int:
        return self.pi.shape[0]

    @property
    def max_depth(self) -> int:
        return self.pi.shape[1]

    def groups(self) -> dict[str, Tensor]:
        """Parameter groups for the per-group optimizers and warm-up gate."""
        out: dict[str, Tensor] = {}
        if self.magnitude_dist == "gaussian":
            out["mu"] = self.mag_mean
            out["mu_std"] = self.mag_std
        else:
            out["mu"] = self.mu
        out["pi"] = self.pi
        out["delta"] = self.gate_logits if self.depth_mode == "bernoulli" else self.delta
        return out

    def check_finite(self) -> None:
        for name, t in self.groups().items():
            if not np.all(np.isfinite(t.data)):
                raise ad.NonFiniteError(f"policy group '{name}' became non-finite")


def init_policy(
    num_types: int = 14,
    max_depth: int = 7,
    magnitude_dist: str = "uniform",
    depth_mode: str = "categorical",
) -> PolicyParams:
    """Uniform policy: equal depth probabilities, equal type logits, and
    magnitude intervals spanning (0.125, 0.875)."""
    if max_depth > num_types:
        raise ValueError(f"max_depth {max_depth} exceeds transform count {num_types}")
    lo = rx.exact_sigmoid_logit(MAG_INIT[0])
    hi = rx.exact_sigmoid_logit(MAG_INIT[1])
    mu = np.empty((num_types, max_depth, 2))
    mu[..., 0] = lo
    mu[..., 1] = hi
    phi = PolicyParams(
        delta=Tensor(np.zeros(max_depth + 1), requires_grad=True),
        pi=Tensor(np.zeros((num_types, max_depth)), requires_grad=True),
        mu=Tensor(mu, requires_grad=True),
        magnitude_dist=magnitude_dist,
        depth_mode=depth_mode,
    )
    if magnitude_dist == "gaussian":
        phi.mag_mean = Tensor(np.full((num_types, max_depth), GAUSS_INIT_MEAN), requires_grad=True)
        phi.mag_std = Tensor(np.full((num_types, max_depth), GAUSS_INIT_STD), requires_grad=True)
    if depth_mode == "bernoulli":
        gate = rx.exact_sigmoid_logit(GATE_INIT_PROB)
        phi.gate_logits = Tensor(np.full(max_depth, gate), requires_grad=True)
    return phi


@dataclass
class PolicySample:
    """One realized draw; tensors carry a leading batch axis when batched."""

    d: Optional[Tensor]  # (B, K+1) one-hot rows, categorical depth mode
    P: Tensor  # (B, N, K) hardened near-permutation
    M: Tensor  # (B, N, K) magnitudes in (0, 1)
    P_soft: Tensor = None
    gates: Optional[Tensor] = None  # (B, K) in {0,1}, bernoulli depth mode


@dataclass
class PolicyNoise:
    """Pre-drawn noise; reusing one bundle rebuilds the identical sample."""

    gumbel_depth: np.ndarray
    gumbel_perm: np.ndarray
    eps_mag: np.ndarray
    eps_gate: Optional[np.ndarray] = None


def draw_policy_noise(phi: PolicyParams, batch: int, rng: np.random.Generator) -> PolicyNoise:
    n, k = phi.num_types, phi.max_depth
    gumbel_depth = rx.sample_gumbel((batch, k + 1), rng)
    gumbel_perm = rx.sample_gumbel((batch, n, n), rng)
    if phi.magnitude_dist == "gaussian":
        eps_mag = rng.standard_normal(size=(batch, n, k))
    else:
        eps_mag = rng.uniform(size=(batch, n, k))
    eps_gate = None
    if phi.depth_mode == "bernoulli":
        eps_gate = np.clip(rng.uniform(size=(batch, k)), rx.GUMBEL_EPS, 1 - rx.GUMBEL_EPS)
    return PolicyNoise(gumbel_depth, gumbel_perm, eps_mag, eps_gate)


def _sample_gates(logits: Tensor, t: float, eps: np.ndarray) -> Tensor:
    """Straight-through binary-concrete gates, one Bernoulli per layer."""
    logistic = np.log(eps) - np.log1p(-eps)
    soft = ad.sigmoid((logits + Tensor(logistic)) / t)
    hard = (soft.data > 0.5).astype(np.float64)
    return ad.straight_through(Tensor(hard), soft)


def sample_policy_batch(
    phi: PolicyParams, t: float, iters: int, noise: PolicyNoise
) -> PolicySample:
    """Replicate phi across the batch and draw independent per-image samples,
    all from the supplied noise bundle."""
    batch = noise.gumbel_depth.shape[0]
    n, k = phi.num_types, phi.max_depth
    pi_b = ad.broadcast_to(ad.reshape(phi.pi, (1, n, k)), (batch, n, k))
    soft, hard = rx.gumbel_sinkhorn_sample(pi_b, t, iters, noise=noise.gumbel_perm)
    if phi.magnitude_dist == "gaussian":
        mean = ad.broadcast_to(ad.reshape(phi.mag_mean, (1, n, k)), (batch, n, k))
        std = ad.broadcast_to(ad.reshape(phi.mag_std, (1, n, k)), (batch, n, k))
        mags = rx.sample_magnitude_gaussian(mean, std, noise=noise.eps_mag)
    else:
        mu_b = ad.broadcast_to(ad.reshape(phi.mu, (1, n, k, 2)), (batch, n, k, 2))
        mags = rx.sample_magnitude(mu_b, noise=noise.eps_mag)
    if phi.depth_mode == "bernoulli":
        gates_b = ad.broadcast_to(ad.reshape(phi.gate_logits, (1, k)), (batch, k))
        gates = _sample_gates(gates_b, t, noise.eps_gate)
        return PolicySample(d=None, P=hard, M=mags, P_soft=soft, gates=gates)
    delta_b = ad.broadcast_to(ad.reshape(phi.delta, (1, k + 1)), (batch, k + 1))
    d = rx.gumbel_softmax_hard(delta_b, t, noise=noise.gumbel_depth)
    return PolicySample(d=d, P=hard, M=mags, P_soft=soft)


def sample_policy(
    phi: PolicyParams, t: float, iters: int, rng: np.random.Generator
) -> PolicySample:
    """A single unbatched draw: d (K+1,), P (N,K), M (N,K)."""
    noise = draw_policy_noise(phi, 1, rng)
    s = sample_policy_batch(phi, t, iters, noise)
    return PolicySample(
        d=None if s.d is None else s.d[0],
        P=s.P[0],
        M=s.M[0],
        P_soft=s.P_soft[0],
        gates=None if s.gates is None else s.gates[0],
    )


def _w(v: Tensor, batch: int) -> Tensor:
    return ad.reshape(v, (v.shape[0], 1, 1, 1)) if v.shape[0] == batch else ad.reshape(
        ad.broadcast_to(v, (batch,)), (batch, 1, 1, 1)
    )


def _mixture_layer(x: Tensor, P_col: Tensor, M_col: Tensor, reg) -> Tensor:
    """sum_i P[i] * kernel_i(x, M[i]) with batched per-image weights."""
    batch = x.shape[0]
    acc = None
    for i, spec in enumerate(reg):
        out = tfm.apply(spec, x, M_col[:, i])
        term = _w(P_col[:, i], batch) * out
        acc = term if acc is None else acc + term
    return acc


def apply_policy_batch_sample(x, sample: PolicySample, reg=None) -> Tensor:
    """Mixture application of an already-drawn batched sample."""
    reg = reg or tfm.registry()
    x = ad.as_tensor(x)
    batch = x.shape[0]
    k_layers = sample.P.shape[-1]
    if sample.gates is not None:
        cur = x
        for k in range(k_layers):
            mixed = _mixture_layer(cur, sample.P[:, :, k], sample.M[:, :, k], reg)
            gate = _w(sample.gates[:, k], batch)
            cur = gate * mixed + (1.0 - gate) * cur
        return cur
    out = _w(sample.d[:, 0], batch) * x
    cur = x
    for k in range(k_layers):
        cur = _mixture_layer(cur, sample.P[:, :, k], sample.M[:, :, k], reg)
        out = out + _w(sample.d[:, k + 1], batch) * cur
    return out


def apply_policy(x0, sample: PolicySample, reg=None) -> Tensor:
    """Algorithm application for a single image and unbatched sample."""
    x0 = ad.as_tensor(x0)
    squeeze = x0.ndim == 3
    xb = ad.reshape(x0, (1,) + tuple(x0.shape)) if squeeze else x0
    n, k = sample.P.shape
    batched = PolicySample(
        d=None if sample.d is None else ad.reshape(sample.d, (1, k + 1)),
        P=ad.reshape(sample.P, (1, n, k)),
        M=ad.reshape(sample.M, (1, n, k)),
        gates=None if sample.gates is None else ad.reshape(sample.gates, (1, k)),
    )
    out = apply_policy_batch_sample(xb, batched, reg)
    return out[0] if squeeze else out


def apply_policy_batch(
    x,
    phi: PolicyParams,
    t: float,
    iters: int,
    rng: np.random.Generator,
    mode: str = "per-image",
    reg=None,
) -> Tensor:
    """Sample and apply policies for a batch.

    ``per-image`` draws an independent policy for every image; ``per-batch``
    draws once and applies the same policy to the whole batch.
    """
    x = ad.as_tensor(x)
    if mode not in ("per-image", "per-batch"):
        raise ValueError(f"unknown sampling mode '{mode}'")
    n_draws = x.shape[0] if mode == "per-image" else 1
    noise = draw_policy_noise(phi, n_draws, rng)
    sample = sample_policy_batch(phi, t, iters, noise)
    return apply_policy_batch_sample(x, sample, reg)


def apply_policy_eval(
    x: np.ndarray,
    phi: PolicyParams,
    t: float,
    iters: int,
    rng: np.random.Generator,
    reg=None,
) -> np.ndarray:
    """Evaluation-time application: hard per-image samples, executing only
    the selected transform at each layer. Gradient-free."""
    reg = reg or tfm.registry()
    batch = x.shape[0]
    noise = draw_policy_noise(phi, batch, rng)
    sample = sample_policy_batch(_detached(phi), t, iters, noise)
    k_layers = phi.max_depth
    if sample.gates is not None:
        depths = np.full(batch, k_layers)
        active = sample.gates.data > 0.5
    else:
        depths = sample.d.data.argmax(axis=1)
        active = None
    choice = sample.P.data.argmax(axis=1)  # (B, K)
    mags = sample.M.data
    out = x.copy()
    for k in range(k_layers):
        todo = depths > k if active is None else active[:, k]
        if not todo.any():
            continue
        for i, spec in enumerate(reg):
            sel = todo & (choice[:, k] == i)
            if not sel.any():
                continue
            sub = tfm.apply(spec, Tensor(out[sel]), Tensor(mags[sel, i, k]))
            out[sel] = sub.data
    return out


def _detached(phi: PolicyParams) -> PolicyParams:
    return PolicyParams(
        delta=phi.delta.detach(),
        pi=phi.pi.detach(),
        mu=phi.mu.detach(),
        mag_mean=None if phi.mag_mean is None else phi.mag_mean.detach(),
        mag_std=None if phi.mag_std is None else phi.mag_std.detach(),
        gate_logits=None if phi.gate_logits is None else phi.gate_logits.detach(),
        magnitude_dist=phi.magnitude_dist,
        depth_mode=phi.depth_mode,
    )


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass
class ScheduleConfig:
    t_start: float = 1.0
    t_end: float = 0.5
    t_eval: float = 0.1
    sinkhorn_iters: int = 20
    # warm-up thresholds as fractions of the total epochs (50, 65, 80 of 300)
    warmup_mu: float = 50.0 / 300.0
    warmup_pi: float = 65.0 / 300.0
    warmup_delta: float = 80.0 / 300.0

    def __post_init__(self) -> None:
        if not (self.t_start >= self.t_end > 0):
            raise ValueError("need t_start >= t_end > 0")
        if not (0 <= self.warmup_mu <= self.warmup_pi <= self.warmup_delta):
            raise ValueError("warm-up fractions must be ordered mu <= pi <= delta")


def anneal_temperature(epoch: float, total_epochs: float, sched: ScheduleConfig) -> float:
    """Exponential interpolation from t_start at epoch 0 to t_end at the end."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    frac = epoch / total_epochs if total_epochs else 1.0
    return float(sched.t_start * (sched.t_end / sched.t_start) ** frac)


def warmup_gate(epoch: float, total_epochs: float, sched: ScheduleConfig) -> frozenset[str]:
    """Parameter groups receiving updates at this epoch fraction."""
    frac = epoch / total_epochs if total_epochs else 1.0
    active = set()
    if frac >= sched.warmup_mu:
        active.add("mu")
    if frac >= sched.warmup_pi:
        active.add("pi")
    if frac >= sched.warmup_delta:
        active.add("delta")
    return frozenset(active)


def type_marginals(phi: PolicyParams, t: float, iters: int) -> np.ndarray:
    """Noise-free per-layer distribution over transform types: the truncated
    Sinkhorn normalization of exp(padded logits / t). Columns sum to one."""
    padded = rx.pad_logits(phi.pi.detach())
    with np.errstate(under="ignore"):
        positive = ad.clamp(ad.exp(padded / t), lo=rx.SINKHORN_FLOOR)
    full = rx.sinkhorn_normalize(positive, iters)
    return full.data[:, : phi.max_depth].copy()


def depth_probabilities(phi: PolicyParams) -> np.ndarray:
    if phi.depth_mode == "bernoulli":
        return 1.0 / (1.0 + np.exp(-phi.gate_logits.data))
    z = phi.delta.data - phi.delta.data.max()
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def serialize_policy(phi: PolicyParams, sched: ScheduleConfig) -> str:
    names = [s.name for s in tfm.registry()[: phi.num_types]]
    doc = {
        "version": POLICY_VERSION,
        "num_types": phi.num_types,
        "max_depth": phi.max_depth,
        "transform_names": names,
        "delta": phi.delta.data.tolist(),
        "pi": phi.pi.data.tolist(),
        "mu_low": phi.mu.data[..., 0].tolist(),
        "mu_high": phi.mu.data[..., 1].tolist(),
        "temperature_eval": sched.t_eval,
        "sinkhorn_iters": sched.sinkhorn_iters,
    }
    if phi.magnitude_dist == "gaussian":
        doc["magnitude_dist"] = "gaussian"
        doc["mag_mean"] = phi.mag_mean.data.tolist()
        doc["mag_std"] = phi.mag_std.data.tolist()
    if phi.depth_mode == "bernoulli":
        doc["depth_mode"] = "bernoulli"
        doc["gate_logits"] = phi.gate_logits.data.tolist()
    return json.dumps(doc, indent=1)


def _require(doc: dict, key: str):
    if key not in doc:
        raise PolicyFormatError(f"missing field: {key}")
    return doc[key]


def deserialize_policy(text: str) -> tuple[PolicyParams, ScheduleConfig]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise PolicyFormatError(f"not valid JSON: {err}") from err
    if not isinstance(doc, dict):
        raise PolicyFormatError("policy document must be a JSON object")
    version = _require(doc, "version")
    if version != POLICY_VERSION:
        raise PolicyFormatError(f"unsupported version {version!r}, expected '1'")
    n = int(_require(doc, "num_types"))
    k = int(_require(doc, "max_depth"))
    names = _require(doc, "transform_names")
    if len(names) != n:
        raise PolicyFormatError(f"transform_names has {len(names)} entries, expected {n}")
    delta = np.asarray(_require(doc, "delta"), dtype=np.float64)
    pi = np.asarray(_require(doc, "pi"), dtype=np.float64)
    mu_low = np.asarray(_require(doc, "mu_low"), dtype=np.float64)
    mu_high = np.asarray(_require(doc, "mu_high"), dtype=np.float64)
    if delta.shape != (k + 1,):
        raise PolicyFormatError(f"delta shape {delta.shape}, expected ({k + 1},)")
    for nm, arr in (("pi", pi), ("mu_low", mu_low), ("mu_high", mu_high)):
        if arr.shape != (n, k):
            raise PolicyFormatError(f"{nm} shape {arr.shape}, expected ({n}, {k})")
    mu = np.stack([mu_low, mu_high], axis=-1)
    phi = PolicyParams(
        delta=Tensor(delta, requires_grad=True),
        pi=Tensor(pi, requires_grad=True),
        mu=Tensor(mu, requires_grad=True),
        magnitude_dist=doc.get("magnitude_dist", "uniform"),
        depth_mode=doc.get("depth_mode", "categorical"),
    )
    if phi.magnitude_dist == "gaussian":
        phi.mag_mean = Tensor(np.asarray(_require(doc, "mag_mean"), dtype=np.float64),
                              requires_grad=True)
        phi.mag_std = Tensor(np.asarray(_require(doc, "mag_std"), dtype=np.float64),
                             requires_grad=True)
    if phi.depth_mode == "bernoulli":
        phi.gate_logits = Tensor(np.asarray(_require(doc, "gate_logits"), dtype=np.float64),
                                 requires_grad=True)
    sched = ScheduleConfig(
        t_eval=float(_require(doc, "temperature_eval")),
        sinkhorn_iters=int(_require(doc, "sinkhorn_iters")),
    )
    return phi, sched
