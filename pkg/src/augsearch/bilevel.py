"""Alternating one-step bilevel optimization of classifier and policy.

Each step takes one SGD step on the classifier parameters and one
hypergradient step on the policy parameters. The hypergradient of the
validation loss after a virtual inner step,

    grad_phi L_val(theta - eta * grad_theta L_train(theta, phi)),

is approximated by a finite-difference Hessian-vector product: with
v = grad_theta L_val at the probe point and eps = scale / ||v||,

    -eta * [grad_phi L_train(theta + eps v) - grad_phi L_train(theta - eps v)] / (2 eps).

The same sampled augmentation noise is reused across the probe evaluations,
removing sampling noise from the difference quotient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import policy as pol
from . import rng as rngmod
from .autodiff import Tape, Tensor


@dataclass
class SGDConfig:
    lr: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    cosine: bool = True


class SGD:
    """SGD with momentum, optional Nesterov lookahead and weight decay."""

    def __init__(self, params: list[Tensor], cfg: SGDConfig):
        self.params = params
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, grads: dict[Tensor, np.ndarray], lr: float | None = None) -> None:
        lr = self.cfg.lr if lr is None else lr
        m = self.cfg.momentum
        for p, v in zip(self.params, self.velocity):
            g = grads.get(p)
            if g is None:
                continue
            if self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * p.data
            v *= m
            v += g
            step = g + m * v if self.cfg.nesterov else v
            p.data = p.data - lr * step


class Adam:
    def __init__(self, param: Tensor, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.param = param
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros_like(param.data)
        self.v = np.zeros_like(param.data)
        self.t = 0

    def step(self, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        self.param.data = self.param.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class HypergradConfig:
    mode: str = "finite-difference"  # central differences, or "one-sided"
    fd_epsilon_scale: float = 0.01
    grad_point: str = "exact-point"  # v at the virtual point; "paper-point" uses theta

    def __post_init__(self) -> None:
        if self.fd_epsilon_scale <= 0:
            raise ValueError("fd_epsilon_scale must be positive")
        if self.mode not in ("finite-difference", "one-sided"):
            raise ValueError(f"unknown hypergradient mode '{self.mode}'")
        if self.grad_point not in ("exact-point", "paper-point"):
            raise ValueError(f"unknown gradient point '{self.grad_point}'")


def train_loss(model, phi, images, labels, t, iters, noise=None, rng=None,
               mode="per-image", reg=None) -> Tensor:
    """Cross-entropy on policy-augmented images; differentiable in theta and phi."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    if noise is None:
        draws = len(labels) if mode == "per-image" else 1
        noise = pol.draw_policy_noise(phi, draws, rng)
    sample = pol.sample_policy_batch(phi, t, iters, noise)
    augmented = pol.apply_policy_batch_sample(ad.as_tensor(images), sample, reg)
    return dat.cross_entropy(model.forward(augmented), labels)


def val_loss(model, images, labels) -> Tensor:
    """Plain cross-entropy, no augmentation."""
    return dat.cross_entropy(model.forward(images), labels)


@dataclass
class SearchState:
    model: dat.TinyClassifier
    phi: pol.PolicyParams
    theta_opt: SGD
    phi_opts: dict[str, Adam]
    eta: float
    hyper: HypergradConfig
    sched: pol.ScheduleConfig
    sampling: str = "per-image"
    skipped_steps: int = 0


def inner_step(state: SearchState, images, labels, t, rng, lr=None, reg=None) -> float:
    with Tape() as tape:
        loss = train_loss(state.model, state.phi, images, labels, t,
                          state.sched.sinkhorn_iters, rng=rng,
                          mode=state.sampling, reg=reg)
    grads = tape.backward(loss)
    state.theta_opt.step(grads, lr=lr)
    return loss.item()


def fd_hypergradient(
    params: list[Tensor],
    phi_tensors: dict[str, Tensor],
    train_eval,
    val_eval,
    eta: float,
    cfg: HypergradConfig,
) -> tuple[dict[str, np.ndarray] | None, float]:
    """Finite-difference estimate of the hypergradient of the validation
    loss after a virtual inner step, with respect to each phi tensor.

    ``train_eval``/``val_eval`` build the respective loss at the parameters'
    current values; ``train_eval`` must reuse identical sampling noise on
    every call. Returns (per-group hypergradient, validation loss); the
    gradient map is None when the validation gradient vanishes.
    """

    def phi_grads_at(theta_values) -> dict[str, np.ndarray]:
        for p, val in zip(params, theta_values):
            p.data = val
        with Tape() as tape:
            loss = train_eval()
        grads = tape.backward(loss)
        return {
            name: grads.get(t, np.zeros_like(t.data)) for name, t in phi_tensors.items()
        }

    theta0 = [p.data for p in params]
    with Tape() as tape:
        base_loss = train_eval()
    base_grads = tape.backward(base_loss)
    d_theta = [base_grads.get(p, np.zeros_like(p.data)) for p in params]

    if cfg.grad_point == "exact-point":
        probe_point = [th - eta * g for th, g in zip(theta0, d_theta)]
    else:
        probe_point = theta0
    for p, val in zip(params, probe_point):
        p.data = val
    with Tape() as tape:
        lv = val_eval()
    val_grads = tape.backward(lv)
    v = [val_grads.get(p, np.zeros_like(p.data)) for p in params]
    vnorm = math.sqrt(sum(float((vi * vi).sum()) for vi in v))
    if vnorm == 0.0:
        for p, val in zip(params, theta0):
            p.data = val
        return None, lv.item()

    eps = cfg.fd_epsilon_scale / vnorm
    plus = phi_grads_at([th + eps * vi for th, vi in zip(theta0, v)])
    if cfg.mode == "finite-difference":
        minus = phi_grads_at([th - eps * vi for th, vi in zip(theta0, v)])
        hyper = {name: -eta * (plus[name] - minus[name]) / (2 * eps) for name in plus}
    else:
        base_phi = {
            name: base_grads.get(t, np.zeros_like(t.data))
            for name, t in phi_tensors.items()
        }
        hyper = {name: -eta * (plus[name] - base_phi[name]) / eps for name in plus}
    for p, val in zip(params, theta0):
        p.data = val
    return hyper, lv.item()


def hypergradient_step(state: SearchState, train_batch, val_batch, t,
                       active_groups, rng, reg=None) -> float:
    """One finite-difference hypergradient step on the active phi groups.

    Returns the validation loss at the probe point. A zero validation
    gradient skips the step (counted on the state, not an error).
    """
    model, phi = state.model, state.phi
    draws = len(train_batch[1]) if state.sampling == "per-image" else 1
    noise = pol.draw_policy_noise(phi, draws, rng)

    def train_eval():
        return train_loss(model, phi, train_batch[0], train_batch[1], t,
                          state.sched.sinkhorn_iters, noise=noise,
                          mode=state.sampling, reg=reg)

    def val_eval():
        return val_loss(model, val_batch[0], val_batch[1])

    hyper, lv = fd_hypergradient(
        model.params(), phi.groups(), train_eval, val_eval, state.eta, state.hyper
    )
    if hyper is None:
        state.skipped_steps += 1
        return lv
    for name, opt in state.phi_opts.items():
        gate = "mu" if name == "mu_std" else name
        if gate in active_groups:
            opt.step(hyper[name])
    return lv


# ---------------------------------------------------------------------------
# search loop
# ---------------------------------------------------------------------------


@dataclass
class SearchConfig:
    epochs: int = 30
    batch_size: int = 32
    max_depth: int = 7
    seed: int = 1
    sched: pol.ScheduleConfig = field(default_factory=pol.ScheduleConfig)
    sgd: SGDConfig = field(default_factory=SGDConfig)
    hyper: HypergradConfig = field(default_factory=HypergradConfig)
    lr_mu: float = 0.02
    lr_pi: float = 0.01
    lr_delta: float = 1.0
    eta: float | None = None  # defaults to the classifier learning rate
    freeze: frozenset = frozenset()
    magnitude_dist: str = "uniform"
    depth_mode: str = "categorical"
    sampling: str = "per-image"
    channels: tuple = (8, 16)
    init_delta: np.ndarray | None = None  # fixed-depth ablation override


@dataclass
class SearchResult:
    phi: pol.PolicyParams
    sched: pol.ScheduleConfig
    header: list[str]
    rows: list[list[float]]
    model: dat.TinyClassifier


def metrics_header(max_depth: int) -> list[str]:
    return (
        ["epoch", "t", "train_loss", "val_loss"]
        + [f"depth_p{k}" for k in range(max_depth + 1)]
        + [f"perm_entropy_{k}" for k in range(1, max_depth + 1)]
        + ["mean_sigma_l", "mean_sigma_u"]
    )


def _column_entropy(marginals: np.ndarray) -> np.ndarray:
    p = np.clip(marginals, 1e-12, None)
    return -(p * np.log(p)).sum(axis=0)


def run_search(cfg: SearchConfig, dataset: dat.LabeledDataset) -> SearchResult:
    train, val = dat.split_half(dataset, cfg.seed)
    if len(train) < cfg.batch_size:
        raise ValueError(
            f"training half ({len(train)}) smaller than one batch ({cfg.batch_size})"
        )
    reg = None  # full transform registry
    phi = pol.init_policy(14, cfg.max_depth, cfg.magnitude_dist, cfg.depth_mode)
    if cfg.init_delta is not None:
        phi.delta.data = np.asarray(cfg.init_delta, dtype=np.float64)
    model = dat.TinyClassifier(
        in_shape=train.images.shape[1:], classes=train.class_count,
        seed=cfg.seed, channels=cfg.channels,
    )
    eta = cfg.sgd.lr if cfg.eta is None else cfg.eta  # re-tracked per step below
    lrs = {"mu": cfg.lr_mu, "pi": cfg.lr_pi, "delta": cfg.lr_delta, "mu_std": cfg.lr_mu}
    state = SearchState(
        model=model,
        phi=phi,
        theta_opt=SGD(model.params(), cfg.sgd),
        phi_opts={name: Adam(tensor, lrs[name]) for name, tensor in phi.groups().items()},
        eta=eta,
        hyper=cfg.hyper,
        sched=cfg.sched,
        sampling=cfg.sampling,
    )
    batch_rng = rngmod.stream(cfg.seed, "batches")
    train_rng = rngmod.stream(cfg.seed, "policy-train")
    hyper_rng = rngmod.stream(cfg.seed, "policy-hyper")

    steps = max(1, len(train) // cfg.batch_size)
    header = metrics_header(cfg.max_depth)
    rows: list[list[float]] = []
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(len(train))
        val_order = batch_rng.permutation(len(val))
        losses = []
        for step in range(steps):
            frac = epoch + step / steps
            t = pol.anneal_temperature(frac, cfg.epochs, cfg.sched)
            active = pol.warmup_gate(frac, cfg.epochs, cfg.sched) - set(cfg.freeze)
            lr = _cosine_lr(cfg.sgd, frac, cfg.epochs)
            tb = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            vb = val_order[(step * cfg.batch_size) % len(val) :][: cfg.batch_size]
            if len(vb) < cfg.batch_size:
                vb = val_order[: cfg.batch_size]
            state.eta = lr if cfg.eta is None else cfg.eta
            losses.append(
                inner_step(state, train.images[tb], train.labels[tb], t, train_rng, lr=lr, reg=reg)
            )
            if active:
                hypergradient_step(
                    state,
                    (train.images[tb], train.labels[tb]),
                    (val.images[vb], val.labels[vb]),
                    t, active, hyper_rng, reg=reg,
                )
        phi.check_finite()
        for p in model.params():
            if not np.all(np.isfinite(p.data)):
                raise ad.NonFiniteError("classifier parameters became non-finite")
        t_end = pol.anneal_temperature(epoch + 1, cfg.epochs, cfg.sched)
        lv = val_loss(model, val.images, val.labels).item()
        marg = pol.type_marginals(phi, t_end, cfg.sched.sinkhorn_iters)
        sig_l = 1.0 / (1.0 + np.exp(-phi.mu.data[..., 0]))
        sig_u = 1.0 / (1.0 + np.exp(-phi.mu.data[..., 1]))
        rows.append(
            [float(epoch), t_end, float(np.mean(losses)), lv]
            + pol.depth_probabilities(phi).tolist()
            + _column_entropy(marg).tolist()
            + [float(sig_l.mean()), float(sig_u.mean())]
        )
    return SearchResult(phi=phi, sched=cfg.sched, header=header, rows=rows, model=model)


def _cosine_lr(sgd: SGDConfig, epoch: float, total: float) -> float:
    if not sgd.cosine:
        return sgd.lr
    return sgd.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


# ---------------------------------------------------------------------------
# evaluation-phase training and diagnostics
# ---------------------------------------------------------------------------


def train_with_policy(
    train: dat.LabeledDataset,
    val: dat.LabeledDataset,
    phi: pol.PolicyParams | None,
    sched: pol.ScheduleConfig,
    epochs: int,
    batch_size: int,
    seed: int,
    sgd: SGDConfig | None = None,
    channels: tuple = (8, 16),
) -> float:
    """Train a fresh classifier with a fixed policy; return val accuracy."""
    sgd = sgd or SGDConfig()
    model = dat.TinyClassifier(
        in_shape=train.images.shape[1:], classes=train.class_count,
        seed=seed, channels=channels,
    )
    opt = SGD(model.params(), sgd)
    batch_rng = rngmod.stream(seed, "eval-batches")
    aug_rng = rngmod.stream(seed, "eval-policy")
    steps = max(1, len(train) // batch_size)
    for epoch in range(epochs):
        order = batch_rng.permutation(len(train))
        for step in range(steps):
            idx = order[step * batch_size : (step + 1) * batch_size]
            images = train.images[idx]
            if phi is not None:
                images = pol.apply_policy_eval(
                    images, phi, sched.t_eval, sched.sinkhorn_iters, aug_rng
                )
            lr = _cosine_lr(sgd, epoch + step / steps, epochs)
            with Tape() as tape:
                loss = dat.cross_entropy(model.forward(images), train.labels[idx])
            opt.step(tape.backward(loss), lr=lr)
    logits = model.forward(val.images)
    return dat.accuracy(logits.data, val.labels)


def policy_grad_variance(
    model,
    phi: pol.PolicyParams,
    images,
    labels,
    t: float,
    iters: int,
    rng: np.random.Generator,
    mode: str,
    resamplings: int = 200,
) -> float:
    """Mean per-coordinate variance of the phi gradient estimate under
    repeated augmentation sampling of a fixed batch."""
    stacks = []
    for _ in range(resamplings):
        with Tape() as tape:
            loss = train_loss(model, phi, images, labels, t, iters, rng=rng, mode=mode)
        grads = tape.backward(loss)
        parts = []
        for _, tensor in sorted(phi.groups().items()):
            g = grads.get(tensor)
            parts.append((np.zeros_like(tensor.data) if g is None else g).ravel())
        stacks.append(np.concatenate(parts))
    return float(np.stack(stacks).var(axis=0).mean())
