"""Command-line surface: search, eval, ablate, inspect.

All randomness in a run derives from --seed through named streams (see
``augsearch.rng``), so identical flags reproduce identical outputs. File
writes go through a temp-file-then-rename so reruns never corrupt earlier
results. Exit codes: 0 success, 2 configuration error, 3 runtime or numeric
failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import tempfile

import numpy as np

from . import autodiff as ad
from . import bilevel as bl
from . import data as dat
from . import policy as pol
from . import relaxations as rx
from . import rng as rngmod
from . import transforms as tfm

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-augsearch-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _format_csv(header: list[str], rows: list[list]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def load_dataset(args) -> dat.LabeledDataset:
    if args.dataset == "synth-rot":
        n = args.subset or 1000
        ds = dat.synth_rotation_task(n, args.seed)
    else:
        if not os.path.exists(args.dataset):
            raise ConfigError(f"dataset path not found: {args.dataset}")
        ds = dat.load_raw_dataset(args.dataset, args.format)
        if args.subset:
            ds = dat.subset(ds, args.subset, args.seed)
    return ds


def _parse_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line (expected key=value): {line!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Config-file values fill in only flags the user left at their default."""
    if not getattr(args, "config", None):
        return
    values = _parse_config_file(args.config)
    sub = parser._augsearch_subparsers[args.command]
    actions = {a.dest: a for a in sub._actions}
    for key, raw in values.items():
        if key not in actions:
            raise ConfigError(f"unknown config key: {key}")
        action = actions[key]
        if getattr(args, key) == action.default:
            if action.type is not None:
                parsed = action.type(raw)
            elif isinstance(action.default, bool):
                parsed = raw.lower() in ("1", "true", "yes")
            else:
                parsed = raw
            setattr(args, key, parsed)


def _shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default="synth-rot",
                   help="dataset path, or 'synth-rot' for the synthetic task")
    p.add_argument("--format", default="simple-container",
                   choices=["cifar-binary", "simple-container"])
    p.add_argument("--subset", type=int, default=None,
                   help="class-balanced subset size")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--workers", type=int, default=1,
                   help="cap on internal fan-out; results are worker-count independent")
    p.add_argument("--out", default=None, help="output path")
    p.add_argument("--config", default=None, help="key=value config file; flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augsearch",
                                     description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("search", help="bilevel policy search")
    _shared_flags(ps)
    ps.add_argument("--max-depth", type=int, default=7)
    ps.add_argument("--sinkhorn-iters", type=int, default=20)
    ps.add_argument("--t-start", type=float, default=1.0)
    ps.add_argument("--t-end", type=float, default=0.5)
    ps.add_argument("--t-eval", type=float, default=0.1)
    ps.add_argument("--lr-mu", type=float, default=0.02)
    ps.add_argument("--lr-pi", type=float, default=0.01)
    ps.add_argument("--lr-delta", type=float, default=1.0)
    ps.add_argument("--eta", type=float, default=None,
                    help="virtual step size; defaults to the classifier lr")
    ps.add_argument("--classifier-lr", type=float, default=0.05)
    ps.add_argument("--weight-decay", type=float, default=5e-4)
    ps.add_argument("--hypergrad", choices=["exact-point", "paper-point"],
                    default="exact-point")
    ps.add_argument("--fd-mode", choices=["finite-difference", "one-sided"],
                    default="finite-difference")
    ps.add_argument("--fd-epsilon-scale", type=float, default=0.01)
    ps.add_argument("--freeze", action="append", default=[],
                    choices=["mu", "pi", "delta"],
                    help="freeze a parameter group at initialization (repeatable)")
    ps.add_argument("--warmup-fracs", default=None,
                    help="three comma-separated fractions for mu,pi,delta warm-up")
    ps.add_argument("--magnitude-dist", choices=["uniform", "gaussian"],
                    default="uniform")
    ps.add_argument("--depth-mode", choices=["categorical", "bernoulli"],
                    default="categorical")
    ps.add_argument("--sampling", choices=["per-image", "per-batch"],
                    default="per-image")
    ps.add_argument("--metrics-out", default=None,
                    help="metrics CSV path (default: <out>.metrics.csv)")

    pe = sub.add_parser("eval", help="train from scratch with a fixed policy")
    _shared_flags(pe)
    pe.add_argument("--policy", required=True,
                    help="policy file, or 'none' for the no-augmentation baseline")
    pe.add_argument("--t-eval", type=float, default=None,
                    help="override the policy file's evaluation temperature")
    pe.add_argument("--seeds", default=None,
                    help="comma-separated evaluation seeds (default: --seed)")

    pa = sub.add_parser("ablate", help="ablation statistics")
    _shared_flags(pa)
    pa.add_argument("--ablation", required=True,
                    choices=["repetition-rate", "fixed-depth", "sampling-mode"])
    pa.add_argument("--max-depth", type=int, default=7)
    pa.add_argument("--sinkhorn-iters", type=int, default=20)
    pa.add_argument("--t-eval", type=float, default=0.1)
    pa.add_argument("--samples", type=int, default=10000,
                    help="draw count for repetition-rate")
    pa.add_argument("--seeds", default=None,
                    help="comma-separated seeds for accuracy ablations")
    pa.add_argument("--resamplings", type=int, default=200,
                    help="gradient resamplings for sampling-mode")

    pi = sub.add_parser("inspect", help="summarize a policy file")
    pi.add_argument("--policy", required=True)
    parser._augsearch_subparsers = {"search": ps, "eval": pe, "ablate": pa,
                                    "inspect": pi}
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _search_config(args) -> bl.SearchConfig:
    for name in ("epochs", "batch_size", "max_depth", "sinkhorn_iters"):
        if getattr(args, name) <= 0:
            raise ConfigError(f"--{name.replace('_', '-')} must be positive")
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    sched_kw = dict(
        t_start=args.t_start, t_end=args.t_end, t_eval=args.t_eval,
        sinkhorn_iters=args.sinkhorn_iters,
    )
    if args.warmup_fracs:
        parts = args.warmup_fracs.split(",")
        if len(parts) != 3:
            raise ConfigError("--warmup-fracs needs three comma-separated fractions")
        sched_kw.update(
            warmup_mu=float(parts[0]), warmup_pi=float(parts[1]),
            warmup_delta=float(parts[2]),
        )
    try:
        sched = pol.ScheduleConfig(**sched_kw)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return bl.SearchConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        max_depth=args.max_depth,
        seed=args.seed,
        sched=sched,
        sgd=bl.SGDConfig(lr=args.classifier_lr, weight_decay=args.weight_decay),
        hyper=bl.HypergradConfig(
            mode=args.fd_mode, fd_epsilon_scale=args.fd_epsilon_scale,
            grad_point=args.hypergrad,
        ),
        lr_mu=args.lr_mu, lr_pi=args.lr_pi, lr_delta=args.lr_delta,
        eta=args.eta,
        freeze=frozenset(args.freeze),
        magnitude_dist=args.magnitude_dist,
        depth_mode=args.depth_mode,
        sampling=args.sampling,
    )


def cmd_search(args) -> int:
    if not args.out:
        raise ConfigError("search requires --out for the policy file")
    cfg = _search_config(args)
    ds = load_dataset(args)
    result = bl.run_search(cfg, ds)
    atomic_write(args.out, pol.serialize_policy(result.phi, result.sched))
    metrics_path = args.metrics_out or args.out + ".metrics.csv"
    atomic_write(metrics_path, _format_csv(result.header, result.rows))
    print(f"wrote policy to {args.out} and metrics to {metrics_path}")
    return EXIT_OK


def _eval_seeds(args) -> list[int]:
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
        except ValueError as err:
            raise ConfigError(f"bad --seeds: {args.seeds!r}") from err
    else:
        seeds = [args.seed]
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def _student_t_halfwidth(values: list[float]) -> float:
    if len(values) < 2:
        return float("nan")
    from scipy import stats

    sem = np.std(values, ddof=1) / math.sqrt(len(values))
    return float(stats.t.ppf(0.975, len(values) - 1) * sem)


def cmd_eval(args) -> int:
    seeds = _eval_seeds(args)
    ds = load_dataset(args)
    train, val = dat.split_half(ds, args.seed)
    if args.policy == "none":
        phi, sched = None, pol.ScheduleConfig()
    else:
        if not os.path.exists(args.policy):
            raise ConfigError(f"policy file not found: {args.policy}")
        with open(args.policy) as fh:
            try:
                phi, sched = pol.deserialize_policy(fh.read())
            except pol.PolicyFormatError as err:
                raise ConfigError(f"bad policy file: {err}") from err
    if args.t_eval is not None:
        sched.t_eval = args.t_eval
    accs = []
    rows = []
    sgd = bl.SGDConfig()
    for seed in seeds:
        acc = bl.train_with_policy(train, val, phi, sched, args.epochs,
                                   args.batch_size, seed, sgd=sgd)
        accs.append(acc)
        rows.append([seed, acc])
        print(f"seed {seed}: accuracy {acc:.4f}")
    mean = float(np.mean(accs))
    half = _student_t_halfwidth(accs)
    print(f"mean {mean:.4f} ci95_halfwidth {half:.4f}")
    if args.out:
        header = ["seed", "accuracy"]
        rows_out = rows + [["mean", mean], ["ci95_halfwidth", half]]
        atomic_write(args.out, _format_csv(header, rows_out))
        print(f"wrote report to {args.out}")
    return EXIT_OK


def _repetition_rate(sampler: str, iters: int, t: float, n: int, k: int,
                     draws: int, rng) -> tuple[float, float]:
    """Fraction of draws whose hardened columns repeat a transform."""
    reps = np.empty(draws, dtype=bool)
    done = 0
    chunk = 2000
    phi_pi = ad.Tensor(np.zeros((n, k)))
    while done < draws:
        b = min(chunk, draws - done)
        if sampler == "sinkhorn":
            pi_b = ad.broadcast_to(ad.reshape(phi_pi, (1, n, k)), (b, n, k))
            _, hard = rx.gumbel_sinkhorn_sample(pi_b, t, iters, rng=rng)
            choice = hard.data.argmax(axis=1)
        else:
            g = rx.sample_gumbel((b, k, n), rng)
            choice = g.argmax(axis=2)
        srt = np.sort(choice, axis=1)
        reps[done : done + b] = (srt[:, 1:] == srt[:, :-1]).any(axis=1)
        done += b
    rate = float(reps.mean())
    return rate, float(reps.std())


def cmd_ablate(args) -> int:
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    rows: list[list] = []
    if args.ablation == "repetition-rate":
        if args.samples < 1:
            raise ConfigError("--samples must be positive")
        header = ["ablation", "sampler", "sinkhorn_iters", "t", "samples", "mean", "std"]
        n, k = 14, args.max_depth
        for sampler in ("sinkhorn", "independent-softmax"):
            for iters in (1, 5, 10, 20):
                rng = rngmod.stream(args.seed, f"ablate-rep-{sampler}-{iters}")
                mean, std = _repetition_rate(sampler, iters, args.t_eval, n, k,
                                             args.samples, rng)
                rows.append(["repetition-rate", sampler, iters, args.t_eval,
                             args.samples, mean, std])
    elif args.ablation == "fixed-depth":
        header = ["ablation", "depth"] + ["accuracy"]
        seeds = _eval_seeds(args)
        ds = load_dataset(args)
        for depth in range(1, args.max_depth + 1):
            forced = np.full(args.max_depth + 1, -1e9)
            forced[depth] = 0.0
            for seed in seeds:
                cfg = _ablate_search_config(args, seed,
                                            freeze=frozenset({"delta"}),
                                            init_delta=forced)
                result = bl.run_search(cfg, ds)
                train, val = dat.split_half(ds, seed)
                acc = bl.train_with_policy(train, val, result.phi, result.sched,
                                           args.epochs, args.batch_size, seed)
                rows.append(["fixed-depth", depth, acc])
    else:  # sampling-mode
        header = ["ablation", "mode", "grad_variance"] + ["accuracy"]
        seeds = _eval_seeds(args)
        ds = load_dataset(args)
        for mode in ("per-image", "per-batch"):
            variance = _sampling_mode_variance(args, ds, mode)
            for seed in seeds:
                cfg = _ablate_search_config(args, seed, sampling=mode)
                result = bl.run_search(cfg, ds)
                train, val = dat.split_half(ds, seed)
                acc = bl.train_with_policy(train, val, result.phi, result.sched,
                                           args.epochs, args.batch_size, seed)
                rows.append(["sampling-mode", mode, variance, acc])
    text = _format_csv(header, rows)
    if args.out:
        atomic_write(args.out, text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _ablate_search_config(args, seed: int, **overrides) -> bl.SearchConfig:
    if args.epochs <= 0 or args.batch_size <= 0 or args.max_depth <= 0:
        raise ConfigError("epochs, batch-size and max-depth must be positive")
    cfg = bl.SearchConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        max_depth=args.max_depth,
        seed=seed,
        sched=pol.ScheduleConfig(t_eval=args.t_eval,
                                 sinkhorn_iters=args.sinkhorn_iters),
    )
    return bl.SearchConfig(**{**cfg.__dict__, **overrides})


def _sampling_mode_variance(args, ds: dat.LabeledDataset, mode: str) -> float:
    train, _ = dat.split_half(ds, args.seed)
    phi = pol.init_policy(14, args.max_depth)
    model = dat.TinyClassifier(in_shape=train.images.shape[1:],
                               classes=train.class_count, seed=args.seed)
    rng = rngmod.stream(args.seed, f"ablate-var-{mode}")
    batch = min(args.batch_size, len(train))
    return bl.policy_grad_variance(
        model, phi, train.images[:batch], train.labels[:batch],
        t=args.t_eval, iters=args.sinkhorn_iters, rng=rng, mode=mode,
        resamplings=args.resamplings,
    )


def cmd_inspect(args) -> int:
    if not os.path.exists(args.policy):
        raise ConfigError(f"policy file not found: {args.policy}")
    with open(args.policy) as fh:
        try:
            phi, sched = pol.deserialize_policy(fh.read())
        except pol.PolicyFormatError as err:
            raise ConfigError(f"bad policy file: {err}") from err
    names = [s.name for s in tfm.registry()]
    depth = pol.depth_probabilities(phi)
    print(f"policy: {phi.num_types} transform types, max depth {phi.max_depth}, "
          f"eval temperature {sched.t_eval}, sinkhorn iterations {sched.sinkhorn_iters}")
    print("depth distribution:")
    for k, p in enumerate(depth):
        print(f"  depth {k}: {p:.4f}")
    marg = pol.type_marginals(phi, sched.t_eval, sched.sinkhorn_iters)
    sig_l = 1.0 / (1.0 + np.exp(-phi.mu.data[..., 0]))
    sig_u = 1.0 / (1.0 + np.exp(-phi.mu.data[..., 1]))
    for k in range(phi.max_depth):
        top = np.argsort(marg[:, k])[::-1][:3]
        parts = []
        for i in top:
            lo, hi = sorted((sig_l[i, k], sig_u[i, k]))
            parts.append(f"{names[i]} p={marg[i, k]:.3f} mag=[{lo:.3f},{hi:.3f}]")
        print(f"layer {k + 1}: " + "; ".join(parts))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    ad.tune_allocator()
    try:
        _apply_config_file(args, parser)
        if args.command == "search":
            return cmd_search(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        return cmd_inspect(args)
    except (ConfigError, pol.PolicyFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ad.NonFiniteError, ad.ShapeMismatchError, ad.TapeError, ValueError,
            OSError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
