"""End-to-end demo on the synthetic rotation task.

Searches a policy, evaluates it against the no-augmentation baseline, and
prints the learned depth distribution and per-layer type marginals. Expect
roughly ten minutes on two CPU cores with the default settings.
"""

import argparse
import os
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from augsearch import cli


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=2)
    parser.add_argument("--subset", type=int, default=1000)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--max-depth", type=int, default=4)
    parser.add_argument("--outdir", default=None)
    args = parser.parse_args()

    outdir = args.outdir or tempfile.mkdtemp(prefix="augsearch-demo-")
    policy = os.path.join(outdir, "policy.json")
    report = os.path.join(outdir, "eval.csv")

    common = ["--dataset", "synth-rot", "--subset", str(args.subset),
              "--batch-size", "32", "--seed", str(args.seed)]
    print("== search ==")
    rc = cli.main(["search", *common, "--epochs", str(args.epochs),
                   "--max-depth", str(args.max_depth),
                   "--warmup-fracs", "0.10,0.15,0.55",
                   "--out", policy])
    if rc:
        return rc
    print("== found policy ==")
    cli.main(["inspect", "--policy", policy])
    print("== eval: searched policy ==")
    cli.main(["eval", *common, "--epochs", "20", "--policy", policy,
              "--out", report])
    print("== eval: no-augmentation baseline ==")
    cli.main(["eval", *common, "--epochs", "20", "--policy", "none"])
    print(f"outputs in {outdir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
