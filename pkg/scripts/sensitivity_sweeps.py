"""Channel-count and contiguous-scale sensitivity sweeps at desk scale.

Thin wrapper over the ``sweep-channels`` and ``sweep-scales`` subcommands;
each sweep writes its own run directory with a sweep.csv summary.
"""
import argparse
import sys

from msacnn.cli import run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sweeps")
    ap.add_argument("--train-epochs", type=int, default=20)
    ap.add_argument("--channel-order", default="0,2,1,3", help="channels added in this order")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    common = ["--subjects", "6", "--epochs-per-subject", "40", "--channels", "4", "--train-epochs",
              str(args.train_epochs), "--batch-size", "32", "--folds", "3", "--repetitions", "1",
              "--jobs", str(args.jobs)]
    code = run(["sweep-channels", *common, "--channel-order", args.channel_order, "--out", f"{args.out}/channels"])
    code = code or run(["sweep-scales", *common, "--out", f"{args.out}/scales"])
    for name in ("channels", "scales"):
        print(f"{args.out}/{name}/sweep.csv")
    sys.exit(code)


if __name__ == "__main__":
    main()
