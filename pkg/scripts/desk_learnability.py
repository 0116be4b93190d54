"""Desk-scale learnability: full model against the -TCM and univariate ablations.

Runs subject-wise 3-fold, 2-repetition cross-validation of each variant on
the same folds of the synthetic 6-subject, 4-channel set and prints per-fold
accuracies, aggregate metrics and a paired t-test on fold-mean accuracy.
"""
import argparse
import time

from msacnn.dataset import generate_synthetic
from msacnn.evalharness import fold_mean_accuracy, make_fold_plan, paired_t_test, run_cv
from msacnn.model import apply_variant, make_config, param_count
from msacnn.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-epochs", type=int, default=40)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--epochs-per-subject", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    ds = generate_synthetic(args.seed, 6, args.epochs_per_subject, 4)
    plan = make_fold_plan(ds.subject_ids, 3, 2, seed=args.seed)
    base = make_config("small", "multivariate", 4)
    folds = {}
    for name in ("full", "no_tcm", "univariate"):
        cfg = base if name == "full" else apply_variant(base, name)
        tcfg = TrainConfig.for_model(cfg, epochs=args.train_epochs, batch_size=args.batch_size, seed=args.seed)
        t0 = time.perf_counter()
        reports, agg = run_cv(cfg, ds, plan, tcfg, jobs=args.jobs)
        folds[name] = fold_mean_accuracy(reports)
        print(f"{name:>10} ({param_count(cfg):,} parameters, {time.perf_counter() - t0:.0f} s)")
        print("   folds " + " ".join(f"{r.accuracy:.3f}" for r in reports))
        print("   " + agg.summary_text().replace("\n", "\n   ").rstrip())
    for name in ("no_tcm", "univariate"):
        t = paired_t_test(folds["full"], folds[name])
        print(f"full vs {name}: t={t.t:.3f} p={t.p:.4f} (df={t.df})")


if __name__ == "__main__":
    main()
