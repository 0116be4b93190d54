"""Acceptance suite: one verdict line per criterion, printed in the terminal summary.

Each test records its verdict before asserting, so a failing criterion still
shows up as a FAIL line with the measured numbers.
"""
import math
import time

import numpy as np
import pytest
from test_tensor import GRAD_CASES

from conftest import ACCEPTANCE
from msacnn import msm
from msacnn import tensor as tc
from msacnn.cli import run
from msacnn.dataset import generate_synthetic, n2_probe_epoch
from msacnn.evalharness import (
    ConfusionMatrix, accuracy, check_no_leakage, cohens_kappa, macro_f1, make_fold_plan, paired_t_test, run_cv,
)
from msacnn.model import MsaCnnModel, apply_variant, build, flop_estimate, make_config, param_count
from msacnn.sigproc import design_butterworth_lowpass
from msacnn.tcm import trace_from_weights
from msacnn.tensor import Tensor
from msacnn.trainer import TrainConfig, train


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1. parameter goldens

GOLDENS = [
    (("small", "multivariate", 9), None, 10583), (("small", "multivariate", 4), None, 8013),
    (("large", "multivariate", 9), None, 43511), (("large", "multivariate", 4), None, 33261),
    (("small", "univariate", 1), None, 8517), (("large", "univariate", 1), None, 35301),
    (("small", "multimodal", 9), None, 13327), (("small", "multimodal", 4), None, 7517),
    (("large", "multimodal", 9), None, 42599), (("large", "multimodal", 4), None, 29709),
    (("small", "multivariate", 9), "no_tcm", 7911),
] + [(("small", "multivariate", 9), f"no_msm:{s}", 10583) for s in ("I", "II", "III", "IV")]


def test_criterion_1_parameter_goldens():
    t0 = time.perf_counter()
    bad = []
    for args, variant, expected in GOLDENS:
        cfg = make_config(*args)
        cfg = apply_variant(cfg, variant) if variant else cfg
        counted, enumerated = param_count(cfg), build(cfg).parameter_count()
        if not counted == enumerated == expected:
            bad.append(f"{args}/{variant}: {counted}/{enumerated} != {expected}")
    dt = time.perf_counter() - t0
    record(1, not bad and dt < 1.0, f"{len(GOLDENS)} configs, {len(bad)} mismatches {bad}, {dt:.2f} s")


# ---------------------------------------------------------------- 2. FLOP accounting


def test_criterion_2_flop_accounting():
    base = make_config("small", "multivariate", 9)
    f = flop_estimate(base)
    per_scale = [flop_estimate(apply_variant(base, f"no_msm:{s}")) for s in ("I", "II", "III", "IV")]
    within = abs(f - 19.8) <= 0.25 * 19.8
    ordered = all(a > b for a, b in zip(per_scale, per_scale[1:]))
    record(2, within and ordered, f"small 9-ch {f:.2f} MFLOPs (19.8 +- 25%); single scale I..IV "
                                  f"{', '.join(f'{x:.2f}' for x in per_scale)}")


# ---------------------------------------------------------------- 3. gradient suite


def _param_loss(model, name, x, y):
    def f(t):
        params = dict(model.params)
        params[name] = t
        return tc.cross_entropy(MsaCnnModel(model.config, params).logits(x), y)
    return f


def test_criterion_3_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for i, name in enumerate(sorted(GRAD_CASES)):
        f, shape = GRAD_CASES[name]
        worst[name] = tc.grad_check(f, np.random.default_rng(i).normal(size=shape))
    for mode, n_ch in (("multivariate", 9), ("multimodal", 2), ("univariate", 1)):
        model = build(make_config("small", mode, n_ch), seed=7)
        rng = np.random.default_rng(1)
        for p in model.params.values():
            p.data += rng.normal(0, 0.05, p.shape)
        x, y = rng.normal(size=(2, n_ch, 64)), np.array([1, 3])
        for name, p in model.params.items():
            # 1e-6 step: wider steps straddle ReLU/max-pool kinks of the full network
            worst[f"{mode}:{name}"] = tc.grad_check(_param_loss(model, name, x, y), p.data, step=1e-6,
                                                    n_coords=12, seed=len(name))
    key = max(worst, key=worst.get)
    dt = time.perf_counter() - t0
    record(3, worst[key] < 1e-4 and dt < 120, f"{len(worst)} checks, worst {worst[key]:.2e} ({key}), {dt:.1f} s")


# ---------------------------------------------------------------- 4. metric oracles


def _oracle(cm):
    y = np.repeat(np.repeat(np.arange(5), 5), cm.reshape(-1))
    p = np.repeat(np.tile(np.arange(5), 5), cm.reshape(-1))
    n = len(y)
    acc = sum(int(a == b) for a, b in zip(y, p)) / n
    f1 = []
    for c in range(5):
        tp = sum(int(a == c and b == c) for a, b in zip(y, p))
        fp = sum(int(a != c and b == c) for a, b in zip(y, p))
        fn = sum(int(a == c and b != c) for a, b in zip(y, p))
        f1.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    pe = sum((sum(int(a == c) for a in y) / n) * (sum(int(b == c) for b in p) / n) for c in range(5))
    return acc, sum(f1) / 5, (0.0 if pe == 1 else (acc - pe) / (1 - pe))


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        cm = rng.integers(0, 15, size=(5, 5)) * (rng.random((5, 5)) < 0.7)
        cm[rng.integers(5), rng.integers(5)] += 1
        c = ConfusionMatrix(cm)
        worst = max(worst, *(abs(a - b) for a, b in zip((accuracy(c), macro_f1(c), cohens_kappa(c)), _oracle(cm))))
    kappa = cohens_kappa(ConfusionMatrix(np.array([[20, 5], [10, 15]])))
    t_err = 0.0
    for n in (3, 6, 12):
        a, b = rng.normal(0.8, 0.05, n), rng.normal(0.78, 0.05, n)
        d = a - b
        t_err = max(t_err, abs(paired_t_test(a, b).t - d.mean() / (d.std(ddof=1) / math.sqrt(n))))
    ok = worst < 1e-10 and abs(kappa - 0.4) < 1e-12 and t_err < 1e-9
    record(4, ok, f"1000 matrices worst {worst:.1e}; pinned kappa {kappa:.12f}; t-test error {t_err:.1e}")


# ---------------------------------------------------------------- 5. filter contract


def test_criterion_5_filter_contract():
    spec = design_butterworth_lowpass(4, 40.0, 100.0)
    h0, h40 = abs(spec.frequency_response(0.0)), abs(spec.frequency_response(40.0))
    mag = np.abs(spec.frequency_response(np.linspace(0, 50, 5001)))
    monotone = bool(np.all(np.diff(mag) <= 1e-12))
    ok = abs(h0 - 1) <= 1e-9 and abs(h40 - 1 / math.sqrt(2)) <= 1e-6 and monotone
    record(5, ok, f"|H(0)|={h0:.12f} |H(40)|={h40:.9f} monotone={monotone}")


# ---------------------------------------------------------------- 6. structural invariants


def test_criterion_6_structural_invariants():
    model = build(make_config("small", "multivariate", 4), seed=3)
    x = np.random.default_rng(0).normal(size=(3, 4, 3000))
    cap = []
    with tc.no_grad():
        probs = tc.softmax_rows(model.logits(x, capture=cap)).data
    row_err = max(float(np.abs(a.sum(-1) - 1).max()) for a in cap)
    prob_err = float(np.abs(probs.sum(-1) - 1).max())

    plan = model.config.scale_plan
    p = {k: v for k, v in model.params.items() if k.startswith("msm.")}
    lengths = []
    for s in plan.scales:
        z = tc.pool(tc.conv1d_same(tc.pool(Tensor(x[0, :1]), s.p_in, "average"), p[f"msm.scale{s.index}.w"],
                                   p[f"msm.scale{s.index}.b"]), s.p_comp, "max")
        lengths.append(z.shape[-1])
    merged = msm.msm_forward(plan, Tensor(x), p).shape[-1]

    ds = generate_synthetic(3, 6, 3, 2)
    fold_plan = make_fold_plan(ds.subject_ids, 3, 2, seed=5)
    fired = 0
    for f in range(3):
        check_no_leakage(fold_plan.train_subjects(f), fold_plan.test_subjects(f))
    try:
        run_cv(make_config("small", "multivariate", 2), ds, fold_plan, TrainConfig(epochs=1, batch_size=8))
    except AssertionError:
        fired = 1
    ok = row_err < 1e-6 and prob_err < 1e-6 and set(lengths) == {375} and merged == 375 and not fired
    record(6, ok, f"attention row error {row_err:.1e}; probability error {prob_err:.1e}; "
                  f"scale lengths {lengths} merged {merged}; leakage fired {fired}")


# ---------------------------------------------------------------- 7. desk-scale learnability

# Protocol shared by all three variants: synthetic seed 0, 6 subjects x 40 epochs,
# 4 channels, fold seed 0, model seed 0, 40 training epochs, mini-batches of 32.
C7_TRAIN_EPOCHS = 40
C7_BATCH = 32


@pytest.fixture(scope="module")
def desk_cv():
    ds = generate_synthetic(0, 6, 40, 4)
    plan = make_fold_plan(ds.subject_ids, 3, 2, seed=0)
    base = make_config("small", "multivariate", 4)
    out = {}
    t0 = time.perf_counter()
    for name, cfg in (("full", base), ("no_tcm", apply_variant(base, "no_tcm")),
                      ("univariate", apply_variant(base, "univariate"))):
        tcfg = TrainConfig.for_model(cfg, epochs=C7_TRAIN_EPOCHS, batch_size=C7_BATCH, seed=0)
        reports, agg = run_cv(cfg, ds, plan, tcfg)
        out[name] = (reports, agg.mean["accuracy"])
    return out, time.perf_counter() - t0


def test_criterion_7_desk_learnability(desk_cv):
    res, dt = desk_cv
    full, no_tcm, uni = (res[k][1] for k in ("full", "no_tcm", "univariate"))
    same_folds = all([(r.repetition, r.fold, r.test_subjects) for r in res[k][0]]
                     == [(r.repetition, r.fold, r.test_subjects) for r in res["full"][0]] for k in res)
    ok = full >= 0.80 and no_tcm < full and uni < full and same_folds and dt < 900
    record(7, ok, f"aggregate accuracy full {full:.4f}, no_tcm {no_tcm:.4f}, univariate {uni:.4f} "
                  f"(chance 0.20); same folds {same_folds}; {dt:.0f} s")


# ---------------------------------------------------------------- 8. attention-trace sanity

PROBE_SEEDS = range(100, 108)
TOKEN_SECONDS = 0.08  # 8 samples per token at 100 Hz


def test_criterion_8_attention_trace():
    cfg = make_config("small", "multivariate", 4)
    model, _ = train(build(cfg, seed=0), generate_synthetic(0, 6, 40, 4), TrainConfig.for_model(cfg, seed=0))
    hits, argmaxes = 0, []
    for s in PROBE_SEEDS:
        epoch, (start, end) = n2_probe_epoch(s, 4)
        j = trace_from_weights(model.astype(np.float64).attention_weights(epoch)[0], None).argmax_incoming
        lo, hi = start / TOKEN_SECONDS - 2, end / TOKEN_SECONDS + 2
        hits += lo <= j <= hi
        argmaxes.append(j)
    ok = hits > len(PROBE_SEEDS) // 2
    record(8, ok, f"head-mean incoming argmax {argmaxes}; event tokens {lo + 2:.1f}-{hi - 2:.1f} +- 2; "
                  f"{hits}/{len(PROBE_SEEDS)} probes inside (majority required)")


# ---------------------------------------------------------------- 9. determinism


def _snapshot(run_dir):
    return {p.relative_to(run_dir).as_posix(): p.read_bytes() for p in sorted(run_dir.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    args = ["cv", "--subjects", "3", "--epochs-per-subject", "10", "--channels", "2", "--train-epochs", "3",
            "--batch-size", "8", "--folds", "3", "--repetitions", "2", "--seed", "4", "--out", str(tmp_path / "run")]
    assert run(args) == 0
    first = _snapshot(tmp_path / "run")
    (tmp_path / "run").rename(tmp_path / "first")
    assert run(["cv", "--config", str(tmp_path / "first" / "run_config.txt")]) == 0
    second = _snapshot(tmp_path / "run")
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    n_ckpt = sum(k.endswith(".msc") for k in first)
    ok = not differing and n_ckpt == 6 and "manifest.txt" in first and "folds.csv" in first
    record(9, ok, f"{len(first)} files ({n_ckpt} checkpoints, folds.csv, manifest.txt) compared byte for byte "
                  f"across two executions of one RunConfig; differing {differing}")
