"""Subject-wise repeated cross-validation, metrics and paired t-tests."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import N_CLASSES, EpochSet
from .errors import ConfigurationError, InvariantError, UsageError
from .model import ModelConfig, build, save_checkpoint
from .trainer import TrainConfig, train


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    repetitions: int
    assignment: dict[int, int]  # subject -> fold, shared by every repetition
    seed: int = 0

    @property
    def assignments(self) -> list[dict[int, int]]:
        return [self.assignment] * self.repetitions

    def test_subjects(self, fold: int) -> list[int]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def train_subjects(self, fold: int) -> list[int]:
        return sorted(s for s, f in self.assignment.items() if f != fold)


def make_fold_plan(subject_ids, k: int, repetitions: int = 1, seed: int = 0) -> FoldPlan:
    subjects = np.unique(np.asarray(subject_ids))
    if k < 2 or k > len(subjects):
        raise ConfigurationError(f"k={k} folds need between 2 and {len(subjects)} subjects")
    if repetitions < 1:
        raise ConfigurationError("repetitions must be >= 1")
    perm = np.random.default_rng(seed).permutation(subjects)
    assignment = {int(s): f for f, chunk in enumerate(np.array_split(perm, k)) for s in chunk}
    return FoldPlan(k, repetitions, dict(sorted(assignment.items())), seed)


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted

    @classmethod
    def from_predictions(cls, labels, predictions, n_classes: int = N_CLASSES) -> "ConfusionMatrix":
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
        return cls(cm)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn


def _require_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise UsageError("metric undefined for an empty confusion matrix")


def accuracy(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    return float(cm.tp.sum() / cm.total)


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class F1; an undefined class F1 counts as 0."""
    _require_nonempty(cm)
    tp, fp, fn = cm.tp.astype(float), cm.fp, cm.fn
    scores = []
    for i in range(len(tp)):
        if tp[i] + fp[i] == 0 or tp[i] + fn[i] == 0 or tp[i] == 0:
            scores.append(0.0)
            continue
        p, r = tp[i] / (tp[i] + fp[i]), tp[i] / (tp[i] + fn[i])
        scores.append(2 * p * r / (p + r))
    return float(np.mean(scores))


def cohens_kappa(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    n = cm.total
    p_o = cm.tp.sum() / n
    p_e = float((cm.counts.sum(axis=1) * cm.counts.sum(axis=0)).sum()) / (n * n)
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1 - p_e))


METRICS = {"accuracy": accuracy, "macro_f1": macro_f1, "kappa": cohens_kappa}


# ---------------------------------------------------------------- t-test


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise InvariantError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise UsageError(f"x={x} outside [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: int) -> float:
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    stderr: float
    df: int


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on per-fold means; ``t`` is positive when ``a > b``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"paired samples need equal 1-D shapes, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise UsageError("paired t-test needs at least two pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    stderr = sd / math.sqrt(n)
    mean = float(d.mean())
    if stderr == 0.0:
        if np.any(d != 0):
            return TTestResult(math.copysign(math.inf, mean), 0.0, 0.0, n - 1)
        return TTestResult(0.0, 1.0, 0.0, n - 1)
    t = mean / stderr
    return TTestResult(t, t_two_sided_p(t, n - 1), stderr, n - 1)


# ---------------------------------------------------------------- cross-validation


@dataclass
class FoldReport:
    repetition: int
    fold: int
    n_test_samples: int
    confusion: ConfusionMatrix
    accuracy: float
    macro_f1: float
    kappa: float
    test_subjects: tuple[int, ...] = ()


@dataclass
class AggregateReport:
    per_repetition: dict[str, list[float]]
    mean: dict[str, float]
    std: dict[str, float]
    n_reports: int = 0

    def summary_text(self) -> str:
        lines = [f"{m}={self.mean[m]:.4f} +- {self.std[m]:.4f}" for m in METRICS]
        lines.append(f"repetitions={len(self.per_repetition['accuracy'])}")
        lines.append(f"fold_reports={self.n_reports}")
        return "\n".join(lines) + "\n"


def aggregate(reports: list[FoldReport]) -> AggregateReport:
    """Sample-weighted mean over folds per repetition, then mean/std over repetitions."""
    reps = sorted({r.repetition for r in reports})
    per_rep: dict[str, list[float]] = {m: [] for m in METRICS}
    for rep in reps:
        rows = sorted((r for r in reports if r.repetition == rep), key=lambda r: r.fold)
        w = np.array([r.n_test_samples for r in rows], dtype=np.float64)
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in rows])
            per_rep[m].append(float((w * vals).sum() / w.sum()))
    ddof = 1 if len(reps) > 1 else 0
    return AggregateReport(
        per_rep,
        {m: float(np.mean(v)) for m, v in per_rep.items()},
        {m: float(np.std(v, ddof=ddof)) for m, v in per_rep.items()},
        len(reports),
    )


def fold_mean_accuracy(reports: list[FoldReport]) -> np.ndarray:
    """Per-fold accuracy averaged across repetitions (paired t-test input)."""
    folds = sorted({r.fold for r in reports})
    return np.array([np.mean([r.accuracy for r in reports if r.fold == f]) for f in folds])


def job_seed(seed: int, repetition: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, repetition, fold]).generate_state(1)[0])


def check_no_leakage(train_subjects, test_subjects) -> None:
    overlap = set(map(int, train_subjects)) & set(map(int, test_subjects))
    if overlap:
        raise InvariantError(f"subject leakage between train and test: {sorted(overlap)}")


def select_model_channels(model_config: ModelConfig, dataset: EpochSet, channels=None) -> EpochSet:
    """Restrict ``dataset`` to the model's inputs; a one-channel model defaults to channel 0."""
    if channels is not None:
        dataset = dataset.select_channels(channels)
    elif model_config.n_ch == 1 and dataset.n_ch > 1:
        dataset = dataset.select_channels([0])
    if dataset.n_ch != model_config.n_ch:
        raise ConfigurationError(f"model expects {model_config.n_ch} channels, dataset has {dataset.n_ch}")
    return dataset


def run_fold(model_config: ModelConfig, dataset: EpochSet, plan: FoldPlan, train_config: TrainConfig,
             repetition: int, fold: int, return_model: bool = False, channels=None, checkpoint_dir=None):
    dataset = select_model_channels(model_config, dataset, channels)
    test_subj = plan.test_subjects(fold)
    train_mask = np.isin(dataset.subject_ids, plan.train_subjects(fold))
    test_mask = np.isin(dataset.subject_ids, test_subj)
    check_no_leakage(np.unique(dataset.subject_ids[train_mask]), np.unique(dataset.subject_ids[test_mask]))
    seed = job_seed(train_config.seed, repetition, fold)
    cfg = TrainConfig(**{**train_config.__dict__, "seed": seed})
    model = build(model_config, seed=seed)
    model, history = train(model, dataset.subset(train_mask), cfg)
    if checkpoint_dir is not None:
        stem = Path(checkpoint_dir) / f"fold_r{repetition}_f{fold}"
        save_checkpoint(model, stem.with_suffix(".msc"))
        history.to_csv(stem.with_suffix(".history.csv"))
    test = dataset.subset(test_mask)
    preds = model.predict(test.epochs.astype(model.dtype, copy=False))
    cm = ConfusionMatrix.from_predictions(test.labels, preds, model_config.n_classes)
    report = FoldReport(repetition, fold, len(test), cm, accuracy(cm), macro_f1(cm), cohens_kappa(cm),
                        tuple(test_subj))
    return (report, model) if return_model else report


def _run_fold_job(args):
    *head, channels, checkpoint_dir = args
    return run_fold(*head, channels=channels, checkpoint_dir=checkpoint_dir)


def run_cv(model_config: ModelConfig, dataset: EpochSet, plan: FoldPlan, train_config: TrainConfig,
           jobs: int = 1, channels=None, checkpoint_dir=None) -> tuple[list[FoldReport], AggregateReport]:
    """Train and test every (repetition, fold) job; results are ordered by that key.

    With ``checkpoint_dir`` each fold model and its training history are saved there.
    """
    if set(plan.assignment) != set(np.unique(dataset.subject_ids).tolist()):
        raise ConfigurationError("fold plan subjects do not match the dataset")
    keys = [(r, f) for r in range(plan.repetitions) for f in range(plan.k)]
    args = [(model_config, dataset, plan, train_config, r, f, False, channels, checkpoint_dir)
            for r, f in keys]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_run_fold_job, args))
    else:
        reports = [_run_fold_job(a) for a in args]
    reports.sort(key=lambda r: (r.repetition, r.fold))
    return reports, aggregate(reports)


def reports_to_csv(reports: list[FoldReport], path) -> None:
    k = len(reports[0].confusion.counts) if reports else N_CLASSES
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repetition", "fold", "n_test_samples", "test_subjects", "accuracy", "macro_f1", "kappa"]
                   + [f"cm_{i}_{j}" for i in range(k) for j in range(k)])
        for r in reports:
            w.writerow([r.repetition, r.fold, r.n_test_samples, " ".join(map(str, r.test_subjects)),
                        repr(r.accuracy), repr(r.macro_f1), repr(r.kappa)] + r.confusion.counts.ravel().tolist())
