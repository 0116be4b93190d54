"""Command-line entry point: data preparation, training, cross-validation, sweeps, reports.

Every option can also come from a flat ``key=value`` file given with
``--config``; keys are the long flag names without the leading dashes and
flags on the command line win. Run directories hold the resolved
``run_config.txt``, which can be fed back through ``--config`` to repeat a
run bit for bit.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import evalharness as ev
from .dataset import (
    EPOCH_SECONDS, EpochSet, generate_synthetic, ingest_csv, load_epochset, n2_probe_epoch, save_epochset,
)
from .errors import ConfigurationError, DataError, InvariantError, MsaCnnError, UsageError
from .model import (
    ModelConfig, apply_variant, build, flop_estimate, kv_dumps, kv_loads, load_checkpoint, make_config,
    param_count, save_checkpoint,
)
from .msm import scale_plan_from_indices
from .sigproc import lowpass_channels, resample_to
from .tcm import trace_from_weights
from .trainer import TrainConfig, train

# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_data(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="epoch store (.eps); omit to generate synthetic data")
    g.add_argument("--synthetic-seed", type=int, default=0)
    g.add_argument("--subjects", type=int, default=6)
    g.add_argument("--epochs-per-subject", type=int, default=40)
    g.add_argument("--data-channels", type=int, default=None,
                   help="channels of generated synthetic data (default: --channels)")
    g.add_argument("--channel-order", type=_int_list, default=None,
                   help="comma-separated channel indices; the model uses the first --channels of them")


def _add_model(p, channels_default=4):
    g = p.add_argument_group("model")
    g.add_argument("--size", choices=("small", "large"), default="small")
    g.add_argument("--mode", choices=("univariate", "multivariate", "multimodal"), default="multivariate")
    g.add_argument("--channels", type=int, default=channels_default, help="number of input channels")
    g.add_argument("--scales", type=_int_list, default=[1, 2, 3, 4])
    g.add_argument("--variant", default=None, help="rescaled, multimodal, univariate, no_tcm or no_msm:<scale>")


def _add_train(p):
    g = p.add_argument_group("training")
    g.add_argument("--train-epochs", type=int, default=100)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--lr", type=float, default=None, help="backbone learning rate (default by model size)")
    g.add_argument("--head-lr", type=float, default=None, help="TCM + output learning rate")
    g.add_argument("--weight-decay", type=float, default=1e-4)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--decoupled-weight-decay", action="store_true")
    g.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    g.add_argument("--seed", type=int, default=0)


def _add_cv(p):
    g = p.add_argument_group("cross-validation")
    g.add_argument("--folds", type=int, default=3)
    g.add_argument("--repetitions", type=int, default=2)
    g.add_argument("--fold-seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msacnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key=value file of option defaults")
        return p

    p = cmd("gen-data", "write a synthetic epoch store")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--epochs-per-subject", type=int, default=40)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--sample-rate", type=float, default=100.0)
    p.add_argument("--out", default="synthetic.eps")

    p = cmd("ingest", "convert per-subject signal CSVs plus a label CSV into an epoch store")
    p.add_argument("--signals", nargs="+", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--sample-rate", type=float, required=True)
    p.add_argument("--cutoff", type=float, default=40.0)
    p.add_argument("--out", required=True)

    p = cmd("preprocess", "low-pass, resample and select channels of an epoch store")
    p.add_argument("--data", required=True)
    p.add_argument("--cutoff", type=float, default=None)
    p.add_argument("--resample", type=float, default=None, help="target sample rate in Hz")
    p.add_argument("--select", default=None, help="comma-separated channel names or indices")
    p.add_argument("--out", required=True)

    for name, text in (("train", "train one model on a whole data set"),
                       ("cv", "subject-wise repeated k-fold cross-validation"),
                       ("ablate", "cross-validate a model and one variant on the same folds"),
                       ("sweep-channels", "cross-validate with a growing number of input channels"),
                       ("sweep-scales", "cross-validate every contiguous multi-scale configuration")):
        p = cmd(name, text)
        _add_data(p)
        _add_model(p)
        _add_train(p)
        if name != "train":
            _add_cv(p)
        p.add_argument("--out", required=True, help="run directory")
    sub.choices["sweep-channels"].add_argument("--max-channels", type=int, default=None)

    for name, text in (("params", "print the parameter count"), ("flops", "print the multiply-accumulate estimate")):
        p = cmd(name, text)
        _add_model(p, channels_default=9)
        p.add_argument("--samples", type=int, default=3000, help="epoch length in samples")

    p = cmd("attention", "export incoming/outgoing attention of one epoch as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="epoch store holding the sample")
    p.add_argument("--index", type=int, default=0, help="epoch index within --data")
    p.add_argument("--probe-seed", type=int, default=0, help="synthetic N2 probe when --data is absent")
    p.add_argument("--head", default="0", help="head index or 'mean'")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------- config files


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(map(str, value))
    return str(value)


def _coerce(action: argparse.Action, raw: str):
    if raw == "none":
        return None
    if isinstance(action, argparse._StoreTrueAction):
        if raw not in ("true", "false"):
            raise ConfigurationError(f"{action.dest}: expected true/false, got {raw!r}")
        return raw == "true"
    if action.nargs == "+":
        return raw.split(",")
    try:
        value = action.type(raw) if action.type else raw
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise ConfigurationError(f"{action.dest}: {exc}") from None
    if action.choices and value not in action.choices:
        raise ConfigurationError(f"{action.dest}: {value!r} not in {sorted(action.choices)}")
    return value


def _config_path(argv) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv) -> argparse.Namespace:
    argv = list(argv)
    parser = build_parser()
    path = _config_path(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    choices = parser._subparsers._group_actions[0].choices
    if path is not None and command in choices:
        sub = choices[command]
        actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        kv = kv_loads(Path(path).read_text())
        if kv.pop("command", command) != command:
            raise ConfigurationError(f"{path} was written for another command")
        defaults = {}
        for key, raw in kv.items():
            dest = key.replace("-", "_")
            if dest not in actions:
                raise ConfigurationError(f"{path}: unknown key {key!r} for {command}")
            defaults[dest] = _coerce(actions[dest], raw)
            actions[dest].required = False  # supplied by the file, flags may still override
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def run_config_text(args: argparse.Namespace) -> str:
    kv = {"command": args.command}
    for key, value in vars(args).items():
        if key not in ("command", "config", "jobs"):  # outputs do not depend on --jobs
            kv[key.replace("_", "-")] = _format(value)
    return kv_dumps(kv)


# ---------------------------------------------------------------- shared helpers


def _model_config(args, n_ch=None) -> ModelConfig:
    n_ch = args.channels if n_ch is None else n_ch
    if args.mode == "univariate":
        n_ch = 1
    cfg = make_config(args.size, args.mode, n_ch, scales=args.scales, dropout=getattr(args, "dropout", 0.1))
    return apply_variant(cfg, args.variant) if args.variant else cfg


def _train_config(args, cfg: ModelConfig) -> TrainConfig:
    kw = dict(epochs=args.train_epochs, batch_size=args.batch_size, weight_decay=args.weight_decay,
              dropout=args.dropout, decoupled_weight_decay=args.decoupled_weight_decay, dtype=args.dtype,
              seed=args.seed)
    if args.lr is not None:
        kw["base_lr"] = args.lr
    if args.head_lr is not None:
        kw["head_lr"] = args.head_lr
    return TrainConfig.for_model(cfg, **kw)


def _load_data(args) -> EpochSet:
    if args.data:
        return load_epochset(args.data)
    n_ch = args.data_channels if args.data_channels is not None else args.channels
    return generate_synthetic(args.synthetic_seed, args.subjects, args.epochs_per_subject, n_ch)


def _select(ds: EpochSet, args, n: int) -> EpochSet:
    order = args.channel_order if args.channel_order is not None else list(range(ds.n_ch))
    if n > len(order):
        raise ConfigurationError(f"{n} channels requested but only {len(order)} available")
    if any(not 0 <= c < ds.n_ch for c in order):
        raise ConfigurationError(f"channel order {order} out of range for {ds.n_ch} channels")
    return ds.select_channels(order[:n])


def _write_manifest(run_dir: Path) -> None:
    lines = []
    for path in sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "manifest.txt"):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        lines.append(f"{digest}  {path.relative_to(run_dir).as_posix()}")
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _start_run(args) -> Path:
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run_config.txt").write_text(run_config_text(args))
    return run_dir


def _cv_block(run_dir: Path, cfg: ModelConfig, ds: EpochSet, args, plan, out=print):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "dataset_fingerprint.txt").write_text(ds.fingerprint() + "\n")
    (run_dir / "model_config.txt").write_text(kv_dumps(cfg.to_kv()))
    tcfg = _train_config(args, cfg)
    (run_dir / "train_config.txt").write_text(kv_dumps(tcfg.to_kv()))
    ckpt = run_dir / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    reports, agg = ev.run_cv(cfg, ds, plan, tcfg, jobs=args.jobs, checkpoint_dir=ckpt)
    ev.reports_to_csv(reports, run_dir / "folds.csv")
    summary = f"parameters={param_count(cfg)}\n" + agg.summary_text()
    (run_dir / "summary.txt").write_text(summary)
    for r in reports:
        out(f"  repetition {r.repetition} fold {r.fold}: accuracy={r.accuracy:.4f}")
    out(f"  accuracy={agg.mean['accuracy']:.4f} +- {agg.std['accuracy']:.4f}")
    return reports, agg


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    es = generate_synthetic(args.seed, args.subjects, args.epochs_per_subject, args.channels, args.sample_rate)
    save_epochset(es, args.out)
    print(f"wrote {len(es)} epochs ({es.n_subjects} subjects, {es.n_ch} channels) to {args.out}")
    print(f"sha256={es.fingerprint()}")
    return 0


def cmd_ingest(args) -> int:
    es = ingest_csv(args.signals, args.labels, args.sample_rate, cutoff_hz=args.cutoff)
    save_epochset(es, args.out)
    print(f"wrote {len(es)} epochs ({es.n_subjects} subjects, {es.n_ch} channels) to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    """Filter/resample each subject's concatenated epochs, then re-cut into 30 s epochs."""
    es = load_epochset(args.data)
    if args.select:
        es = es.select_channels([int(t) if t.strip().isdigit() else t.strip() for t in args.select.split(",")])
    fs = es.sample_rate_hz
    to_hz = args.resample or fs
    t_len = int(round(EPOCH_SECONDS * to_hz))
    epochs, labels, subjects = [], [], []
    for s in range(es.n_subjects):
        idx = np.flatnonzero(es.subject_ids == s)
        sig = np.concatenate(list(es.epochs[idx]), axis=1).astype(np.float64)
        if args.cutoff is not None:
            sig = lowpass_channels(sig, fs, args.cutoff)
        if to_hz != fs:
            sig = np.stack([resample_to(row, fs, to_hz) for row in sig])
        n_ep = min(len(idx), sig.shape[1] // t_len)
        epochs += [sig[:, e * t_len:(e + 1) * t_len] for e in range(n_ep)]
        labels += es.labels[idx[:n_ep]].tolist()
        subjects += [s] * n_ep
    out = EpochSet(np.stack(epochs), labels, subjects, es.channel_names, to_hz)
    save_epochset(out, args.out)
    print(f"wrote {len(out)} epochs at {to_hz:g} Hz to {args.out}")
    return 0


def cmd_params(args) -> int:
    cfg = _model_config(args)
    print(f"{param_count(cfg):,}")
    return 0


def cmd_flops(args) -> int:
    cfg = _model_config(args)
    print(f"{flop_estimate(cfg, args.samples):.2f} MFLOPs")
    return 0


def cmd_train(args) -> int:
    run_dir = _start_run(args)
    cfg = _model_config(args)
    ds = _select(_load_data(args), args, cfg.n_ch)
    (run_dir / "dataset_fingerprint.txt").write_text(ds.fingerprint() + "\n")
    print(f"parameters: {param_count(cfg):,}")
    tcfg = _train_config(args, cfg)
    model, history = train(build(cfg, seed=args.seed), ds, tcfg,
                           progress=lambda e, loss, acc: print(f"  epoch {e}: loss={loss:.4f} accuracy={acc:.4f}"))
    save_checkpoint(model, run_dir / "model.msc")
    history.to_csv(run_dir / "history.csv")
    (run_dir / "summary.txt").write_text(
        f"parameters={param_count(cfg)}\nfinal_loss={history.mean_loss[-1]!r}\n"
        f"final_train_accuracy={history.train_accuracy[-1]!r}\n")
    _write_manifest(run_dir)
    return 0


def cmd_cv(args) -> int:
    run_dir = _start_run(args)
    cfg = _model_config(args)
    ds = _select(_load_data(args), args, cfg.n_ch)
    plan = ev.make_fold_plan(ds.subject_ids, args.folds, args.repetitions, args.fold_seed)
    print(f"parameters: {param_count(cfg):,}")
    _cv_block(run_dir, cfg, ds, args, plan)
    _write_manifest(run_dir)
    return 0


def cmd_ablate(args) -> int:
    if not args.variant:
        raise ConfigurationError("ablate needs --variant")
    variant = args.variant
    args.variant = None
    base = _model_config(args)
    args.variant = variant
    var = apply_variant(base, variant)
    print(f"parameters: {param_count(var):,} ({variant}; baseline {param_count(base):,})")
    run_dir = _start_run(args)
    data = _load_data(args)
    ds = _select(data, args, base.n_ch)
    plan = ev.make_fold_plan(ds.subject_ids, args.folds, args.repetitions, args.fold_seed)
    print("baseline")
    base_reports, base_agg = _cv_block(run_dir / "baseline", base, ds, args, plan)
    print(variant)
    var_reports, var_agg = _cv_block(run_dir / "variant", var, _select(data, args, var.n_ch), args, plan)
    lines = [f"baseline_accuracy={base_agg.mean['accuracy']!r}", f"variant_accuracy={var_agg.mean['accuracy']!r}"]
    if args.folds >= 2:
        t = ev.paired_t_test(ev.fold_mean_accuracy(base_reports), ev.fold_mean_accuracy(var_reports))
        lines += [f"t={t.t!r}", f"p={t.p!r}", f"stderr={t.stderr!r}", f"df={t.df}"]
    (run_dir / "comparison.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    _write_manifest(run_dir)
    return 0


def _sweep_row(label, cfg, reports, agg) -> list[str]:
    folds = ev.fold_mean_accuracy(reports)
    sem = float(np.std(folds, ddof=1) / np.sqrt(len(folds))) if len(folds) > 1 else 0.0
    return [label, str(param_count(cfg)), repr(agg.mean["accuracy"]), repr(agg.std["accuracy"]), repr(sem)]


def cmd_sweep_channels(args) -> int:
    run_dir = _start_run(args)
    data = _load_data(args)
    order = args.channel_order if args.channel_order is not None else list(range(data.n_ch))
    top = min(args.max_channels or len(order), len(order))
    rows = [["channels", "parameters", "accuracy_mean", "accuracy_std", "fold_sem"]]
    plan = ev.make_fold_plan(data.subject_ids, args.folds, args.repetitions, args.fold_seed)
    for n in range(1, top + 1):
        # multivariate configuration for every count, including a single channel
        cfg = make_config(args.size, "multivariate", n, scales=args.scales, dropout=args.dropout)
        print(f"{n} channel(s): {order[:n]}")
        reports, agg = _cv_block(run_dir / f"n{n}", cfg, _select(data, args, n), args, plan)
        rows.append(_sweep_row(" ".join(map(str, order[:n])), cfg, reports, agg))
    (run_dir / "sweep.csv").write_text("\n".join(",".join(r) for r in rows) + "\n")
    _write_manifest(run_dir)
    return 0


def cmd_sweep_scales(args) -> int:
    run_dir = _start_run(args)
    data = _load_data(args)
    base = _model_config(args)
    ds = _select(data, args, base.n_ch)
    plan = ev.make_fold_plan(ds.subject_ids, args.folds, args.repetitions, args.fold_seed)
    rows = [["scales", "parameters", "accuracy_mean", "accuracy_std", "fold_sem"]]
    for n in range(1, 5):
        for first in range(1, 6 - n):
            scales = list(range(first, first + n))
            scale_plan_from_indices(scales)  # validates before training
            cfg = make_config(base.size, base.mode, base.n_ch, scales=scales, no_tcm=base.no_tcm,
                              dropout=args.dropout)
            label = "-".join(map(str, scales))
            print(f"scales {label}")
            reports, agg = _cv_block(run_dir / f"scales_{label}", cfg, ds, args, plan)
            rows.append(_sweep_row(label, cfg, reports, agg))
    (run_dir / "sweep.csv").write_text("\n".join(",".join(r) for r in rows) + "\n")
    _write_manifest(run_dir)
    return 0


def cmd_attention(args) -> int:
    model = load_checkpoint(args.checkpoint, dtype=np.float64)
    if args.data:
        es = load_epochset(args.data)
        if not 0 <= args.index < len(es):
            raise UsageError(f"--index {args.index} out of range for {len(es)} epochs")
        epoch, fs, span = es.epochs[args.index][:model.config.n_ch], es.sample_rate_hz, None
    else:
        epoch, span = n2_probe_epoch(args.probe_seed, model.config.n_ch)
        fs = 100.0
    layers = model.attention_weights(epoch)
    if not 0 <= args.layer < len(layers):
        raise UsageError(f"--layer {args.layer} out of range for {len(layers)} layers")
    head = None if args.head == "mean" else int(args.head)
    tr = trace_from_weights(layers[args.layer], head)
    tr.to_csv(args.out, model.config.scale_plan.p_tot, fs)
    t_max = tr.argmax_incoming * model.config.scale_plan.p_tot / fs
    print(f"argmax_incoming={tr.argmax_incoming} time_seconds={t_max:g}")
    if span is not None:
        print(f"probe_event_seconds={span[0]:g}-{span[1]:g}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "ingest": cmd_ingest, "preprocess": cmd_preprocess, "train": cmd_train,
    "cv": cmd_cv, "ablate": cmd_ablate, "sweep-channels": cmd_sweep_channels, "sweep-scales": cmd_sweep_scales,
    "params": cmd_params, "flops": cmd_flops, "attention": cmd_attention,
}


def run(argv=None) -> int:
    """Exit 0 on success, 1 on usage/configuration/data errors, 2 on invariant violations."""
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        return COMMANDS[args.command](args)
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, DataError, UsageError, MsaCnnError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
