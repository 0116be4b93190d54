import hashlib

import numpy as np
import pytest

from msacnn.cli import run
from msacnn.dataset import generate_synthetic, load_epochset, save_epochset
from msacnn.model import load_checkpoint, save_checkpoint, build, make_config

TINY = ["--subjects", "3", "--epochs-per-subject", "5", "--channels", "2", "--train-epochs", "1",
        "--batch-size", "8", "--folds", "3", "--repetitions", "1"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_params_prints_golden(capsys):
    assert run(["params", "--size", "small", "--mode", "multivariate", "--channels", "9"]) == 0
    assert capsys.readouterr().out.strip() == "10,583"


def test_params_variant(capsys):
    assert run(["params", "--channels", "9", "--variant", "no_tcm"]) == 0
    assert capsys.readouterr().out.strip() == "7,911"


def test_flops(capsys):
    assert run(["flops", "--channels", "9"]) == 0
    assert capsys.readouterr().out.endswith("MFLOPs\n")


def test_unknown_flag_is_usage_error(capsys):
    assert run(["params", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"]) == 1


def test_configuration_error_exits_one(capsys):
    assert run(["params", "--mode", "univariate", "--channels", "3", "--variant", "multimodal"]) == 1
    assert "error:" in capsys.readouterr().err


def test_gen_data_twice_is_identical(tmp_path):
    args = ["gen-data", "--seed", "7", "--subjects", "2", "--epochs-per-subject", "4", "--channels", "4"]
    assert run(args + ["--out", str(tmp_path / "a.eps")]) == 0
    assert run(args + ["--out", str(tmp_path / "b.eps")]) == 0
    assert _sha(tmp_path / "a.eps") == _sha(tmp_path / "b.eps")
    assert len(load_epochset(tmp_path / "a.eps")) == 8


def test_missing_data_file_exits_one(tmp_path):
    assert run(["cv", "--data", str(tmp_path / "none.eps"), "--out", str(tmp_path / "r")]) == 1


def test_corrupt_data_file_exits_one(tmp_path):
    (tmp_path / "bad.eps").write_bytes(b"nope")
    assert run(["cv", "--data", str(tmp_path / "bad.eps"), "--out", str(tmp_path / "r")]) == 1


def test_cv_run_directory_contents(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["cv", *TINY, "--out", str(out)]) == 0
    for name in ("run_config.txt", "dataset_fingerprint.txt", "folds.csv", "summary.txt", "manifest.txt",
                 "checkpoints/fold_r0_f0.msc", "checkpoints/fold_r0_f2.history.csv"):
        assert (out / name).is_file(), name
    listed = {}
    for line in (out / "manifest.txt").read_text().splitlines():
        digest, rel = line.split("  ")
        listed[rel] = digest
    files = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {"manifest.txt"}
    assert set(listed) == files
    assert all(_sha(out / rel) == d for rel, d in listed.items())
    assert "accuracy=" in capsys.readouterr().out


def test_config_file_reproduces_run(tmp_path):
    a = tmp_path / "a"
    assert run(["cv", *TINY, "--out", str(a)]) == 0
    first = (a / "manifest.txt").read_text()
    (tmp_path / "cfg.txt").write_text((a / "run_config.txt").read_text())
    for p in sorted(a.rglob("*"), reverse=True):
        p.unlink() if p.is_file() else p.rmdir()
    assert run(["cv", "--config", str(tmp_path / "cfg.txt")]) == 0
    assert (a / "manifest.txt").read_text() == first


def test_flags_override_config_file(tmp_path):
    (tmp_path / "cfg.txt").write_text("channels=9\nsize=large\n")
    assert run(["params", "--config", str(tmp_path / "cfg.txt"), "--size", "small"]) == 0


def test_config_file_unknown_key(tmp_path, capsys):
    (tmp_path / "cfg.txt").write_text("channels=9\nwidth=3\n")
    assert run(["params", "--config", str(tmp_path / "cfg.txt")]) == 1
    assert "width" in capsys.readouterr().err


def test_config_file_for_other_command(tmp_path):
    (tmp_path / "cfg.txt").write_text("command=cv\n")
    assert run(["params", "--config", str(tmp_path / "cfg.txt")]) == 1


def test_jobs_do_not_change_outputs(tmp_path):
    assert run(["cv", *TINY, "--out", str(tmp_path / "a")]) == 0
    assert run(["cv", *TINY, "--jobs", "2", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "folds.csv").read_bytes() == (tmp_path / "b" / "folds.csv").read_bytes()


def test_ablate_prints_variant_count_first(tmp_path, capsys):
    args = ["ablate", "--variant", "no_tcm", "--size", "small", "--channels", "9", "--subjects", "3",
            "--epochs-per-subject", "5", "--train-epochs", "1", "--folds", "3", "--repetitions", "1"]
    assert run(args + ["--out", str(tmp_path / "ab")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("parameters: 7,911")
    text = (tmp_path / "ab" / "comparison.txt").read_text()
    assert "t=" in text and "p=" in text
    assert (tmp_path / "ab" / "baseline" / "folds.csv").is_file()
    assert (tmp_path / "ab" / "variant" / "folds.csv").is_file()


def test_ablate_without_variant(tmp_path):
    assert run(["ablate", *TINY, "--out", str(tmp_path / "x")]) == 1


def test_sweep_channels(tmp_path):
    args = ["sweep-channels", *TINY, "--channels", "3", "--channel-order", "2,0,1", "--max-channels", "2"]
    assert run(args + ["--out", str(tmp_path / "s")]) == 0
    rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "channels,parameters,accuracy_mean,accuracy_std,fold_sem"
    assert [r.split(",")[0] for r in rows[1:]] == ["2", "2 0"]


def test_sweep_scales_covers_all_contiguous_sets(tmp_path):
    assert run(["sweep-scales", *TINY, "--out", str(tmp_path / "s")]) == 0
    rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()[1:]
    labels = [r.split(",")[0] for r in rows]
    assert labels == ["1", "2", "3", "4", "1-2", "2-3", "3-4", "1-2-3", "2-3-4", "1-2-3-4"]
    # the filter budget keeps parameters fixed across scale sets
    assert len({r.split(",")[1] for r in rows}) == 1


def test_train_and_attention(tmp_path, capsys):
    run_dir = tmp_path / "t"
    assert run(["train", "--subjects", "2", "--epochs-per-subject", "5", "--channels", "2", "--train-epochs", "2",
                "--out", str(run_dir)]) == 0
    hist = (run_dir / "history.csv").read_text().splitlines()
    assert len(hist) == 3
    assert run(["attention", "--checkpoint", str(run_dir / "model.msc"), "--probe-seed", "3", "--head", "mean",
                "--out", str(tmp_path / "trace.csv")]) == 0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "token_index,time_seconds,incoming,outgoing" and len(lines) == 376
    assert "probe_event_seconds=" in capsys.readouterr().out
    assert run(["attention", "--checkpoint", str(run_dir / "model.msc"), "--head", "5",
                "--out", str(tmp_path / "t2.csv")]) == 1


def test_attention_on_model_without_tcm(tmp_path):
    model = build(make_config("small", "multivariate", 2, no_tcm=True))
    save_checkpoint(model, tmp_path / "m.msc")
    assert run(["attention", "--checkpoint", str(tmp_path / "m.msc"), "--out", str(tmp_path / "t.csv")]) == 1


def test_preprocess_resample_and_select(tmp_path):
    save_epochset(generate_synthetic(0, 2, 3, 3), tmp_path / "in.eps")
    assert run(["preprocess", "--data", str(tmp_path / "in.eps"), "--cutoff", "30", "--resample", "50",
                "--select", "EEG1,2", "--out", str(tmp_path / "out.eps")]) == 0
    es = load_epochset(tmp_path / "out.eps")
    assert es.epochs.shape == (6, 2, 1500)
    assert es.sample_rate_hz == 50.0
    assert es.channel_names == ["EEG1", "EEG2"]


def test_ingest(tmp_path):
    rng = np.random.default_rng(0)
    np.savetxt(tmp_path / "s0.csv", rng.normal(size=(6000, 2)), delimiter=",", header="C3,C4", comments="")
    (tmp_path / "labels.csv").write_text("subject,label\n0,0\n0,2\n")
    assert run(["ingest", "--signals", str(tmp_path / "s0.csv"), "--labels", str(tmp_path / "labels.csv"),
                "--sample-rate", "100", "--out", str(tmp_path / "o.eps")]) == 0
    assert load_epochset(tmp_path / "o.eps").labels.tolist() == [0, 2]


def test_checkpoint_from_cv_loads(tmp_path):
    assert run(["cv", *TINY, "--out", str(tmp_path / "r")]) == 0
    model = load_checkpoint(tmp_path / "r" / "checkpoints" / "fold_r0_f1.msc")
    assert model.config.n_ch == 2
