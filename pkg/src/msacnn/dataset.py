"""Epoch storage, CSV ingestion, synthetic polysomnography and class statistics."""
from __future__ import annotations

import csv
import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError
from .sigproc import lowpass_channels

STAGES = ("W", "N1", "N2", "N3", "REM")
N_CLASSES = len(STAGES)
EPOCH_SECONDS = 30
MAGIC = b"EPS1"
VERSION = 1

# class proportions of the ISRUC-S3 corpus (W, N1, N2, N3, REM)
ISRUC_S3_COUNTS = (1674, 1217, 2616, 2016, 1066)
SLEEP_EDF_20_COUNTS = (8285, 2804, 17799, 5703, 7717)


@dataclass
class EpochSet:
    epochs: np.ndarray  # float32 [N_s, N_ch, T]
    labels: np.ndarray  # int64 [N_s]
    subject_ids: np.ndarray  # int64 [N_s]
    channel_names: list[str]
    sample_rate_hz: float

    def __post_init__(self):
        self.epochs = np.ascontiguousarray(self.epochs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        self.channel_names = [str(c) for c in self.channel_names]
        self.sample_rate_hz = float(np.float32(self.sample_rate_hz))
        self.validate()

    def validate(self) -> None:
        if self.epochs.ndim != 3:
            raise DataError(f"epochs must be [N_s, N_ch, T], got shape {self.epochs.shape}")
        n_s, n_ch, t_len = self.epochs.shape
        if n_ch < 1:
            raise DataError("an EpochSet needs at least one channel")
        if len(self.channel_names) != n_ch:
            raise DataError(f"{len(self.channel_names)} channel names for {n_ch} channels")
        if t_len != round(EPOCH_SECONDS * self.sample_rate_hz):
            raise DataError(f"epoch length {t_len} != 30 s at {self.sample_rate_hz} Hz")
        if self.labels.shape != (n_s,) or self.subject_ids.shape != (n_s,):
            raise DataError("labels and subject_ids need one entry per epoch")
        if n_s and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise DataError(f"labels must lie in [0, {N_CLASSES})")
        if n_s and not np.array_equal(np.unique(self.subject_ids), np.arange(self.subject_ids.max() + 1)):
            raise DataError("subject ids must form the contiguous range 0..S-1")
        if not np.all(np.isfinite(self.epochs)):
            raise DataError("epochs contain non-finite values")

    @property
    def n_subjects(self) -> int:
        return int(self.subject_ids.max()) + 1 if len(self.subject_ids) else 0

    @property
    def n_ch(self) -> int:
        return self.epochs.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask_or_idx) -> "EpochSet":
        """Epoch subset; subject ids are kept as-is (callers only use it for splits)."""
        idx = np.flatnonzero(mask_or_idx) if np.asarray(mask_or_idx).dtype == bool else np.asarray(mask_or_idx)
        sub = object.__new__(EpochSet)
        sub.epochs = self.epochs[idx]
        sub.labels = self.labels[idx]
        sub.subject_ids = self.subject_ids[idx]
        sub.channel_names = list(self.channel_names)
        sub.sample_rate_hz = self.sample_rate_hz
        return sub

    def select_channels(self, names_or_idx) -> "EpochSet":
        idx = [self.channel_names.index(c) if isinstance(c, str) else int(c) for c in names_or_idx]
        return EpochSet(self.epochs[:, idx], self.labels, self.subject_ids,
                        [self.channel_names[i] for i in idx], self.sample_rate_hz)

    def fingerprint(self) -> str:
        return hashlib.sha256(epochset_to_bytes(self)).hexdigest()


@dataclass(frozen=True)
class ClassDistribution:
    counts: np.ndarray
    proportions: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def class_distribution(labels_or_set) -> ClassDistribution:
    labels = labels_or_set.labels if isinstance(labels_or_set, EpochSet) else np.asarray(labels_or_set)
    if labels.size == 0:
        raise DataError("class distribution of an empty set")
    counts = np.bincount(labels, minlength=N_CLASSES)
    return ClassDistribution(counts, counts / counts.sum())


def labels_from_counts(counts) -> np.ndarray:
    return np.repeat(np.arange(len(counts)), counts)


# ---------------------------------------------------------------- binary store


def epochset_to_bytes(es: EpochSet) -> bytes:
    n_s, n_ch, t_len = es.epochs.shape
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HHIIIf", VERSION, N_CLASSES, n_s, n_ch, t_len, es.sample_rate_hz))
    for name in es.channel_names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    buf.write(struct.pack("<I", es.n_subjects))
    buf.write(es.subject_ids.astype("<u4").tobytes())
    buf.write(es.labels.astype("u1").tobytes())
    buf.write(es.epochs.astype("<f4").tobytes())
    return buf.getvalue()


def save_epochset(es: EpochSet, path) -> None:
    Path(path).write_bytes(epochset_to_bytes(es))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError(f"truncated {what} at byte offset {self.pos}: need {n} bytes, "
                            f"{len(self.raw) - self.pos} left")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def epochset_from_bytes(raw: bytes) -> EpochSet:
    r = _Reader(raw)
    if raw[:4] != MAGIC:
        raise DataError("bad magic at byte offset 0")
    r.pos = 4
    version, k, n_s, n_ch, t_len, fs = struct.unpack("<HHIIIf", r.take(20, "header"))
    if version != VERSION:
        raise DataError(f"unsupported version {version} at byte offset 4")
    if k != N_CLASSES:
        raise DataError(f"unsupported class count {k} at byte offset 6")
    names = []
    for _ in range(n_ch):
        (length,) = struct.unpack("<H", r.take(2, "channel name length"))
        off = r.pos
        try:
            names.append(r.take(length, "channel name").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise DataError(f"invalid UTF-8 channel name at byte offset {off}") from exc
    (n_subj,) = struct.unpack("<I", r.take(4, "subject count"))
    subj_off = r.pos
    subjects = np.frombuffer(r.take(4 * n_s, "subject ids"), dtype="<u4").astype(np.int64)
    label_off = r.pos
    labels = np.frombuffer(r.take(n_s, "labels"), dtype="u1").astype(np.int64)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} out of range at byte offset {label_off + bad[0]}")
    if n_s and (subjects.max() + 1 != n_subj):
        raise DataError(f"subject count {n_subj} disagrees with ids at byte offset {subj_off}")
    payload = np.frombuffer(r.take(4 * n_s * n_ch * t_len, "payload"), dtype="<f4")
    if r.pos != len(raw):
        raise DataError(f"{len(raw) - r.pos} trailing bytes at byte offset {r.pos}")
    return EpochSet(payload.reshape(n_s, n_ch, t_len).copy(), labels, subjects, names, fs)


def load_epochset(path) -> EpochSet:
    return epochset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- CSV ingestion


def _read_signal_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty signal file")
    header = [h.strip() for h in rows[0]]
    data = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                data[r - 2, c] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c + 1}") from None
    return header, data.T


def _read_label_csv(path) -> dict[int, list[int]]:
    """Label file: header ``subject,label``; rows in epoch order per subject."""
    out: dict[int, list[int]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["subject", "label"]:
            raise DataError(f"{path}: label file needs the header 'subject,label'")
        for r, row in enumerate(reader, start=2):
            try:
                subj, lab = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise DataError(f"{path}: malformed label row {r}") from None
            if not 0 <= lab < N_CLASSES:
                raise DataError(f"{path}: label {lab} out of range at row {r}")
            out.setdefault(subj, []).append(lab)
    return out


def ingest_csv(signal_files, label_file, sample_rate_hz: float, epoch_seconds: int = EPOCH_SECONDS,
               cutoff_hz: float = 40.0) -> EpochSet:
    """Build an EpochSet from one CSV per subject plus a label file.

    Signals are low-pass filtered (4th order Butterworth) when ``cutoff_hz`` is
    below Nyquist, cut into 30 s epochs, and the trailing partial epoch dropped.
    """
    if epoch_seconds != EPOCH_SECONDS:
        raise ConfigurationError("only 30 s epochs are supported")
    labels_by_subject = _read_label_csv(label_file)
    t_len = int(round(epoch_seconds * sample_rate_hz))
    epochs, labels, subjects = [], [], []
    names: list[str] | None = None
    for s, path in enumerate(signal_files):
        header, sig = _read_signal_csv(path)
        if names is None:
            names = header
        elif header != names:
            raise DataError(f"{path}: channel header {header} differs from {names}")
        if cutoff_hz is not None and cutoff_hz < sample_rate_hz / 2:
            sig = lowpass_channels(sig, sample_rate_hz, cutoff_hz)
        n_ep = sig.shape[1] // t_len
        labs = labels_by_subject.get(s, [])
        if len(labs) != n_ep:
            raise DataError(f"subject {s} ({path}): {len(labs)} labels for {n_ep} epochs")
        for e in range(n_ep):
            epochs.append(sig[:, e * t_len:(e + 1) * t_len])
        labels.extend(labs)
        subjects.extend([s] * n_ep)
    extra = set(labels_by_subject) - set(range(len(signal_files)))
    if extra:
        raise DataError(f"labels reference unknown subjects {sorted(extra)}")
    if not epochs:
        raise DataError("no complete epochs found")
    return EpochSet(np.stack(epochs), labels, subjects, names, sample_rate_hz)


# ---------------------------------------------------------------- synthetic data


def channel_role(i: int) -> str:
    return {1: "EOG", 3: "EMG"}.get(i, "EEG")


def _quota(props, n: int) -> np.ndarray:
    raw = np.asarray(props, dtype=np.float64) / np.sum(props) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def _band(rng, t, lo, hi, n_comp=3):
    """Unit-rms sum of random sinusoids with frequencies in [lo, hi]."""
    nyq = 0.45 / (t[1] - t[0]) if len(t) > 1 else hi
    hi = min(hi, nyq)
    lo = min(lo, hi)
    f = rng.uniform(lo, hi, n_comp)
    ph = rng.uniform(0, 2 * np.pi, n_comp)
    w = rng.uniform(0.5, 1.0, n_comp)
    x = (w[:, None] * np.sin(2 * np.pi * f[:, None] * t[None, :] + ph[:, None])).sum(axis=0)
    return x / (np.sqrt(np.mean(x * x)) + 1e-12)


def _spindle(t, onset, dur, freq, amp):
    centre = onset + dur / 2
    env = np.exp(-0.5 * ((t - centre) / (dur / 4)) ** 2)
    return amp * env * np.sin(2 * np.pi * freq * (t - onset))


def _k_complex(t, onset, amp):
    neg = np.exp(-0.5 * ((t - onset - 0.15) / 0.07) ** 2)
    pos = np.exp(-0.5 * ((t - onset - 0.45) / 0.13) ** 2)
    return amp * (-neg + 0.6 * pos)


@dataclass(frozen=True)
class _Profile:
    amp: float
    offsets: np.ndarray
    gains: np.ndarray
    alpha: float
    theta: float
    spindle: float


def _profile(rng, n_ch) -> _Profile:
    return _Profile(
        amp=float(np.exp(rng.normal(0, 0.3))),
        offsets=rng.normal(0, 0.3, n_ch),
        gains=rng.uniform(0.7, 1.3, n_ch),
        alpha=float(rng.uniform(8.5, 11.5)),
        theta=float(rng.uniform(4.5, 6.5)),
        spindle=float(rng.uniform(12.0, 14.0)),
    )


def _eeg_source(stage, rng, t, prof: _Profile, events=True):
    n = len(t)
    noise = rng.normal(0, 1, n)
    if stage == 0:
        return 1.0 * _band(rng, t, prof.alpha - 1, prof.alpha + 1) + 0.6 * noise + 0.2 * _band(rng, t, 15, 25)
    if stage == 1:
        return 0.7 * _band(rng, t, prof.theta - 1, prof.theta + 1) + 0.35 * _band(rng, t, prof.alpha - 1, prof.alpha + 1) \
            + 0.3 * noise
    if stage == 2:  # N1-like background; the graphoelements carry the stage
        x = 0.7 * _band(rng, t, prof.theta - 1, prof.theta + 1) + 0.3 * noise
        if events:
            dur_total = t[-1] + (t[1] - t[0])
            for _ in range(rng.integers(1, 4)):
                d = rng.uniform(0.6, 1.5)
                x += _spindle(t, rng.uniform(0, dur_total - d), d, prof.spindle, 1.5)
            for _ in range(rng.integers(1, 3)):
                x += _k_complex(t, rng.uniform(0, dur_total - 1.0), 3.0)
        return x
    if stage == 3:
        return 2.5 * _band(rng, t, 0.5, 2.0) + 0.3 * _band(rng, t, 4, 7) + 0.2 * noise
    return 0.7 * _band(rng, t, 4, 7, n_comp=5) + 0.2 * noise


def _eye_movements(stage, rng, t):
    fs = 1.0 / (t[1] - t[0])
    n = len(t)
    x = np.zeros(n)
    if stage == 0:  # blinks
        for _ in range(rng.integers(1, 4)):
            c = rng.uniform(0, t[-1])
            x += 3.0 * np.exp(-0.5 * ((t - c) / 0.1) ** 2)
    elif stage == 1 and rng.random() < 0.6:  # slow rolling movements, not in every epoch
        x += 1.5 * np.sin(2 * np.pi * rng.uniform(0.15, 0.35) * t + rng.uniform(0, 2 * np.pi))
    elif stage == 4:  # rapid saccades: step changes with exponential return
        level = np.zeros(n)
        for _ in range(rng.integers(3, 9)):
            i = rng.integers(0, n)
            step = rng.choice([-2.0, 2.0])
            level[i:] += step * np.exp(-(np.arange(n - i) / fs) / 0.8)
        x += level
    return x


_EMG_LEVEL = (1.0, 0.4, 0.4, 0.3, 0.08)


def _muscle(stage, rng, n):
    w = rng.normal(0, 1, n + 1)
    return _EMG_LEVEL[stage] * np.diff(w) / np.sqrt(2)


def _synth_epoch(stage, rng, t, n_ch, prof: _Profile, events=True, blend=None) -> np.ndarray:
    eeg = _eeg_source(stage, rng, t, prof, events)
    if blend is not None:
        other, weight = blend
        eeg = (1 - weight) * eeg + weight * _eeg_source(other, rng, t, prof, events)
    out = np.empty((n_ch, len(t)))
    for c in range(n_ch):
        role = channel_role(c)
        if role == "EOG":
            sig = 0.3 * eeg + _eye_movements(stage, rng, t) + 0.2 * rng.normal(0, 1, len(t))
        elif role == "EMG":
            sig = _muscle(stage, rng, len(t)) + 0.1 * eeg
        else:
            sig = eeg + 0.3 * rng.normal(0, 1, len(t))
        out[c] = prof.amp * prof.gains[c] * sig + prof.offsets[c]
    return out


def default_channel_names(n_ch: int) -> list[str]:
    counters = {"EEG": 0, "EOG": 0, "EMG": 0}
    names = []
    for c in range(n_ch):
        role = channel_role(c)
        counters[role] += 1
        names.append(f"{role}{counters[role]}")
    return names


def generate_synthetic(seed: int, n_subjects: int, epochs_per_subject: int, n_ch: int,
                       sample_rate_hz: float = 100.0, transition_rate: float = 0.2) -> EpochSet:
    """Class-conditional synthetic sleep epochs, deterministic in ``seed``.

    Channel 1 behaves like an EOG and channel 3 like a chin EMG when present;
    all other channels are EEG mixtures of one shared source. A fraction
    ``transition_rate`` of epochs blends in EEG content of a neighbouring stage.
    """
    if min(n_subjects, epochs_per_subject, n_ch) < 1:
        raise ConfigurationError("subject, epoch and channel counts must be >= 1")
    rng = np.random.default_rng(seed)
    t_len = int(round(EPOCH_SECONDS * sample_rate_hz))
    t = np.arange(t_len) / sample_rate_hz
    per_subject = _quota(ISRUC_S3_COUNTS, epochs_per_subject)
    epochs = np.empty((n_subjects * epochs_per_subject, n_ch, t_len), dtype=np.float32)
    labels = np.empty(n_subjects * epochs_per_subject, dtype=np.int64)
    i = 0
    for s in range(n_subjects):
        prof = _profile(rng, n_ch)
        labs = rng.permutation(np.repeat(np.arange(N_CLASSES), per_subject))
        for stage in labs:
            blend = None
            if rng.random() < transition_rate:
                other = int(np.clip(stage + rng.choice([-1, 1]), 0, N_CLASSES - 1))
                blend = (other, rng.uniform(0.2, 0.45))
            epochs[i] = _synth_epoch(int(stage), rng, t, n_ch, prof, blend=blend)
            labels[i] = stage
            i += 1
    subjects = np.repeat(np.arange(n_subjects), epochs_per_subject)
    return EpochSet(epochs, labels, subjects, default_channel_names(n_ch), sample_rate_hz)


def n2_probe_epoch(seed: int, n_ch: int, sample_rate_hz: float = 100.0,
                   event_onset_s: float = 12.0) -> tuple[np.ndarray, tuple[float, float]]:
    """N2 epoch with exactly one K-complex followed by a spindle.

    Returns the ``[n_ch, T]`` epoch and the (start, end) of the event in seconds.
    """
    rng = np.random.default_rng(seed)
    t_len = int(round(EPOCH_SECONDS * sample_rate_hz))
    t = np.arange(t_len) / sample_rate_hz
    prof = _profile(rng, n_ch)
    base = _synth_epoch(2, rng, t, n_ch, prof, events=False)
    event = _k_complex(t, event_onset_s, 3.0) + _spindle(t, event_onset_s + 0.6, 1.2, prof.spindle, 1.5)
    for c in range(n_ch):
        weight = {"EEG": 1.0, "EOG": 0.3, "EMG": 0.1}[channel_role(c)]
        base[c] += prof.amp * prof.gains[c] * weight * event
    return base.astype(np.float32), (event_onset_s, event_onset_s + 1.8)
