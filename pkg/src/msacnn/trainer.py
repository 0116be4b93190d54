"""Mini-batch Adam training with per-group learning rates."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tc
from .dataset import EpochSet
from .errors import UsageError
from .model import ModelConfig, MsaCnnModel, parameter_groups


@dataclass
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-3
    head_lr: float | None = None  # TCM + output layer; None means base_lr
    weight_decay: float = 1e-4
    dropout: float = 0.1
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled_weight_decay: bool = False
    dtype: str = "float32"

    @classmethod
    def for_model(cls, config: ModelConfig, **overrides) -> "TrainConfig":
        """Learning rates used for each model size and mode."""
        if config.size == "small":
            kw = dict(base_lr=1e-3, head_lr=None)
        else:
            kw = dict(base_lr=1e-4, head_lr=None if config.mode == "univariate" else 1e-3)
        kw.update(overrides)
        return cls(**kw)

    def to_kv(self) -> dict[str, str]:
        return {f"train.{k}": ("none" if v is None else str(v).lower() if isinstance(v, bool) else repr(v)
                               if isinstance(v, float) else str(v))
                for k, v in self.__dict__.items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        out = {}
        for name, f in cls.__dataclass_fields__.items():
            key = f"train.{name}"
            if key not in kv:
                continue
            raw = kv[key]
            default = getattr(cls(), name)
            if raw == "none":
                out[name] = None
            elif isinstance(default, bool):
                out[name] = raw == "true"
            elif isinstance(default, int):
                out[name] = int(raw)
            elif isinstance(default, str):
                out[name] = raw
            else:
                out[name] = float(raw)
        return cls(**out)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, decoupled: bool = False) -> None:
    """In-place Adam update; ``lr`` is a float or a per-parameter mapping.

    Coupled decay adds ``weight_decay * theta`` to the gradient before the
    moment updates; decoupled decay shrinks ``theta`` directly (AdamW).
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise UsageError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        rate = lr[name] if isinstance(lr, dict) else lr
        if weight_decay and not decoupled:
            g = g + weight_decay * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and decoupled:
            update = update + weight_decay * theta
        theta -= (rate * update).astype(theta.dtype, copy=False)


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    mean_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss", "train_accuracy"])
            for row in zip(self.epoch, self.mean_loss, self.train_accuracy):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def train(model: MsaCnnModel, train_set: EpochSet, config: TrainConfig,
          progress=None) -> tuple[MsaCnnModel, TrainHistory]:
    """Train for exactly ``config.epochs`` passes; returns a new model and its history.

    Shuffling and dropout draw from separate seeded streams.
    """
    if len(train_set) == 0:
        raise UsageError("cannot train on an empty set")
    dtype = np.dtype(config.dtype)
    model = model.astype(dtype)
    model.config = replace(model.config, tcm=replace(model.config.tcm, dropout_rate=config.dropout))
    shuffle_rng = np.random.Generator(np.random.Philox(key=[config.seed, 1]))
    dropout_rng = np.random.Generator(np.random.Philox(key=[config.seed, 2]))
    groups = parameter_groups(model.params)
    head_lr = config.base_lr if config.head_lr is None else config.head_lr
    lrs = {n: config.base_lr for n in groups["backbone"]}
    lrs.update({n: head_lr for n in groups["head"]})
    state = AdamState()
    x_all = train_set.epochs.astype(dtype, copy=False)
    y_all = train_set.labels
    history = TrainHistory()
    n = len(y_all)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            logits = model.logits(x_all[idx], train=True, rng=dropout_rng)
            loss = tc.cross_entropy(logits, y_all[idx])
            tc.backward(loss)
            params = {k: p.data for k, p in model.params.items()}
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
            adam_step(params, grads, state, lrs, config.weight_decay, config.beta1, config.beta2, config.eps,
                      config.decoupled_weight_decay)
            loss_sum += float(loss.data) * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == y_all[idx]).sum())
        history.epoch.append(epoch)
        history.mean_loss.append(loss_sum / n)
        history.train_accuracy.append(correct / n)
        if progress is not None:
            progress(epoch, history.mean_loss[-1], history.train_accuracy[-1])
    model.zero_grad()
    return model, history
