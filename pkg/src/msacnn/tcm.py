"""Temporal context module: embedding, positional encoding, self-attention blocks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigurationError, UsageError
from .tensor import Tensor


@dataclass(frozen=True)
class TcmConfig:
    d_in: int
    d_emb: int = 16
    n_heads: int = 2
    n_layers: int = 1
    dropout_rate: float = 0.1
    ln_epsilon: float = 1e-5

    def __post_init__(self):
        if self.d_emb % self.n_heads:
            raise ConfigurationError(f"d_emb={self.d_emb} is not divisible by {self.n_heads} heads")
        if self.n_layers < 0:
            raise ConfigurationError("n_layers must be >= 0")

    @property
    def d_k(self) -> int:
        return self.d_emb // self.n_heads

    @property
    def ff_hidden(self) -> int:
        return 2 * self.d_emb


def positional_encoding(n_tokens: int, d_emb: int) -> np.ndarray:
    t = np.arange(n_tokens, dtype=np.float64)[:, None]
    i = np.arange(d_emb)
    even_exp = np.where(i % 2 == 0, i, i - 1) / d_emb
    angle = t / np.power(10000.0, even_exp)[None, :]
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def param_shapes(cfg: TcmConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_emb
    shapes = {"tcm.embed.w": (cfg.d_in, d), "tcm.embed.b": (d,)}
    for layer in range(cfg.n_layers):
        p = f"tcm.l{layer}."
        shapes.update({
            p + "qkv.w": (d, 3 * d), p + "qkv.b": (3 * d,),
            p + "out.w": (d, d), p + "out.b": (d,),
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "ffn1.w": (d, cfg.ff_hidden), p + "ffn1.b": (cfg.ff_hidden,),
            p + "ffn2.w": (cfg.ff_hidden, d), p + "ffn2.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
        })
    return shapes


def mha_forward(tokens: Tensor, params: dict[str, Tensor], cfg: TcmConfig, layer: int = 0,
                capture: list | None = None) -> Tensor:
    """Multi-head self-attention, residual add, then layer norm.

    The per-head Q/K/V maps are one fused ``[d, 3d]`` projection split into
    heads. When ``capture`` is a list the ``[B, H, T, T]`` weights are appended.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tc.reshape(tokens, (1,) + tokens.shape)
    B, T, d = tokens.shape
    H, dk = cfg.n_heads, cfg.d_k
    p = f"tcm.l{layer}."
    qkv = tc.dense_affine(tokens, params[p + "qkv.w"], params[p + "qkv.b"])
    qkv = tc.transpose(tc.reshape(qkv, (B, T, 3, H, dk)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = tc.mul(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    attn = tc.softmax_rows(scores)
    if capture is not None:
        capture.append(attn.data.copy())
    heads = tc.reshape(tc.transpose(tc.matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
    out = tc.dense_affine(heads, params[p + "out.w"], params[p + "out.b"])
    out = tc.layer_norm(tc.add(tokens, out), params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_epsilon)
    return tc.reshape(out, out.shape[1:]) if squeeze else out


def ffn_forward(tokens: Tensor, params: dict[str, Tensor], cfg: TcmConfig, layer: int = 0,
                train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    p = f"tcm.l{layer}."
    h = tc.dropout(tc.relu(tc.dense_affine(tokens, params[p + "ffn1.w"], params[p + "ffn1.b"])),
                   cfg.dropout_rate, rng, train)
    h = tc.dropout(tc.relu(tc.dense_affine(h, params[p + "ffn2.w"], params[p + "ffn2.b"])),
                   cfg.dropout_rate, rng, train)
    return tc.layer_norm(tc.add(tokens, h), params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_epsilon)


def tcm_forward(features: Tensor, params: dict[str, Tensor], cfg: TcmConfig, train: bool = False,
                rng: np.random.Generator | None = None, capture: list | None = None) -> Tensor:
    """``[B, T, d_in]`` (or ``[T, d_in]``) to ``[B, T, d_emb]``."""
    h = tc.dense_affine(features, params["tcm.embed.w"], params["tcm.embed.b"])
    pe = positional_encoding(h.shape[-2], cfg.d_emb).astype(h.dtype)
    h = tc.add(h, Tensor(pe))
    for layer in range(cfg.n_layers):
        h = mha_forward(h, params, cfg, layer, capture)
        h = ffn_forward(h, params, cfg, layer, train, rng)
    return h


@dataclass
class AttentionTrace:
    head_index: int | None  # None: mean over heads
    weights: np.ndarray  # [T_tok, T_tok]
    incoming: np.ndarray
    outgoing: np.ndarray
    argmax_incoming: int

    def to_csv(self, path, p_tot: int = 8, sample_rate_hz: float = 100.0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["token_index", "time_seconds", "incoming", "outgoing"])
            for j, (inc, out) in enumerate(zip(self.incoming, self.outgoing)):
                w.writerow([j, repr(j * p_tot / sample_rate_hz), repr(float(inc)), repr(float(out))])


def trace_from_weights(weights: np.ndarray, head_index: int | None = 0) -> AttentionTrace:
    """Incoming/outgoing attention from one ``[H, T, T]`` attention tensor."""
    if weights.ndim != 3:
        raise UsageError(f"expected [H, T, T] attention weights, got {weights.shape}")
    if head_index is None:
        a = weights.mean(axis=0)
    elif not 0 <= head_index < weights.shape[0]:
        raise UsageError(f"head_index {head_index} out of range for {weights.shape[0]} heads")
    else:
        a = weights[head_index]
    incoming = a.mean(axis=0)
    j = int(np.argmax(incoming))
    return AttentionTrace(head_index, a, incoming, a[j].copy(), j)
