"""Full network assembly, parameter/FLOP accounting, variants and checkpoints."""
from __future__ import annotations

import hashlib
import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import msm, tcm
from . import tensor as tc
from .errors import ConfigurationError, DataError
from .msm import ScalePlan
from .tcm import TcmConfig
from .tensor import Tensor

N_CLASSES = 5
SIZES = ("small", "large")
MODES = ("univariate", "multivariate", "multimodal")

# per-size hyperparameters: (msm2 filters unimodal, msm2 per channel multimodal, spatial, d_emb, heads, layers)
_SIZE_TABLE = {
    "small": dict(msm2=16, msm2_mm=8, spatial=32, d_emb=16, heads=2, layers=1),
    "large": dict(msm2=32, msm2_mm=16, spatial=64, d_emb=32, heads=4, layers=2),
}
_FILTERS_UNIMODAL = 8  # per scale, 4 scales
_FILTERS_MULTIMODAL = 4  # per scale and channel


@dataclass(frozen=True)
class ModelConfig:
    size: str
    mode: str
    n_ch: int
    scale_plan: ScalePlan
    spatial_filters: int
    tcm: TcmConfig
    no_tcm: bool = False
    n_classes: int = N_CLASSES

    @property
    def scale_indices(self) -> tuple[int, ...]:
        return self.scale_plan.indices

    @property
    def no_msm(self) -> int | None:
        """Remaining scale index when the multi-scale module is reduced to one scale."""
        return self.scale_indices[0] if len(self.scale_indices) == 1 else None

    @property
    def head_in(self) -> int:
        return self.spatial_filters if self.no_tcm else self.tcm.d_emb

    def to_kv(self) -> dict[str, str]:
        return {
            "model.size": self.size,
            "model.mode": self.mode,
            "model.n_ch": str(self.n_ch),
            "model.scales": ",".join(map(str, self.scale_indices)),
            "model.no_tcm": str(self.no_tcm).lower(),
            "model.dropout": repr(self.tcm.dropout_rate),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        return make_config(
            kv["model.size"], kv["model.mode"], int(kv["model.n_ch"]),
            scales=[int(s) for s in kv["model.scales"].split(",")],
            no_tcm=kv["model.no_tcm"] == "true",
            dropout=float(kv.get("model.dropout", "0.1")),
        )


def make_config(size: str = "small", mode: str = "multivariate", n_ch: int = 9, scales=(1, 2, 3, 4),
                no_tcm: bool = False, dropout: float = 0.1) -> ModelConfig:
    if size not in SIZES:
        raise ConfigurationError(f"size must be one of {SIZES}, got {size!r}")
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "univariate" and n_ch != 1:
        raise ConfigurationError("univariate models take exactly one channel")
    if n_ch < 1:
        raise ConfigurationError("n_ch must be >= 1")
    row = _SIZE_TABLE[size]
    if mode == "multimodal":
        plan = msm.scale_plan_from_indices(scales, 4 * _FILTERS_MULTIMODAL, row["msm2_mm"], "multimodal")
        d_in = row["spatial"]
    else:
        plan = msm.scale_plan_from_indices(scales, 4 * _FILTERS_UNIMODAL, row["msm2"], "unimodal")
        d_in = row["spatial"]
    tcfg = TcmConfig(d_in=d_in, d_emb=row["d_emb"], n_heads=row["heads"], n_layers=row["layers"],
                     dropout_rate=dropout)
    return ModelConfig(size, mode, n_ch, plan, row["spatial"], tcfg, no_tcm)


def apply_variant(config: ModelConfig, variant: str) -> ModelConfig:
    """Derive an ablation/variant config.

    ``variant`` is one of ``rescaled``, ``multimodal``, ``univariate``,
    ``no_tcm`` or ``no_msm:<scale>`` with scale in 1..4 (or I..IV).
    """
    kw = dict(size=config.size, mode=config.mode, n_ch=config.n_ch, scales=config.scale_indices,
              no_tcm=config.no_tcm, dropout=config.tcm.dropout_rate)
    if variant == "rescaled":
        kw["size"] = "large" if config.size == "small" else "small"
    elif variant == "multimodal":
        if config.mode != "multivariate":
            raise ConfigurationError(f"multimodal variant needs a multivariate config, got {config.mode}")
        kw["mode"] = "multimodal"
    elif variant == "univariate":
        if config.mode != "multivariate":
            raise ConfigurationError(f"univariate variant needs a multivariate config, got {config.mode}")
        kw.update(mode="univariate", n_ch=1)
    elif variant == "no_tcm":
        if config.no_tcm:
            raise ConfigurationError("TCM already removed")
        kw["no_tcm"] = True
    elif variant.startswith("no_msm"):
        _, _, scale = variant.partition(":")
        idx = _parse_scale(scale)
        if len(config.scale_indices) != 4:
            raise ConfigurationError("no_msm needs the full four-scale module")
        kw["scales"] = (idx,)
    else:
        raise ConfigurationError(f"unknown variant {variant!r}")
    return make_config(**kw)


def _parse_scale(text: str) -> int:
    text = text.strip()
    if text in msm.SCALE_NAMES:
        return msm.SCALE_NAMES.index(text) + 1
    try:
        idx = int(text)
    except ValueError:
        raise ConfigurationError(f"bad scale {text!r}; use 1..4 or I..IV") from None
    if not 1 <= idx <= 4:
        raise ConfigurationError(f"scale {idx} out of range 1..4")
    return idx


# ---------------------------------------------------------------- parameters


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    if config.mode != "univariate":
        shapes["input.gain"] = (config.n_ch,)
        shapes["input.offset"] = (config.n_ch,)
    shapes.update(msm.param_shapes(config.scale_plan, config.n_ch))
    f2 = config.scale_plan.filters_msm2
    if config.mode == "univariate":
        shapes["spatial.w"] = (config.spatial_filters, f2, 5)
    else:
        shapes["spatial.w"] = (config.n_ch * f2, config.spatial_filters)
    shapes["spatial.b"] = (config.spatial_filters,)
    if not config.no_tcm:
        shapes.update(tcm.param_shapes(config.tcm))
    shapes["head.w"] = (config.head_in, config.n_classes)
    shapes["head.b"] = (config.n_classes,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form layer sum (weights, biases, norm affines, channel scaling)."""
    n_ch, plan = config.n_ch, config.scale_plan
    g = n_ch if plan.mode == "multimodal" else 1
    total = 0 if config.mode == "univariate" else 2 * n_ch
    total += g * plan.filters_total * (plan.kernel_msm1 + 1)
    total += g * plan.filters_msm2 * (plan.filters_total * plan.kernel_msm2 + 1)
    f2 = plan.filters_msm2
    s = config.spatial_filters
    total += (f2 * 5 * s if config.mode == "univariate" else n_ch * f2 * s) + s
    if not config.no_tcm:
        t, d = config.tcm, config.tcm.d_emb
        total += t.d_in * d + d
        per_layer = 3 * (d * d + d) + (d * d + d) + 2 * d + (d * 2 * d + 2 * d) + (2 * d * d + d) + 2 * d
        total += t.n_layers * per_layer
    total += config.head_in * config.n_classes + config.n_classes
    return total


def parameter_groups(names) -> dict[str, list[str]]:
    """Split parameter names into the backbone and the TCM + output head."""
    head = [n for n in names if n.startswith(("tcm.", "head."))]
    backbone = [n for n in names if not n.startswith(("tcm.", "head."))]
    return {"backbone": backbone, "head": head}


def flop_estimate(config: ModelConfig, T: int = 3000) -> float:
    """Multiply-accumulate count of one forward pass, in millions."""
    n_ch, plan = config.n_ch, config.scale_plan
    t_tok = T // plan.p_tot
    macs = 0 if config.mode == "univariate" else n_ch * T
    for s in plan.scales:
        macs += n_ch * s.filters * plan.kernel_msm1 * (T // s.p_in)
    macs += n_ch * plan.filters_msm2 * plan.filters_total * plan.kernel_msm2 * t_tok
    f2, sf = plan.filters_msm2, config.spatial_filters
    macs += t_tok * (f2 * 5 * sf if config.mode == "univariate" else n_ch * f2 * sf)
    if not config.no_tcm:
        t, d = config.tcm, config.tcm.d_emb
        macs += t_tok * t.d_in * d
        per_layer = t_tok * d * 3 * d + 2 * t.n_heads * t_tok * t_tok * t.d_k + t_tok * d * d + 2 * t_tok * d * 2 * d
        macs += t.n_layers * per_layer
    macs += config.head_in * config.n_classes
    return macs / 1e6


# ---------------------------------------------------------------- model


class MsaCnnModel:
    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "MsaCnnModel":
        return MsaCnnModel(self.config, OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=True, name=k)) for k, v in self.params.items()))

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def logits(self, x, train: bool = False, rng: np.random.Generator | None = None,
               capture: list | None = None) -> Tensor:
        """Class logits for ``[B, n_ch, T]`` input (``[B, 5]``)."""
        cfg, p = self.config, self.params
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 3 or x.shape[1] != cfg.n_ch:
            raise DataError(f"expected input [B, {cfg.n_ch}, T], got {x.shape}")
        if x.shape[2] % cfg.scale_plan.p_tot:
            raise DataError(f"epoch length {x.shape[2]} not divisible by {cfg.scale_plan.p_tot}")
        B = x.shape[0]
        if cfg.mode != "univariate":
            gain = tc.reshape(p["input.gain"], (1, cfg.n_ch, 1))
            offset = tc.reshape(p["input.offset"], (1, cfg.n_ch, 1))
            x = tc.add(tc.mul(x, gain), offset)
        feats = msm.msm_forward(cfg.scale_plan, x, p)  # [B, n_ch, F2, T']
        t_tok = feats.shape[-1]
        if cfg.mode == "univariate":
            z = tc.conv1d_same(tc.reshape(feats, (B, cfg.scale_plan.filters_msm2, t_tok)),
                               p["spatial.w"], p["spatial.b"])
            tokens = tc.transpose(tc.relu(z), (0, 2, 1))
        else:
            flat = tc.transpose(tc.reshape(feats, (B, cfg.n_ch * cfg.scale_plan.filters_msm2, t_tok)), (0, 2, 1))
            tokens = tc.relu(tc.dense_affine(flat, p["spatial.w"], p["spatial.b"]))
        if not cfg.no_tcm:
            tokens = tcm.tcm_forward(tokens, p, cfg.tcm, train, rng, capture)
        pooled = tc.mean(tokens, axis=1)
        return tc.dense_affine(pooled, p["head.w"], p["head.b"])

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x)
        single = x.ndim == 2
        if single:
            x = x[None]
        out = []
        with tc.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(tc.softmax_rows(self.logits(x[i:i + batch_size])).data)
        probs = np.concatenate(out) if out else np.zeros((0, self.config.n_classes))
        return probs[0] if single else probs

    def predict(self, x, batch_size: int = 64) -> np.ndarray:
        # argmax picks the lowest index on ties
        return np.argmax(self.predict_proba(x, batch_size), axis=-1)

    def attention_weights(self, epoch) -> list[np.ndarray]:
        """Per-layer ``[H, T, T]`` attention for one ``[n_ch, T]`` epoch."""
        if self.config.no_tcm:
            raise ConfigurationError("model has no attention module")
        cap: list = []
        with tc.no_grad():
            self.logits(np.asarray(epoch, dtype=self.dtype)[None], capture=cap)
        return [a[0] for a in cap]


def forward(model: MsaCnnModel, epoch, train_flag: bool = False, rng=None) -> np.ndarray:
    """Class probabilities for one ``[n_ch, T]`` epoch (or a ``[B, n_ch, T]`` batch)."""
    x = np.asarray(epoch, dtype=model.dtype)
    single = x.ndim == 2
    with tc.no_grad():
        probs = tc.softmax_rows(model.logits(x[None] if single else x, train=train_flag, rng=rng)).data
    return probs[0] if single else probs


def build(config: ModelConfig, seed: int = 0, dtype=np.float64) -> MsaCnnModel:
    """Gains 1, offsets 0, norm gains 1, biases 0, weights U(+-sqrt(1/fan_in))."""
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name in ("input.gain",) or name.endswith((".ln1.g", ".ln2.g")):
            arr = np.ones(shape)
        elif name == "input.offset" or name.endswith((".b", ".ln1.b", ".ln2.b")):
            arr = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    model = MsaCnnModel(config, params)
    if model.parameter_count() != param_count(config):
        raise ConfigurationError("built parameters disagree with the closed-form count")
    return model


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MSC1"


def kv_dumps(kv: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in kv.items())


def kv_loads(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {n}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def checkpoint_bytes(model: MsaCnnModel) -> bytes:
    buf = io.BytesIO()
    cfg_text = kv_dumps(model.config.to_kv()).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", 1, len(cfg_text)))
    buf.write(cfg_text)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


def manifest_text(model: MsaCnnModel) -> str:
    lines = [f"{name} shape={'x'.join(map(str, p.shape))} count={p.size}" for name, p in model.params.items()]
    lines.append(f"total={model.parameter_count()}")
    return "\n".join(lines) + "\n"


def save_checkpoint(model: MsaCnnModel, path) -> None:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    path.with_suffix(path.suffix + ".manifest.txt").write_text(manifest_text(model))


def load_checkpoint(path, dtype=np.float32) -> MsaCnnModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise DataError("bad checkpoint magic at byte offset 0")
    pos = 4
    try:
        version, n = struct.unpack_from("<HI", raw, pos)
        pos += 6
        config = ModelConfig.from_kv(kv_loads(raw[pos:pos + n].decode("utf-8")))
        pos += n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params: OrderedDict[str, Tensor] = OrderedDict()
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            if pos + 4 * size > len(raw):
                raise DataError(f"truncated parameter {name!r} at byte offset {pos}")
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(dtype)
            pos += 4 * size
            params[name] = Tensor(arr, requires_grad=True, name=name)
    except struct.error as exc:
        raise DataError(f"truncated checkpoint at byte offset {pos}") from exc
    if version != 1:
        raise DataError(f"unsupported checkpoint version {version}")
    expected = param_shapes(config)
    if list(expected) != list(params) or any(tuple(params[k].shape) != v for k, v in expected.items()):
        raise DataError("checkpoint parameters do not match its config")
    return MsaCnnModel(config, params)
