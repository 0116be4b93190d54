"""Multi-scale module: pooled small-kernel convolutions merged by complementary pooling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigurationError, DataError
from .tensor import Tensor

SCALE_NAMES = ("I", "II", "III", "IV")


@dataclass(frozen=True)
class ScaleEntry:
    index: int  # 1-based position on the ladder (I..IV)
    p_in: int
    p_comp: int
    filters: int


@dataclass(frozen=True)
class ScalePlan:
    scales: tuple[ScaleEntry, ...]
    p_tot: int = 8
    kernel_msm1: int = 15
    kernel_msm2: int = 5
    filters_msm2: int = 16
    mode: str = "unimodal"

    def __post_init__(self):
        if not self.scales:
            raise ConfigurationError("a scale plan needs at least one scale")
        if self.mode not in ("unimodal", "multimodal"):
            raise ConfigurationError(f"unknown filter mode {self.mode!r}")
        idx = [s.index for s in self.scales]
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise ConfigurationError(f"scales must be contiguous, got {idx}")
        for s in self.scales:
            if s.p_in * s.p_comp != self.p_tot:
                raise ConfigurationError(f"scale {s.index}: p_in * p_comp != p_tot")
        p_in = [s.p_in for s in self.scales]
        if any(b <= a for a, b in zip(p_in, p_in[1:])):
            raise ConfigurationError("input pooling must increase across scales")

    @property
    def filters_total(self) -> int:
        return sum(s.filters for s in self.scales)

    @property
    def filters_per_scale(self) -> int:
        counts = {s.filters for s in self.scales}
        if len(counts) != 1:
            raise ConfigurationError("filter counts differ across scales")
        return counts.pop()

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(s.index for s in self.scales)


def _split_filters(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def default_scale_plan(n_scales: int = 4, first_scale: int = 1, filters_total: int = 32,
                       filters_msm2: int = 16, mode: str = "unimodal") -> ScalePlan:
    """Contiguous run of ``n_scales`` scales starting at ``first_scale`` (1 = scale I).

    The filter budget ``filters_total`` stays fixed when scales are removed;
    uneven splits hand the remainder to the lowest scales.
    """
    if not 1 <= n_scales <= 4 or not 1 <= first_scale <= 5 - n_scales:
        raise ConfigurationError(f"cannot take {n_scales} contiguous scales from scale {first_scale}")
    return scale_plan_from_indices(range(first_scale, first_scale + n_scales), filters_total, filters_msm2, mode)


def scale_plan_from_indices(indices, filters_total: int = 32, filters_msm2: int = 16,
                            mode: str = "unimodal") -> ScalePlan:
    indices = [int(i) for i in indices]
    if not indices or any(not 1 <= i <= 4 for i in indices):
        raise ConfigurationError(f"scale indices must lie in 1..4, got {indices}")
    if indices != list(range(indices[0], indices[0] + len(indices))):
        raise ConfigurationError(f"scales must be contiguous, got {indices}")
    counts = _split_filters(filters_total, len(indices))
    entries = tuple(ScaleEntry(i, 2 ** (i - 1), 8 // 2 ** (i - 1), f) for i, f in zip(indices, counts))
    return ScalePlan(entries, filters_msm2=filters_msm2, mode=mode)


@dataclass(frozen=True)
class ScaleSummary:
    receptive_field_ms: float
    freq_range_hz: tuple[float, float]
    freq_spacing_hz: float


def scale_summary(entry: ScaleEntry, kernel: int = 15, sample_rate_hz: float = 100.0) -> ScaleSummary:
    spacing = sample_rate_hz / (entry.p_in * kernel)
    return ScaleSummary(1000.0 * kernel * entry.p_in / sample_rate_hz, (0.0, (kernel // 2) * spacing), spacing)


def param_shapes(plan: ScalePlan, n_ch: int) -> dict[str, tuple[int, ...]]:
    groups = n_ch if plan.mode == "multimodal" else 1
    shapes: dict[str, tuple[int, ...]] = {}
    for s in plan.scales:
        shapes[f"msm.scale{s.index}.w"] = (groups * s.filters, 1, plan.kernel_msm1)
        shapes[f"msm.scale{s.index}.b"] = (groups * s.filters,)
    shapes["msm.merge.w"] = (groups * plan.filters_msm2, plan.filters_total, plan.kernel_msm2)
    shapes["msm.merge.b"] = (groups * plan.filters_msm2,)
    return shapes


def msm_forward(plan: ScalePlan, x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """``[B, N_ch, T]`` (or ``[N_ch, T]``) to ``[B, N_ch, F2, T / p_tot]``.

    Per scale: average-pool by p_in, conv (k=15) + ReLU, max-pool by p_comp.
    Scale outputs are stacked in ascending p_in order and integrated by a
    k=5 conv + ReLU. Unimodal banks are shared across channels; multimodal
    banks are per channel (grouped convolution).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = tc.reshape(x, (1,) + x.shape)
    B, n_ch, T = x.shape
    if T % plan.p_tot:
        raise DataError(f"epoch length {T} is not divisible by total pooling {plan.p_tot}")
    t_out = T // plan.p_tot
    multimodal = plan.mode == "multimodal"
    groups = n_ch if multimodal else 1
    h = x if multimodal else tc.reshape(x, (B * n_ch, 1, T))
    maps = []
    for s in plan.scales:
        z = tc.pool(h, s.p_in, "average")
        z = tc.conv1d_same(z, params[f"msm.scale{s.index}.w"], params[f"msm.scale{s.index}.b"], groups=groups)
        z = tc.relu(tc.pool(z, s.p_comp, "max"))
        if z.shape[-1] != t_out:
            raise DataError(f"scale {s.index} produced length {z.shape[-1]}, expected {t_out}")
        maps.append(tc.reshape(z, (B, n_ch, s.filters, t_out)) if multimodal else z)
    if multimodal:
        merged = tc.reshape(tc.concat(maps, axis=2), (B, n_ch * plan.filters_total, t_out))
    else:
        merged = tc.concat(maps, axis=1)
    out = tc.relu(tc.conv1d_same(merged, params["msm.merge.w"], params["msm.merge.b"], groups=groups))
    out = tc.reshape(out, (B, n_ch, plan.filters_msm2, t_out))
    return tc.reshape(out, out.shape[1:]) if squeeze else out


def param_count(plan: ScalePlan, n_ch: int) -> int:
    return int(sum(np.prod(s) for s in param_shapes(plan, n_ch).values()))
