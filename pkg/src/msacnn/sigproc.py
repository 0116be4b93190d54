"""Low-pass Butterworth filtering and linear resampling of raw channels."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError


@dataclass(frozen=True)
class FilterSpec:
    order: int
    cutoff_hz: float
    sample_rate_hz: float
    sos: np.ndarray  # [order/2, 5] rows of (b0, b1, b2, a1, a2), a0 normalised to 1

    def frequency_response(self, freqs_hz) -> np.ndarray:
        """Complex response H(e^{jw}) of the cascade at the given frequencies."""
        w = 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / self.sample_rate_hz
        z1 = np.exp(-1j * w)
        h = np.ones_like(z1)
        for b0, b1, b2, a1, a2 in self.sos:
            h *= (b0 + b1 * z1 + b2 * z1 * z1) / (1 + a1 * z1 + a2 * z1 * z1)
        return h

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for _, _, _, a1, a2 in self.sos])


def design_butterworth_lowpass(order: int, cutoff_hz: float, sample_rate_hz: float) -> FilterSpec:
    """Bilinear-transformed Butterworth low-pass with the cutoff prewarped.

    Each conjugate pole pair of the analog prototype becomes one biquad, so
    the digital magnitude at ``cutoff_hz`` is exactly ``1/sqrt(2)``.
    """
    if order not in (2, 4, 6, 8):
        raise ConfigurationError(f"order must be one of 2, 4, 6, 8, got {order}")
    if sample_rate_hz <= 0 or cutoff_hz <= 0:
        raise ConfigurationError("cutoff and sample rate must be positive")
    if cutoff_hz >= sample_rate_hz / 2:
        raise ConfigurationError(f"cutoff {cutoff_hz} Hz is not below Nyquist ({sample_rate_hz / 2} Hz)")
    c = 1.0 / math.tan(math.pi * cutoff_hz / sample_rate_hz)
    rows = []
    for k in range(1, order // 2 + 1):
        re_p = math.cos(math.pi / 2 + (2 * k - 1) * math.pi / (2 * order))  # < 0
        a0 = c * c - 2 * re_p * c + 1
        a1 = 2 - 2 * c * c
        a2 = c * c + 2 * re_p * c + 1
        rows.append([1 / a0, 2 / a0, 1 / a0, a1 / a0, a2 / a0])
    return FilterSpec(order, float(cutoff_hz), float(sample_rate_hz), np.array(rows))


def filter_forward(spec: FilterSpec, signal) -> np.ndarray:
    """Causal filtering through the biquad cascade (transposed direct form II)."""
    y = np.array(signal, dtype=np.float64).reshape(-1)
    for b0, b1, b2, a1, a2 in spec.sos:
        out = np.empty_like(y)
        s1 = s2 = 0.0
        for n, xn in enumerate(y.tolist()):
            yn = b0 * xn + s1
            s1 = b1 * xn - a1 * yn + s2
            s2 = b2 * xn - a2 * yn
            out[n] = yn
        y = out
    return y


def lowpass_channels(data: np.ndarray, sample_rate_hz: float, cutoff_hz: float = 40.0, order: int = 4) -> np.ndarray:
    """Apply the low-pass filter to every row of a ``[channels, samples]`` array."""
    spec = design_butterworth_lowpass(order, cutoff_hz, sample_rate_hz)
    return np.stack([filter_forward(spec, row) for row in np.atleast_2d(data)])


def resample_to(signal, from_hz: float, to_hz: float) -> np.ndarray:
    """Linear interpolation onto a uniform grid spanning the same duration.

    ``n`` samples at ``from_hz`` cover ``(n-1)/from_hz`` seconds; the output
    holds ``round((n-1) * to_hz / from_hz) + 1`` samples over that span.
    """
    if from_hz <= 0 or to_hz <= 0:
        raise ConfigurationError("sample rates must be positive")
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise DataError("cannot resample an empty signal")
    if from_hz == to_hz:
        return x.copy()
    n_out = int(round((x.size - 1) * to_hz / from_hz)) + 1
    t_out = np.arange(n_out) / to_hz
    return np.interp(t_out, np.arange(x.size) / from_hz, x)
