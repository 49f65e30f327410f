"""Signal preprocessing: low-pass smoothing, per-channel scaling, mu-law.

The full pipeline runs filter -> normalize -> mu-law, in that order, once.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .dataset import DEFAULT_TEST_REPS, EmgRecording
from .errors import ConfigError, DataError, ProtocolError
from .tensor import backend

log = logging.getLogger(__name__)

PIPELINE = ("lowpass", "normalize", "mulaw")


@dataclass(frozen=True)
class FirstOrderIirCoeffs:
    """``y[n] = b0 x[n] + b1 x[n-1] - a1 y[n-1]``."""

    b0: float
    b1: float
    a1: float
    fs: float
    fc: float

    @property
    def dc_gain(self) -> float:
        return (self.b0 + self.b1) / (1.0 + self.a1)

    def response(self, f) -> np.ndarray:
        """Complex frequency response at ``f`` Hz."""
        z1 = np.exp(-2j * np.pi * np.asarray(f, dtype=float) / self.fs)
        return (self.b0 + self.b1 * z1) / (1.0 + self.a1 * z1)


def design_butterworth_lowpass(fc: float, fs: float) -> FirstOrderIirCoeffs:
    """First-order Butterworth low-pass via the prewarped bilinear transform."""
    if not (0 < fc < fs / 2):
        raise ConfigError(f"cutoff {fc} Hz must lie in (0, fs/2 = {fs / 2}) Hz")
    k = math.tan(math.pi * fc / fs)
    b = k / (1.0 + k)
    return FirstOrderIirCoeffs(b0=b, b1=b, a1=(k - 1.0) / (k + 1.0), fs=float(fs), fc=float(fc))


def filter_apply(coeffs: FirstOrderIirCoeffs, signal, zero_phase: bool = False) -> np.ndarray:
    """Filter each column causally from a zero state.

    ``zero_phase`` runs the filter forward then backward (non-causal).
    Accepts ``[n]`` or ``[n, channels]``; returns float64 of the same shape.
    """
    x = np.asarray(signal, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.ndim != 2:
        raise DataError(f"filter_apply expects [n] or [n, channels], got {list(x.shape)}")
    run = backend.kernels.iir1_filter
    y = run(np.ascontiguousarray(x), coeffs.b0, coeffs.b1, coeffs.a1)
    if zero_phase:
        y = run(np.ascontiguousarray(y[::-1]), coeffs.b0, coeffs.b1, coeffs.a1)[::-1].copy()
    return y[:, 0] if squeeze else y


def mu_law_compress(x, mu: float = 256.0) -> np.ndarray:
    """``sign(x) * ln(1 + mu|x|) / ln(1 + mu)`` for ``|x| <= 1``."""
    if mu <= 0:
        raise ConfigError(f"mu must be positive, got {mu}")
    arr = np.asarray(x, dtype=np.float64)
    bad = np.argwhere(~(np.abs(arr) <= 1.0))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        if arr.ndim == 2:
            where = f"sample {pos[0]}, channel {pos[1]}"
        else:
            where = f"index {pos}"
        raise DataError(f"mu-law input {arr[pos]!r} outside [-1, 1] at {where}")
    return np.sign(arr) * np.log1p(mu * np.abs(arr)) / math.log1p(mu)


def mu_law_expand(y, mu: float = 256.0) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.expm1(np.abs(y) * math.log1p(mu)) / mu


def fit_channel_scales(samples: np.ndarray) -> np.ndarray:
    """Per-channel max |x|; an all-zero channel gets scale 1."""
    if samples.size == 0:
        raise DataError("cannot fit channel scales on an empty recording")
    scales = np.abs(samples).max(axis=0).astype(np.float64)
    dead = np.flatnonzero(scales == 0)
    if dead.size:
        log.warning("channels %s are all zero; leaving them unscaled", dead.tolist())
        scales[dead] = 1.0
    return scales


def apply_channel_scales(samples: np.ndarray, scales: np.ndarray) -> tuple[np.ndarray, int]:
    """Divide by ``scales`` and clip to [-1, 1]; returns (values, clipped count)."""
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (samples.shape[1],):
        raise DataError(f"{scales.size} scale factors for {samples.shape[1]} channels")
    y = samples / scales
    clipped = int(np.count_nonzero(np.abs(y) > 1.0))
    return np.clip(y, -1.0, 1.0), clipped


@dataclass(frozen=True)
class Normalization:
    scales: np.ndarray
    clipped: int
    clip_rate: float     # clipped fraction of the evaluated samples


def normalize_channels(rec: EmgRecording, scales: np.ndarray | None = None,
                       train_mask: np.ndarray | None = None,
                       eval_mask: np.ndarray | None = None) -> tuple[EmgRecording, Normalization]:
    """Scale each channel into [-1, 1] by its training-split max |x|.

    Scales come from ``train_mask`` rows (all rows by default) unless
    given. Values beyond a scale are clipped; the clip rate is measured
    over ``eval_mask`` rows (all rows by default).
    """
    if rec.n_samples == 0:
        raise DataError("cannot normalize an empty recording")
    x = rec.samples.astype(np.float64)
    if scales is None:
        scales = fit_channel_scales(x if train_mask is None else x[train_mask])
    y, _ = apply_channel_scales(x, scales)
    rows = slice(None) if eval_mask is None else eval_mask
    sub = x[rows] / np.asarray(scales)
    clipped = int(np.count_nonzero(np.abs(sub) > 1.0))
    rate = clipped / sub.size if sub.size else 0.0
    return rec.with_samples(y, "normalize"), Normalization(np.asarray(scales, dtype=np.float64), clipped, rate)


@dataclass(frozen=True)
class PipelineResult:
    recording: EmgRecording
    scales: np.ndarray
    clip_rate: float


def preprocess(rec: EmgRecording, *, test_reps: Iterable[int] = DEFAULT_TEST_REPS,
               scales: np.ndarray | None = None, fc: float = 1.0, mu: float = 256.0,
               zero_phase: bool = False) -> PipelineResult:
    """Low-pass -> per-channel max-abs scaling (train repetitions only) -> mu-law.

    Pass stored ``scales`` to reuse a training run's normalization.
    """
    if rec.pipeline:
        raise ProtocolError(f"recording already went through {list(rec.pipeline)}; "
                            "the pipeline must run exactly once")
    coeffs = design_butterworth_lowpass(fc, rec.fs)
    filtered = rec.with_samples(filter_apply(coeffs, rec.samples, zero_phase=zero_phase), "lowpass")
    test = np.isin(rec.repetition, sorted(set(test_reps)))
    train = (rec.repetition > 0) & ~test
    if scales is None and not train.any():
        raise ProtocolError("no training repetitions to fit normalization on")
    normed, norm = normalize_channels(filtered, scales=scales, train_mask=train if scales is None else None,
                                      eval_mask=test if test.any() else None)
    out = normed.with_samples(mu_law_compress(normed.samples, mu).astype(np.float32), "mulaw")
    return PipelineResult(out, norm.scales, norm.clip_rate)
