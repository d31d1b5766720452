"""Evaluation quantities: NMSE, ERLE curves and Welch power spectra."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .core import is_power_of_two
from .errors import ConfigError, ShapeError
from .optim import nmse_db, per_plant_nmse_db

__all__ = [
    "ErleCurve",
    "PsdEstimate",
    "erle_curve",
    "nmse_db",
    "per_plant_nmse_db",
    "psd_welch",
    "write_db_csv",
]

DB_CAP = 160.0
POWER_FLOOR = 1e-16


@dataclass
class ErleCurve:
    values: np.ndarray  # dB per sample
    smoothing_alpha: float

    def steady_state(self, warmup: int) -> float:
        return float(np.mean(self.values[warmup:]))


@dataclass
class PsdEstimate:
    frequencies: np.ndarray  # cycles per sample, FFT bin order
    power_db: np.ndarray
    seg_len: int
    overlap: int
    window: str = "hann"

    @property
    def power(self) -> np.ndarray:
        return 10.0 ** (self.power_db / 10.0)


def _smooth(v: np.ndarray, alpha: float) -> np.ndarray:
    # P[n] = alpha P[n-1] + (1 - alpha) v[n], P[-1] = 0
    return signal.lfilter([1.0 - alpha], [1.0, -alpha], v, axis=-1)


def erle_curve(d, d_hat, smoothing_alpha: float = 0.999) -> ErleCurve:
    """Recursively smoothed echo-to-residual power ratio in dB.

    2-D inputs hold several signals; their smoothed powers are averaged
    before taking the log.
    """
    d = np.asarray(d)
    d_hat = np.asarray(d_hat)
    if d.shape != d_hat.shape:
        raise ShapeError(f"echo {d.shape} and estimate {d_hat.shape} differ")
    if not 0.0 < smoothing_alpha < 1.0:
        raise ConfigError("smoothing_alpha must lie in (0, 1)")
    pd = _smooth(np.abs(d) ** 2, smoothing_alpha)
    pe = _smooth(np.abs(d - d_hat) ** 2, smoothing_alpha)
    if pd.ndim > 1:
        pd = pd.reshape(-1, pd.shape[-1]).mean(axis=0)
        pe = pe.reshape(-1, pe.shape[-1]).mean(axis=0)
    with np.errstate(divide="ignore"):
        vals = 10.0 * np.log10(pd / np.maximum(pe, POWER_FLOOR))
    vals = np.where(pe <= POWER_FLOOR, DB_CAP, vals)
    vals = np.where(pd > 0, vals, 0.0)
    return ErleCurve(np.clip(vals, -DB_CAP, DB_CAP), smoothing_alpha)


def psd_welch(x, seg_len: int = 256, overlap_frac: float = 0.5) -> PsdEstimate:
    """Two-sided Hann-window Welch estimate, normalised so white noise reads its variance."""
    x = np.asarray(x).ravel()
    if not is_power_of_two(seg_len):
        raise ConfigError(f"segment length must be a power of two, got {seg_len}")
    if not 0.0 <= overlap_frac < 1.0:
        raise ConfigError("overlap_frac must lie in [0, 1)")
    if x.size < seg_len:
        raise ShapeError(f"sequence of length {x.size} is shorter than one segment ({seg_len})")
    overlap = int(round(seg_len * overlap_frac))
    f, p = signal.welch(
        x,
        fs=1.0,
        window="hann",
        nperseg=seg_len,
        noverlap=overlap,
        detrend=False,
        return_onesided=False,
        scaling="density",
    )
    return PsdEstimate(f, 10.0 * np.log10(np.maximum(p, 1e-300)), seg_len, overlap)


def write_db_csv(path, values_db, header=("index", "value_db")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, v in enumerate(np.asarray(values_db).ravel()):
            w.writerow([i, repr(float(v))])
