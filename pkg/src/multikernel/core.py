"""Tensor conventions, DFT utilities, seeded random streams and the gradient checker.

Every block consumes and produces 4-axis arrays laid out as
``(frames T, plants K, channels C, time M)``. Real data is ``float64`` and
complex baseband data is ``complex128``; both are plain numpy arrays.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import NumericalError, ShapeError, ConfigError


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    """Validate external input as a real (T, K, C, M) float64 array."""
    arr = np.asarray(x)
    if np.iscomplexobj(arr):
        raise ShapeError(f"{name}: expected real data, got complex")
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected 4 axes (T, K, C, M), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name}: contains NaN or Inf")
    return arr


def as_ctensor(x, name: str = "tensor") -> np.ndarray:
    """Validate external input as a complex (T, K, C, M) complex128 array."""
    arr = np.ascontiguousarray(np.asarray(x), dtype=np.complex128)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected 4 axes (T, K, C, M), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name}: contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# DFT
# ---------------------------------------------------------------------------


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=64)
def _bit_reversal(m: int) -> np.ndarray:
    bits = m.bit_length() - 1
    idx = np.arange(m)
    rev = np.zeros(m, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(half: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(half) / (2 * half))


@lru_cache(maxsize=16)
def _dft_matrix(m: int) -> np.ndarray:
    k = np.arange(m)
    return np.exp(-2j * np.pi * np.outer(k, k) / m)


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time FFT along the last axis (length must be 2^n)."""
    x = np.asarray(x, dtype=np.complex128)
    m = x.shape[-1]
    if not is_power_of_two(m):
        raise ConfigError(f"radix-2 FFT needs a power-of-two length, got {m}")
    lead = x.shape[:-1]
    y = x[..., _bit_reversal(m)]
    half = 1
    while half < m:
        y = y.reshape(*lead, m // (2 * half), 2, half)
        even = y[..., 0, :]
        odd = y[..., 1, :] * _twiddles(half)
        y = np.stack((even + odd, even - odd), axis=-2)
        half *= 2
    return y.reshape(x.shape)


def dft_naive(x: np.ndarray) -> np.ndarray:
    """O(M^2) DFT along the last axis, any length."""
    x = np.asarray(x, dtype=np.complex128)
    return x @ _dft_matrix(x.shape[-1]).T


def dft_forward(x, allow_naive: bool = True) -> np.ndarray:
    """Forward DFT along the last axis, no normalisation.

    Power-of-two lengths use :func:`fft_radix2`; other lengths fall back to
    the direct sum when ``allow_naive`` is set.
    """
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("DFT of an empty sequence")
    m = x.shape[-1]
    if is_power_of_two(m):
        return fft_radix2(x)
    if not allow_naive:
        raise ConfigError(f"frame length {m} is not a power of two")
    return dft_naive(x)


def dft_inverse(X, allow_naive: bool = True) -> np.ndarray:
    """Inverse DFT along the last axis with the 1/M factor."""
    X = np.asarray(X, dtype=np.complex128)
    if X.ndim == 0 or X.shape[-1] == 0:
        raise ShapeError("DFT of an empty sequence")
    return np.conj(dft_forward(np.conj(X), allow_naive=allow_naive)) / X.shape[-1]


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


def _label_words(label: str) -> tuple[int, ...]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


class Rng:
    """Seeded random stream that splits into independent substreams by label.

    ``Rng(7).child("plant/3")`` always yields the same stream, regardless of
    how much was drawn from the parent or from sibling streams.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._path = path
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=path))
        )

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self._path + _label_words(label))

    def normal(self, scale=1.0, size=None) -> np.ndarray:
        return self.gen.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, depth={len(self._path) // 4})"


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    block: str
    max_rel_err_params: float
    max_rel_err_input: float
    per_param: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max(self.max_rel_err_params, self.max_rel_err_input)

    def passed(self, tol: float | None = None) -> bool:
        return self.max_rel_err < (self.tol if tol is None else tol)


def _half_energy(y: np.ndarray) -> float:
    if np.iscomplexobj(y):
        return 0.5 * float(np.sum(y.real**2) + np.sum(y.imag**2))
    return 0.5 * float(np.sum(y * y))


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _numeric_grad(loss_fn, arr: np.ndarray, step: float) -> np.ndarray:
    """Central differences over every element of ``arr`` (perturbed in place)."""
    units = (1.0, 1j) if np.iscomplexobj(arr) else (1.0,)
    out = np.zeros(arr.shape, dtype=arr.dtype)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        for unit in units:
            arr[idx] = orig + step * unit
            lp = loss_fn()
            arr[idx] = orig - step * unit
            lm = loss_fn()
            arr[idx] = orig
            out[idx] += unit * (lp - lm) / (2 * step)
    return out


def grad_check(block, x, step: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare a block's backward pass against central finite differences.

    The probe loss is half the squared norm of the block output. Complex
    arrays are perturbed along their real and imaginary parts separately and
    compared as ``dL/dRe + j dL/dIm``.
    """
    name = getattr(block, "name", type(block).__name__)
    x = np.array(x, dtype=np.complex128 if np.iscomplexobj(x) else np.float64, copy=True)

    y = block.forward(x)
    if not np.all(np.isfinite(y)):
        raise NumericalError(f"grad_check: block {name!r} produced non-finite output")
    grad_in = np.array(block.backward(y), copy=True)
    analytic = {k: np.array(v, copy=True) for k, v in block.grads.items()}

    def loss() -> float:
        return _half_energy(block.forward(x))

    per_param = {}
    for key, value in block.params.items():
        per_param[key] = _rel_err(analytic[key], _numeric_grad(loss, value, step))
    err_in = _rel_err(grad_in, _numeric_grad(loss, x, step))
    # leave the block's cache consistent with the unperturbed input
    block.forward(x)
    return GradCheckReport(
        block=name,
        max_rel_err_params=max(per_param.values(), default=0.0),
        max_rel_err_input=err_in,
        per_param=per_param,
        tol=tol,
    )
