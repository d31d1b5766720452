"""Linear-in-parameters baselines: memoryless basis fits and memory polynomials."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigError, NumericalError, ShapeError

BASES = ("power", "odd_fourier")
# Iterated Tikhonov: the ridge-regularised factorisation is reused for a few
# refinement sweeps, which removes the shrinkage bias in well-determined
# directions while keeping ill-determined ones damped.
REFINE_SWEEPS = 4


def basis_matrix(x, basis: str, P: int, T_x: float | None = None) -> np.ndarray:
    """Columns Phi_1(x) .. Phi_P(x) for the power or odd Fourier basis."""
    x = np.asarray(x, dtype=np.float64).ravel()
    p = np.arange(1, P + 1)
    if basis == "power":
        return x[:, None] ** p
    if basis == "odd_fourier":
        s = np.sin(2.0 * np.pi * np.outer(x, p) / T_x)
        # unit-amplitude basis: roundoff residue at the zeros is an exact zero
        s[np.abs(s) < 64 * np.finfo(np.float64).eps] = 0.0
        return s
    raise ConfigError(f"unknown basis {basis!r}")


@dataclass
class BasisFit:
    basis: str
    P: int
    coefficients: np.ndarray
    T_x: float | None = None
    residual: float = 0.0

    def __post_init__(self):
        if self.basis not in BASES:
            raise ConfigError(f"unknown basis {self.basis!r}")
        if self.P < 1:
            raise ConfigError("basis order P must be >= 1")
        if self.basis == "odd_fourier" and (self.T_x is None or self.T_x <= 0):
            raise ConfigError("odd Fourier basis needs a period T_x > 0")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (basis_matrix(x, self.basis, self.P, self.T_x) @ self.coefficients).reshape(x.shape)

    def to_dict(self) -> dict:
        return {
            "basis": self.basis,
            "P": self.P,
            "T_x": self.T_x,
            "coefficients": self.coefficients.tolist(),
            "residual": self.residual,
        }


def _ridge_lstsq(A: np.ndarray, b: np.ndarray, ridge: float) -> np.ndarray:
    """min ||A c - b|| via QR of the ridge-augmented matrix plus refinement.

    Columns are normalised first so ``ridge`` is relative to unit-norm columns.
    """
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        raise NumericalError("design matrix has an all-zero column")
    An = A / norms
    n = An.shape[1]
    aug = np.vstack([An, np.sqrt(ridge) * np.eye(n)])
    Q, R = linalg.qr(aug, mode="economic")
    diag = np.abs(np.diag(R))
    if diag.min() <= np.sqrt(ridge) * 1e-3 or not np.all(np.isfinite(R)):
        raise NumericalError("design matrix is rank deficient beyond the ridge rescue")
    c = np.zeros(n, dtype=np.result_type(An, b))
    for _ in range(REFINE_SWEEPS + 1):
        r = b - An @ c
        rhs = Q.conj().T @ np.concatenate([r, np.zeros(n, dtype=r.dtype)])
        c = c + linalg.solve_triangular(R, rhs)
    return c / norms


def fit_basis_ls(x, f, basis: str = "power", P: int = 6, T_x: float | None = None,
                 ridge: float = 1e-10, weights=None) -> BasisFit:
    """Discrete least-squares fit of f(x) by P basis functions.

    Optional non-negative ``weights`` turn the sum into a quadrature rule.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    f = np.asarray(f, dtype=np.float64).ravel()
    if x.shape != f.shape:
        raise ShapeError(f"{x.size} abscissae but {f.size} function values")
    if P < 1:
        raise ConfigError("basis order P must be >= 1")
    if np.unique(x).size < P:
        raise ConfigError(f"need at least {P} distinct sample points, got {np.unique(x).size}")
    if basis == "odd_fourier" and (T_x is None or T_x <= 0):
        raise ConfigError("odd Fourier basis needs a period T_x > 0")
    Phi = basis_matrix(x, basis, P, T_x)
    sw = np.ones_like(x) if weights is None else np.sqrt(np.asarray(weights, dtype=np.float64).ravel())
    a = _ridge_lstsq(Phi * sw[:, None], f * sw, ridge)
    resid = float(np.sum((sw * (f - Phi @ a)) ** 2))
    return BasisFit(basis, P, a, T_x, resid)


# ---------------------------------------------------------------------------
# memory polynomial
# ---------------------------------------------------------------------------


def _poly_terms(xs: np.ndarray, P: int) -> np.ndarray:
    """(P, N) basis signals: x^p for real data, |x|^(p-1) x for complex data."""
    if np.iscomplexobj(xs):
        mag = np.abs(xs)
        return np.stack([mag ** (p - 1) * xs for p in range(1, P + 1)])
    return np.stack([xs**p for p in range(1, P + 1)])


def _delay_stack(terms: np.ndarray, L: int) -> np.ndarray:
    """Regression matrix (N, P*L) with column p*L + l holding terms[p][n - l]."""
    P, N = terms.shape
    Phi = np.zeros((N, P * L), dtype=terms.dtype)
    for p in range(P):
        for l in range(L):
            Phi[l:, p * L + l] = terms[p, : N - l]
    return Phi


@dataclass
class MemoryPolynomial:
    """Per-plant coefficients c[k, p-1, l] acting on powers of the unscaled input."""

    P: int
    L: int
    coefficients: np.ndarray  # (K, P, L)
    scale: np.ndarray  # (K,) peak |x| used for conditioning
    ridge: float = 1e-8

    @property
    def K(self) -> int:
        return self.coefficients.shape[0]

    @property
    def complex(self) -> bool:
        return np.iscomplexobj(self.coefficients)

    def to_dict(self) -> dict:
        c = self.coefficients
        out = {
            "P": self.P,
            "L": self.L,
            "scale": self.scale.tolist(),
            "ridge": self.ridge,
            "basis": "abs_power_times_x" if self.complex else "power",
        }
        if self.complex:
            out["coefficients_re"] = c.real.tolist()
            out["coefficients_im"] = c.imag.tolist()
        else:
            out["coefficients"] = c.tolist()
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryPolynomial":
        if "coefficients_re" in d:
            c = np.asarray(d["coefficients_re"]) + 1j * np.asarray(d["coefficients_im"])
        else:
            c = np.asarray(d["coefficients"], dtype=np.float64)
        return cls(d["P"], d["L"], c, np.asarray(d["scale"], dtype=np.float64), d.get("ridge", 1e-8))


def _as_plants(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 1:
        return a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected (K, N) signals, got shape {a.shape}")
    return a


def fit_memory_polynomial(x, y, P: int = 6, L: int = 64, ridge: float = 1e-8, margin: int | None = None) -> MemoryPolynomial:
    """Independent per-plant LS fits of y[n] = sum_p sum_l c[p, l] phi_p(x[n - l]).

    Inputs are scaled to unit peak before building the regressors; the
    normal equations carry a ridge of ``ridge * trace / (P L)``.
    """
    x = _as_plants(x)
    y = _as_plants(y)
    if x.shape != y.shape:
        raise ShapeError(f"input {x.shape} and output {y.shape} differ")
    if P < 1 or L < 1:
        raise ConfigError("memory polynomial needs P >= 1 and L >= 1")
    K, N = x.shape
    need = P * L + (P * L if margin is None else margin)
    if N < need:
        raise ConfigError(f"{N} samples are too few for P={P}, L={L} (need {need})")
    is_c = np.iscomplexobj(x) or np.iscomplexobj(y)
    coeffs = np.zeros((K, P, L), dtype=np.complex128 if is_c else np.float64)
    scales = np.zeros(K)
    powers = np.arange(1, P + 1)[:, None]
    for k in range(K):
        s = float(np.max(np.abs(x[k])))
        if s == 0.0:
            raise NumericalError(f"plant {k}: input is identically zero")
        xs = x[k] / s
        if is_c:
            xs = xs.astype(np.complex128)
        Phi = _delay_stack(_poly_terms(xs, P), L)
        G = Phi.conj().T @ Phi
        lam = ridge * np.real(np.trace(G)) / (P * L)
        try:
            fac = linalg.cho_factor(G + lam * np.eye(P * L))
        except linalg.LinAlgError as exc:
            raise NumericalError(f"plant {k}: normal equations are not positive definite") from exc
        c = np.zeros(P * L, dtype=G.dtype)
        for _ in range(REFINE_SWEEPS + 1):
            c = c + linalg.cho_solve(fac, Phi.conj().T @ (y[k] - Phi @ c))
        if not np.all(np.isfinite(c)):
            raise NumericalError(f"plant {k}: non-finite memory-polynomial solution")
        coeffs[k] = c.reshape(P, L) / s**powers
        scales[k] = s
    return MemoryPolynomial(P, L, coeffs, scales, ridge)


def predict_memory_polynomial(model: MemoryPolynomial, x) -> np.ndarray:
    """y_hat[k, n] = sum_p sum_l c[k, p, l] phi_p(x[k, n - l]), zero history before n = 0."""
    x = _as_plants(x)
    if x.shape[0] != model.K:
        raise ShapeError(f"model has {model.K} plants, input has {x.shape[0]}")
    out = []
    powers = np.arange(1, model.P + 1)[:, None]
    for k in range(model.K):
        s = model.scale[k] if model.scale[k] > 0 else 1.0
        terms = _poly_terms(x[k] / s, model.P)
        c = model.coefficients[k] * s**powers
        yk = sum(np.convolve(terms[p], c[p])[: x.shape[1]] for p in range(model.P))
        out.append(yk)
    return np.stack(out)
