"""Synthetic Wiener and Hammerstein multiplant data.

Wiener plants filter first and distort afterwards, ``y = f(h * x)``;
Hammerstein plants distort first, ``y = h * f(x)``. Each of the K plants
gets its own excitation; impulse responses and nonlinearities are either
shared by all plants ("inv") or drawn per plant ("var").
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import lfilter
from scipy.special import ndtri

from .core import Rng
from .errors import ConfigError, NumericalError, ShapeError, ZeroEnergyError

WIENER = "wiener"
HAMMERSTEIN = "hammerstein"
STRUCTURES = (WIENER, HAMMERSTEIN)
NL_KINDS = ("sigmoid", "clip", "identity", "complex_sat")
SDR_CAP_DB = 160.0
AR_RHO = 0.9
REAL_SDR_RANGE = (4.0, 32.0)
COMPLEX_SDR_RANGE = (6.0, 14.0)


# ---------------------------------------------------------------------------
# signals
# ---------------------------------------------------------------------------


def _white(rng: Rng, n: int, complex_: bool) -> np.ndarray:
    if complex_:
        return (rng.normal(size=n) + 1j * rng.normal(size=n)) / np.sqrt(2.0)
    return rng.normal(size=n)


def gen_excitation(kind: str, N: int, K: int, rng: Rng, complex: bool = False, rho: float = AR_RHO) -> np.ndarray:
    """Unit-variance excitation, one independent substream per plant, shape (K, N).

    ``white`` is i.i.d. Gaussian; ``ar_colored`` is the AR(1) process
    x[n] = rho x[n-1] + sqrt(1 - rho^2) w[n], started in its stationary state.
    """
    if N < 1:
        raise ConfigError("excitation length must be >= 1")
    if kind not in ("white", "ar_colored"):
        raise ConfigError(f"unknown excitation {kind!r}")
    out = np.empty((K, N), dtype=np.complex128 if complex else np.float64)
    for k in range(K):
        sub = rng.child(f"excitation/{k}")
        w = _white(sub, N + 1, complex)
        if kind == "white":
            out[k] = w[1:]
        else:
            # w[0] seeds the stationary initial state
            out[k] = lfilter([np.sqrt(1.0 - rho**2)], [1.0, -rho], w[1:], zi=[rho * w[0]])[0]
    return out


def gen_impulse_response(L_h: int, decay_tau: float, rng: Rng, complex: bool = False) -> np.ndarray:
    """Exponentially decaying Gaussian impulse response with unit energy."""
    if L_h < 1:
        raise ConfigError("impulse response length must be >= 1")
    if decay_tau <= 0:
        raise ConfigError("decay constant must be positive")
    g = _white(rng, L_h, complex)
    h = g * np.exp(-np.arange(L_h) / decay_tau)
    energy = np.sum(np.abs(h) ** 2)
    if energy <= 0:
        raise NumericalError("degenerate impulse response draw")
    return h / np.sqrt(energy)


def apply_lti(x, h) -> np.ndarray:
    """Causal convolution truncated to the input length (x = 0 before n = 0)."""
    x = np.asarray(x)
    h = np.asarray(h)
    if x.ndim == 1:
        return lfilter(h, [1.0], x)
    if h.ndim == 1:
        h = np.broadcast_to(h, (x.shape[0], h.size))
    return np.stack([lfilter(hk, [1.0], xk) for xk, hk in zip(x, h)])


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


@dataclass
class NonlinearityDesc:
    """Memoryless plant nonlinearity.

    sigmoid: gamma * arctan(delta * x); clip: symmetric limiting at +-x_max;
    complex_sat: the sigmoid applied to |z| with the phase of z kept.
    """

    kind: str
    gamma: float | None = None
    delta: float | None = None
    x_max: float | None = None
    achieved_sdr_db: float | None = None

    def __post_init__(self):
        if self.kind not in NL_KINDS:
            raise ConfigError(f"unknown nonlinearity {self.kind!r}")
        if self.kind in ("sigmoid", "complex_sat"):
            if self.gamma is None or self.delta is None or self.gamma <= 0 or self.delta <= 0:
                raise ConfigError(f"{self.kind} needs gamma > 0 and delta > 0")
        if self.kind == "clip" and (self.x_max is None or self.x_max <= 0):
            raise ConfigError("clip needs x_max > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def apply_nonlinearity(x, desc: NonlinearityDesc) -> np.ndarray:
    x = np.asarray(x)
    is_c = np.iscomplexobj(x)
    if desc.kind == "complex_sat":
        if not is_c:
            raise ConfigError("complex_sat needs complex input")
        r = np.abs(x)
        mag = desc.gamma * np.arctan(desc.delta * r)
        return np.where(r > 0, mag * x / np.where(r > 0, r, 1.0), 0.0)
    if is_c:
        raise ConfigError(f"{desc.kind} nonlinearity needs real input")
    if desc.kind == "identity":
        return x.astype(np.float64, copy=True)
    if desc.kind == "sigmoid":
        return desc.gamma * np.arctan(desc.delta * x)
    return np.clip(x, -desc.x_max, desc.x_max)


def compute_sdr(x, fx) -> float:
    """Ratio of the best linear part alpha*x to the residual f(x) - alpha*x, in dB."""
    x = np.asarray(x).ravel()
    fx = np.asarray(fx).ravel()
    pxx = np.mean(np.abs(x) ** 2)
    if pxx <= 0:
        raise ZeroEnergyError("SDR needs an input with nonzero energy")
    alpha = np.mean(np.conj(x) * fx) / pxx
    lin = np.mean(np.abs(alpha * x) ** 2)
    res = np.mean(np.abs(fx - alpha * x) ** 2)
    if res < 1e-30 or lin >= res * 10 ** (SDR_CAP_DB / 10):
        return SDR_CAP_DB
    if lin <= 0:
        return -SDR_CAP_DB
    return float(min(10.0 * np.log10(lin / res), SDR_CAP_DB))


def _reference_sample(rng: Rng, n: int, complex_: bool) -> np.ndarray:
    # one jittered draw per probability stratum: still a random unit-power
    # Gaussian sample, but its tail moments are far less noisy than i.i.d.
    g = rng.child("sdr-reference").gen
    p = (np.arange(n) + g.uniform(size=n)) / n
    if not complex_:
        return ndtri(p)
    r = np.sqrt(-np.log1p(-p))
    return r * np.exp(2j * np.pi * g.uniform(size=n))


@lru_cache(maxsize=256)
def _calibrate_cached(kind, target, seed, path, n_ref, tol_db):
    rng = Rng(seed, path)
    ref = _reference_sample(rng, n_ref, kind == "complex_sat")

    def make(v):
        if kind == "clip":
            return NonlinearityDesc("clip", x_max=v)
        return NonlinearityDesc(kind, gamma=1.0 / v, delta=v)

    def sdr(v):
        return compute_sdr(ref, apply_nonlinearity(ref, make(v)))

    # clip: SDR rises with x_max; sigmoid family: SDR falls with delta
    increasing = kind == "clip"
    lo, hi = np.log(1e-4), np.log(1e4)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        s = sdr(np.exp(mid))
        if abs(s - target) < 1e-6:
            lo = hi = mid
            break
        if (s < target) == increasing:
            lo = mid
        else:
            hi = mid
    v = float(np.exp(0.5 * (lo + hi)))
    achieved = sdr(v)
    if abs(achieved - target) > tol_db:
        raise NumericalError(
            f"{kind}: target SDR {target} dB outside the calibration bracket (reached {achieved:.2f} dB)"
        )
    d = make(v)
    if kind != "clip":
        # SDR ignores the gain, so gamma is free: pick unit output power on
        # the unit-power reference so strongly saturated plants are not quiet
        d.gamma = float(1.0 / np.sqrt(np.mean(np.abs(np.arctan(v * np.abs(ref))) ** 2)))
    d.achieved_sdr_db = achieved
    return d


def calibrate_sdr(kind: str, target_sdr_db: float, rng: Rng, n_ref: int = 1_000_000, tol_db: float = 0.25) -> NonlinearityDesc:
    """Bisect delta (sigmoid, complex_sat) or x_max (clip) to hit a target SDR.

    The SDR is measured on a unit-variance Gaussian reference sample drawn
    from ``rng``. Sigmoid-type curves then get the gain gamma that gives unit
    output power on that sample.
    """
    if kind == "identity":
        return NonlinearityDesc("identity", achieved_sdr_db=SDR_CAP_DB)
    if kind not in NL_KINDS:
        raise ConfigError(f"unknown nonlinearity {kind!r}")
    d = _calibrate_cached(kind, float(target_sdr_db), rng.seed, rng._path, int(n_ref), float(tol_db))
    return NonlinearityDesc(**d.to_dict())


def sdr_targets(sdr_range: tuple[float, float], K: int, variable: bool) -> list[float]:
    """Per-plant SDR targets in dB.

    Variable nonlinearities are spaced evenly on the dB (log-power) scale
    over the range; a shared nonlinearity sits at the range midpoint, so
    either way the mean target equals the configured mean.
    """
    lo, hi = (float(v) for v in sdr_range)
    if hi < lo:
        raise ConfigError(f"invalid SDR range {sdr_range}")
    if not variable or K == 1:
        return [0.5 * (lo + hi)] * K
    return [float(v) for v in np.linspace(lo, hi, K)]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _hash_array(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


@dataclass
class PlantSet:
    structure: str
    h_flag: str
    f_flag: str
    excitation: str
    x: np.ndarray  # (K, N)
    y: np.ndarray  # (K, N)
    h: np.ndarray  # (K, L_h)
    nonlinearities: list[NonlinearityDesc]
    seed: int = 0
    complex: bool = False
    sdr_range: tuple[float, float] = (4.0, 32.0)
    decay_tau: float = 8.0
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.x.shape[0]

    @property
    def N(self) -> int:
        return self.x.shape[1]

    @property
    def sdrs_db(self) -> list[float]:
        return [nl.achieved_sdr_db for nl in self.nonlinearities]

    def regenerate(self) -> np.ndarray:
        """Recompute the outputs from the stored (x, h, f) components."""
        return simulate(self.structure, self.x, self.h, self.nonlinearities)

    def component_hashes(self) -> list[dict[str, str]]:
        out = []
        for k in range(self.K):
            f_blob = json.dumps({**self.nonlinearities[k].to_dict(), "achieved_sdr_db": None}, sort_keys=True)
            out.append(
                {
                    "h": _hash_array(self.h[k]),
                    "f": hashlib.sha256(f_blob.encode()).hexdigest()[:16],
                }
            )
        return out

    def content_hash(self) -> str:
        hsh = hashlib.sha256()
        for a in (self.x, self.y, self.h):
            hsh.update(np.ascontiguousarray(a).tobytes())
        return hsh.hexdigest()

    def metadata(self) -> dict:
        return {
            "structure": self.structure,
            "h_flag": self.h_flag,
            "f_flag": self.f_flag,
            "excitation": self.excitation,
            "K": self.K,
            "N": self.N,
            "L_h": int(self.h.shape[1]),
            "complex": self.complex,
            "seed": self.seed,
            "sdr_range": list(self.sdr_range),
            "decay_tau": self.decay_tau,
            "sdrs_db": self.sdrs_db,
            "nonlinearities": [nl.to_dict() for nl in self.nonlinearities],
            "component_hashes": self.component_hashes(),
            "content_hash": self.content_hash(),
            **self.meta,
        }


def simulate(structure: str, x, h, nonlinearities) -> np.ndarray:
    if structure == WIENER:
        lin = apply_lti(x, h)
        return np.stack([apply_nonlinearity(lin[k], nonlinearities[k]) for k in range(lin.shape[0])])
    if structure == HAMMERSTEIN:
        fx = np.stack([apply_nonlinearity(x[k], nonlinearities[k]) for k in range(x.shape[0])])
        return apply_lti(fx, h)
    raise ConfigError(f"unknown plant structure {structure!r}")


def make_dataset(
    structure: str,
    K: int,
    h_flag: str = "var",
    f_flag: str = "var",
    excitation: str = "white",
    N: int = 8000,
    sdr_range: tuple[float, float] | None = None,
    rng: Rng | int = 0,
    L_h: int = 64,
    decay_tau: float | None = None,
    nl_kind: str | None = None,
    complex: bool = False,
    n_ref: int = 1_000_000,
) -> PlantSet:
    """Simulate K plants of one structure with the given inv/var flags.

    The nonlinearity defaults to clipping for Wiener data, the arctan
    sigmoid for Hammerstein data and the polar saturation for complex data.
    The desired near-end signal is zero, so y is the plant output alone.
    ``sdr_range`` defaults to 4..32 dB for real data and 6..14 dB (mean
    10 dB) for complex data, where the polar saturation cannot go below
    about 5.6 dB.
    """
    if structure not in STRUCTURES:
        raise ConfigError(f"unknown plant structure {structure!r}")
    if K < 1:
        raise ConfigError("K must be >= 1")
    for flag in (h_flag, f_flag):
        if flag not in ("inv", "var"):
            raise ConfigError(f"variability flag must be 'inv' or 'var', got {flag!r}")
    rng = Rng(rng) if isinstance(rng, int) else rng
    if nl_kind is None:
        nl_kind = "complex_sat" if complex else ("clip" if structure == WIENER else "sigmoid")
    if complex and nl_kind not in ("complex_sat", "identity"):
        raise ConfigError("complex data supports complex_sat or identity nonlinearities")
    if not complex and nl_kind == "complex_sat":
        raise ConfigError("complex_sat needs complex data")
    tau = decay_tau if decay_tau is not None else L_h / 8.0
    if sdr_range is None:
        sdr_range = COMPLEX_SDR_RANGE if complex else REAL_SDR_RANGE

    x = gen_excitation(excitation, N, K, rng, complex)
    h = np.stack(
        [
            gen_impulse_response(L_h, tau, rng.child(f"h/{k if h_flag == 'var' else 0}"), complex)
            for k in range(K)
        ]
    )
    targets = sdr_targets(sdr_range, K, f_flag == "var")
    nls = [calibrate_sdr(nl_kind, t, rng, n_ref) for t in targets]
    y = simulate(structure, x, h, nls)
    return PlantSet(
        structure=structure,
        h_flag=h_flag,
        f_flag=f_flag,
        excitation=excitation,
        x=x,
        y=y,
        h=h,
        nonlinearities=nls,
        seed=rng.seed,
        complex=complex,
        sdr_range=(float(sdr_range[0]), float(sdr_range[1])),
        decay_tau=tau,
        meta={"nl_kind": nl_kind, "sdr_targets_db": targets},
    )


def _as_f64(a: np.ndarray) -> np.ndarray:
    """Complex arrays become interleaved (re, im) pairs."""
    if np.iscomplexobj(a):
        return np.ascontiguousarray(a, dtype=np.complex128).view(np.float64)
    return np.ascontiguousarray(a, dtype=np.float64)


def save_dataset(ps: PlantSet, directory) -> Path:
    """Write metadata.json plus one little-endian f64 file per plant (x, y, h)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layout = {}
    offset = 0
    for name, arr in (("x", ps.x[0]), ("y", ps.y[0]), ("h", ps.h[0])):
        n = _as_f64(arr).size
        layout[name] = [offset, n]
        offset += n
    files = []
    for k in range(ps.K):
        blob = np.concatenate([_as_f64(ps.x[k]), _as_f64(ps.y[k]), _as_f64(ps.h[k])])
        fname = f"plant_{k:02d}.f64"
        (d / fname).write_bytes(blob.astype("<f8").tobytes())
        files.append(fname)
    meta = ps.metadata()
    meta["files"] = files
    meta["layout"] = layout
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_dataset(directory) -> PlantSet:
    d = Path(directory)
    meta = json.loads((d / "metadata.json").read_text())
    is_c = bool(meta["complex"])
    xs, ys, hs = [], [], []
    for fname in meta["files"]:
        blob = np.frombuffer((d / fname).read_bytes(), dtype="<f8")
        parts = []
        for name in ("x", "y", "h"):
            off, n = meta["layout"][name]
            seg = blob[off : off + n].copy()
            parts.append(seg.view(np.complex128) if is_c else seg)
        xs.append(parts[0])
        ys.append(parts[1])
        hs.append(parts[2])
    if len(xs) != meta["K"]:
        raise ShapeError(f"{d}: metadata lists {meta['K']} plants, found {len(xs)} files")
    skip = {"structure", "h_flag", "f_flag", "excitation", "K", "N", "L_h", "complex", "seed",
            "sdr_range", "decay_tau", "sdrs_db", "nonlinearities", "component_hashes",
            "content_hash", "files", "layout"}
    return PlantSet(
        structure=meta["structure"],
        h_flag=meta["h_flag"],
        f_flag=meta["f_flag"],
        excitation=meta["excitation"],
        x=np.stack(xs),
        y=np.stack(ys),
        h=np.stack(hs),
        nonlinearities=[NonlinearityDesc(**nl) for nl in meta["nonlinearities"]],
        seed=meta["seed"],
        complex=is_c,
        sdr_range=tuple(meta["sdr_range"]),
        decay_tau=meta["decay_tau"],
        meta={k: v for k, v in meta.items() if k not in skip},
    )


def linear_dataset(K: int, excitation: str = "white", N: int = 8000, rng: Rng | int = 0, L_h: int = 64,
                   h_flag: str = "var", complex: bool = False) -> PlantSet:
    """Purely linear multiplant data (Hammerstein with identity nonlinearity)."""
    return make_dataset(HAMMERSTEIN, K, h_flag, "inv", excitation, N, (1.0, 1.0), rng, L_h,
                        nl_kind="identity", complex=complex)
