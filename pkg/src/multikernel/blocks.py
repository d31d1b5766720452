"""Differentiable model blocks.

All blocks map (T, K, C_in, M) arrays to (T, K, C_out, M_out) arrays and keep
the frame and plant axes untouched. Each block exposes ``params`` (a dict of
arrays the optimiser updates in place), ``forward`` (caches what backward
needs) and ``backward`` (fills ``grads`` and returns the input gradient).

Complex gradients follow the ``dL/dRe + j dL/dIm`` convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Rng, dft_forward, dft_inverse, is_power_of_two
from .errors import ConfigError, ShapeError

MULTIKERNEL = "multikernel"
SINGLE_KERNEL = "single_kernel"
KERNEL_MODES = (MULTIKERNEL, SINGLE_KERNEL)

# magnitudes below this are treated as zero by the polar NL block
MAG_EPS = 1e-12


def _check_mode(mode: str) -> None:
    if mode not in KERNEL_MODES:
        raise ConfigError(f"unknown kernel mode {mode!r}; expected one of {KERNEL_MODES}")


def _kernel_plants(kernel_k: int, data_k: int, mode: str) -> None:
    if mode == SINGLE_KERNEL:
        if kernel_k != 1:
            raise ShapeError(f"single-kernel weights need a plant axis of 1, got {kernel_k}")
    elif kernel_k != data_k:
        raise ShapeError(f"multikernel weights have {kernel_k} plants, data has {data_k}")


# ---------------------------------------------------------------------------
# NL block
# ---------------------------------------------------------------------------


@dataclass
class NlBlockParams:
    """Weights of the bias-free tanh MLP.

    ``hidden_weights[l]`` has shape (P_{l+1}, P_l) with P_0 the input channel
    count; ``output_weights`` has shape (P, P_D).
    """

    hidden_weights: list[np.ndarray]
    output_weights: np.ndarray
    hidden_biases: list[np.ndarray] | None = None

    def __post_init__(self):
        self.hidden_weights = [np.array(w, dtype=np.float64, order="C") for w in self.hidden_weights]
        self.output_weights = np.array(self.output_weights, dtype=np.float64, order="C")
        if not self.hidden_weights:
            raise ConfigError("NL block needs at least one hidden layer")
        for prev, nxt in zip(self.hidden_weights, self.hidden_weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ShapeError(f"hidden layer shapes do not chain: {prev.shape} -> {nxt.shape}")
        if self.output_weights.shape[1] != self.hidden_weights[-1].shape[0]:
            raise ShapeError(
                f"output layer {self.output_weights.shape} does not match last hidden "
                f"layer {self.hidden_weights[-1].shape}"
            )
        for w in [*self.hidden_weights, self.output_weights]:
            if not np.all(np.isfinite(w)):
                raise ShapeError("NL weights must be finite")

    @property
    def in_channels(self) -> int:
        return self.hidden_weights[0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.output_weights.shape[0]

    @property
    def widths(self) -> list[int]:
        return [w.shape[0] for w in self.hidden_weights]

    def as_dict(self) -> dict[str, np.ndarray]:
        d = {f"hidden_{i}": w for i, w in enumerate(self.hidden_weights)}
        if self.hidden_biases is not None:
            d.update({f"bias_{i}": b for i, b in enumerate(self.hidden_biases)})
        d["output"] = self.output_weights
        return d

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "NlBlockParams":
        depth = sum(1 for k in d if k.startswith("hidden_"))
        biases = None
        if "bias_0" in d:
            biases = [d[f"bias_{i}"] for i in range(depth)]
        return cls([d[f"hidden_{i}"] for i in range(depth)], d["output"], biases)


def init_nl_params(
    in_channels: int, widths: list[int], out_channels: int, rng: Rng, bias: bool = False
) -> NlBlockParams:
    """Glorot-uniform weights, zero biases when enabled."""
    dims = [in_channels, *widths]
    hidden = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        hidden.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
    lim = np.sqrt(6.0 / (widths[-1] + out_channels))
    out = rng.uniform(-lim, lim, size=(out_channels, widths[-1]))
    biases = [np.zeros(w) for w in widths] if bias else None
    return NlBlockParams(hidden, out, biases)


def _nl_apply(x: np.ndarray, params: NlBlockParams):
    """Evaluate the MLP on (T, K, I, M); returns output and per-layer activations.

    Activations are kept channels-first, (width, T*K*M), so every layer is a
    single wide matrix product.
    """
    if x.shape[2] != params.in_channels:
        raise ShapeError(
            f"NL block expects {params.in_channels} input channels, got {x.shape[2]}"
        )
    T, K, I, M = x.shape
    h = np.ascontiguousarray(np.moveaxis(x, 2, 0)).reshape(I, -1)
    acts = [h]
    for i, w in enumerate(params.hidden_weights):
        z = w @ h
        if params.hidden_biases is not None:
            z += params.hidden_biases[i][:, None]
        h = np.tanh(z, out=z)
        acts.append(h)
    y = params.output_weights @ h
    y = np.moveaxis(y.reshape(-1, T, K, M), 0, 2)
    return y, acts


def nl_forward(x: np.ndarray, params: NlBlockParams) -> np.ndarray:
    """Memoryless tanh MLP applied per time step: (T,K,I,M) -> (T,K,P,M)."""
    return _nl_apply(np.asarray(x, dtype=np.float64), params)[0]


# ---------------------------------------------------------------------------
# FIR convolution kernels (shared by real and complex time-domain blocks)
# ---------------------------------------------------------------------------


def _spectra(a: np.ndarray, n: int, axis: int, real: bool) -> np.ndarray:
    return np.fft.rfft(a, n, axis=axis) if real else np.fft.fft(a, n, axis=axis)


def _back(a: np.ndarray, n: int, real: bool) -> np.ndarray:
    return np.fft.irfft(a, n, axis=-1) if real else np.fft.ifft(a, n, axis=-1)


def _conv_valid(x: np.ndarray, w: np.ndarray):
    """Valid multichannel convolution via FFT of length M (overlap-save in one frame).

    x: (T, K, I, M), w: (L, Kw, I, P) with Kw in {1, K}. Returns the output
    (T, K, P, M-L+1) and the input/kernel spectra for reuse in backward.
    """
    M = x.shape[-1]
    L = w.shape[0]
    real = not (np.iscomplexobj(x) or np.iscomplexobj(w))
    xf = _spectra(x, M, -1, real)  # (T, K, I, F)
    wf = np.moveaxis(_spectra(w, M, 0, real), 0, -1)  # (Kw, I, P, F)
    df = np.einsum("tkif,kipf->tkpf", xf, wf) if wf.shape[0] > 1 else np.einsum(
        "tkif,ipf->tkpf", xf, wf[0]
    )
    d = _back(df, M, real)[..., L - 1 :]
    return d, xf, wf


def _conv_valid_backward(g: np.ndarray, xf: np.ndarray, wf: np.ndarray, M: int, L: int, real: bool):
    """Adjoint of :func:`_conv_valid` for output gradient g (T, K, P, M-L+1)."""
    T, K, P, _ = g.shape
    gfull = np.zeros((T, K, P, M), dtype=g.dtype)
    gfull[..., L - 1 :] = g
    gf = _spectra(gfull, M, -1, real)
    wfc = np.conj(wf)
    if wf.shape[0] > 1:
        gxf = np.einsum("tkpf,kipf->tkif", gf, wfc)
        swf = np.einsum("tkif,tkpf->kipf", np.conj(xf), gf)
    else:
        gxf = np.einsum("tkpf,ipf->tkif", gf, wfc[0])
        swf = np.einsum("tkif,tkpf->ipf", np.conj(xf), gf)[None]
    gx = _back(gxf, M, real)
    gw = np.moveaxis(_back(swf, M, real)[..., :L], -1, 0)
    return gx, gw


def fir_time_forward(x, w, mode: str = MULTIKERNEL) -> np.ndarray:
    """Multikernel "valid" convolution along time.

    ``d[t,k,p,m] = sum_i sum_l x[t,k,i,m+L-1-l] * w[l,k,i,p]`` for the
    M-L+1 output samples; single-kernel weights carry a plant axis of 1.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    _check_mode(mode)
    if w.ndim != 4:
        raise ShapeError(f"FIR kernel must be (L, K, I, P), got {w.shape}")
    L = w.shape[0]
    if L < 1:
        raise ShapeError("FIR kernel length must be at least 1")
    if x.shape[-1] < L:
        raise ShapeError(f"frame of {x.shape[-1]} samples is shorter than the kernel ({L})")
    if x.shape[2] != w.shape[2]:
        raise ShapeError(f"kernel expects {w.shape[2]} input channels, got {x.shape[2]}")
    _kernel_plants(w.shape[1], x.shape[1], mode)
    return _conv_valid(x, w)[0]


def complex_fir_forward(x, w_re, w_im, mode: str = MULTIKERNEL) -> np.ndarray:
    """Complex FIR in Cartesian form: (a+jb)*(c+jd) = (a*c - b*d) + j(a*d + b*c)."""
    x = np.asarray(x, dtype=np.complex128)
    a, b = x.real, x.imag
    re = fir_time_forward(a, w_re, mode) - fir_time_forward(b, w_im, mode)
    im = fir_time_forward(a, w_im, mode) + fir_time_forward(b, w_re, mode)
    return re + 1j * im


# ---------------------------------------------------------------------------
# frequency-domain kernels
# ---------------------------------------------------------------------------


def constrain_freq_kernel(W: np.ndarray, L: int, allow_naive: bool = True) -> np.ndarray:
    """Project (M, K, I, P) spectra onto kernels supported on the first L taps."""
    W = np.asarray(W, dtype=np.complex128)
    M = W.shape[0]
    if not 1 <= L <= M:
        raise ShapeError(f"constraint length {L} outside 1..{M}")
    w = dft_inverse(np.moveaxis(W, 0, -1), allow_naive)
    w[..., L:] = 0.0
    return np.moveaxis(dft_forward(w, allow_naive), -1, 0)


def fir_freq_forward(x, W, L: int, mode: str = MULTIKERNEL, allow_naive: bool = False) -> np.ndarray:
    """Overlap-save filtering of each frame with a constrained spectral kernel.

    x: (T, K, I, M) real, W: (M, K, I, P) complex. Returns the last R = M-L+1
    samples of every frame, (T, K, P, R).
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.complex128)
    _check_mode(mode)
    M = x.shape[-1]
    if W.shape[0] != M:
        raise ShapeError(f"frame length {M} does not match kernel DFT size {W.shape[0]}")
    if not allow_naive and not is_power_of_two(M):
        raise ConfigError(f"frequency-domain FIR needs a power-of-two frame, got M={M}")
    if x.shape[2] != W.shape[2]:
        raise ShapeError(f"kernel expects {W.shape[2]} input channels, got {x.shape[2]}")
    _kernel_plants(W.shape[1], x.shape[1], mode)
    return _freq_apply(x, constrain_freq_kernel(W, L, allow_naive), L, allow_naive)[0]


def _freq_apply(x, Wc, L, allow_naive):
    M = x.shape[-1]
    R = M - L + 1
    X = dft_forward(x, allow_naive)  # (T, K, I, M)
    Wt = np.moveaxis(Wc, 0, -1)  # (Kw, I, P, M)
    if Wt.shape[0] > 1:
        D = np.einsum("tkim,kipm->tkpm", X, Wt)
    else:
        D = np.einsum("tkim,ipm->tkpm", X, Wt[0])
    d = dft_inverse(D, allow_naive)
    return d[..., M - R :].real.copy(), X, Wt


# ---------------------------------------------------------------------------
# polar complex NL
# ---------------------------------------------------------------------------


def _unit_phasor(z: np.ndarray):
    r = np.abs(z)
    rc = np.maximum(r, MAG_EPS)
    u = np.where(r >= MAG_EPS, z / rc, 0.0)
    return r, rc, u


def complex_nl_forward(z, params: NlBlockParams) -> np.ndarray:
    """Apply the real NL block to |z| and restore the phase of z."""
    z = np.asarray(z, dtype=np.complex128)
    if params.in_channels != 1 or z.shape[2] != 1:
        raise ShapeError("polar NL block takes exactly one complex input channel")
    r, _, u = _unit_phasor(z)
    return nl_forward(r, params) * u


# ---------------------------------------------------------------------------
# stateful blocks
# ---------------------------------------------------------------------------


class Block:
    """Base class: parameter dict, gradient dict, forward and backward."""

    kind = "block"
    has_memory = False

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def out_length(self, m: int) -> int:
        return m

    def forward(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, g):  # pragma: no cover - interface
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, n_params={self.n_params})"


class NLBlock(Block):
    kind = "nl"

    def __init__(self, params: NlBlockParams, name: str = "nl"):
        super().__init__(name)
        self.params = params.as_dict()
        self._depth = len(params.hidden_weights)
        self._bias = params.hidden_biases is not None
        self._cache = None

    @classmethod
    def create(cls, in_channels, widths, out_channels, rng: Rng, bias=False, name="nl"):
        return cls(init_nl_params(in_channels, list(widths), out_channels, rng, bias), name)

    @property
    def nl_params(self) -> NlBlockParams:
        return NlBlockParams.from_dict(self.params)

    @property
    def in_channels(self) -> int:
        return self.params["hidden_0"].shape[1]

    @property
    def out_channels(self) -> int:
        return self.params["output"].shape[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        y, acts = _nl_apply(x, self.nl_params)
        self._cache = (x.shape, acts)
        return y

    def backward(self, g):
        shape, acts = self._cache
        T, K, I, M = shape
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (T, K, self.out_channels, M):
            raise ShapeError(f"{self.name}: upstream gradient shape {g.shape} mismatches output")
        gf = np.ascontiguousarray(np.moveaxis(g, 2, 0)).reshape(self.out_channels, -1)
        grads = {"output": gf @ acts[-1].T}
        gh = self.params["output"].T @ gf
        for i in reversed(range(self._depth)):
            a = acts[i + 1]
            gz = np.multiply(a, a)
            np.subtract(1.0, gz, out=gz)
            gz *= gh
            grads[f"hidden_{i}"] = gz @ acts[i].T
            if self._bias:
                grads[f"bias_{i}"] = gz.sum(axis=1)
            gh = self.params[f"hidden_{i}"].T @ gz
        self.grads = grads
        return np.moveaxis(gh.reshape(I, T, K, M), 0, 2)


def _init_time_kernel(L, K, I, P, rng: Rng) -> np.ndarray:
    return rng.normal(np.sqrt(1.0 / (L * I)), size=(L, K, I, P))


class FIRTimeBlock(Block):
    kind = "fir"
    has_memory = True

    def __init__(self, w: np.ndarray, mode: str = MULTIKERNEL, name: str = "fir"):
        super().__init__(name)
        _check_mode(mode)
        w = np.array(w, dtype=np.float64, order="C")
        if w.ndim != 4 or w.shape[0] < 1:
            raise ShapeError(f"FIR kernel must be (L, K, I, P) with L >= 1, got {w.shape}")
        if mode == SINGLE_KERNEL and w.shape[1] != 1:
            raise ShapeError("single-kernel weights need a plant axis of 1")
        self.mode = mode
        self.params = {"w": w}
        self._cache = None

    @classmethod
    def create(cls, L, K, I, P, rng: Rng, mode=MULTIKERNEL, name="fir"):
        kw = 1 if mode == SINGLE_KERNEL else K
        return cls(_init_time_kernel(L, kw, I, P, rng), mode, name)

    @property
    def L(self) -> int:
        return self.params["w"].shape[0]

    def out_length(self, m: int) -> int:
        return m - self.L + 1

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        w = self.params["w"]
        if x.shape[2] != w.shape[2]:
            raise ShapeError(f"{self.name}: kernel expects {w.shape[2]} input channels, got {x.shape[2]}")
        _kernel_plants(w.shape[1], x.shape[1], self.mode)
        if x.shape[-1] < self.L:
            raise ShapeError(f"{self.name}: frame shorter than kernel")
        y, xf, wf = _conv_valid(x, w)
        self._cache = (xf, wf, x.shape[-1])
        return y

    def backward(self, g):
        xf, wf, M = self._cache
        gx, gw = _conv_valid_backward(np.asarray(g, dtype=np.float64), xf, wf, M, self.L, True)
        self.grads = {"w": gw}
        return gx


class ComplexFIRBlock(Block):
    """Complex FIR on baseband data, weights stored as real and imaginary kernels."""

    kind = "cfir"
    has_memory = True

    def __init__(self, w_re, w_im, mode: str = MULTIKERNEL, name: str = "cfir"):
        super().__init__(name)
        _check_mode(mode)
        w_re = np.array(w_re, dtype=np.float64, order="C")
        w_im = np.array(w_im, dtype=np.float64, order="C")
        if w_re.shape != w_im.shape or w_re.ndim != 4 or w_re.shape[0] < 1:
            raise ShapeError("complex FIR needs matching (L, K, I, P) real and imaginary kernels")
        self.mode = mode
        self.params = {"w_re": w_re, "w_im": w_im}
        self._cache = None

    @classmethod
    def create(cls, L, K, I, P, rng: Rng, mode=MULTIKERNEL, name="cfir"):
        kw = 1 if mode == SINGLE_KERNEL else K
        s = np.sqrt(0.5 / (L * I))
        return cls(rng.normal(s, (L, kw, I, P)), rng.normal(s, (L, kw, I, P)), mode, name)

    @property
    def L(self) -> int:
        return self.params["w_re"].shape[0]

    def out_length(self, m: int) -> int:
        return m - self.L + 1

    def forward(self, x):
        x = np.asarray(x, dtype=np.complex128)
        w = self.params["w_re"] + 1j * self.params["w_im"]
        if x.shape[2] != w.shape[2]:
            raise ShapeError(f"{self.name}: kernel expects {w.shape[2]} input channels, got {x.shape[2]}")
        _kernel_plants(w.shape[1], x.shape[1], self.mode)
        if x.shape[-1] < self.L:
            raise ShapeError(f"{self.name}: frame shorter than kernel")
        y, xf, wf = _conv_valid(x, w)
        self._cache = (xf, wf, x.shape[-1])
        return y

    def backward(self, g):
        xf, wf, M = self._cache
        gx, gw = _conv_valid_backward(np.asarray(g, dtype=np.complex128), xf, wf, M, self.L, False)
        self.grads = {"w_re": gw.real.copy(), "w_im": gw.imag.copy()}
        return gx


class FIRFreqBlock(Block):
    """Overlap-save FIR block with spectral weights of shape (M, K, I, P).

    The time-domain support is projected to the first L taps on every
    forward pass, and gradients flow through that projection.
    """

    kind = "fir_freq"
    has_memory = True

    def __init__(self, W_re, W_im, L: int, mode: str = MULTIKERNEL, allow_naive=False, name="fir_freq"):
        super().__init__(name)
        _check_mode(mode)
        W_re = np.array(W_re, dtype=np.float64, order="C")
        W_im = np.array(W_im, dtype=np.float64, order="C")
        if W_re.shape != W_im.shape or W_re.ndim != 4:
            raise ShapeError("spectral kernel needs matching (M, K, I, P) real and imaginary parts")
        M = W_re.shape[0]
        if not 1 <= L <= M:
            raise ShapeError(f"constraint length {L} outside 1..{M}")
        if not allow_naive and not is_power_of_two(M):
            raise ConfigError(f"frequency-domain FIR needs a power-of-two DFT size, got M={M}")
        self.mode = mode
        self.L = int(L)
        self.M = M
        self.allow_naive = allow_naive
        self.params = {"W_re": W_re, "W_im": W_im}
        self._cache = None

    @classmethod
    def create(cls, L, M, K, I, P, rng: Rng, mode=MULTIKERNEL, allow_naive=False, name="fir_freq"):
        kw = 1 if mode == SINGLE_KERNEL else K
        w = np.zeros((M, kw, I, P))
        w[:L] = _init_time_kernel(L, kw, I, P, rng)
        W = np.moveaxis(dft_forward(np.moveaxis(w, 0, -1), allow_naive), -1, 0)
        W = constrain_freq_kernel(W, L, allow_naive)
        return cls(W.real, W.imag, L, mode, allow_naive, name)

    @property
    def R(self) -> int:
        return self.M - self.L + 1

    def out_length(self, m: int) -> int:
        return self.R

    def time_kernel(self) -> np.ndarray:
        """Real part of the constrained kernel, (L, K, I, P)."""
        W = self.params["W_re"] + 1j * self.params["W_im"]
        w = dft_inverse(np.moveaxis(W, 0, -1), self.allow_naive)[..., : self.L]
        return np.moveaxis(w.real, -1, 0)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.M:
            raise ShapeError(f"{self.name}: frame length {x.shape[-1]} != DFT size {self.M}")
        W = self.params["W_re"] + 1j * self.params["W_im"]
        if x.shape[2] != W.shape[2]:
            raise ShapeError(f"{self.name}: kernel expects {W.shape[2]} input channels, got {x.shape[2]}")
        _kernel_plants(W.shape[1], x.shape[1], self.mode)
        Wc = constrain_freq_kernel(W, self.L, self.allow_naive)
        y, X, Wt = _freq_apply(x, Wc, self.L, self.allow_naive)
        self._cache = (X, Wt)
        return y

    def backward(self, g):
        X, Wt = self._cache
        M, R, naive = self.M, self.R, self.allow_naive
        g = np.asarray(g, dtype=np.float64)
        T, K, P, _ = g.shape
        gpad = np.zeros((T, K, P, M))
        gpad[..., M - R :] = g
        gD = dft_forward(gpad, naive) / M
        if Wt.shape[0] > 1:
            gX = np.einsum("tkpm,kipm->tkim", gD, np.conj(Wt))
            gWc = np.einsum("tkpm,tkim->kipm", gD, np.conj(X))
        else:
            gX = np.einsum("tkpm,ipm->tkim", gD, np.conj(Wt[0]))
            gWc = np.einsum("tkpm,tkim->ipm", gD, np.conj(X))[None]
        gx = (M * dft_inverse(gX, naive)).real
        # adjoint of F . mask . F^{-1}
        gt = M * dft_inverse(gWc, naive)
        gt[..., self.L :] = 0.0
        gW = np.moveaxis(dft_forward(gt, naive) / M, -1, 0)
        self.grads = {"W_re": gW.real.copy(), "W_im": gW.imag.copy()}
        return gx


class ComplexNLBlock(Block):
    """NL block on the magnitude of complex data with the input phase restored."""

    kind = "cnl"

    def __init__(self, params: NlBlockParams, name: str = "cnl"):
        super().__init__(name)
        if params.in_channels != 1:
            raise ShapeError("polar NL block takes exactly one input channel")
        self._nl = NLBlock(params, name)
        self.params = self._nl.params
        self._cache = None

    @classmethod
    def create(cls, widths, out_channels, rng: Rng, bias=False, name="cnl"):
        return cls(init_nl_params(1, list(widths), out_channels, rng, bias), name)

    @property
    def nl_params(self) -> NlBlockParams:
        return self._nl.nl_params

    def forward(self, z):
        z = np.asarray(z, dtype=np.complex128)
        if z.shape[2] != 1:
            raise ShapeError(f"{self.name}: polar NL block takes one complex channel, got {z.shape[2]}")
        r, rc, u = _unit_phasor(z)
        n = self._nl.forward(r)
        self._cache = (rc, u, n)
        return n * u

    def backward(self, g):
        rc, u, n = self._cache
        g = np.asarray(g, dtype=np.complex128)
        local = np.conj(u) * g  # gradient in the (radial, tangential) frame
        grad_r = self._nl.backward(local.real)
        self.grads = self._nl.grads
        tangential = np.sum(local.imag * n, axis=2, keepdims=True) / rc
        return u * (grad_r + 1j * tangential)


def block_backward(block: Block, x, upstream):
    """Run forward on ``x`` then backward with ``upstream``; returns (grad_input, grads)."""
    y = block.forward(x)
    if np.shape(upstream) != y.shape:
        raise ShapeError(f"upstream gradient shape {np.shape(upstream)} != output shape {y.shape}")
    gx = block.backward(upstream)
    return gx, dict(block.grads)
