"""Block-structured model composition.

A model is an ordered chain of FIR and NL stages written in the compact
notation ``FIR6-NL6-FIR`` (subscripts give the number of output channels of
each stage; the last stage is always single-channel). Data is cut into
overlapping frames and the model predicts the last R samples of every frame.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .blocks import (
    KERNEL_MODES,
    MULTIKERNEL,
    Block,
    ComplexFIRBlock,
    ComplexNLBlock,
    FIRFreqBlock,
    FIRTimeBlock,
    NLBlock,
)
from .core import Rng, is_power_of_two
from .errors import ConfigError, ShapeError

BIDM_MAGIC = b"BIDM"
BIDM_VERSION = 1


class ModelParseError(ConfigError):
    def __init__(self, message: str, notation: str, position: int):
        super().__init__(f"{message} at position {position} in {notation!r}")
        self.position = position


@dataclass
class Stage:
    kind: str  # "FIR" or "NL"
    out_channels: int = 1
    kernel_len: int | None = None
    fir_domain: str = "time"


@dataclass
class FrameSpec:
    M: int
    R: int
    L_tot: int = 1

    def __post_init__(self):
        if self.R < 1 or self.M < 1:
            raise ConfigError(f"frame length and shift must be positive, got M={self.M}, R={self.R}")
        if self.M < self.L_tot:
            raise ConfigError(f"frame length {self.M} shorter than total memory {self.L_tot}")
        if self.M - self.L_tot + 1 < self.R:
            raise ConfigError(
                f"frame M={self.M} leaves {self.M - self.L_tot + 1} valid samples, fewer than R={self.R}"
            )

    @property
    def overlap(self) -> int:
        return self.M - self.R


@dataclass
class ModelSpec:
    stages: list[Stage]
    plants: int
    kernel_mode: str = MULTIKERNEL
    complex: bool = False
    nl_widths: list[int] = field(default_factory=lambda: [6] * 5)
    nl_bias: bool = False

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        if self.kernel_mode not in KERNEL_MODES:
            raise ConfigError(f"unknown kernel mode {self.kernel_mode!r}")
        if not self.stages:
            raise ConfigError("model has no stages")
        if self.plants < 1:
            raise ConfigError("plant count must be positive")
        if self.stages[-1].out_channels != 1:
            raise ConfigError("the last stage must have a single output channel")
        for i, st in enumerate(self.stages):
            if st.kind not in ("FIR", "NL"):
                raise ConfigError(f"stage {i}: unknown kind {st.kind!r}")
            if st.out_channels < 1:
                raise ConfigError(f"stage {i}: channel count must be positive")
            if st.kind == "FIR":
                if st.kernel_len is None or st.kernel_len < 1:
                    raise ConfigError(f"stage {i}: FIR stage needs a kernel length >= 1")
                if st.fir_domain not in ("time", "freq"):
                    raise ConfigError(f"stage {i}: unknown FIR domain {st.fir_domain!r}")
            elif st.kernel_len not in (None, 1):
                raise ConfigError(f"stage {i}: NL stages are memoryless")
        if self.complex:
            if any(s.kind == "FIR" and s.fir_domain == "freq" for s in self.stages):
                raise ConfigError("complex models support time-domain FIR stages only")
            for i, st in enumerate(self.stages):
                if st.kind == "NL" and self.in_channels(i) != 1:
                    raise ConfigError(f"stage {i}: polar NL stage needs one input channel")
        freq = [i for i, s in enumerate(self.stages) if s.kind == "FIR" and s.fir_domain == "freq"]
        if freq:
            memory = [i for i, s in enumerate(self.stages) if s.kind == "FIR" and s.kernel_len > 1]
            if len(freq) > 1 or memory not in ([], freq):
                raise ConfigError(
                    "a frequency-domain FIR stage must be the only stage with memory"
                )

    def in_channels(self, index: int) -> int:
        return 1 if index == 0 else self.stages[index - 1].out_channels

    @property
    def kernel_lens(self) -> list[int]:
        return [s.kernel_len for s in self.stages if s.kind == "FIR"]

    @property
    def total_memory(self) -> int:
        return sum(L - 1 for L in self.kernel_lens) + 1

    @property
    def uses_freq(self) -> bool:
        return any(s.kind == "FIR" and s.fir_domain == "freq" for s in self.stages)

    @property
    def notation(self) -> str:
        parts = []
        for s in self.stages[:-1]:
            parts.append(f"{s.kind}{s.out_channels}")
        parts.append(self.stages[-1].kind)
        return "-".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


_TOKEN = re.compile(r"(FIR|NL)_?(\d*)")


def parse_model(
    notation: str,
    plants: int,
    kernel_lens: list[int] | int = 64,
    kernel_mode: str = MULTIKERNEL,
    fir_domain: str = "time",
    complex: bool = False,
    nl_widths: list[int] | None = None,
    nl_bias: bool = False,
) -> ModelSpec:
    """Build a ModelSpec from notation such as ``FIR6-NL6-FIR`` or ``NL_6FIR``.

    ``kernel_lens`` lists one length per FIR stage in order (a single int is
    used for every FIR stage).
    """
    pos = 0
    raw = []
    text = notation.strip()
    if not text:
        raise ModelParseError("empty model notation", notation, 0)
    while pos < len(text):
        if text[pos] in "-_ ":
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if not m:
            raise ModelParseError(f"unexpected {text[pos]!r}", notation, pos)
        raw.append((m.group(1), m.group(2), pos))
        pos = m.end()
    if not raw:
        raise ModelParseError("no stages", notation, 0)
    n_fir = sum(1 for kind, _, _ in raw if kind == "FIR")
    lens = [kernel_lens] * n_fir if isinstance(kernel_lens, int) else list(kernel_lens)
    if len(lens) != n_fir:
        raise ConfigError(f"{notation!r} has {n_fir} FIR stages but {len(lens)} kernel lengths were given")
    stages = []
    fir_i = 0
    for idx, (kind, digits, at) in enumerate(raw):
        last = idx == len(raw) - 1
        if last and digits and int(digits) != 1:
            raise ModelParseError("last stage must be single-channel", notation, at)
        if not last and not digits:
            raise ModelParseError(f"{kind} stage needs an output channel count", notation, at + len(kind))
        out = int(digits) if digits else 1
        if kind == "FIR":
            stages.append(Stage("FIR", out, int(lens[fir_i]), fir_domain))
            fir_i += 1
        else:
            stages.append(Stage("NL", out))
    return ModelSpec(
        stages,
        plants=plants,
        kernel_mode=kernel_mode,
        complex=complex,
        nl_widths=list(nl_widths) if nl_widths is not None else [6] * 5,
        nl_bias=nl_bias,
    )


def frame_rule(kernel_lens: list[int], fir_domain: str = "time") -> FrameSpec:
    """Frame length and shift for a chain of FIR stages.

    Time domain: M = 2 * sum(L), R = floor((M - sum(L) + 1) / 2).
    Frequency domain (single memory stage of length L): the smallest
    power-of-two M >= 2L with R = M - L + 1.
    """
    lens = [int(L) for L in kernel_lens] or [1]
    L_tot = sum(L - 1 for L in lens) + 1
    if fir_domain == "freq":
        L = max(lens)
        M = 1
        while M < 2 * L:
            M *= 2
        return FrameSpec(M, M - L + 1, L_tot)
    s = sum(lens)
    M = 2 * s
    return FrameSpec(M, (M - s + 1) // 2, L_tot)


def frame_for(spec: ModelSpec) -> FrameSpec:
    return frame_rule(spec.kernel_lens, "freq" if spec.uses_freq else "time")


def segment_frames(x, frame: FrameSpec) -> np.ndarray:
    """Cut (K, N) or (K, I, N) sequences into (T, K, I, M) overlapping frames."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3:
        raise ShapeError(f"expected (K, N) or (K, I, N) sequences, got {x.shape}")
    N = x.shape[-1]
    if N < frame.M:
        raise ShapeError(f"sequence of {N} samples is shorter than one frame ({frame.M})")
    T = (N - frame.M) // frame.R + 1
    win = np.lib.stride_tricks.sliding_window_view(x, frame.M, axis=-1)[:, :, :: frame.R][:, :, :T]
    return np.ascontiguousarray(np.moveaxis(win, 2, 0))


def segment_targets(y, frame: FrameSpec) -> np.ndarray:
    """Target samples y[tR + M - R .. tR + M - 1] for every frame, (T, K, 1, R)."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[:, None, :]
    N = y.shape[-1]
    if N < frame.M:
        raise ShapeError(f"sequence of {N} samples is shorter than one frame ({frame.M})")
    T = (N - frame.M) // frame.R + 1
    tail = y[..., frame.M - frame.R :]
    win = np.lib.stride_tricks.sliding_window_view(tail, frame.R, axis=-1)[:, :, :: frame.R][:, :, :T]
    return np.ascontiguousarray(np.moveaxis(win, 2, 0))


def frame_coverage(N: int, frame: FrameSpec) -> slice:
    """Sample range of the original sequence covered by the concatenated predictions."""
    T = (N - frame.M) // frame.R + 1
    start = frame.M - frame.R
    return slice(start, start + T * frame.R)


class Model:
    """A chain of blocks with a frame specification."""

    def __init__(self, spec: ModelSpec, frame: FrameSpec, blocks: list[Block]):
        self.spec = spec
        self.frame = frame
        self.blocks = blocks
        self._out_len = None

    @property
    def n_params(self) -> int:
        return sum(b.n_params for b in self.blocks)

    def param_counts(self) -> list[int]:
        return [b.n_params for b in self.blocks]

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.complex128 if self.spec.complex else np.float64)
        if x.ndim != 4:
            raise ShapeError(f"model input must be (T, K, 1, M), got {x.shape}")
        if x.shape[1] != self.spec.plants:
            raise ShapeError(f"model built for {self.spec.plants} plants, data has {x.shape[1]}")
        if x.shape[-1] != self.frame.M:
            raise ShapeError(f"frame length {x.shape[-1]} != model frame length {self.frame.M}")
        h = x
        for i, blk in enumerate(self.blocks):
            try:
                h = blk.forward(h)
            except ShapeError as exc:
                raise ShapeError(f"stage {i} ({blk.name}): {exc}") from exc
        self._out_len = h.shape[-1]
        if self._out_len < self.frame.R:
            raise ShapeError(f"model leaves {self._out_len} samples, fewer than R={self.frame.R}")
        return h[..., self._out_len - self.frame.R :]

    def backward(self, grad_pred) -> np.ndarray:
        """Backpropagate d(loss)/d(prediction); fills every block's ``grads``."""
        grad_pred = np.asarray(grad_pred)
        T, K, C, R = grad_pred.shape
        if R != self.frame.R or C != 1:
            raise ShapeError(f"gradient shape {grad_pred.shape} does not match prediction")
        g = np.zeros((T, K, C, self._out_len), dtype=grad_pred.dtype)
        g[..., self._out_len - R :] = grad_pred
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        return g

    def parameters(self) -> list[tuple[str, str, np.ndarray]]:
        return [(blk.name, k, v) for blk in self.blocks for k, v in blk.params.items()]

    def gradients(self) -> list[np.ndarray]:
        return [blk.grads[k] for blk in self.blocks for k in blk.params]

    def state(self) -> list[dict[str, np.ndarray]]:
        return [{k: v.copy() for k, v in blk.params.items()} for blk in self.blocks]

    def load_state(self, state: list[dict[str, np.ndarray]]) -> None:
        if len(state) != len(self.blocks):
            raise ShapeError("state has a different number of stages")
        for blk, st in zip(self.blocks, state):
            for k, v in st.items():
                if blk.params[k].shape != v.shape:
                    raise ShapeError(f"{blk.name}.{k}: shape {v.shape} != {blk.params[k].shape}")
                blk.params[k][...] = v

    def save(self, path) -> None:
        save_model(self, path)


class ModelBlock:
    """Block-style view of a whole model so ``grad_check`` can probe it end to end."""

    def __init__(self, model: Model):
        self.model = model
        self.name = model.spec.notation
        self.params = {f"{b}.{k}": v for b, k, v in model.parameters()}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x):
        return self.model.forward(x)

    def backward(self, g):
        gx = self.model.backward(g)
        self.grads = dict(zip(self.params, self.model.gradients()))
        return gx


def _make_block(spec: ModelSpec, frame: FrameSpec, i: int, rng: Rng) -> Block:
    st = spec.stages[i]
    c_in = spec.in_channels(i)
    K = spec.plants
    name = f"stage{i}_{st.kind.lower()}"
    sub = rng.child(f"stage/{i}")
    if st.kind == "NL":
        if spec.complex:
            return ComplexNLBlock.create(spec.nl_widths, st.out_channels, sub, spec.nl_bias, name)
        return NLBlock.create(c_in, spec.nl_widths, st.out_channels, sub, spec.nl_bias, name)
    if spec.complex:
        return ComplexFIRBlock.create(st.kernel_len, K, c_in, st.out_channels, sub, spec.kernel_mode, name)
    if st.fir_domain == "freq":
        if frame.M != st.kernel_len + frame.R - 1:
            raise ConfigError(
                f"frequency-domain stage needs M = L + R - 1, got M={frame.M}, L={st.kernel_len}, R={frame.R}"
            )
        if not is_power_of_two(frame.M):
            raise ConfigError(f"frequency-domain stage needs a power-of-two frame, got M={frame.M}")
        return FIRFreqBlock.create(st.kernel_len, frame.M, K, c_in, st.out_channels, sub, spec.kernel_mode, name=name)
    return FIRTimeBlock.create(st.kernel_len, K, c_in, st.out_channels, sub, spec.kernel_mode, name)


def build_model(spec: ModelSpec, rng: Rng | int, frame: FrameSpec | None = None) -> Model:
    """Instantiate every stage with freshly initialised weights."""
    if isinstance(rng, int):
        rng = Rng(rng)
    frame = frame or frame_for(spec)
    if frame.L_tot != spec.total_memory:
        frame = FrameSpec(frame.M, frame.R, spec.total_memory)
    blocks = [_make_block(spec, frame, i, rng) for i in range(len(spec.stages))]
    return Model(spec, frame, blocks)


# ---------------------------------------------------------------------------
# binary checkpoints
# ---------------------------------------------------------------------------


def save_model(model: Model, path) -> None:
    """Write ``BIDM`` | u32 version | u32 header length | JSON header | f64 LE arrays."""
    manifest = [
        {"stage": i, "name": k, "shape": list(v.shape)}
        for i, blk in enumerate(model.blocks)
        for k, v in blk.params.items()
    ]
    header = json.dumps(
        {
            "spec": model.spec.to_dict(),
            "frame": asdict(model.frame),
            "arrays": manifest,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BIDM_MAGIC)
        fh.write(struct.pack("<II", BIDM_VERSION, len(header)))
        fh.write(header)
        for blk in model.blocks:
            for v in blk.params.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != BIDM_MAGIC:
        raise ConfigError(f"{path}: not a BIDM checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != BIDM_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    spec = ModelSpec.from_dict(header["spec"])
    frame = FrameSpec(**header["frame"])
    model = build_model(spec, Rng(0), frame)
    offset = 12 + hlen
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
        model.blocks[entry["stage"]].params[entry["name"]][...] = arr
        offset += 8 * n
    if offset != len(data):
        raise ConfigError(f"{path}: trailing bytes after the last array")
    return model
