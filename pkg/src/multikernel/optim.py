"""Losses, Adam, the full-batch training loop and frozen-NL test adaptation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import SINGLE_KERNEL, FIRTimeBlock, NLBlock
from .core import Rng
from .errors import ConfigError, NumericalError, ShapeError, ZeroEnergyError
from .models import Model, ModelSpec, build_model

log = logging.getLogger(__name__)

NMSE_FLOOR_DB = -160.0


def _energy(a: np.ndarray) -> float:
    if np.iscomplexobj(a):
        return float(np.sum(a.real**2) + np.sum(a.imag**2))
    return float(np.sum(a * a))


def mse_loss(pred, target):
    """Sum of squared errors and its gradient 2 * (pred - target)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    err = pred - target
    return _energy(err), 2.0 * err


def nmse_db(pred, target) -> float:
    """10 log10(||target - pred||^2 / ||target||^2), floored at -160 dB."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    ref = _energy(target)
    if ref <= 0.0:
        raise ZeroEnergyError("NMSE is undefined for a zero-energy target")
    ratio = _energy(target - pred) / ref
    if ratio <= 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(ratio), NMSE_FLOOR_DB)


def per_plant_nmse_db(pred, target) -> list[float]:
    """NMSE of every plant slice (axis 1) of (T, K, C, R) arrays."""
    return [nmse_db(pred[:, k], target[:, k]) for k in range(target.shape[1])]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState, names=None, skip=None, epoch=None):
    """Bias-corrected Adam update applied in place; returns (params, state).

    ``skip`` marks parameters that are frozen: their moments are left alone
    and the parameter is not touched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimiser state have different lengths")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter {params[i].shape}")
        if (skip is None or not skip[i]) and not np.all(np.isfinite(g)):
            who = names[i] if names else f"parameter {i}"
            raise NumericalError(f"non-finite gradient in {who} at epoch {epoch}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if skip is not None and skip[i]:
            continue
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 1000
    seed: int = 0
    freeze: frozenset[int] = frozenset()
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # halve the learning rate after this many epochs without a new best NMSE
    lr_halving_patience: int | None = None
    log_period: int = 0
    chunk_frames: int | None = None

    def __post_init__(self):
        self.freeze = frozenset(int(i) for i in self.freeze)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.chunk_frames is not None and self.chunk_frames < 1:
            raise ConfigError("chunk_frames must be positive")


@dataclass
class CurvePoint:
    epoch: int
    nmse_db: float
    loss: float
    lr: float


@dataclass
class TrainResult:
    curve: list[CurvePoint]
    best_nmse_db: float
    best_epoch: int
    best_state: list[dict[str, np.ndarray]]
    per_plant_nmse_db: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def best_so_far(self) -> list[float]:
        return list(np.minimum.accumulate([p.nmse_db for p in self.curve]))


def _forward_backward(model: Model, x, y, chunk: int | None):
    """Full-batch loss, prediction and parameter gradients (summed over frame chunks)."""
    T = x.shape[0]
    step = chunk or T
    total = 0.0
    preds = []
    acc = None
    for s in range(0, T, step):
        pred = model.forward(x[s : s + step])
        loss, g = mse_loss(pred, y[s : s + step])
        model.backward(g)
        grads = model.gradients()
        acc = [gr.copy() for gr in grads] if acc is None else [a + gr for a, gr in zip(acc, grads)]
        total += loss
        preds.append(pred)
    return total, np.concatenate(preds, axis=0), acc


def train(model: Model, x_frames, y_frames, cfg: TrainConfig, restore_best: bool = True) -> TrainResult:
    """Full-batch Adam on all frames of all plants; keeps the minimum-NMSE weights."""
    x = np.asarray(x_frames)
    y = np.asarray(y_frames)
    if x.shape[1] != model.spec.plants:
        raise ShapeError(f"model has {model.spec.plants} plants, data has {x.shape[1]}")
    if _energy(y) <= 0.0:
        raise ZeroEnergyError("training target has zero energy")
    bad = [i for i in cfg.freeze if not 0 <= i < len(model.blocks)]
    if bad:
        raise ConfigError(f"frozen stage indices out of range: {bad}")

    entries = model.parameters()
    params = [p for _, _, p in entries]
    names = [f"{blk}.{k}" for blk, k, _ in entries]
    stage_of = [i for i, blk in enumerate(model.blocks) for _ in blk.params]
    skip = [s in cfg.freeze for s in stage_of]
    state = AdamState.zeros_like(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    curve: list[CurvePoint] = []
    best = np.inf
    best_epoch = 0
    best_state = model.state()
    since_best = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        loss, pred, grads = _forward_backward(model, x, y, cfg.chunk_frames)
        if not np.isfinite(loss):
            raise NumericalError(f"loss became non-finite at epoch {epoch}; last good epoch {epoch - 1}")
        nmse = nmse_db(pred, y)
        curve.append(CurvePoint(epoch, nmse, loss, state.lr))
        if nmse < best:
            best, best_epoch, since_best = nmse, epoch, 0
            best_state = model.state()
        else:
            since_best += 1
        if cfg.log_period and epoch % cfg.log_period == 0:
            log.info("epoch %d  nmse %.2f dB  best %.2f dB  lr %.3g", epoch, nmse, best, state.lr)
        adam_step(params, grads, state, names, skip, epoch)
        if cfg.lr_halving_patience and since_best >= cfg.lr_halving_patience:
            state.lr *= 0.5
            since_best = 0

    if restore_best:
        model.load_state(best_state)
    pred = model.forward(x) if restore_best else pred
    return TrainResult(
        curve=curve,
        best_nmse_db=float(best),
        best_epoch=best_epoch,
        best_state=best_state,
        per_plant_nmse_db=per_plant_nmse_db(pred, y) if restore_best else [],
        wall_time_s=time.perf_counter() - t0,
    )


def write_curve_csv(path, curve: list[CurvePoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "nmse_db", "loss", "lr"])
        for p in curve:
            w.writerow([p.epoch, repr(p.nmse_db), repr(p.loss), repr(p.lr)])


@dataclass
class FunctionFit:
    block: NLBlock
    curve: list[CurvePoint]
    best_nmse_db: float
    best_epoch: int

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.block.forward(x.reshape(1, 1, 1, -1)).reshape(x.shape)


def fit_nl_function(x, f, widths=(6, 6, 6, 6, 6), cfg: TrainConfig | None = None,
                    rng: Rng | int | None = None) -> FunctionFit:
    """Fit a standalone single-input, single-output NL block to samples of f.

    Same Adam loop as :func:`train`; the best-NMSE weights are kept.
    """
    cfg = cfg or TrainConfig()
    x = np.asarray(x, dtype=np.float64).reshape(1, 1, 1, -1)
    f = np.asarray(f, dtype=np.float64).reshape(1, 1, 1, -1)
    if x.shape != f.shape:
        raise ShapeError(f"{x.size} abscissae but {f.size} function values")
    if _energy(f) <= 0.0:
        raise ZeroEnergyError("target function is identically zero")
    rng = Rng(cfg.seed) if rng is None else (Rng(rng) if isinstance(rng, int) else rng)
    block = NLBlock.create(1, list(widths), 1, rng.child("nl-fit"))
    names = list(block.params)
    params = [block.params[k] for k in names]
    state = AdamState.zeros_like(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    curve: list[CurvePoint] = []
    best, best_epoch, since_best = np.inf, 0, 0
    best_params = {k: v.copy() for k, v in block.params.items()}
    for epoch in range(1, cfg.epochs + 1):
        pred = block.forward(x)
        loss, g = mse_loss(pred, f)
        if not np.isfinite(loss):
            raise NumericalError(f"loss became non-finite at epoch {epoch}")
        nmse = nmse_db(pred, f)
        curve.append(CurvePoint(epoch, nmse, loss, state.lr))
        if nmse < best:
            best, best_epoch, since_best = nmse, epoch, 0
            best_params = {k: v.copy() for k, v in block.params.items()}
        else:
            since_best += 1
        block.backward(g)
        adam_step(params, [block.grads[k] for k in names], state, names, None, epoch)
        if cfg.lr_halving_patience and since_best >= cfg.lr_halving_patience:
            state.lr *= 0.5
            since_best = 0
    for k, v in best_params.items():
        block.params[k][...] = v
    return FunctionFit(block, curve, float(best), best_epoch)


# ---------------------------------------------------------------------------
# test-time adaptation
# ---------------------------------------------------------------------------


@dataclass
class AdaptResult:
    model: Model
    result: TrainResult
    frozen_stages: list[int]

    @property
    def per_plant_nmse_db(self) -> list[float]:
        return self.result.per_plant_nmse_db


def least_squares_fir(model: Model, x_frames, y_frames) -> None:
    """Set the trailing time-domain FIR stage to its least-squares optimum in place.

    Earlier stages are held fixed, so the prediction is linear in the last
    kernel. Plants are solved separately, or jointly for a single kernel.
    """
    blk = model.blocks[-1]
    if not isinstance(blk, FIRTimeBlock):
        raise ConfigError("least-squares FIR fit needs a real time-domain FIR as the last stage")
    h = np.asarray(x_frames, dtype=np.float64)
    for b in model.blocks[:-1]:
        h = b.forward(h)
    y = np.asarray(y_frames, dtype=np.float64)
    T, K, I, M = h.shape
    L, _, _, P = blk.params["w"].shape
    R = model.frame.R
    if y.shape != (T, K, P, R):
        raise ShapeError(f"targets {y.shape} do not match the model output {(T, K, P, R)}")
    # output sample m of the valid convolution sees h[m + L - 1 - l] through tap l
    start = M - L + 1 - R
    idx = start + np.arange(R)[:, None] + (L - 1 - np.arange(L))[None, :]
    A = h[..., idx].transpose(1, 0, 3, 2, 4).reshape(K, T * R, I * L)
    b = y.transpose(1, 0, 3, 2).reshape(K, T * R, P)
    if blk.mode == SINGLE_KERNEL:
        A, b = A.reshape(1, K * T * R, I * L), b.reshape(1, K * T * R, P)
    w = np.empty_like(blk.params["w"])
    for k in range(A.shape[0]):
        coef = np.linalg.lstsq(A[k], b[k], rcond=None)[0]
        w[:, k] = coef.reshape(I, L, P).transpose(1, 0, 2)
    blk.params["w"][...] = w


def adapt_test(trained: Model, x_frames, y_frames, cfg: TrainConfig, rng: Rng | int | None = None,
               fir_init: str = "random") -> AdaptResult:
    """Keep the trained NL stages fixed and re-fit fresh FIR stages on test plants.

    ``fir_init="least_squares"`` starts Adam from the least-squares kernel
    when the last stage is the only one left to fit (e.g. NL6FIR).
    Learned NL bases are often badly conditioned, so plain gradient descent
    from a random start can stall far from that optimum.
    """
    if fir_init not in ("random", "least_squares"):
        raise ConfigError(f"unknown FIR initialisation {fir_init!r}")
    x = np.asarray(x_frames)
    K = x.shape[1]
    src = trained.spec
    spec = ModelSpec.from_dict({**src.to_dict(), "plants": K})
    rng = Rng(cfg.seed) if rng is None else (Rng(rng) if isinstance(rng, int) else rng)
    model = build_model(spec, rng.child("adapt"), trained.frame)
    nl_stages = [i for i, s in enumerate(spec.stages) if s.kind == "NL"]
    for i in nl_stages:
        dst, srcb = model.blocks[i], trained.blocks[i]
        if set(dst.params) != set(srcb.params) or any(
            dst.params[k].shape != srcb.params[k].shape for k in dst.params
        ):
            raise ConfigError(f"stage {i}: checkpoint NL dimensions do not match the model")
        for k in dst.params:
            dst.params[k][...] = srcb.params[k]
    adapt_cfg = TrainConfig(**{**cfg.__dict__, "freeze": frozenset(cfg.freeze) | frozenset(nl_stages)})
    if fir_init == "least_squares":
        if set(range(len(spec.stages) - 1)) - adapt_cfg.freeze:
            raise ConfigError("least-squares start needs every stage but the last frozen")
        least_squares_fir(model, x, y_frames)
    result = train(model, x, y_frames, adapt_cfg)
    return AdaptResult(model, result, nl_stages)
