"""Experiment runner: dataset generation, training, adaptation, result matrices and gradient checks.

Configuration is JSON. Every field can be overridden on the command line by
a kebab-case flag mirroring its path, e.g. ``--model-notation FIR6NL6FIR`` or
``--train-epochs 500``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .baselines import fit_memory_polynomial, predict_memory_polynomial
from .blocks import ComplexFIRBlock, ComplexNLBlock, FIRFreqBlock, FIRTimeBlock, NLBlock
from .core import Rng, grad_check
from .errors import ConfigError, MultikernelError, NumericalError
from .models import (
    FrameSpec,
    ModelBlock,
    build_model,
    frame_for,
    load_model,
    parse_model,
    save_model,
    segment_frames,
    segment_targets,
)
from .optim import TrainConfig, adapt_test, least_squares_fir, nmse_db, per_plant_nmse_db, train, write_curve_csv
from .plants import PlantSet, load_dataset, make_dataset, save_dataset

log = logging.getLogger("multikernel")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK = 4

BOLD_DB = -35.0
GRADCHECK_TOL = 1e-4


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    structure: str = "hammerstein"
    K: int = 4
    h_flag: str = "var"
    f_flag: str = "var"
    excitation: str = "white"
    N: int = 8000
    sdr_range: list[float] | None = None
    seed: int | None = None
    L_h: int = 64
    decay_tau: float | None = None
    nl_kind: str | None = None
    complex: bool = False
    # load a dataset directory written by ``generate`` instead of simulating
    path: str | None = None


@dataclass
class ModelConfig:
    notation: str = "NL6FIR"
    kernel_lens: list[int] = field(default_factory=lambda: [64])
    kernel_mode: str = "multikernel"
    fir_domain: str = "time"
    # D hidden layers of P_l units each
    nl_widths: list[int] = field(default_factory=lambda: [6] * 5)
    nl_bias: bool = False
    frame_M: int | None = None
    frame_R: int | None = None
    seed: int | None = None


@dataclass
class TrainSection:
    epochs: int = 2000
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_halving_patience: int | None = None
    chunk_frames: int | None = None
    log_period: int = 0

    def to_train_config(self, seed: int, freeze=()) -> TrainConfig:
        return TrainConfig(seed=seed, freeze=frozenset(freeze), **asdict(self))


def _test_dataset_default() -> DatasetConfig:
    return DatasetConfig(K=2, seed=1000, sdr_range=[6.0, 10.0])


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/experiment"
    jobs: int = 1
    check: bool = False
    threshold_db: float = BOLD_DB
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    # adapt
    checkpoint: str | None = None
    test_dataset: DatasetConfig = field(default_factory=_test_dataset_default)
    compare_linear: bool = True
    # "least_squares" starts the re-fitted last FIR at its LS optimum
    fir_init: str = "random"
    # matrix
    table: int = 1
    rows: list[str] | None = None
    columns: list[str] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d, "")


_SECTIONS = {"dataset": DatasetConfig, "model": ModelConfig, "train": TrainSection, "test_dataset": DatasetConfig}


def _from_dict(kind, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(kind)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _SECTIONS.get(name) if kind is ExperimentConfig else None
        kwargs[name] = _from_dict(sub, value, name) if sub else value
    return kind(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def _flag_paths() -> list[tuple[str, str | None, str]]:
    """(flag, section, field) for every overridable config field."""
    out = []
    for f in fields(ExperimentConfig):
        if f.name in _SECTIONS:
            for g in fields(_SECTIONS[f.name]):
                out.append((f"--{f.name}-{g.name}".replace("_", "-"), f.name, g.name))
        else:
            out.append((f"--{f.name}".replace("_", "-"), None, f.name))
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [_parse_value(t.strip()) for t in text.split(",")]
    return text


def _field_types(kind) -> dict[str, object]:
    return {f.name: f.type for f in fields(kind)}


def apply_overrides(cfg: ExperimentConfig, overrides: dict[tuple[str | None, str], object]) -> ExperimentConfig:
    for (section, name), value in overrides.items():
        target = cfg if section is None else getattr(cfg, section)
        # a single value given for a list field, e.g. --rows wiener:h=inv:f=inv
        if "list" in str(_field_types(type(target))[name]) and not isinstance(value, (list, type(None))):
            value = [value]
        setattr(target, name, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    def is_int(v):
        return isinstance(v, (int, np.integer)) and not isinstance(v, bool)

    need(is_int(cfg.seed), "seed must be an integer")
    need(is_int(cfg.jobs) and cfg.jobs >= 1, "jobs must be a positive integer")
    need(cfg.table in (1, 2, 3), f"table must be 1, 2 or 3, got {cfg.table!r}")
    need(cfg.fir_init in ("random", "least_squares"), f"fir_init must be random or least_squares, got {cfg.fir_init!r}")
    for name in ("dataset", "test_dataset"):
        d = getattr(cfg, name)
        need(is_int(d.K) and d.K >= 1, f"{name}.K must be a positive integer")
        need(is_int(d.N) and d.N >= 1, f"{name}.N must be a positive integer")
        need(is_int(d.L_h) and d.L_h >= 1, f"{name}.L_h must be a positive integer")
        need(d.seed is None or is_int(d.seed), f"{name}.seed must be an integer")
        need(d.sdr_range is None or (isinstance(d.sdr_range, list) and len(d.sdr_range) == 2),
             f"{name}.sdr_range must be [lo, hi]")
        if d.path is not None:
            need(Path(d.path, "metadata.json").is_file(), f"{name}.path {d.path} is not a dataset directory")
    m = cfg.model
    lens = m.kernel_lens if isinstance(m.kernel_lens, list) else [m.kernel_lens]
    need(all(is_int(v) and v >= 1 for v in lens), "model.kernel_lens must be positive integers")
    m.kernel_lens = lens
    need(isinstance(m.nl_widths, list) and all(is_int(v) and v >= 1 for v in m.nl_widths),
         "model.nl_widths must be a list of positive integers")
    need((m.frame_M is None) == (m.frame_R is None), "model.frame_M and model.frame_R go together")
    t = cfg.train
    need(is_int(t.epochs) and t.epochs >= 1, "train.epochs must be a positive integer")
    need(isinstance(t.lr, (int, float)) and t.lr > 0, "train.lr must be positive")
    if cfg.checkpoint is not None:
        need(Path(cfg.checkpoint).is_file(), f"checkpoint {cfg.checkpoint} does not exist")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def build_dataset(dc: DatasetConfig, seed: int) -> PlantSet:
    if dc.path is not None:
        return load_dataset(dc.path)
    return make_dataset(
        dc.structure,
        dc.K,
        dc.h_flag,
        dc.f_flag,
        dc.excitation,
        dc.N,
        tuple(dc.sdr_range) if dc.sdr_range is not None else None,
        dc.seed if dc.seed is not None else seed,
        dc.L_h,
        dc.decay_tau,
        dc.nl_kind,
        dc.complex,
    )


def _model_rng(mc: ModelConfig, seed: int) -> Rng:
    return Rng(mc.seed) if mc.seed is not None else Rng(seed).child("model")


def _build_spec(mc: ModelConfig, K: int, complex_: bool):
    return parse_model(mc.notation, K, mc.kernel_lens, mc.kernel_mode, mc.fir_domain, complex_,
                       mc.nl_widths, mc.nl_bias)


def _frame(mc: ModelConfig, spec) -> FrameSpec:
    auto = frame_for(spec)
    if mc.frame_M is None:
        return auto
    return FrameSpec(int(mc.frame_M), int(mc.frame_R), auto.L_tot)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _dataset_summary(ps: PlantSet) -> dict:
    return {
        "content_hash": ps.content_hash(),
        "structure": ps.structure,
        "h_flag": ps.h_flag,
        "f_flag": ps.f_flag,
        "K": ps.K,
        "N": ps.N,
        "sdrs_db": ps.sdrs_db,
        "nl_kind": ps.meta.get("nl_kind"),
    }


# ---------------------------------------------------------------------------
# generate / train / adapt
# ---------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig) -> Path:
    ps = build_dataset(cfg.dataset, cfg.seed)
    d = save_dataset(ps, Path(cfg.out) / "dataset")
    log.info("wrote %d plants to %s (SDRs %s dB)", ps.K, d, [round(s, 2) for s in ps.sdrs_db])
    return d


def cmd_train(cfg: ExperimentConfig) -> dict:
    ps = build_dataset(cfg.dataset, cfg.seed)
    spec = _build_spec(cfg.model, ps.K, ps.complex)
    frame = _frame(cfg.model, spec)
    model = build_model(spec, _model_rng(cfg.model, cfg.seed), frame)
    X, Y = segment_frames(ps.x, frame), segment_targets(ps.y, frame)
    res = train(model, X, Y, cfg.train.to_train_config(cfg.seed))

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_curve_csv(out / "curve.csv", res.curve)
    save_model(model, out / "checkpoint.bidm")
    results = {
        "command": "train",
        "config": cfg.to_dict(),
        "dataset": _dataset_summary(ps),
        "model": spec.to_dict(),
        "frame": {"M": frame.M, "R": frame.R, "L_tot": frame.L_tot},
        "min_nmse_db": res.best_nmse_db,
        "best_epoch": res.best_epoch,
        "epochs": len(res.curve),
        "per_plant_nmse_db": res.per_plant_nmse_db,
        "params": {"total": model.n_params, "per_stage": model.param_counts()},
        "wall_time_s": res.wall_time_s,
    }
    _write_json(out / "results.json", results)
    log.info("min NMSE %.2f dB at epoch %d", res.best_nmse_db, res.best_epoch)
    return results


def cmd_adapt(cfg: ExperimentConfig) -> dict:
    if cfg.checkpoint is None:
        raise ConfigError("adapt needs --checkpoint")
    trained = load_model(cfg.checkpoint)
    ps = build_dataset(cfg.test_dataset, cfg.seed)
    if ps.complex != trained.spec.complex:
        raise ConfigError("test data and checkpoint disagree on complex-valued processing")
    frame = trained.frame
    X, Y = segment_frames(ps.x, frame), segment_targets(ps.y, frame)
    tcfg = cfg.train.to_train_config(cfg.seed)
    rng = Rng(cfg.seed).child("adapt")
    ad = adapt_test(trained, X, Y, tcfg, rng, cfg.fir_init)

    results = {
        "command": "adapt",
        "config": cfg.to_dict(),
        "dataset": _dataset_summary(ps),
        "frozen_stages": ad.frozen_stages,
        "fir_init": cfg.fir_init,
        "min_nmse_db": ad.result.best_nmse_db,
        "best_epoch": ad.result.best_epoch,
        "per_plant_nmse_db": ad.per_plant_nmse_db,
        "wall_time_s": ad.result.wall_time_s,
    }
    if cfg.compare_linear:
        lin_spec = parse_model("FIR", ps.K, [frame.L_tot], fir_domain="freq" if trained.spec.uses_freq else "time",
                               complex=trained.spec.complex)
        lin = build_model(lin_spec, rng.child("linear"), frame)
        if cfg.fir_init == "least_squares":
            least_squares_fir(lin, X, Y)
        lres = train(lin, X, Y, tcfg)
        results["linear_nmse_db"] = lres.best_nmse_db
        results["improvement_db"] = lres.best_nmse_db - ad.result.best_nmse_db
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_curve_csv(out / "curve.csv", ad.result.curve)
    save_model(ad.model, out / "checkpoint.bidm")
    _write_json(out / "results.json", results)
    return results


# ---------------------------------------------------------------------------
# result matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Row:
    structure: str
    h_flag: str
    f_flag: str

    @property
    def key(self) -> str:
        return f"{self.structure}:h={self.h_flag}:f={self.f_flag}"

    @property
    def has_var(self) -> bool:
        return "var" in (self.h_flag, self.f_flag)


@dataclass(frozen=True)
class Column:
    key: str
    notation: str | None = None
    kernel_mode: str = "multikernel"
    baseline: str | None = None


@dataclass(frozen=True)
class TableDef:
    number: int
    rows: tuple[Row, ...]
    columns: tuple[Column, ...]
    complex: bool
    L: int
    L_h: int
    nl_widths: tuple[int, ...]
    mp_order: int
    expect: Callable[[Row, Column], tuple[str, float] | None]


_FLAG_PAIRS = (("inv", "inv"), ("var", "inv"), ("inv", "var"), ("var", "var"))
# Wiener rows enumerate (h, f); Hammerstein rows enumerate (f, h)
WIENER_ROWS = tuple(Row("wiener", a, b) for a, b in _FLAG_PAIRS)
HAMMERSTEIN_ROWS = tuple(Row("hammerstein", b, a) for a, b in _FLAG_PAIRS)

TABLE1_NOTATIONS = ("FIR", "NL1FIR", "NL6FIR", "FIR1NL", "FIR6NL", "FIR1NL1FIR", "FIR1NL6FIR", "FIR6NL1FIR",
                    "FIR6NL6FIR")


def _expect_table1(row: Row, col: Column):
    bold, plain = ("le", BOLD_DB), ("gt", BOLD_DB)
    if col.key == "FIR":
        return plain
    if col.key == "NL6FIR":
        if row.structure == "hammerstein":
            return bold
        return plain if row.f_flag == "var" else None
    if col.key == "FIR1NL":
        return bold if row.structure == "wiener" and row.f_flag == "inv" else plain
    if col.key == "FIR6NL6FIR":
        return bold
    return None


def _expect_table2(row: Row, col: Column):
    bold, plain = ("le", BOLD_DB), ("gt", BOLD_DB)
    if col.key == "multikernel":
        return bold
    if col.key == "single_kernel":
        return plain if row.has_var else bold
    if col.key == "memory_polynomial":
        return bold if row.structure == "hammerstein" and row.f_flag == "inv" else plain
    return None


def _expect_table3(row: Row, col: Column):
    if col.key == "multikernel":
        return ("le", -55.0)
    if col.key == "single_kernel":
        return ("ge", -15.0) if row.has_var else None
    return ("ge", -20.0)


TABLES = {
    1: TableDef(1, WIENER_ROWS + HAMMERSTEIN_ROWS, tuple(Column(n, n) for n in TABLE1_NOTATIONS), False, 64, 64,
                (6,) * 5, 6, _expect_table1),
    2: TableDef(
        2,
        WIENER_ROWS + HAMMERSTEIN_ROWS,
        (
            Column("multikernel", "FIR6NL6FIR"),
            Column("single_kernel", "FIR6NL6FIR", "single_kernel"),
            Column("memory_polynomial", baseline="memory_polynomial"),
        ),
        False, 64, 64, (6,) * 5, 6, _expect_table2,
    ),
    3: TableDef(
        3,
        WIENER_ROWS,
        (
            Column("multikernel", "FIR1NL1FIR"),
            Column("single_kernel", "FIR1NL1FIR", "single_kernel"),
            Column("FIR", "FIR"),
            Column("memory_polynomial", baseline="memory_polynomial"),
        ),
        True, 20, 20, (15,) * 3, 15, _expect_table3,
    ),
}


def kernel_lens_for(notation: str, structure: str, L: int) -> list[int]:
    """Long kernel where the plant's LTI part sits; a 1-tap mixing stage otherwise."""
    n_fir = notation.count("FIR")
    if n_fir == 1:
        return [L]
    return [L, 1] if structure == "wiener" else [1, L]


def cell_spec(table: TableDef, row: Row, col: Column, cfg: ExperimentConfig) -> dict:
    """Everything a cell needs, as plain data (picklable, hashable via JSON)."""
    d = cfg.dataset
    spec = {
        "structure": row.structure,
        "h_flag": row.h_flag,
        "f_flag": row.f_flag,
        "complex": table.complex,
        "K": d.K,
        "N": d.N,
        "L_h": table.L_h,
        "excitation": d.excitation,
        "sdr_range": d.sdr_range,
        "seed": d.seed if d.seed is not None else cfg.seed,
    }
    if col.baseline:
        spec.update(baseline=col.baseline, P=table.mp_order, L=table.L)
    else:
        spec.update(
            notation=col.notation,
            kernel_mode=col.kernel_mode,
            kernel_lens=kernel_lens_for(col.notation, row.structure, table.L),
            nl_widths=list(table.nl_widths),
            train=asdict(cfg.train),
        )
    return spec


def cell_key(spec: dict) -> str:
    return json.dumps(spec, sort_keys=True)


def run_cell(spec: dict) -> dict:
    """Run one matrix cell; failures are reported in the result, not raised."""
    t0 = time.perf_counter()
    try:
        ps = make_dataset(spec["structure"], spec["K"], spec["h_flag"], spec["f_flag"], spec["excitation"],
                          spec["N"], tuple(spec["sdr_range"]) if spec["sdr_range"] else None, spec["seed"],
                          spec["L_h"], complex=spec["complex"])
        if spec.get("baseline") == "memory_polynomial":
            mp = fit_memory_polynomial(ps.x, ps.y, spec["P"], spec["L"])
            # score the fully excited part, as the models do
            n0 = spec["L"] - 1
            y_hat = predict_memory_polynomial(mp, ps.x)
            return {
                "min_nmse_db": nmse_db(y_hat[:, n0:], ps.y[:, n0:]),
                "per_plant_nmse_db": per_plant_nmse_db(y_hat[:, None, None, n0:], ps.y[:, None, None, n0:]),
                "params": int(mp.coefficients.size),
                "epochs": 0,
                "best_epoch": 0,
                "wall_time_s": time.perf_counter() - t0,
                "dataset_hash": ps.content_hash(),
            }
        mspec = parse_model(spec["notation"], ps.K, spec["kernel_lens"], spec["kernel_mode"], "time",
                            spec["complex"], spec["nl_widths"])
        frame = frame_for(mspec)
        label = f"model/{spec['structure']}/{spec['h_flag']}/{spec['f_flag']}/{spec['notation']}/{spec['kernel_mode']}"
        model = build_model(mspec, Rng(spec["seed"]).child(label), frame)
        tcfg = TrainConfig(seed=spec["seed"], **spec["train"])
        res = train(model, segment_frames(ps.x, frame), segment_targets(ps.y, frame), tcfg)
        return {
            "min_nmse_db": res.best_nmse_db,
            "per_plant_nmse_db": res.per_plant_nmse_db,
            "params": model.n_params,
            "epochs": len(res.curve),
            "best_epoch": res.best_epoch,
            "wall_time_s": time.perf_counter() - t0,
            "dataset_hash": ps.content_hash(),
        }
    except MultikernelError as exc:
        return {"error": f"{type(exc).__name__}: {exc}", "wall_time_s": time.perf_counter() - t0}


def _select(items, wanted, what):
    if not wanted:
        return list(items)
    by_key = {i.key: i for i in items}
    missing = [w for w in wanted if w not in by_key]
    if missing:
        raise ConfigError(f"unknown {what} {missing}; choose from {list(by_key)}")
    return [i for i in items if i.key in set(wanted)]


def _holds(expect, value) -> bool:
    op, thr = expect
    return {"le": value <= thr, "gt": value > thr, "ge": value >= thr}[op]


def run_matrix(cfg: ExperimentConfig, cache: dict | None = None) -> dict:
    """Fill a table; cells are independent and may run in parallel (``cfg.jobs``).

    ``cache`` maps cell keys to finished results so identical cells shared
    by several tables run once.
    """
    table = TABLES.get(cfg.table)
    if table is None:
        raise ConfigError(f"unknown table {cfg.table}")
    rows = _select(table.rows, cfg.rows, "rows")
    cols = _select(table.columns, cfg.columns, "columns")
    cache = {} if cache is None else cache
    specs = {(r.key, c.key): cell_spec(table, r, c, cfg) for r in rows for c in cols}
    todo = {}
    for spec in specs.values():
        k = cell_key(spec)
        if k not in cache:
            todo[k] = spec
    if cfg.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for k, result in zip(todo, pool.map(run_cell, todo.values())):
                cache[k] = result
    else:
        for k, spec in todo.items():
            log.info("cell %s", k)
            cache[k] = run_cell(spec)

    cells = []
    violations = []
    for r in rows:
        line = []
        for c in cols:
            res = dict(cache[cell_key(specs[r.key, c.key])])
            expect = table.expect(r, c)
            if "error" not in res:
                res["bold"] = bool(res["min_nmse_db"] <= cfg.threshold_db)
                if expect is not None:
                    res["expected"] = list(expect)
                    res["pattern_ok"] = _holds(expect, res["min_nmse_db"])
                    if not res["pattern_ok"]:
                        violations.append(f"{r.key} / {c.key}: {res['min_nmse_db']:.1f} dB, expected {expect[0]} {expect[1]}")
            elif expect is not None:
                violations.append(f"{r.key} / {c.key}: {res['error']}")
            line.append(res)
        cells.append(line)
    return {
        "table": table.number,
        "threshold_db": cfg.threshold_db,
        "rows": [r.key for r in rows],
        "columns": [c.key for c in cols],
        "cells": cells,
        "violations": violations,
        "config": cfg.to_dict(),
    }


def format_table(result: dict) -> str:
    cols = result["columns"]
    width = max(12, *(len(c) + 2 for c in cols))
    head = f"{'':28s}" + "".join(f"{c:>{width}s}" for c in cols)
    lines = [f"Table {result['table']}  (min NMSE dB, * = bold at <= {result['threshold_db']:g} dB)", head]
    for key, line in zip(result["rows"], result["cells"]):
        txt = []
        for cell in line:
            if "error" in cell:
                txt.append(f"{'error':>{width}s}")
            else:
                mark = "*" if cell["bold"] else " "
                txt.append(f"{cell['min_nmse_db']:>{width - 1}.1f}{mark}")
        lines.append(f"{key:28s}" + "".join(txt))
    for v in result["violations"]:
        lines.append(f"pattern miss: {v}")
    return "\n".join(lines)


def cmd_matrix(cfg: ExperimentConfig, cache: dict | None = None) -> dict:
    result = run_matrix(cfg, cache)
    _write_json(Path(cfg.out) / f"table{result['table']}.json", result)
    print(format_table(result))
    return result


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------


def _probe(rng: Rng, shape, complex_=False, scale=1.0):
    x = rng.normal(scale, size=shape)
    if complex_:
        x = x + 1j * rng.normal(scale, size=shape)
    return x


# block type -> factory(rng) returning (block, probe input)
BLOCK_FACTORIES: dict[str, Callable] = {
    "nl": lambda r: (NLBlock.create(2, [6] * 5, 6, r.child("b"), name="nl"), _probe(r, (2, 2, 2, 16))),
    "fir_time": lambda r: (FIRTimeBlock.create(5, 2, 2, 3, r.child("b"), name="fir_time"), _probe(r, (2, 2, 2, 12))),
    # small probes: FFT roundoff would otherwise swamp the structurally zero gradient entries
    "fir_freq": lambda r: (FIRFreqBlock.create(5, 8, 2, 1, 2, r.child("b"), name="fir_freq"),
                           _probe(r, (2, 2, 1, 8), scale=0.01)),
    "complex_fir": lambda r: (ComplexFIRBlock.create(3, 2, 1, 2, r.child("b"), name="complex_fir"),
                              _probe(r, (2, 2, 1, 8), True)),
    "complex_nl": lambda r: (ComplexNLBlock.create([15] * 3, 1, r.child("b"), name="complex_nl"),
                             _probe(r, (2, 2, 1, 8), True)),
}


def _architectures():
    """Every composed architecture at gradient-check scale (K=2, short kernels)."""
    out = []
    for structure in ("wiener", "hammerstein"):
        for n in TABLE1_NOTATIONS:
            out.append((f"{n} ({structure})", n, kernel_lens_for(n, structure, 4), "time", False, "multikernel"))
    out.append(("FIR6NL6FIR single-kernel", "FIR6NL6FIR", [4, 1], "time", False, "single_kernel"))
    out.append(("NL6FIR freq", "NL6FIR", [5], "freq", False, "multikernel"))
    out.append(("FIR1NL1FIR complex", "FIR1NL1FIR", [3, 1], "time", True, "multikernel"))
    return out


def cmd_gradcheck(cfg: ExperimentConfig | None = None, factories: dict | None = None,
                  architectures: bool = True) -> dict:
    cfg = cfg or ExperimentConfig()
    rng = Rng(cfg.seed).child("gradcheck")
    entries = []
    for kind, make in (factories or BLOCK_FACTORIES).items():
        block, x = make(rng.child(kind))
        rep = grad_check(block, x, tol=GRADCHECK_TOL)
        entries.append({"name": kind, "type": "block", "max_rel_err": rep.max_rel_err, "passed": rep.passed()})
    if architectures:
        for label, notation, lens, domain, complex_, mode in _architectures():
            spec = parse_model(notation, 2, lens, mode, domain, complex_, [6, 6])
            model = build_model(spec, rng.child(label))
            M = model.frame.M
            x = _probe(rng.child(f"x/{label}"), (2, 2, 1, M), complex_, scale=0.01)
            rep = grad_check(ModelBlock(model), x, tol=GRADCHECK_TOL)
            entries.append({"name": label, "type": "model", "max_rel_err": rep.max_rel_err, "passed": rep.passed()})
    report = {"tolerance": GRADCHECK_TOL, "entries": entries, "passed": all(e["passed"] for e in entries)}
    for e in entries:
        print(f"{'PASS' if e['passed'] else 'FAIL'}  {e['type']:5s}  {e['name']:34s}  {e['max_rel_err']:.2e}")
    return report


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multikernel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("generate", "simulate a multiplant dataset"),
        ("train", "train a model on a dataset"),
        ("adapt", "re-fit FIR stages of a checkpoint on unseen plants with NL stages frozen"),
        ("matrix", "fill one of the result tables (1: real models, 2: baselines, 3: complex)"),
        ("gradcheck", "finite-difference check of every block type and architecture"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON experiment config; flags below override its fields")
        groups = {}
        for flag, section, fname in _flag_paths():
            dest = f"ov__{section or ''}__{fname}"
            if section and section not in groups:
                groups[section] = p.add_argument_group(f"{section} fields")
            target = groups[section] if section else p
            if fname == "check":
                target.add_argument(flag, dest=dest, action="store_const", const=True, default=None,
                                    help="exit 4 when a result misses its acceptance threshold")
            else:
                target.add_argument(flag, dest=dest, default=None, metavar="VALUE")
    return parser


def _overrides(ns: argparse.Namespace) -> dict:
    out = {}
    for key, value in vars(ns).items():
        if not key.startswith("ov__") or value is None:
            continue
        _, section, fname = key.split("__")
        out[(section or None, fname)] = value if isinstance(value, bool) else _parse_value(value)
    return out


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = apply_overrides(load_config(ns.config), _overrides(ns))
        if ns.command == "generate":
            print(cmd_generate(cfg))
            return EXIT_OK
        if ns.command == "gradcheck":
            report = cmd_gradcheck(cfg)
            return EXIT_OK if report["passed"] else EXIT_NUMERICAL
        if ns.command == "matrix":
            result = cmd_matrix(cfg)
            return EXIT_CHECK if cfg.check and result["violations"] else EXIT_OK
        results = cmd_train(cfg) if ns.command == "train" else cmd_adapt(cfg)
        print(f"min NMSE {results['min_nmse_db']:.2f} dB -> {Path(cfg.out) / 'results.json'}")
        if cfg.check and results["min_nmse_db"] > cfg.threshold_db:
            print(f"threshold miss: {results['min_nmse_db']:.2f} dB > {cfg.threshold_db:g} dB", file=sys.stderr)
            return EXIT_CHECK
        return EXIT_OK
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, MultikernelError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
