"""Experiment runner: SER sweeps, learning-rate screening, tracking, eye data.

Configs are YAML documents with a versioned schema (see ``configs/`` for
examples).  Every run (grid point x method x lr x seed) is shared-nothing;
its data RNG is derived from the master seed, the grid point and the seed
index only, so all methods and learning rates at one (point, seed) see
identical train and test sets.

Seed derivation: ``SeedSequence([master, seed_index, int(sha256(point_key)[:16], 16)])``
where ``point_key`` is the canonical ``name=value`` rendering of the grid point.
"""
from __future__ import annotations

import ast
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy
import yaml
from scipy import stats

from . import __version__
from .channels import (
    ImddConfig,
    WhConfig,
    dispersion_formula,
    dispersion_parameter,
    imdd_frontend,
    mzm,
    simulate_imdd,
    simulate_wh,
)
from .dsp import export_csv, symbol_error_rate
from .optim import METHODS, TrainConfig, Trainer, TrainingDiverged
from .qstats import PAM4

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "config_hash",
    "derive_seed",
    "grid_points",
    "run_cell",
    "run_sweep",
    "aggregate",
    "screen_lr",
    "run_tracking",
    "export_eye",
    "format_rows",
    "regenerate_row",
    "SWEEP_FIELDS",
]


class ConfigError(ValueError):
    pass


def _strict(cls, data: dict, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class EqualizerSizes:
    n_taps1: int = 25
    n_taps2: int = 15
    n_channel: int = 25


@dataclass
class TrainingSpec:
    n_train: int = 1_000_000
    n_test: int = 1_000_000
    batch_size: int = 1000
    n_epochs: int = 1
    lr_candidates: list = field(default_factory=lambda: [5e-3, 5e-4, 5e-5])
    schedule: bool = True

    def __post_init__(self):
        if not self.lr_candidates:
            raise ValueError("lr_candidates must not be empty")
        if self.n_train < self.batch_size:
            raise ValueError("n_train must cover at least one batch")


@dataclass
class SeedSpec:
    master: int = 0
    n_seeds: int | None = None


@dataclass
class TrackingSpec:
    h1_alt: list = field(default_factory=lambda: [1.0, 0.5, 0.1525])
    switch_every: int = 2_500_000
    n_segments: int = 4
    batch_size: int = 500
    lr: float = 5e-4
    n_val: int = 1_000_000
    methods: list = field(default_factory=lambda: ["vae", "v2vae"])


@dataclass
class OutputSpec:
    dir: str = "results"
    traces: bool = False


@dataclass
class ExperimentConfig:
    name: str
    channel_kind: str
    channel: dict
    grid: dict
    methods: list
    equalizer: EqualizerSizes
    training: TrainingSpec
    seeds: SeedSpec
    tracking: TrackingSpec
    output: OutputSpec
    desk_scale: bool = False
    version: int = SCHEMA_VERSION

    @property
    def n_seeds(self) -> int:
        if self.seeds.n_seeds is not None:
            return int(self.seeds.n_seeds)
        return 5 if self.desk_scale else 10

    def channel_config(self, point: dict | None = None):
        params = dict(self.channel)
        params.update(point or {})
        cls = WhConfig if self.channel_kind == "wh" else ImddConfig
        return cls(**params)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "name": self.name,
            "desk_scale": self.desk_scale,
            "channel": {"kind": self.channel_kind, "params": self.channel},
            "grid": self.grid,
            "methods": list(self.methods),
            "equalizer": dataclasses.asdict(self.equalizer),
            "training": dataclasses.asdict(self.training),
            "seeds": {"master": self.seeds.master, "n_seeds": self.n_seeds},
            "tracking": dataclasses.asdict(self.tracking),
            "output": dataclasses.asdict(self.output),
        }


_TOP_KEYS = {"version", "name", "desk_scale", "channel", "grid", "methods", "equalizer",
             "training", "seeds", "tracking", "output"}


def parse_config(data: dict, desk_scale: bool | None = None) -> ExperimentConfig:
    """Validate a config mapping; unknown keys anywhere are rejected.

    The desk-scale preset divides symbol counts (train, test, validation,
    tracking switch period) by 10 and multiplies training epochs by 10, so the
    number of gradient steps matches the full-scale run.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    version = data.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {version} (expected {SCHEMA_VERSION})")
    ch = data.get("channel") or {}
    if set(ch) - {"kind", "params"}:
        raise ConfigError(f"channel: unknown keys {sorted(set(ch) - {'kind', 'params'})}")
    kind = ch.get("kind", "wh")
    if kind not in ("wh", "imdd"):
        raise ConfigError("channel.kind must be 'wh' or 'imdd'")
    params = dict(ch.get("params") or {})
    ccls = WhConfig if kind == "wh" else ImddConfig
    _strict(ccls, params, "channel.params")
    grid = dict(data.get("grid") or {})
    cnames = {f.name for f in dataclasses.fields(ccls)}
    for k, v in grid.items():
        if k not in cnames:
            raise ConfigError(f"grid: {k!r} is not a {kind} channel parameter")
        if not isinstance(v, list) or not v:
            raise ConfigError(f"grid.{k}: expected a non-empty list")
        for val in v:
            _strict(ccls, {**params, k: val}, f"grid.{k}={val}")
    methods = list(data.get("methods") or METHODS)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    desk = bool(data.get("desk_scale", False)) if desk_scale is None else bool(desk_scale)
    cfg = ExperimentConfig(
        name=str(data.get("name", "experiment")),
        channel_kind=kind,
        channel=params,
        grid=grid,
        methods=methods,
        equalizer=_strict(EqualizerSizes, data.get("equalizer"), "equalizer"),
        training=_strict(TrainingSpec, data.get("training"), "training"),
        seeds=_strict(SeedSpec, data.get("seeds"), "seeds"),
        tracking=_strict(TrackingSpec, data.get("tracking"), "tracking"),
        output=_strict(OutputSpec, data.get("output"), "output"),
        desk_scale=desk,
    )
    if desk:
        tr, tk = cfg.training, cfg.tracking
        tr.n_train //= 10
        tr.n_test //= 10
        tr.n_epochs *= 10
        tk.switch_every //= 10
        tk.n_val //= 10
    return cfg


def load_config(path, desk_scale: bool | None = None) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, desk_scale)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def point_key(point: dict) -> str:
    return ";".join(f"{k}={point[k]!r}" for k in sorted(point))


def derive_seed(master: int, point: dict, seed_index: int) -> np.random.SeedSequence:
    h = int(hashlib.sha256(point_key(point).encode()).hexdigest()[:16], 16)
    return np.random.SeedSequence([int(master), int(seed_index), h])


def grid_points(cfg: ExperimentConfig) -> list[dict]:
    keys = sorted(cfg.grid)
    if not keys:
        return [{}]
    return [dict(zip(keys, vals)) for vals in itertools.product(*(cfg.grid[k] for k in keys))]


# ---------------------------------------------------------------------------
# single run


def simulate(cfg: ExperimentConfig, point: dict, n_sym: int, rng: np.random.Generator, channel_overrides=None):
    """Draw PAM-4 symbols and pass them through the configured channel."""
    idx = rng.integers(0, PAM4.size, n_sym)
    ch = cfg.channel_config({**point, **(channel_overrides or {})})
    sym = PAM4.array[idx]
    out = simulate_wh(sym, ch, rng) if cfg.channel_kind == "wh" else simulate_imdd(sym, ch, rng)
    return idx, out.rx


def train_config(cfg: ExperimentConfig, method: str, lr: float, **kw) -> TrainConfig:
    e = cfg.equalizer
    base = dict(method=method, lr=lr, batch_size=cfg.training.batch_size, n_epochs=cfg.training.n_epochs,
                schedule=cfg.training.schedule, n_taps1=e.n_taps1, n_taps2=e.n_taps2, n_channel=e.n_channel)
    base.update(kw)
    return TrainConfig(**base)


SWEEP_FIELDS = ["config_hash", "point", "method", "lr", "seed_index", "ser", "final_loss", "status"]


def run_cell(cfg: ExperimentConfig, point: dict, method: str, lr: float, seed_index: int,
             trace_dir: Path | None = None) -> dict:
    """Train one method at one grid point / lr / seed and measure its test SER."""
    rng = np.random.default_rng(derive_seed(cfg.seeds.master, point, seed_index))
    idx_tr, rx_tr = simulate(cfg, point, cfg.training.n_train, rng)
    idx_te, rx_te = simulate(cfg, point, cfg.training.n_test, rng)
    row = {"config_hash": config_hash(cfg), "point": point_key(point), "method": method,
           "lr": lr, "seed_index": seed_index, "ser": float("nan"), "final_loss": float("nan"),
           "status": "ok"}
    t0 = time.perf_counter()
    try:
        tr = Trainer(train_config(cfg, method, lr)).fit(rx_tr, PAM4.array[idx_tr])
        row["ser"] = symbol_error_rate(tr.decide(rx_te), idx_te)
        row["final_loss"] = tr.trace[-1][2]
        if trace_dir is not None:
            from .optim import write_trace_csv

            name = f"trace_{method}_{point_key(point)}_lr{lr:g}_s{seed_index}.csv".replace(";", "_")
            write_trace_csv(Path(trace_dir) / name, tr.trace)
    except (TrainingDiverged, ValueError, FloatingPointError) as exc:
        row["status"] = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
    row["_wall_time"] = time.perf_counter() - t0
    return row


def regenerate_row(cfg: ExperimentConfig, row: dict) -> str:
    """Recompute one sweep row from its recorded coordinates; returns its CSV line.

    Raises ConfigError if the row was produced by a different config.
    """
    h = config_hash(cfg)
    if row["config_hash"] != h:
        raise ConfigError(f"row was produced by config {row['config_hash']}, not {h}")
    point = {}
    for part in filter(None, str(row["point"]).split(";")):
        k, _, v = part.partition("=")
        point[k] = ast.literal_eval(v)
    new = run_cell(cfg, point, row["method"], float(row["lr"]), int(row["seed_index"]))
    return format_rows([new]).splitlines()[1]


def format_rows(rows: list[dict], fields=SWEEP_FIELDS) -> str:
    """CSV text for `rows` (floats via repr, so reruns are byte-comparable)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])
    return buf.getvalue()


def _cell_args(cfg: ExperimentConfig, lrs=None):
    for point in grid_points(cfg):
        for method in cfg.methods:
            for lr in (lrs or cfg.training.lr_candidates):
                for s in range(cfg.n_seeds):
                    yield point, method, float(lr), s


def _run_cells(cfg, cells, threads: int, trace_dir=None):
    if threads <= 1:
        rows = [run_cell(cfg, *c, trace_dir=trace_dir) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(run_cell, cfg, *c, trace_dir) for c in cells]
            rows = [f.result() for f in futs]
    order = {m: i for i, m in enumerate(cfg.methods)}
    rows.sort(key=lambda r: (r["point"], order[r["method"]], r["lr"], r["seed_index"]))
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Per (point, method): pick the lr with the lowest mean SER (ties -> smaller lr).

    Reports mean, median and a 95% interval mean +- 1.96 * stderr over seeds.
    """
    groups: dict = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        groups.setdefault((r["point"], r["method"]), {}).setdefault(r["lr"], []).append(r["ser"])
    out = []
    for (point, method), by_lr in groups.items():
        best_lr = min(sorted(by_lr), key=lambda lr: np.mean(by_lr[lr]))
        sers = np.asarray(by_lr[best_lr])
        mean = float(sers.mean())
        se = float(sers.std(ddof=1) / np.sqrt(sers.size)) if sers.size > 1 else 0.0
        out.append({"point": point, "method": method, "best_lr": best_lr, "n_seeds": int(sers.size),
                    "mean_ser": mean, "median_ser": float(np.median(sers)),
                    "ci_low": mean - 1.96 * se, "ci_high": mean + 1.96 * se})
    return out


SUMMARY_FIELDS = ["point", "method", "best_lr", "n_seeds", "mean_ser", "median_ser", "ci_low", "ci_high"]


def _manifest(cfg: ExperimentConfig, extra=None) -> dict:
    m = {
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
        "versions": {"blindeq": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "seed_derivation": "SeedSequence([master, seed_index, int(sha256(point_key)[:16], 16)])",
    }
    if cfg.channel_kind == "imdd":
        ch = cfg.channel_config()
        m["dispersion"] = {
            "used_ps_nm_km": dispersion_parameter(ch),
            "stated_value_ps_nm_km": -15.43,
            "printed_formula_ps_nm_km": dispersion_formula(ch.s0, ch.lambda_nm, ch.lambda0_nm),
            "note": "(S0/4)(lambda - lambda0^4/lambda^3) evaluates to about -3.86 ps/(nm km), "
                    "a factor 4 below the stated -15.43; the stated value is the default "
                    "(set channel.params.dispersion_override: null to use the formula).",
        }
    if extra:
        m.update(extra)
    return m


def _write_dat(path: Path, cfg: ExperimentConfig, summary: list[dict]) -> None:
    keys = sorted(cfg.grid)
    with open(path, "w") as fh:
        for method in cfg.methods:
            fh.write(f"# method {method}\n# {' '.join(keys)} mean_ser ci_low ci_high\n")
            for s in summary:
                if s["method"] != method:
                    continue
                vals = [kv.split("=", 1)[1] for kv in s["point"].split(";")] if s["point"] else []
                fh.write(" ".join(vals + [repr(s["mean_ser"]), repr(s["ci_low"]), repr(s["ci_high"])]) + "\n")
            fh.write("\n\n")


def run_sweep(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> dict:
    """Full grid x methods x lrs x seeds sweep; writes sweep.csv, summary.csv, summary.dat, manifest.json."""
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_dir = out / "traces" if cfg.output.traces else None
    if trace_dir:
        trace_dir.mkdir(exist_ok=True)
    rows = _run_cells(cfg, list(_cell_args(cfg)), threads, trace_dir)
    summary = aggregate(rows)
    (out / "sweep.csv").write_text(format_rows(rows))
    (out / "summary.csv").write_text(format_rows(summary, SUMMARY_FIELDS))
    _write_dat(out / "summary.dat", cfg, summary)
    timing = {f"{r['point']}|{r['method']}|{r['lr']!r}|{r['seed_index']}": r["_wall_time"] for r in rows}
    (out / "manifest.json").write_text(json.dumps(_manifest(cfg, {"wall_time_s": timing}), indent=2))
    return {"rows": rows, "summary": summary, "dir": out}


def screen_lr(cfg: ExperimentConfig, point: dict, runner: Callable | None = None, out_dir=None,
              methods=None) -> dict:
    """Best lr per method at one grid point (lowest mean SER over seeds, ties -> smaller lr).

    `runner(cfg, point, method, lr, seed_index) -> row` defaults to :func:`run_cell`.
    All candidates are written to screen.csv when `out_dir` is given.
    """
    runner = runner or run_cell
    rows = []
    for method in methods or cfg.methods:
        for lr in cfg.training.lr_candidates:
            for s in range(cfg.n_seeds):
                rows.append(runner(cfg, point, method, float(lr), s))
    best = {}
    for method in methods or cfg.methods:
        cands = sorted({r["lr"] for r in rows if r["method"] == method and r["status"] == "ok"})
        if not cands:
            continue
        mean = {lr: np.mean([r["ser"] for r in rows if r["method"] == method and r["lr"] == lr
                             and r["status"] == "ok"]) for lr in cands}
        best[method] = min(cands, key=lambda lr: mean[lr])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "screen.csv").write_text(format_rows(rows))
    return {"best": best, "rows": rows}


# ---------------------------------------------------------------------------
# tracking


TRACKING_SUMMARY_FIELDS = ["method", "system", "mean_ser", "ci_low", "ci_high", "plateau_loss"]


def _plateau(losses: np.ndarray, frac: float = 0.2) -> float:
    n = max(1, int(len(losses) * frac))
    return float(np.mean(losses[-n:]))


def run_tracking(cfg: ExperimentConfig, out_dir=None, point: dict | None = None) -> dict:
    """Change-point test: alternate h1 and the alternative h1 every `switch_every` symbols.

    The learning rate is fixed.  After every segment the SER is measured on
    an independent validation set drawn from that segment's system.
    """
    if cfg.channel_kind != "wh":
        raise ConfigError("tracking is defined for the Wiener-Hammerstein channel")
    tk = cfg.tracking
    point = point or {}
    base_h1 = list(cfg.channel_config(point).h1)
    loss_rows, ser_rows = [], []
    for s in range(cfg.n_seeds):
        for method in tk.methods:
            rng = np.random.default_rng(derive_seed(cfg.seeds.master, {**point, "experiment": "tracking"}, s))
            tr = Trainer(train_config(cfg, method, tk.lr, batch_size=tk.batch_size, n_epochs=1, schedule=False))
            for seg in range(tk.n_segments):
                system = 1 + seg % 2
                h1 = base_h1 if system == 1 else list(tk.h1_alt)
                first = len(tr.trace)
                _, rx = simulate(cfg, point, tk.switch_every, rng, {"h1": h1})
                tr.fit(rx)
                for it, lr, loss, s2 in tr.trace[first:]:
                    loss_rows.append({"seed_index": s, "method": method, "batch": it, "segment": seg,
                                      "system": system, "loss": loss, "sigma2": s2})
                idx_val, rx_val = simulate(cfg, point, tk.n_val, rng, {"h1": h1})
                ser = symbol_error_rate(tr.decide(rx_val), idx_val)
                plateau = _plateau(np.array([t[2] for t in tr.trace[first:]]))
                ser_rows.append({"seed_index": s, "method": method, "segment": seg, "system": system,
                                 "ser": ser, "plateau_loss": plateau})
    summary = []
    for method in tk.methods:
        for system in sorted({r["system"] for r in ser_rows}):
            per_seed = [np.mean([r["ser"] for r in ser_rows if r["method"] == method
                                 and r["system"] == system and r["seed_index"] == s])
                        for s in range(cfg.n_seeds)]
            per_seed = np.asarray(per_seed)
            se = per_seed.std(ddof=1) / np.sqrt(per_seed.size) if per_seed.size > 1 else 0.0
            plateau = np.mean([r["plateau_loss"] for r in ser_rows
                               if r["method"] == method and r["system"] == system])
            summary.append({"method": method, "system": system, "mean_ser": float(per_seed.mean()),
                            "ci_low": float(per_seed.mean() - 1.96 * se),
                            "ci_high": float(per_seed.mean() + 1.96 * se),
                            "plateau_loss": float(plateau)})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "tracking_loss.csv").write_text(
            format_rows(loss_rows, ["seed_index", "method", "batch", "segment", "system", "loss", "sigma2"]))
        (out / "tracking_ser.csv").write_text(
            format_rows(ser_rows, ["seed_index", "method", "segment", "system", "ser", "plateau_loss"]))
        (out / "tracking_summary.csv").write_text(
            format_rows(summary, TRACKING_SUMMARY_FIELDS))
        (out / "manifest.json").write_text(json.dumps(_manifest(cfg), indent=2))
    return {"loss": loss_rows, "ser": ser_rows, "summary": summary}


# ---------------------------------------------------------------------------
# eye diagram / modulator data


def export_eye(cfg: ExperimentConfig, out_dir, n_sym: int = 2000, point: dict | None = None, seed: int = 0) -> dict:
    """Noiseless IM/DD matched-filter output at the channel rate plus the MZM transfer curve."""
    if cfg.channel_kind != "imdd":
        raise ConfigError("eye export is defined for the IM/DD channel")
    ch = dataclasses.replace(cfg.channel_config(point), noiseless=True, sps_out=cfg.channel_config(point).sps_channel)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, PAM4.size, n_sym)
    out = simulate_imdd(PAM4.array[idx], ch, rng)
    sps = ch.sps_channel
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = np.arange(out.rx.size) / sps
    export_csv(out_dir / "eye.csv", time_symbols=t, amplitude=out.rx, symbol=np.repeat(PAM4.array[idx], sps))
    v = np.linspace(-ch.vpp / 2, ch.vpp / 2, 201)
    E = mzm(v, ch.p_in, ch.v_pi, ch.v_b, ch.mzm_pi)
    export_csv(out_dir / "mzm_transfer.csv", voltage=v, field=E, intensity=E**2)
    _, vdrive, _ = imdd_frontend(PAM4.array[idx], ch)
    return {"rx": out.rx, "symbols": PAM4.array[idx], "voltage": vdrive}
