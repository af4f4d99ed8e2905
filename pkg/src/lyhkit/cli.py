"""Batch driver: ``lyhkit audit|simulate|verify|sweep --config run.json``.

A run is described by one JSON document validated against ``RunConfig``.
Outputs are deterministic: CSV for time series (always with a header row),
JSON for structured reports (sorted keys, embedding the config hash) and raw
little-endian binary plus a JSON sidecar for field snapshots.

Exit codes: 0 pass, 1 monitor/check failure, 2 configuration error,
3 solver abort (dt underflow), 4 metric degeneracy.
"""

from __future__ import annotations

import argparse
import csv
import functools
import hashlib
import io
import itertools
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .discretization import band_limited_field
from .flow import (DtUnderflowError, FlowConfig, FlowError, FlowState, MetricDegeneracyError, Reaction,
                   ReactionError, integrate)
from .geometry import (KAHLER_KINDS, ManifoldModel, ModelError, build_metric, curvature_pack,
                       fs_global_function, metric_from_values)
from .harnack import (VARIANTS, ConstraintError, RateFunction, TolerancePolicy, min_eig_monitor)
from . import verify as V

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DT, EXIT_DEGENERATE = 0, 1, 2, 3, 4
SNAPSHOT_FORMAT = "lyhkit-snapshot/1"
LEMMA_IDS = tuple(m.value for m in V.LemmaId)


class ConfigError(ValueError):
    """Configuration is valid JSON but inconsistent or incomplete."""


# -- schema -------------------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSpec(_Strict):
    kind: Literal["flat_torus_c", "fubini_study_cp1", "round_sphere", "flat_torus_r", "flat_patch"]
    grid: int | list[int] = 64
    dim: int | None = None
    c0: float = 1.0
    radius: float = 1.0
    half_width: float | None = None
    periods: float | list[float] = 2.0 * math.pi
    perturbation: float = 0.0
    perturbation_seed: int = 0
    perturbation_kind: Literal["kahler", "non_kahler"] = "kahler"

    def build(self) -> ManifoldModel:
        dim = self.dim
        if dim is None:
            dim = 2 if self.kind in ("round_sphere", "flat_torus_r") else 1
        hw = self.half_width
        if hw is None:
            hw = {"fubini_study_cp1": 2.2, "flat_patch": 1.0}.get(self.kind, 0.0)
        grid = tuple(self.grid) if isinstance(self.grid, list) else self.grid
        periods = tuple(self.periods) if isinstance(self.periods, list) else self.periods
        return ManifoldModel(self.kind, grid=grid, dim=dim, periods=periods, c0=self.c0,
                             radius=self.radius, half_width=hw, perturbation=self.perturbation,
                             perturbation_seed=self.perturbation_seed,
                             perturbation_kind=self.perturbation_kind)


class ReactionSpec(_Strict):
    kind: Literal["linear", "table"] = "linear"
    points: list[float] = []
    values: list[float] = []

    def build(self, a: float) -> Reaction:
        return Reaction.linear(a) if self.kind == "linear" else Reaction.table(self.points, self.values)


class HSpec(_Strict):
    """``h = v/u`` built as ``mean + amplitude * (random field scaled to [-1, 1])``."""

    mean: float = 0.5
    amplitude: float = 0.3


class ConstantInit(_Strict):
    recipe: Literal["constant"]
    value: float = 0.0
    value_v: float | None = None


class BandLimitedInit(_Strict):
    recipe: Literal["band_limited"]
    seed: int
    amplitude: float = 0.5
    modes: int = 3
    mean: float = 0.0
    h: HSpec | None = None


class ExactInit(_Strict):
    recipe: Literal["exact"]
    solution: Literal["heat_kernel", "log_quadratic", "cp1_scale"]
    alpha0: float = 0.0
    t_ref: float = 0.2


class FileInit(_Strict):
    recipe: Literal["file"]
    path: str


Initial = Annotated[Union[ConstantInit, BandLimitedInit, ExactInit, FileInit], Field(discriminator="recipe")]


class MonitorSpec(_Strict):
    variant: str
    rate: Literal["auto", "kahler_exp", "riemannian_exp", "limit_inverse_t"] = "auto"
    scale: float = 1.0

    @field_validator("variant")
    @classmethod
    def _known(cls, v):
        if v not in VARIANTS and v not in LEMMA_IDS:
            raise ValueError(f"unknown monitor {v!r}; expected one of {VARIANTS + LEMMA_IDS}")
        return v


class ToleranceSpec(_Strict):
    C1: float = 0.0
    C2: float = 0.0
    p: float = 4.0
    floor: float = 1e-9
    factor: float = 3.0
    calibrate: bool = False

    def build(self) -> TolerancePolicy:
        """Fixed coefficients, or (``calibrate``) coefficients fitted on log-quadratic equality runs."""
        if self.calibrate:
            return _calibrated(self.floor, self.factor)
        return TolerancePolicy(self.C1, self.C2, self.p, self.floor, self.factor)


@functools.lru_cache(maxsize=8)
def _calibrated(floor: float, factor: float) -> TolerancePolicy:
    return V.calibrate_tolerance(floor=floor, factor=factor)[0]


class StudySpec(_Strict):
    name: str
    resolutions: list[int] | None = None
    samples: int = 5
    naive: bool = False

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        ok = set(LEMMA_IDS) | {"L41:h", "L31=L32", "L33_soliton", "reparam", "L34", "C36"}
        if v not in ok:
            raise ValueError(f"unknown study {v!r}; expected one of {sorted(ok)}")
        return v


class AuditSpec(_Strict):
    resolutions: list[int] | None = None
    threshold: float = 1e-6
    min_order: float = 2.0
    seed: int = 0


class SweepSpec(_Strict):
    a: list[float | Literal["0+"]] = []
    c0: list[float] = []
    seeds: list[int] = []
    max_cells: int = 64


class OutputSpec(_Strict):
    snapshots: bool = True
    snapshot_every: int = 1


class RunConfig(_Strict):
    """One run: model, flow, data, monitors and (per subcommand) studies, audit or sweep grid."""

    model: ModelSpec
    flow: Literal["fixed_kahler", "coupled_krf", "riemannian"] = "fixed_kahler"
    a: float = 0.0
    reaction: ReactionSpec = ReactionSpec()
    initial: Initial = ConstantInit(recipe="constant")
    t_start: float = 0.0
    t0: float = 0.1
    T: float = 1.0
    cfl: float = Field(0.2, gt=0, le=1)
    record_stride: float | None = 0.1
    monitors: list[Union[str, MonitorSpec]] = []
    tolerance: ToleranceSpec = ToleranceSpec()
    studies: list[Union[str, StudySpec]] = []
    audit: AuditSpec = AuditSpec()
    sweep: SweepSpec = SweepSpec()
    output: OutputSpec = OutputSpec()

    @field_validator("monitors")
    @classmethod
    def _monitors(cls, v):
        return [MonitorSpec(variant=m) if isinstance(m, str) else m for m in v]

    @field_validator("studies")
    @classmethod
    def _studies(cls, v):
        return [StudySpec(name=s) if isinstance(s, str) else s for s in v]

    @model_validator(mode="after")
    def _consistent(self):
        kahler = self.model.kind in KAHLER_KINDS
        if self.flow == "riemannian" and kahler:
            raise ValueError("the Riemannian flow needs a Riemannian model")
        if self.flow != "riemannian" and not kahler:
            raise ValueError(f"flow {self.flow} needs a Kähler model")
        if self.flow == "coupled_krf" and self.reaction.kind != "linear":
            raise ValueError("the coupled flow uses the linear reaction aL")
        if not self.T > self.t_start:
            raise ValueError("T must exceed t_start")
        if self.record_stride is not None and self.record_stride <= 0:
            raise ValueError("record_stride must be positive")
        if self.initial.recipe == "exact":
            if self.initial.solution == "cp1_scale" and self.model.kind != "fubini_study_cp1":
                raise ValueError("cp1_scale data needs the CP¹ model")
            if self.initial.solution != "cp1_scale" and self.model.kind != "flat_patch":
                raise ValueError(f"{self.initial.solution} data needs the flat_patch model")
            if self.initial.solution == "heat_kernel" and self.t_start <= 0:
                raise ValueError("heat-kernel data needs t_start > 0")
        for m in self.monitors:
            if m.variant == "riemannian_general" and kahler:
                raise ValueError("riemannian_general needs a Riemannian model")
            if m.variant in VARIANTS and m.variant != "riemannian_general" and not kahler:
                raise ValueError(f"{m.variant} needs a Kähler model")
        return self

    def canonical(self) -> dict:
        """JSON-ready dict excluding nothing; used for hashing and reports."""
        return self.model_dump(mode="json")


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical JSON (sorted keys, compact separators)."""
    blob = json.dumps(cfg.canonical(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path, seed: int | None = None) -> RunConfig:
    """Read and validate a config file; ``seed`` overrides the random-data seed."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(raw, seed)


def parse_config(raw: dict, seed: int | None = None) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    if seed is not None:
        cfg = with_seed(cfg, seed)
    return cfg


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    if cfg.initial.recipe == "band_limited":
        return cfg.model_copy(update={"initial": cfg.initial.model_copy(update={"seed": int(seed)})})
    return cfg.model_copy(update={"audit": cfg.audit.model_copy(update={"seed": int(seed)})})


# -- output helpers -----------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return " ".join(str(int(i)) for i in v)
    return str(v)


def write_csv(path: Path, columns: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def write_snapshot(stem: Path, state: FlowState, spec: ModelSpec, flow: str, chash: str) -> None:
    """``stem.bin`` holds the raw arrays back to back; ``stem.json`` describes them."""
    arrays = [("L", c, x) for c, x in enumerate(state.L)]
    if state.Lv is not None:
        arrays += [("Lv", c, x) for c, x in enumerate(state.Lv)]
    arrays += [("metric", c, G) for c, G in enumerate(state.metric.values)]
    fields, offset, chunks = [], 0, []
    for name, c, x in arrays:
        x = np.ascontiguousarray(x)
        x = x.astype(x.dtype.newbyteorder("<"), copy=False)
        b = x.tobytes()
        fields.append({"name": name, "chart": c, "dtype": x.dtype.str, "shape": list(x.shape),
                       "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    write_json(stem.with_suffix(".json"), {
        "format": SNAPSHOT_FORMAT, "config_hash": chash, "model": spec.model_dump(mode="json"),
        "flow": flow, "t": float(state.t), "a": float(state.a), "kahler": bool(state.metric.kahler),
        "fields": fields, "data": stem.with_suffix(".bin").name})


def read_snapshot(path) -> tuple[dict, dict]:
    """Return ``(header, {name: [per-chart arrays]})`` from a sidecar path (or its ``.bin``)."""
    p = Path(path)
    side = p if p.suffix == ".json" else p.with_suffix(".json")
    try:
        head = json.loads(side.read_text())
        blob = side.with_name(head["data"]).read_bytes()
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read snapshot {path}: {e}") from e
    if head.get("format") != SNAPSHOT_FORMAT:
        raise ConfigError(f"{side} is not a {SNAPSHOT_FORMAT} sidecar")
    out: dict = {}
    for f in head["fields"]:
        arr = np.frombuffer(blob, dtype=np.dtype(f["dtype"]), count=int(np.prod(f["shape"])),
                            offset=f["offset"]).reshape(f["shape"])
        out.setdefault(f["name"], []).append(arr.copy())
    return head, out


# -- initial data -----------------------------------------------------------------------

def _sphere_field(chart, rng):
    return V._sphere_polynomial(chart, rng, amplitude=1.0)


def random_field(model: ManifoldModel, rng: np.random.Generator, modes: int = 3) -> list:
    """Smooth global random field scaled to max |f| = 1, one array per chart.

    Tori and the flat patch use band-limited Fourier sums; CP¹ uses a random
    quadratic in the embedded coordinates (so both charts see one function);
    the sphere uses a random cubic spherical polynomial.
    """
    if model.kind == "fubini_study_cp1":
        coef = rng.normal(size=8)
        fs = [fs_global_function(ch, coef) for ch in model.charts]
        scale = max(np.abs(f[ch.owned]).max() for f, ch in zip(fs, model.charts))
        return [f / scale for f in fs]
    if model.kind == "round_sphere":
        return [_sphere_field(model.charts[0], rng)]
    return [band_limited_field(ch, rng, modes=modes, amplitude=1.0) for ch in model.charts]


def _exact_solution(cfg: RunConfig, model: ManifoldModel):
    init = cfg.initial
    if init.solution == "heat_kernel":
        return V.HeatKernel(n=model.dim)
    if init.solution == "log_quadratic":
        return V.LogQuadratic(a=cfg.a, alpha0=init.alpha0, t0=init.t_ref, n=model.dim)
    return V.CP1Scale(a=cfg.a, c0=model.c0)


def initial_state(cfg: RunConfig, model: ManifoldModel) -> tuple[FlowState, object]:
    """Build the starting state and (for exact data) the oracle."""
    init, t = cfg.initial, cfg.t_start
    if init.recipe == "constant":
        metric = build_metric(model, t)
        L = [np.full(c.shape, init.value) for c in model.charts]
        Lv = None if init.value_v is None else [np.full(c.shape, init.value_v) for c in model.charts]
        return FlowState(t, metric, L, cfg.a, model, Lv), None
    if init.recipe == "band_limited":
        rng = np.random.default_rng(init.seed)
        L = [init.mean + init.amplitude * f for f in random_field(model, rng, init.modes)]
        Lv = None
        if init.h is not None:
            lo, hi = init.h.mean - abs(init.h.amplitude), init.h.mean + abs(init.h.amplitude)
            if not (0 < lo and hi < 1):
                raise ConfigError(f"h range [{lo}, {hi}] must lie inside (0, 1)")
            hf = random_field(model, rng, init.modes)
            Lv = [x + np.log(init.h.mean + init.h.amplitude * f) for x, f in zip(L, hf)]
        return FlowState(t, build_metric(model, t), L, cfg.a, model, Lv), None
    if init.recipe == "exact":
        sol = _exact_solution(cfg, model)
        st = V.exact_state(sol, model, t)
        return st, sol
    head, arrays = read_snapshot(init.path)
    if head["model"] != cfg.model.model_dump(mode="json"):
        raise ConfigError("snapshot model does not match the configured model")
    metric = metric_from_values(arrays["metric"], head["kahler"], head["t"])
    return FlowState(float(head["t"]), metric, arrays["L"], cfg.a, model, arrays.get("Lv")), None


def _default_rate(variant: str, a: float, rate: str = "auto", scale: float = 1.0) -> RateFunction:
    if rate == "auto":
        rate = "riemannian_exp" if variant == "riemannian_general" else "kahler_exp"
    return RateFunction(rate, a, scale)


def _constant_ode(cfg: RunConfig, model: ManifoldModel):
    """ODE oracle for spatially constant data on homogeneous models, else ``None``."""
    if cfg.initial.recipe != "constant" or cfg.reaction.kind != "linear" or model.perturbation:
        return None
    if cfg.flow == "coupled_krf" and model.kind == "fubini_study_cp1":
        if cfg.t_start != 0:
            return None
        return V.ConstantODE(a=cfg.a, L0=cfg.initial.value, R=V.CP1Scale(a=cfg.a, c0=model.c0))
    if cfg.flow == "coupled_krf" and model.kind != "flat_torus_c":
        return None
    if cfg.t_start != 0:
        return None
    return V.ConstantODE(a=cfg.a, L0=cfg.initial.value, R=0.0)


# -- simulate -------------------------------------------------------------------------------

def run_simulation(cfg: RunConfig, rate_override: str | None = None) -> dict:
    """Integrate one configuration and evaluate its monitors (no file output).

    Returns a dict with the trajectory, monitor rows, a JSON-ready summary and
    the exit code.  Solver aborts are reported, not raised.
    """
    model = cfg.model.build()
    state, sol = initial_state(cfg, model)
    boundary = V.exact_boundary(sol, model) if (sol is not None and model.kind == "flat_patch") else None
    fc = FlowConfig(T=cfg.T, flow=cfg.flow, t0=cfg.t0, cfl=cfg.cfl, record_stride=cfg.record_stride,
                    reaction=cfg.reaction.build(cfg.a), boundary=boundary)
    summary: dict = {"abort": None}
    try:
        traj = integrate(state, fc)
    except MetricDegeneracyError as e:
        summary["abort"] = {"kind": "metric_degeneracy", "message": str(e)}
        return {"trajectory": None, "rows": [], "summary": summary, "exit": EXIT_DEGENERATE}
    except ReactionError:
        raise
    except DtUnderflowError as e:
        summary["abort"] = {"kind": "dt_underflow", "message": str(e)}
        return {"trajectory": None, "rows": [], "summary": summary, "exit": EXIT_DT}
    except FlowError as e:
        summary["abort"] = {"kind": "solver", "message": str(e)}
        return {"trajectory": None, "rows": [], "summary": summary, "exit": EXIT_DT}

    policy = cfg.tolerance.build()
    rows, mons, ok = [], {}, True
    for m in cfg.monitors:
        if m.variant in LEMMA_IDS:
            continue
        rate = _default_rate(m.variant, cfg.a, rate_override or m.rate, m.scale)
        series = min_eig_monitor(traj, m.variant, rate, policy, t0=cfg.t0)
        rows.extend(series.rows)
        mons[m.variant] = {"minimum": series.minimum, "passed": series.passed,
                           "tolerance": series.tolerance, "rate": rate.to_dict(),
                           "rate_at_T": rate(cfg.T), "rows": len(series.rows)}
        ok = ok and series.passed
    lemmas = {}
    for m in cfg.monitors:
        if m.variant not in LEMMA_IDS:
            continue
        res = [V.lemma_residual(traj, m.variant, i).residual for i in range(1, len(traj) - 1)]
        lemmas[m.variant] = {"max_residual": max(res, default=None), "residuals": res}
    summary.update({"monitors": mons, "lemmas": lemmas, "steps": int(traj.step_t.size),
                    "rejected_steps": int(traj.rejected), "snapshots": len(traj)})
    if sol is not None:
        summary["oracle"] = V.oracle_compare(traj, sol, t_min=cfg.t0)
    ode = _constant_ode(cfg, model)
    series_rows = []
    for st in traj.snapshots:
        owned = [L[c.owned] for L, c in zip(st.L, model.charts)]
        r = {"t": st.t, "L_min": min(x.min() for x in owned), "L_max": max(x.max() for x in owned),
             "metric_min_eig": st.metric.min_eig(model)}
        if ode is not None:
            r["L_ode"] = float(ode.value(st.t))
        series_rows.append(r)
    if ode is not None:
        err = max(max(abs(r["L_min"] - r["L_ode"]), abs(r["L_max"] - r["L_ode"])) for r in series_rows)
        summary["ode"] = {"max_abs_error": err, "oracle": ode.to_dict()}
    return {"trajectory": traj, "rows": rows, "series": series_rows, "summary": summary,
            "exit": EXIT_OK if ok else EXIT_FAIL}


MONITOR_COLUMNS = ["t", "variant", "global_min", "strict", "argmin_index"]
SERIES_COLUMNS = ["t", "L_min", "L_max", "L_ode", "metric_min_eig"]


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    chash = config_hash(cfg)
    res = run_simulation(cfg)
    traj = res["trajectory"]
    if traj is not None:
        write_csv(out / "monitors.csv", MONITOR_COLUMNS, res["rows"])
        write_csv(out / "series.csv", SERIES_COLUMNS, res["series"])
        if cfg.output.snapshots:
            for i, st in enumerate(traj.snapshots):
                if i % cfg.output.snapshot_every == 0 or i == len(traj) - 1:
                    write_snapshot(out / "snapshots" / f"snap_{i:04d}", st, cfg.model, cfg.flow, chash)
    write_json(out / "report.json", {"command": "simulate", "config_hash": chash, "config": cfg.canonical(),
                                     "exit_code": res["exit"], **res["summary"]})
    return res["exit"]


# -- audit -------------------------------------------------------------------------------

def cmd_audit(cfg: RunConfig, out: Path) -> int:
    chash = config_hash(cfg)
    model = cfg.model.build()
    grid = model.grid[0]
    res = cfg.audit.resolutions or [grid]
    study = V.audit_study(model, res, cfg.audit.threshold, min_order=cfg.audit.min_order)
    report = {"command": "audit", "config_hash": chash, "config": cfg.canonical(), "audit": study}
    ok = study["passed"]
    if model.is_kahler:
        comm = []
        for n in res:
            m = model.with_grid(n)
            comm.append(_commutation_once(m, cfg.audit.seed))
        entry = {"resolutions": res, "residuals": comm}
        if len(res) >= 2 and not model.spectral and max(comm) >= 1e-11:
            orders = [math.log2(c0 / c1) / math.log2(n1 / n0)
                      for c0, c1, n0, n1 in zip(comm, comm[1:], res, res[1:])]
            entry["orders"] = orders
            ok = ok and min(orders) >= cfg.audit.min_order
        report["commutation"] = entry
    rows = []
    for n, r in zip(res, study["reports"]):
        for k, v in sorted(r["residuals"].items()):
            rows.append({"resolution": n, "identity": k, "kind": "stored", "residual": v})
        for k, v in sorted(r["raw"].items()):
            rows.append({"resolution": n, "identity": k, "kind": "raw", "residual": v})
    report["passed"] = bool(ok)
    write_csv(out / "audit.csv", ["resolution", "identity", "kind", "residual"], rows)
    write_json(out / "audit.json", report)
    return EXIT_OK if ok else EXIT_FAIL


def _commutation_once(model: ManifoldModel, seed: int) -> float:
    from .discretization import commutation_residual

    pack = curvature_pack(build_metric(model), model)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c, ch in enumerate(model.charts):
        comps = (model.dim,)
        v = band_limited_field(ch, rng, modes=2, comps=comps) + 1j * band_limited_field(ch, rng, modes=2, comps=comps)
        mask = ch.owned if model.kind == "fubini_study_cp1" else None
        worst = max(worst, commutation_residual(v, pack.calcs[c], pack.riemann[c], mask))
    return worst


# -- verify ---------------------------------------------------------------------------------

def _seed_of(cfg: RunConfig) -> int:
    return cfg.initial.seed if cfg.initial.recipe == "band_limited" else cfg.audit.seed


def _base_ghat(cfg: RunConfig):
    """Unrescaled Kähler-Ricci flow (a = 0) from the configured CP¹/torus data."""
    if cfg.flow != "coupled_krf":
        raise ConfigError("reparametrization studies need flow coupled_krf")
    base = cfg.model_copy(update={"a": 0.0, "monitors": []})
    res = run_simulation(base)
    if res["trajectory"] is None:
        raise FlowError(res["summary"]["abort"]["message"])
    return res["trajectory"]


def run_study(cfg: RunConfig, spec: StudySpec, jobs: int = 1, cache: dict | None = None) -> dict:
    """One verification study as a JSON-ready dict with a ``passed`` flag and CSV rows."""
    cache = {} if cache is None else cache
    seed = _seed_of(cfg)
    name = spec.name
    if name in LEMMA_IDS or name == "L41:h":
        lem, part = (name.split(":") + ["full"])[:2]
        if lem in ("L34", "C36"):
            return _run_special(cfg, spec, cache)
        rep = V.lemma_study(lem, spec.resolutions, seed=seed, a=cfg.a, part=part, jobs=jobs)
        return {"name": name, "passed": rep.passed, "report": rep.to_dict(), "rows": rep.csv_rows()}
    if name == "L31=L32":
        res = spec.resolutions or [V.STUDY_SETUPS["L32"][1][0]]
        rows, worst, worst_rhs = [], 0.0, 0.0
        for n in res:
            d, d_rhs = V.l31_l32_agreement(n, seed, cfg.a)
            worst, worst_rhs = max(worst, d), max(worst_rhs, d_rhs)
            rows.append({"lemma": name, "resolution": n, "residual": d, "order": ""})
        return {"name": name, "passed": worst <= 1e-12, "rows": rows,
                "report": {"max_residual_difference": worst, "max_rhs_difference": worst_rhs}}
    if name == "L33_soliton":
        if not cfg.a > 0:
            raise ConfigError("the CP¹ soliton c0 = 2/a needs a > 0")
        grid = (spec.resolutions or [256])[0]
        row = V.l33_soliton_residual(grid=grid, a=cfg.a)
        return {"name": name, "passed": row.residual < 1e-8, "report": row.to_dict(),
                "rows": [{"lemma": name, "resolution": grid, "residual": row.residual, "order": ""}]}
    return _run_special(cfg, spec, cache)


def _run_special(cfg: RunConfig, spec: StudySpec, cache: dict) -> dict:
    name = spec.name
    if name in ("reparam", "C36"):
        if cfg.a == 0:
            raise ConfigError(f"{name} needs a != 0")
        if "ghat" not in cache:
            cache["ghat"] = _base_ghat(cfg)
        ghat = cache["ghat"]
        if name == "C36":
            d = V.reparam_harnack_check(ghat, cfg.a, naive=spec.naive)
            return {"name": name, "passed": bool(d["passed"]), "report": d,
                    "rows": [{"lemma": name, "resolution": d.get("snapshots", ""),
                              "residual": d["eigen_mismatch"], "order": ""}]}
        levels = len(spec.resolutions) if spec.resolutions else 3
        rep = V.reparam_study(ghat, cfg.a, levels)
        return {"name": name, "passed": rep.passed, "report": rep.to_dict(), "rows": rep.csv_rows()}
    # L34: Harnack expression of the coupled flow with the configured a
    if cfg.flow != "coupled_krf":
        raise ConfigError("L34 needs flow coupled_krf")
    res = run_simulation(cfg.model_copy(update={"monitors": []}))
    if res["trajectory"] is None:
        raise FlowError(res["summary"]["abort"]["message"])
    policy = cfg.tolerance.build()
    tol = policy.tol(cfg.model.build().h, float(res["trajectory"].step_dt.max()))
    rep = V.lyh_rescaled_check(res["trajectory"], samples=spec.samples, seed=_seed_of(cfg), t_min=cfg.t0)
    return {"name": name, "passed": rep.passed(tol),
            "report": {"minimum": rep.minimum, "argmin": rep.argmin, "samples": rep.samples,
                       "tolerance": tol, "rows": rep.rows},
            "rows": [{"lemma": name, "resolution": cfg.model.build().grid[0], "residual": rep.minimum, "order": ""}]}


def cmd_verify(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    chash = config_hash(cfg)
    if not cfg.studies:
        raise ConfigError("verify needs a non-empty 'studies' list")
    ok, cache = True, {}
    for spec in cfg.studies:
        r = run_study(cfg, spec, jobs, cache)
        ok = ok and bool(r["passed"])
        tag = r["name"].replace(":", "_").replace("=", "_") + ("_naive" if spec.naive else "")
        write_json(out / f"report_{tag}.json", {"command": "verify", "config_hash": chash, "study": r["name"],
                                                 "passed": bool(r["passed"]), "result": r["report"]})
        write_csv(out / f"residuals_{tag}.csv", ["lemma", "resolution", "residual", "order"], r["rows"])
    return EXIT_OK if ok else EXIT_FAIL


# -- sweep ------------------------------------------------------------------------------

def sweep_cells(cfg: RunConfig) -> list:
    """Cartesian product ``a × c₀ × seed`` in that (deterministic) order."""
    sw = cfg.sweep
    axes = [sw.a or [cfg.a], sw.c0 or [cfg.model.c0], sw.seeds or [_seed_of(cfg)]]
    if not (sw.a or sw.c0 or sw.seeds):
        raise ConfigError("sweep grid is empty")
    cells = list(itertools.product(*axes))
    if len(cells) > sw.max_cells:
        raise ConfigError(f"sweep has {len(cells)} cells, cap is {sw.max_cells}")
    return cells


def _cell_config(cfg: RunConfig, a, c0, seed) -> tuple[RunConfig, str | None]:
    rate = None
    if a == "0+":
        a, rate = 0.0, "limit_inverse_t"
    upd = {"a": float(a), "model": cfg.model.model_copy(update={"c0": float(c0)})}
    cell = cfg.model_copy(update=upd)
    if cfg.initial.recipe == "band_limited":
        cell = with_seed(cell, seed)
    return cell, rate


def run_sweep(cfg: RunConfig, jobs: int = 1) -> list:
    cells = sweep_cells(cfg)
    variants = [m.variant for m in cfg.monitors if m.variant not in LEMMA_IDS]
    if not variants:
        raise ConfigError("sweep needs at least one Harnack monitor")

    def one(args):
        i, (a, c0, seed) = args
        cell, rate = _cell_config(cfg, a, c0, seed)
        res = run_simulation(cell, rate_override=rate)
        row = {"cell": i, "a": a, "c0": c0, "seed": seed, "exit_code": res["exit"]}
        mons = res["summary"].get("monitors", {})
        for v in variants:
            row[f"min_{v}"] = mons.get(v, {}).get("minimum")
        first = mons.get(variants[0], {})
        row["rate_family"] = first.get("rate", {}).get("family")
        row["rate_at_T"] = first.get("rate_at_T")
        row["passed"] = res["exit"] == EXIT_OK
        return row

    work = list(enumerate(cells))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(one, work))
    else:
        rows = [one(w) for w in work]
    return rows


def cmd_sweep(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    chash = config_hash(cfg)
    rows = run_sweep(cfg, jobs)
    variants = [m.variant for m in cfg.monitors if m.variant not in LEMMA_IDS]
    cols = ["cell", "a", "c0", "seed"] + [f"min_{v}" for v in variants] + ["rate_family", "rate_at_T",
                                                                          "exit_code", "passed"]
    write_csv(out / "sweep.csv", cols, rows)
    ok = all(r["passed"] for r in rows)
    write_json(out / "sweep.json", {"command": "sweep", "config_hash": chash, "config": cfg.canonical(),
                                    "cells": len(rows), "passed": ok, "rows": rows})
    return EXIT_OK if ok else EXIT_FAIL


# -- entry point ---------------------------------------------------------------------------

COMMANDS = {"audit": cmd_audit, "simulate": cmd_simulate, "verify": cmd_verify, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyhkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--jobs", type=int, default=1, help="worker threads for studies and sweeps")
        s.add_argument("--seed", type=int, default=None, help="override the random-data seed")
    return p


def run(command: str, cfg: RunConfig, out, jobs: int = 1) -> int:
    """Dispatch with the CI exit-code contract."""
    out = Path(out)
    try:
        if command in ("verify", "sweep"):
            return COMMANDS[command](cfg, out, jobs)
        return COMMANDS[command](cfg, out)
    except (ConfigError, ModelError, ConstraintError, ReactionError, V.LemmaError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MetricDegeneracyError as e:
        print(f"solver abort: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except FlowError as e:
        print(f"solver abort: {e}", file=sys.stderr)
        return EXIT_DT
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, cfg, args.out, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
