"""Method-of-lines time integration for the log-form nonlinear heat equations.

The unknown is ``L = ln u`` (and ``L_v = ln v`` for constrained runs), so
positivity of ``u`` is automatic.  Three right-hand sides are provided:

* ``rhs_fixed_kahler``   ``ΔL + |∇L|² + F(L)`` on a fixed Kähler metric,
* ``rhs_coupled_krf``    ``ΔL + |∇L|² + R + aL`` together with
  ``∂_t g = -Ric + a g`` (rescaled Kähler-Ricci flow),
* ``rhs_riemannian``     ``ΔL + |∇L|² + F(L)`` with the Laplace-Beltrami operator.

``integrate`` advances any of them with classical RK4, a CFL-limited step that
lands exactly on the record times, a stability guard and solver aborts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import CurvatureError, ManifoldModel, MetricField, build_metric, curvature_pack

__all__ = [
    "FLOWS",
    "FlowError",
    "DtUnderflowError",
    "MetricDegeneracyError",
    "ReactionError",
    "Reaction",
    "FlowState",
    "FlowConfig",
    "Trajectory",
    "rhs_fixed_kahler",
    "rhs_coupled_krf",
    "rhs_riemannian",
    "integrate",
    "polar_filter",
    "constant_state",
]

FLOWS = ("fixed_kahler", "coupled_krf", "riemannian")


class FlowError(RuntimeError):
    """Base class for solver aborts."""


class DtUnderflowError(FlowError):
    """The stability guard drove the step below ``dt_min``; ``t`` is the blow-up estimate."""

    def __init__(self, t: float, dt: float):
        super().__init__(f"time step underflow (dt={dt:.3e}) at t={t:.6g}")
        self.t = t
        self.dt = dt


class MetricDegeneracyError(FlowError):
    """The evolving metric lost positive definiteness (or fell below the floor)."""

    def __init__(self, t: float, min_eig: float, floor: float):
        super().__init__(f"metric degenerate at t={t:.6g}: min eigenvalue {min_eig:.3e} "
                         f"(floor {floor:.3e})")
        self.t = t
        self.min_eig = min_eig
        self.floor = floor


class ReactionError(FlowError):
    """The reaction term F could not be evaluated."""


# -- reaction terms -----------------------------------------------------------

@dataclass(frozen=True)
class Reaction:
    """Scalar reaction ``F(L)`` with its first two derivatives.

    ``kind="linear"`` is ``F(L) = a L``.  ``kind="table"`` interpolates the
    tabulated ``(points, values)`` with a natural cubic spline; evaluation
    outside the table raises ``ReactionError``.
    """

    kind: str = "linear"
    a: float = 0.0
    points: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("linear", "table"):
            raise ValueError(f"unknown reaction kind {self.kind!r}")
        if self.kind == "table":
            if len(self.points) < 4 or len(self.points) != len(self.values):
                raise ValueError("table reaction needs >= 4 matching points and values")
            if np.any(np.diff(self.points) <= 0):
                raise ValueError("table points must be strictly increasing")

    @classmethod
    def linear(cls, a: float) -> "Reaction":
        return cls("linear", a=float(a))

    @classmethod
    def table(cls, points, values) -> "Reaction":
        return cls("table", points=tuple(map(float, points)), values=tuple(map(float, values)))

    @property
    def _spline(self):
        sp = self.__dict__.get("_sp")
        if sp is None:
            sp = CubicSpline(self.points, self.values, bc_type="natural", extrapolate=False)
            object.__setattr__(self, "_sp", sp)
        return sp

    def _eval(self, L, nu):
        if self.kind == "linear":
            L = np.asarray(L, dtype=float)
            if nu == 0:
                return self.a * L
            return np.full_like(L, self.a if nu == 1 else 0.0)
        out = self._spline(L, nu)
        if not np.all(np.isfinite(out)):
            raise ReactionError(f"F table covers [{self.points[0]}, {self.points[-1]}]; "
                                f"L ranged over [{np.min(L):.4g}, {np.max(L):.4g}]")
        return out

    def __call__(self, L):
        return self._eval(L, 0)

    def d1(self, L):
        return self._eval(L, 1)

    def d2(self, L):
        return self._eval(L, 2)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "points": list(self.points), "values": list(self.values)}


# -- state and configuration ---------------------------------------------------

@dataclass
class FlowState:
    """Time, metric, ``L = ln u`` and optionally ``L_v = ln v``, one array per chart."""

    t: float
    metric: MetricField
    L: list
    a: float
    model: ManifoldModel
    Lv: list | None = None

    def __post_init__(self):
        self.L = [np.asarray(x, dtype=float) for x in self.L]
        if self.Lv is not None:
            self.Lv = [np.asarray(x, dtype=float) for x in self.Lv]
        for c, x in zip(self.model.charts, self.L):
            if x.shape != c.shape:
                raise ValueError(f"L shape {x.shape} does not match chart grid {c.shape}")

    def h(self) -> list:
        """``h = exp(L_v - L)`` per chart (computed as a log difference)."""
        if self.Lv is None:
            raise ValueError("state carries no L_v field")
        return [np.exp(lv - l) for lv, l in zip(self.Lv, self.L)]

    def check_constraint(self) -> None:
        """Raise if ``0 < h < 1`` fails at any owned point."""
        for c, hh in zip(self.model.charts, self.h()):
            bad = ~((hh > 0) & (hh < 1)) & c.owned
            if bad.any():
                raise ValueError(f"h outside (0, 1) at {int(bad.sum())} points of chart {c.name}")


@dataclass
class FlowConfig:
    """Time-stepping controls.

    Parameters
    ----------
    T : float
        End time.
    flow : str
        ``fixed_kahler``, ``coupled_krf`` or ``riemannian``.
    t0 : float
        Earliest time at which monitors are evaluated.  Must be positive when
        a monitor needs ``t > 0`` (rate functions with ``1/(1 - e^{-at})``).
    cfl : float
        Factor in ``dt = cfl * h² * min-eig(g) / n``.
    record_stride : float, optional
        Record every ``record_stride`` time units from the start time.
    record_times : tuple of float
        Extra record times.  ``T`` is always recorded.
    dt : float, optional
        Fixed step, overriding the CFL rule (used for time-convergence studies).
    reaction : Reaction, optional
        ``F(L)``; defaults to ``a L`` with the state's ``a``.
    boundary : callable, optional
        ``boundary(t) -> {"L": [...], "Lv": [...]}`` full-grid arrays used to
        fill non-owned points of open charts at every stage.
    """

    T: float
    flow: str = "fixed_kahler"
    t0: float = 0.0
    cfl: float = 0.2
    integrator: str = "RK4"
    record_stride: float | None = None
    record_times: tuple = ()
    record_start: bool = True
    dt: float | None = None
    reaction: Reaction | None = None
    boundary: Callable | None = None
    stability_limit: float = 0.5
    dt_min: float = 1e-12
    degeneracy_ratio: float = 1e-2
    polar_filter: bool = True
    max_steps: int = 10_000_000

    def __post_init__(self):
        if self.flow not in FLOWS:
            raise ValueError(f"unknown flow {self.flow!r}")
        if self.integrator != "RK4":
            raise ValueError("only the RK4 integrator is available")
        if not 0 < self.cfl <= 1:
            raise ValueError("CFL factor must lie in (0, 1]")
        if self.t0 < 0:
            raise ValueError("t0 must be non-negative")
        if self.record_stride is not None and self.record_stride <= 0:
            raise ValueError("record stride must be positive")
        if self.dt is not None and self.dt <= 0:
            raise ValueError("fixed dt must be positive")

    def schedule(self, start: float) -> list:
        """Sorted record times in ``(start, T]``."""
        times = set()
        if self.record_stride:
            k = 1
            while start + k * self.record_stride < self.T - 1e-12:
                times.add(round(start + k * self.record_stride, 12))
                k += 1
        times.update(float(t) for t in self.record_times if start < t < self.T)
        times.add(float(self.T))
        return sorted(times)


@dataclass
class Trajectory:
    """Snapshots at record times plus per-step metadata and monitor outputs."""

    snapshots: list
    step_t: np.ndarray
    step_dt: np.ndarray
    step_drift: np.ndarray
    monitors: dict = field(default_factory=dict)
    rejected: int = 0
    config: FlowConfig | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    def index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"no snapshot at t={t}")
        return i

    def __len__(self):
        return len(self.snapshots)

    def __getitem__(self, i) -> FlowState:
        return self.snapshots[i]


# -- right-hand sides ------------------------------------------------------------

def _require(model: ManifoldModel, kahler: bool, what: str):
    if model.is_kahler != kahler:
        raise ValueError(f"{what} needs a {'Kähler' if kahler else 'Riemannian'} model, "
                         f"got {model.kind}")


def _heat_part(calc, L):
    """``ΔL + |∇L|²`` on one chart."""
    if hasattr(calc, "ddbar"):
        dL = calc.grad(L)
        return calc.lap(L) + calc.norm2_grad(L, dL)
    return calc.lap(L) + calc.norm2_grad(L)


def rhs_fixed_kahler(state: FlowState, reaction: Reaction | None = None, field_name: str = "L"):
    """``ΔL + |∇L|² + F(L)`` on the state's fixed Kähler metric.

    ``ΔL = g^{ij̄}∂_i∂_j̄L`` and ``|∇L|² = g^{ij̄}∂_iL ∂_j̄L``.  ``F`` defaults to
    ``aL``.  Returns one array per chart.
    """
    _require(state.model, True, "rhs_fixed_kahler")
    F = reaction or Reaction.linear(state.a)
    calcs = state.metric.calculi(state.model)
    fields = state.L if field_name == "L" else state.Lv
    return [_heat_part(calc, L) + F(L) for calc, L in zip(calcs, fields)]


def rhs_coupled_krf(state: FlowState, pack=None):
    """Tendencies of the coupled system on the rescaled Kähler-Ricci flow.

    Returns ``(dL, dG, dLv)`` with ``dL = ΔL + |∇L|² + R + aL``,
    ``dG = -Ric + a g`` and ``dLv`` the same L-equation for ``L_v`` (``None``
    when absent).  Curvature is recomputed from the state's metric.
    """
    _require(state.model, True, "rhs_coupled_krf")
    pack = curvature_pack(state.metric, state.model) if pack is None else pack
    a = state.a
    dL, dG, dLv = [], [], []
    for c, calc in enumerate(pack.calcs):
        S = pack.scalar[c]
        dL.append(_heat_part(calc, state.L[c]) + S + a * state.L[c])
        dG.append(-pack.ricci[c] + a * state.metric.values[c])
        if state.Lv is not None:
            dLv.append(_heat_part(calc, state.Lv[c]) + S + a * state.Lv[c])
    return dL, dG, (dLv if state.Lv is not None else None)


def rhs_riemannian(state: FlowState, reaction: Reaction | None = None, field_name: str = "L"):
    """``ΔL + |∇L|² + F(L)`` with the Laplace-Beltrami operator of a fixed metric."""
    _require(state.model, False, "rhs_riemannian")
    F = reaction or Reaction.linear(state.a)
    calcs = state.metric.calculi(state.model)
    fields = state.L if field_name == "L" else state.Lv
    return [_heat_part(calc, L) + F(L) for calc, L in zip(calcs, fields)]


def polar_filter(model: ManifoldModel, f, dt: float | None = None, kappa: float = 1.5):
    """Drop longitudinal modes that an explicit step of size ``dt`` cannot advance.

    On a sphere row at colatitude θ the mode ``e^{imφ}`` has Laplacian
    eigenvalue ``m²/(r² sin²θ)``; modes with ``dt m²/(r² sin²θ) > kappa`` are
    removed, which keeps ``dt |λ|`` inside the RK4 stability interval once the
    θ-direction part is added.  Without ``dt`` the grid cap
    ``|m| <= sin θ N_φ/2`` is used.  At least ``|m| <= 1`` is always kept.
    Identity on other models.
    """
    if model.kind != "round_sphere":
        return f
    c = model.charts[0]
    nphi = c.shape[1]
    th = c.axes[0].points
    if dt is None:
        mmax = np.sin(th) * nphi / 2
    else:
        mmax = model.radius * np.sin(th) * math.sqrt(kappa / dt)
    mmax = np.maximum(1.0, mmax)
    if np.all(mmax >= nphi // 2):
        return f
    F = np.fft.rfft(f, axis=1)
    m = np.arange(F.shape[1])
    F[m[None, :] > mmax[:, None]] = 0
    return np.fft.irfft(F, n=nphi, axis=1)


# -- integrator --------------------------------------------------------------

class _Stepper:
    """Evaluates stage tendencies and fills non-evolved points for one run."""

    def __init__(self, state: FlowState, config: FlowConfig):
        self.model = state.model
        self.config = config
        self.a = state.a
        self.coupled = config.flow == "coupled_krf"
        self.metric = state.metric
        self.has_v = state.Lv is not None
        self.reaction = config.reaction or Reaction.linear(state.a)
        if config.flow == "riemannian":
            _require(self.model, False, "riemannian flow")
        else:
            _require(self.model, True, f"{config.flow} flow")
        self.masks = [self.model.evolution_mask(i) for i in range(len(self.model.charts))]
        self.fixed_points = [~c.owned if self.model.kind == "flat_patch" else None
                             for c in self.model.charts]

    def to_y(self, state: FlowState) -> dict:
        y = {"L": [x.copy() for x in state.L]}
        if self.has_v:
            y["Lv"] = [x.copy() for x in state.Lv]
        if self.coupled:
            y["G"] = [G.copy() for G in state.metric.values]
        return y

    def metric_of(self, y, t) -> MetricField:
        if self.coupled:
            return MetricField(y["G"], True, t)
        return self.metric

    def state_of(self, y, t) -> FlowState:
        return FlowState(t, self.metric_of(y, t), y["L"], self.a, self.model, y.get("Lv"))

    def fill(self, y, t) -> dict:
        m = self.model
        out = {"L": m.stitch(y["L"])}
        if "Lv" in y:
            out["Lv"] = m.stitch(y["Lv"])
        if "G" in y:
            out["G"] = m.stitch(y["G"], kind="metric")
        if self.config.boundary is not None:
            vals = self.config.boundary(t)
            for key, arrs in vals.items():
                if key not in out:
                    continue
                for c, arr in enumerate(arrs):
                    mask = self.fixed_points[c]
                    if mask is not None:
                        out[key][c][mask] = np.asarray(arr)[mask]
        return out

    def tendency(self, y, t, dt=None) -> dict:
        st = self.state_of(y, t)
        if self.coupled:
            try:
                dL, dG, dLv = rhs_coupled_krf(st)
            except CurvatureError as exc:
                raise MetricDegeneracyError(t, float("nan"), 0.0) from exc
            out = {"L": dL, "G": dG}
            if dLv is not None:
                out["Lv"] = dLv
            return self.freeze(out)
        rhs = rhs_riemannian if self.config.flow == "riemannian" else rhs_fixed_kahler
        out = {"L": rhs(st, self.reaction)}
        if self.has_v:
            out["Lv"] = rhs(st, self.reaction, field_name="Lv")
        if self.config.polar_filter and self.model.kind == "round_sphere":
            out = {k: [polar_filter(self.model, f, dt) for f in v] for k, v in out.items()}
        return self.freeze(out)

    def freeze(self, k):
        """Zero tendencies outside the evolved region (CP¹ fringe is refilled by stitching)."""
        if self.model.kind != "fubini_study_cp1":
            return k
        for arrs in k.values():
            for c, arr in enumerate(arrs):
                arr[~self.masks[c]] = 0
        return k

    @staticmethod
    def axpy(y, k, s):
        return {key: [a + s * b for a, b in zip(y[key], k[key])] for key in y}

    def rk4(self, y, t, dt):
        k1 = self.tendency(y, t, dt)
        y2 = self.fill(self.axpy(y, k1, 0.5 * dt), t + 0.5 * dt)
        k2 = self.tendency(y2, t + 0.5 * dt, dt)
        y3 = self.fill(self.axpy(y, k2, 0.5 * dt), t + 0.5 * dt)
        k3 = self.tendency(y3, t + 0.5 * dt, dt)
        y4 = self.fill(self.axpy(y, k3, dt), t + dt)
        k4 = self.tendency(y4, t + dt, dt)
        new = {key: [a + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
                     for a, b1, b2, b3, b4 in zip(y[key], k1[key], k2[key], k3[key], k4[key])]
               for key in y}
        return self.fill(new, t + dt)

    def check_reaction(self, y) -> None:
        if self.coupled:
            return
        for key in ("L", "Lv"):
            for c, arr in enumerate(y.get(key, [])):
                self.reaction(arr[self.masks[c]])

    def drift(self, y_old, y_new) -> float:
        d = 0.0
        for key in ("L", "Lv"):
            if key not in y_new:
                continue
            for c, (a, b) in enumerate(zip(y_old[key], y_new[key])):
                diff = np.abs(b - a)[self.masks[c]]
                d = max(d, float(diff.max()) if np.all(np.isfinite(diff)) else np.inf)
        return d

    def min_eig(self, y) -> float:
        if not self.coupled:
            return np.inf
        out = np.inf
        for c, G in enumerate(y["G"]):
            if G.shape[-1] == 1:
                ev = G[..., 0, 0].real
            else:
                ev = np.linalg.eigvalsh(G)[..., 0]
            vals = ev[self.masks[c]]
            out = min(out, float(vals.min()) if np.all(np.isfinite(vals)) else -np.inf)
        return out

    def cfl_dt(self, y, t) -> float:
        if self.config.dt is not None:
            return self.config.dt
        if not self.coupled:
            if not hasattr(self, "_dt_fixed"):
                self._dt_fixed = self.model.cfl_dt(self.metric, self.config.cfl)
            return self._dt_fixed
        lam = self.min_eig(y)
        return self.config.cfl * self.model.h ** 2 * lam / self.model.dim


def _normalize_monitors(monitors):
    if monitors is None:
        return []
    if isinstance(monitors, dict):
        return list(monitors.items())
    out = []
    for m in monitors:
        if isinstance(m, tuple):
            out.append(m)
        else:
            out.append((getattr(m, "name", getattr(m, "__name__", repr(m))), m))
    return out


def integrate(state: FlowState, config: FlowConfig, monitors=None) -> Trajectory:
    """Advance ``state`` to ``config.T`` with RK4.

    Each step uses ``dt = min(CFL bound, time to next record)`` split evenly so
    record times are hit exactly.  A step whose ``max |ΔL|`` over evolved
    points exceeds ``config.stability_limit`` (or produces non-finite values)
    is rejected and the step factor halved for the rest of the run; so is a
    trial stage that leaves the range of a tabulated ``F``.  Coupled
    runs rebuild the metric inverse and curvature at every stage and abort
    when the minimum metric eigenvalue drops below
    ``degeneracy_ratio * initial`` (or to zero).

    Monitors are callables ``monitor(state) -> value`` (or ``(name, callable)``
    pairs); they run on every recorded snapshot with ``t >= config.t0``.

    Raises
    ------
    DtUnderflowError
        The guard pushed ``dt`` below ``config.dt_min``.
    MetricDegeneracyError
        The evolving metric degenerated.
    ReactionError
        An accepted state lies outside the range of a tabulated ``F``.
    """
    if config.T <= state.t:
        raise ValueError(f"end time {config.T} must exceed start time {state.t}")
    mons = _normalize_monitors(monitors)
    for name, fn in mons:
        if getattr(fn, "needs_positive_time", False) and config.t0 <= 0:
            raise ValueError(f"monitor {name!r} needs t0 > 0")
    if state.Lv is not None:
        state.check_constraint()
    stepper = _Stepper(state, config)
    y = stepper.fill(stepper.to_y(state), state.t)
    lam0 = stepper.min_eig(y)
    floor = max(0.0, config.degeneracy_ratio * lam0) if np.isfinite(lam0) else 0.0

    snapshots, outputs = [], {name: [] for name, _ in mons}

    def record(st: FlowState):
        snapshots.append(st)
        for name, fn in mons:
            outputs[name].append(fn(st) if st.t >= config.t0 else None)

    if config.record_start:
        record(stepper.state_of({k: [x.copy() for x in v] for k, v in y.items()}, state.t))

    t = float(state.t)
    step_t, step_dt, step_drift = [], [], []
    shrink = 1.0
    rejected = 0
    for target in config.schedule(state.t):
        while t < target:
            bound = stepper.cfl_dt(y, t) * shrink
            if not np.isfinite(bound) or bound < config.dt_min:
                raise DtUnderflowError(t, bound)
            nsteps = max(1, math.ceil((target - t) / bound - 1e-9))
            dt = (target - t) / nsteps
            try:
                new = stepper.rk4(y, t, dt)
            except ReactionError:
                stepper.check_reaction(y)  # re-raises when the accepted state is already off the table
                new = None
            drift = stepper.drift(y, new) if new is not None else np.inf
            if not drift <= config.stability_limit:
                rejected += 1
                shrink *= 0.5
                continue
            lam = stepper.min_eig(new)
            if stepper.coupled and (not lam > 0 or lam < floor):
                raise MetricDegeneracyError(t + dt, lam, floor)
            y = new
            t = target if nsteps == 1 else t + dt
            step_t.append(t)
            step_dt.append(dt)
            step_drift.append(drift)
            if len(step_t) > config.max_steps:
                raise FlowError(f"step budget {config.max_steps} exhausted at t={t:.6g}")
        record(stepper.state_of({k: [x.copy() for x in v] for k, v in y.items()}, target))

    return Trajectory(snapshots, np.array(step_t), np.array(step_dt), np.array(step_drift),
                      outputs, rejected, config)


def constant_state(model: ManifoldModel, value: float, a: float, t: float = 0.0,
                   metric: MetricField | None = None, value_v: float | None = None) -> FlowState:
    """Spatially constant ``L`` (and optionally ``L_v``) on the model's native metric."""
    metric = build_metric(model, t) if metric is None else metric
    L = [np.full(c.shape, float(value)) for c in model.charts]
    Lv = None if value_v is None else [np.full(c.shape, float(value_v)) for c in model.charts]
    return FlowState(t, metric, L, a, model, Lv)
