"""Matrix Harnack quantities, rate functions and eigenvalue monitors.

Every Harnack matrix is measured against the metric: its "g-relative"
eigenvalues are those of the pencil ``(P, g)``, i.e. of ``g^{-1/2} P g^{-1/2}``,
which makes positivity statements independent of the overall metric scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .discretization import KahlerCalculus
from .flow import FlowState, Trajectory
from .geometry import CurvaturePack, curvature_pack

__all__ = [
    "RATE_FAMILIES",
    "VARIANTS",
    "RateFunction",
    "rate_function",
    "f_condition_residual",
    "ConstraintError",
    "constrained_term",
    "pencil_eigenvalues",
    "HarnackReport",
    "harnack_matrix",
    "g_function",
    "k_threshold",
    "TolerancePolicy",
    "MonitorSeries",
    "HarnackMonitor",
    "min_eig_monitor",
]

RATE_FAMILIES = ("kahler_exp", "riemannian_exp", "limit_inverse_t", "user_table")
VARIANTS = ("kahler_fixed", "kahler_flow", "constrained_fixed", "constrained_flow",
            "riemannian_general", "kahler_general")
_SERIES_CUTOFF = 1e-6


# -- rate functions -----------------------------------------------------------

def _exp_rate(a: float, t: float):
    """``a/(1 - e^{-at})`` and its derivative, with a series branch near ``at = 0``."""
    x = a * t
    if abs(x) < _SERIES_CUTOFF:
        f = 1.0 / t + a / 2.0 + a * x / 12.0
        fp = -1.0 / t ** 2 + a * a / 12.0
        return f, fp
    em = -math.expm1(-x)  # 1 - e^{-at}
    f = a / em
    fp = -a * a * math.exp(-x) / em ** 2
    return f, fp


@dataclass(frozen=True)
class RateFunction:
    """Time-dependent coefficient ``f(t)`` multiplying the metric in a Harnack matrix.

    Families: ``kahler_exp`` ``a/(1-e^{-at})`` (``1/t`` at ``a = 0``),
    ``riemannian_exp`` half of it, ``limit_inverse_t`` ``1/t`` and
    ``user_table`` a cubic spline through ``(times, values)``.  ``scale``
    multiplies the result (used for deliberately under-compensated controls).
    """

    family: str = "kahler_exp"
    a: float = 0.0
    scale: float = 1.0
    times: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.family not in RATE_FAMILIES:
            raise ValueError(f"unknown rate family {self.family!r}")
        if self.family == "user_table" and (len(self.times) < 4 or len(self.times) != len(self.values)):
            raise ValueError("user_table needs >= 4 matching times and values")

    def evaluate(self, t: float):
        """Return ``(f(t), f'(t))``."""
        t = float(t)
        if not t > 0:
            raise ValueError(f"rate functions are defined for t > 0, got {t}")
        if self.family == "kahler_exp":
            f, fp = _exp_rate(self.a, t)
        elif self.family == "riemannian_exp":
            f, fp = _exp_rate(self.a, t)
            f, fp = 0.5 * f, 0.5 * fp
        elif self.family == "limit_inverse_t":
            f, fp = 1.0 / t, -1.0 / t ** 2
        else:
            sp = CubicSpline(self.times, self.values, extrapolate=False)
            f, fp = float(sp(t)), float(sp(t, 1))
            if not (np.isfinite(f) and np.isfinite(fp)):
                raise ValueError(f"t={t} outside the tabulated range")
        return self.scale * f, self.scale * fp

    def __call__(self, t: float) -> float:
        return self.evaluate(t)[0]

    def derivative(self, t: float) -> float:
        return self.evaluate(t)[1]

    def to_dict(self) -> dict:
        return {"family": self.family, "a": self.a, "scale": self.scale}


def rate_function(family: str, a: float, t: float):
    """``(f(t), f'(t))`` for one of the canonical families."""
    return RateFunction(family, a).evaluate(t)


def f_condition_residual(rate: RateFunction, Fprime_range, t: float, case: str) -> float:
    """Minimum over ``F' ∈ [lo, hi]`` of ``c f² - F' f + f'``.

    ``c = 2`` for ``case="riemannian"`` and ``c = 1`` for ``case="kahler"``.
    The expression is affine in ``F'``, so the minimum sits at an endpoint.
    A non-negative value certifies the hypothesis on ``f`` at time ``t``.
    """
    c = {"riemannian": 2.0, "kahler": 1.0}.get(case.lower())
    if c is None:
        raise ValueError(f"case must be 'riemannian' or 'kahler', got {case!r}")
    lo, hi = (float(Fprime_range), float(Fprime_range)) if np.isscalar(Fprime_range) else map(float, Fprime_range)
    f, fp = rate.evaluate(t)
    return min(c * f * f - Fp * f + fp for Fp in (lo, hi))


# -- constrained term ---------------------------------------------------------

class ConstraintError(ValueError):
    """``h = v/u`` left the open interval (0, 1)."""

    def __init__(self, msg, points):
        super().__init__(msg)
        self.points = points


def constrained_term(state: FlowState, calcs=None, check: bool = True) -> list:
    """``∇_i h ∇_j̄ h / (1 - h²)`` per chart, with ``h = exp(L_v - L)``.

    ``∇h`` is evaluated as ``h ∇(L_v - L)``.  On Riemannian models the real
    analogue ``∇_i h ∇_j h / (1 - h²)`` is returned.

    Raises
    ------
    ConstraintError
        ``h`` outside (0, 1) at some owned point; ``points`` lists
        ``(chart, index)`` pairs.
    """
    if state.Lv is None:
        raise ValueError("constrained term needs L_v")
    calcs = state.metric.calculi(state.model) if calcs is None else calcs
    out = []
    bad = []
    for c, (chart, calc) in enumerate(zip(state.model.charts, calcs)):
        diff = state.Lv[c] - state.L[c]
        h = np.exp(diff)
        viol = ~((h > 0) & (h < 1)) & chart.owned
        if viol.any():
            bad.extend((c, tuple(int(i) for i in idx)) for idx in np.argwhere(viol))
        dd = calc.grad(diff)
        dh = h[..., None] * dd
        denom = (1.0 - h * h)[..., None, None]
        if isinstance(calc, KahlerCalculus):
            T = dh[..., :, None] * np.conj(dh)[..., None, :] / denom
        else:
            T = dh[..., :, None] * dh[..., None, :] / denom
        out.append(T)
    if check and bad:
        raise ConstraintError(f"h outside (0, 1) at {len(bad)} points, first {bad[:5]}", bad)
    return out


# -- pencil eigenvalues ---------------------------------------------------------

def pencil_eigenvalues(P, G):
    """Eigenvalues of the pencil ``(P, G)`` per grid point, ascending.

    ``G`` must be Hermitian positive definite; ``P`` Hermitian (or real
    symmetric).  Uses Cholesky whitening ``C^{-1} P C^{-H}``.
    """
    if P.shape[-1] == 1:
        return (P[..., 0, 0] / G[..., 0, 0]).real[..., None]
    C = np.linalg.cholesky(G)
    Ci = np.linalg.inv(C)
    M = Ci @ P @ np.conj(np.swapaxes(Ci, -1, -2))
    M = 0.5 * (M + np.conj(np.swapaxes(M, -1, -2)))
    return np.linalg.eigvalsh(M)


@dataclass
class HarnackReport:
    """Harnack matrix field of one variant at one time, with its g-relative spectrum."""

    variant: str
    t: float
    P: list
    min_eig_field: list
    global_min: float
    argmin: tuple
    tolerance: float | None = None

    @property
    def passed(self) -> bool | None:
        return None if self.tolerance is None else bool(self.global_min >= -self.tolerance)

    @property
    def strict(self) -> bool | None:
        return None if self.tolerance is None else bool(self.global_min >= self.tolerance)

    def row(self) -> dict:
        return {"t": self.t, "variant": self.variant, "global_min": self.global_min,
                "strict": self.strict, "argmin_index": self.argmin}


_NEEDS_RICCI = ("kahler_flow", "constrained_flow")
_NEEDS_V = ("constrained_fixed", "constrained_flow")


def harnack_matrix(state: FlowState, variant: str, rate: RateFunction,
                   pack: CurvaturePack | None = None, tolerance: float | None = None) -> HarnackReport:
    """Assemble the Harnack matrix of ``variant`` and its g-relative eigenvalues.

    ==================== ===============================================
    ``kahler_fixed``      ``∇_i∇_j̄L + f g``
    ``kahler_flow``       ``∇_i∇_j̄L + R_{ij̄} + f g``
    ``constrained_fixed`` ``∇_i∇_j̄L + f g - ∇_ih∇_j̄h/(1-h²)``
    ``constrained_flow``  ``∇_i∇_j̄L + R_{ij̄} + f g - ∇_ih∇_j̄h/(1-h²)``
    ``riemannian_general`` ``∇_i∇_jL + f g``
    ``kahler_general``    ``∇_i∇_j̄L + f g``
    ==================== ===============================================

    The global minimum runs over owned points of every chart; ``argmin`` is
    ``(chart, grid index)``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    model = state.model
    if variant == "riemannian_general":
        if model.is_kahler:
            raise ValueError("riemannian_general needs a Riemannian model")
    elif not model.is_kahler:
        raise ValueError(f"{variant} needs a Kähler model")
    if variant in _NEEDS_V and state.Lv is None:
        raise ValueError(f"{variant} needs L_v")
    if variant in _NEEDS_RICCI and pack is None:
        pack = curvature_pack(state.metric, model)
    f = rate(state.t)
    calcs = state.metric.calculi(model)
    C = constrained_term(state, calcs) if variant in _NEEDS_V else None
    Ps, fields = [], []
    best, arg = np.inf, None
    for c, (chart, calc) in enumerate(zip(model.charts, calcs)):
        G = state.metric.values[c]
        if variant == "riemannian_general":
            H = calc.hessian(state.L[c])
        else:
            H = calc.hess_mixed(state.L[c])
        P = H + f * G
        if variant in _NEEDS_RICCI:
            P = P + pack.ricci[c]
        if C is not None:
            P = P - C[c]
        P = 0.5 * (P + np.conj(np.swapaxes(P, -1, -2)))
        ev = pencil_eigenvalues(P, G)[..., 0]
        Ps.append(P)
        fields.append(ev)
        masked = np.where(chart.owned, ev, np.inf)
        i = int(np.argmin(masked))
        if masked.flat[i] < best:
            best = float(masked.flat[i])
            arg = (c,) + tuple(int(k) for k in np.unravel_index(i, masked.shape))
    return HarnackReport(variant, float(state.t), Ps, fields, best, arg, tolerance)


# -- scalar facts --------------------------------------------------------------

def _open_unit(x, name):
    x = np.asarray(x, dtype=float)
    if np.any((x <= 0) | (x >= 1)):
        raise ValueError(f"{name} must lie in (0, 1)")
    return x


def g_function(h):
    """``G(h) = 1 + 2 ln h / (1 - h²)`` on ``(0, 1)``."""
    h = _open_unit(h, "h")
    out = 1.0 + 2.0 * np.log(h) / (1.0 - h * h)
    return float(out) if out.ndim == 0 else out


def k_threshold(c):
    """Curvature threshold ``-1 - 2 ln c / (1 - c²)`` for ``c ∈ (0, 1)``."""
    c = _open_unit(c, "c")
    out = -1.0 - 2.0 * np.log(c) / (1.0 - c * c)
    return float(out) if out.ndim == 0 else out


# -- tolerance policy and monitors -------------------------------------------------

@dataclass(frozen=True)
class TolerancePolicy:
    """``tol(h, dt) = factor * (C1 h^p + C2 (dt/h²)^4 + floor)``.

    The bracket is the calibrated discretization noise floor (from an
    equality-case run); ``factor`` defaults to 3.  The time term uses the
    step ratio ``dt/h²`` because the RK4 error of an explicit parabolic run is
    carried by its stiffest resolved modes.  PASS requires ``min >= -tol``
    and STRICT requires ``min >= +tol``.
    """

    C1: float = 0.0
    C2: float = 0.0
    p: float = 4.0
    floor: float = 1e-9
    factor: float = 3.0

    def noise(self, h: float, dt: float) -> float:
        return self.C1 * h ** self.p + self.C2 * (dt / (h * h)) ** 4 + self.floor

    def tol(self, h: float, dt: float) -> float:
        return self.factor * self.noise(h, dt)

    def to_dict(self) -> dict:
        return {"C1": self.C1, "C2": self.C2, "p": self.p, "floor": self.floor, "factor": self.factor}


@dataclass
class MonitorSeries:
    """Time series of global minima for one variant."""

    variant: str
    rows: list = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r["global_min"] >= -self.tolerance for r in self.rows)

    @property
    def minimum(self) -> float:
        return min((r["global_min"] for r in self.rows), default=np.inf)

    @property
    def times(self):
        return np.array([r["t"] for r in self.rows])

    @property
    def minima(self):
        return np.array([r["global_min"] for r in self.rows])


class HarnackMonitor:
    """Callable for ``flow.integrate``: returns a Harnack report per snapshot."""

    needs_positive_time = True

    def __init__(self, variant: str, rate: RateFunction):
        self.variant = variant
        self.rate = rate
        self.name = f"harnack:{variant}"

    def __call__(self, state: FlowState) -> HarnackReport:
        rep = harnack_matrix(state, self.variant, self.rate)
        rep.P = None  # keep snapshots light
        rep.min_eig_field = None
        return rep


def min_eig_monitor(trajectory: Trajectory, variant: str, rate: RateFunction,
                    tol_policy: TolerancePolicy | None = None, t0: float | None = None) -> MonitorSeries:
    """Global g-relative minimum of the Harnack matrix at each recorded ``t >= t0``.

    The tolerance uses the model grid spacing and the largest step taken.
    """
    policy = tol_policy or TolerancePolicy()
    if t0 is None:
        t0 = trajectory.config.t0 if trajectory.config is not None else 0.0
    snaps = [s for s in trajectory.snapshots if s.t >= t0 and s.t > 0]
    if not snaps:
        return MonitorSeries(variant, [], policy.floor)
    dt = float(trajectory.step_dt.max()) if trajectory.step_dt.size else 0.0
    tol = policy.tol(snaps[0].model.h, dt)
    series = MonitorSeries(variant, tolerance=tol)
    for s in snaps:
        rep = harnack_matrix(s, variant, rate, tolerance=tol)
        series.rows.append(rep.row())
    return series
