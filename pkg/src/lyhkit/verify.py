"""Closed-form oracles, the KRF/rescaled-KRF reparametrization and lemma residual checks.

Every evolution identity is checked the same way: the left side is a centered
time difference of the lemma's subject tensor across adjacent snapshots, the
right side is assembled from spatial operators at the middle snapshot, and the
reported number is ``max|LHS - RHS| / (max|RHS| + 1)`` over owned points.

Contractions use the inverse metric explicitly, so ``X_k Y_k̄`` means
``g^{kl̄} X_k Y_l̄``; curvature actions go through ``KahlerCalculus.riem_dot``
and ``KahlerCalculus.mm``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.differentiate import derivative, hessian, jacobian
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from .discretization import KahlerCalculus
from .flow import FlowConfig, FlowState, Reaction, Trajectory, integrate
from .geometry import (CurvaturePack, ManifoldModel, MetricField, build_metric,
                       curvature_pack, curvature_positivity)
from .harnack import RateFunction, TolerancePolicy, harnack_matrix, pencil_eigenvalues

__all__ = [
    "LemmaId",
    "LemmaError",
    "ResidualRow",
    "ResidualReport",
    "ExactSolution",
    "HeatKernel",
    "LogQuadratic",
    "CP1Scale",
    "ConstantODE",
    "exact_evaluate",
    "exact_state",
    "exact_boundary",
    "oracle_compare",
    "lemma_residual",
    "lemma_rhs",
    "lyh_rescaled_check",
    "LYHReport",
    "holomorphic_fields",
    "reparam",
    "reparam_inverse",
    "reparam_metric",
    "rescaled_flow_residual",
    "reparam_coefficient",
    "reparam_harnack_check",
    "convergence_study",
    "calibrate_tolerance",
    "STUDY_SETUPS",
    "study_trajectory",
    "lemma_study",
    "l31_l32_agreement",
    "l33_soliton_residual",
    "reparam_study",
    "audit_study",
    "commutation_study",
]


class LemmaId(str, Enum):
    """Identifiers of the evolution identities and estimates under test."""

    L31 = "L31"  # Hessian evolution for A_t = ΔA + B on a Kähler manifold
    L32 = "L32"  # Hessian of L = ln u, u_t = Δu + a u ln u, fixed metric
    L33 = "L33"  # Ricci evolution under the rescaled Kähler-Ricci flow
    L34 = "L34"  # Ricci Harnack inequality under the rescaled flow
    L35 = "L35"  # Hessian of L coupled to the rescaled flow
    L41 = "L41"  # rank-one constrained term ∇h∇̄h/(1-h²)
    L51 = "L51"  # real Hessian evolution on a Riemannian manifold
    C36 = "C36"  # unrescaled-side form of the coupled Harnack estimate

    @property
    def description(self) -> str:
        return _DESCRIPTIONS[self]

    @property
    def requires(self) -> tuple:
        """``(flows, needs_L_v)`` accepted by the assembler."""
        return _REQUIRES[self]


_DESCRIPTIONS = {
    LemmaId.L31: "∂_t∇_i∇_j̄A = Δ∇_i∇_j̄A + R_{ij̄lk̄}∇_k∇_l̄A - ½(R_{lj̄}∇_i∇_l̄A + R_{il̄}∇_l∇_j̄A) + ∇_i∇_j̄B",
    LemmaId.L32: "Hessian of ln u for u_t = Δu + u F(ln u) on a fixed Kähler metric",
    LemmaId.L33: "∂_tR_{ij̄} = ΔR_{ij̄} + R_{ij̄kl̄}R_{lk̄} - R_{ip̄}R_{pj̄}",
    LemmaId.L34: "∂_tRic + Ric² + ∇Ric·X + Rm(X,X̄) + ae^{-at}/(1-e^{-at}) Ric ≥ 0",
    LemmaId.L35: "Hessian of ln u for u_t = Δu + Ru + au ln u coupled to ∂_tg = -Ric + ag",
    LemmaId.L41: "evolution of ∇_ih∇_j̄h/(1-h²) for h = v/u",
    LemmaId.L51: "∂_t∇_i∇_jA on a Riemannian manifold with curvature and ∇Ric terms",
    LemmaId.C36: "∇∇̄ln u + R̂ic + c(s) ĝ on the unrescaled flow",
}

_REQUIRES = {
    LemmaId.L31: (("fixed_kahler", "coupled_krf"), False),
    LemmaId.L32: (("fixed_kahler",), False),
    LemmaId.L33: (("coupled_krf",), False),
    LemmaId.L34: (("coupled_krf",), False),
    LemmaId.L35: (("coupled_krf",), False),
    LemmaId.L41: (("fixed_kahler", "coupled_krf"), True),
    LemmaId.L51: (("riemannian",), False),
    LemmaId.C36: (("coupled_krf",), False),
}


class LemmaError(ValueError):
    """A trajectory cannot be checked against the requested lemma."""


# -- exact solutions ---------------------------------------------------------------

def _spot_points(rng, count, n, radius, t_range):
    z = rng.uniform(-radius, radius, size=(count, 2 * n))
    t = rng.uniform(*t_range, size=count)
    return z, t


def _field_residual(fn, x, t, a, extra=0.0):
    """Relative residual of ``L_t = Σ¼(L_xx + L_yy) + Σ¼(L_x² + L_y²) + aL + extra``.

    All derivatives come from ``scipy.differentiate`` on ``fn(x, t)``.
    """
    v = np.concatenate([x, [t]])
    step = 0.05 * min(t, 1.0)

    def f(w):
        return fn(w[:-1], w[-1])

    J = jacobian(f, v, initial_step=step).df
    H = hessian(f, v, initial_step=step).ddf
    m = len(x)
    lap = 0.25 * sum(H[k, k] for k in range(m))
    grad2 = 0.25 * sum(J[k] ** 2 for k in range(m))
    val = f(v)
    rhs = lap + grad2 + a * val + extra
    scale = 1.0 + max(abs(J[-1]), abs(lap), abs(grad2), abs(a * val))
    return abs(J[-1] - rhs) / scale


def _ode_residual(fn, rhs, t):
    step = 0.05 * min(t, 1.0)
    d = derivative(fn, t, initial_step=step).df
    r = rhs(t)
    return abs(d - r) / (1.0 + abs(d) + abs(r))


class ExactSolution:
    """Base class for closed-form oracles.

    Subclasses provide ``L(z, t)`` (or a scalar ``value(t)``) and a
    ``spot_check`` that substitutes the evaluator into its defining equation
    with numerically differentiated derivatives.
    """

    kind = "abstract"
    spatial = True

    def field(self, model: ManifoldModel, t: float) -> list:
        """Evaluate ``L`` on every chart of ``model``."""
        self.check_domain(model)
        out = []
        for c in model.charts:
            z = np.stack([c.coords[2 * k] + 1j * c.coords[2 * k + 1]
                          for k in range(c.complex_dim)], axis=-1)
            out.append(np.asarray(self.L(z, t), dtype=float))
        return out

    def check_domain(self, model: ManifoldModel) -> None:
        if model.kind != "flat_patch":
            raise ValueError(f"{self.kind} is an exact solution on flat C^n patches, "
                             f"not on {model.kind}")
        if model.dim != self.n:
            raise ValueError(f"{self.kind} has complex dimension {self.n}, model has {model.dim}")

    def spot_check(self, seed: int = 0, count: int = 10) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        out.update({k: v for k, v in self.__dict__.items() if not k.startswith("_")})
        if isinstance(out.get("R"), ExactSolution):
            out["R"] = out["R"].to_dict()
        return out


@dataclass(frozen=True)
class HeatKernel(ExactSolution):
    """Euclidean heat kernel ``u = (πt)^{-n} exp(-|z|²/t)`` for ``u_t = Σ ∂_k∂_k̄ u``.

    ``L = -n ln(πt) - |z|²/t``; its complex Hessian is ``-δ/t`` so the
    ``1/t``-rate Harnack matrix vanishes identically.
    """

    n: int = 1
    kind = "HeatKernel"

    @property
    def a(self) -> float:
        return 0.0

    def L(self, z, t):
        z = np.asarray(z)
        return -self.n * math.log(math.pi * t) - np.sum(np.abs(z) ** 2, axis=-1) / t

    def u(self, z, t):
        return np.exp(self.L(z, t))

    def beta(self, t):
        return -1.0 / t

    def rate(self) -> RateFunction:
        return RateFunction("limit_inverse_t")

    def spot_check(self, seed: int = 0, count: int = 10) -> float:
        """Max relative residual of ``u_t - Σ ∂∂̄u`` at random ``(z, t)``."""
        rng = np.random.default_rng(seed)
        xs, ts = _spot_points(rng, count, self.n, 1.5, (0.2, 2.0))
        worst = 0.0
        for x, t in zip(xs, ts):
            def u(xx, tt):
                r2 = np.sum(np.asarray(xx) ** 2, axis=0)
                return (np.pi * tt) ** (-self.n) * np.exp(-r2 / tt)
            v = np.concatenate([x, [t]])
            step = 0.05 * t
            f = lambda w: u(w[:-1], w[-1])  # noqa: E731
            J = jacobian(f, v, initial_step=step).df
            H = hessian(f, v, initial_step=step).ddf
            lap = 0.25 * sum(H[k, k] for k in range(2 * self.n))
            worst = max(worst, abs(J[-1] - lap) / (abs(J[-1]) + abs(lap) + abs(f(v))))
        return float(worst)


@dataclass(frozen=True)
class LogQuadratic(ExactSolution):
    """``L = α(t) + β(t)|z|²`` solving ``L_t = ΔL + |∇L|² + aL`` on flat C^n.

    ``β = -a/(1 - e^{-at})`` solves ``β' = β² + aβ``; ``α' = aα + nβ`` gives
    ``α e^{-at} = α₀e^{-at₀} - n[ln|1 - e^{-at}| - ln|1 - e^{-at₀}|]``.  At
    ``a = 0`` this is ``β = -1/t``, ``α = α₀ - n ln(t/t₀)``.  The Kähler
    Harnack matrix with rate ``a/(1 - e^{-at})`` vanishes identically.
    """

    a: float = 1.0
    alpha0: float = 0.0
    t0: float = 0.2
    n: int = 1
    kind = "LogQuadratic"

    def __post_init__(self):
        if not self.t0 > 0:
            raise ValueError("t0 must be positive")

    def beta(self, t):
        t = np.asarray(t, dtype=float)
        if self.a == 0:
            return -1.0 / t
        return -self.a / -np.expm1(-self.a * t)

    def beta_prime(self, t):
        t = np.asarray(t, dtype=float)
        if self.a == 0:
            return 1.0 / t ** 2
        em = np.expm1(-self.a * t)
        return self.a ** 2 * np.exp(-self.a * t) / em ** 2

    def alpha(self, t):
        t = np.asarray(t, dtype=float)
        a, n = self.a, self.n
        if a == 0:
            return self.alpha0 - n * np.log(t / self.t0)
        lg = lambda s: np.log(np.abs(np.expm1(-a * s)))  # noqa: E731
        return np.exp(a * t) * (self.alpha0 * math.exp(-a * self.t0) - n * (lg(t) - lg(self.t0)))

    def L(self, z, t):
        z = np.asarray(z)
        return self.alpha(t) + self.beta(t) * np.sum(np.abs(z) ** 2, axis=-1)

    def rate(self) -> RateFunction:
        return RateFunction("kahler_exp", self.a)

    def beta_residual(self, t):
        """``β' - β² - aβ`` with the closed-form derivative."""
        b = self.beta(t)
        return self.beta_prime(t) - b * b - self.a * b

    def spot_check(self, seed: int = 0, count: int = 10) -> float:
        """Max relative residual of the L-equation at random ``(z, t)``."""
        rng = np.random.default_rng(seed)
        xs, ts = _spot_points(rng, count, self.n, 1.0, (0.2, 2.0))
        worst = 0.0
        for x, t in zip(xs, ts):
            fn = lambda xx, tt: self.alpha(tt) + self.beta(tt) * np.sum(np.asarray(xx) ** 2, axis=0)  # noqa: E731
            worst = max(worst, _field_residual(fn, x, t, self.a))
        return float(worst)


@dataclass(frozen=True)
class CP1Scale(ExactSolution):
    """Homogeneous rescaled Kähler-Ricci flow on CP¹: ``g(t) = c(t) g_FS``.

    ``Ric(c g_FS) = 2 g_FS`` so ``c' = ac - 2`` and
    ``c(t) = 2/a + (c₀ - 2/a) e^{at}`` (``c₀ - 2t`` at ``a = 0``).  The scalar
    curvature is ``2/c``.
    """

    a: float = 1.0
    c0: float = 2.0
    kind = "CP1Scale"
    spatial = False

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")

    def c(self, t):
        t = np.asarray(t, dtype=float)
        if self.a == 0:
            return self.c0 - 2.0 * t
        return 2.0 / self.a + (self.c0 - 2.0 / self.a) * np.exp(self.a * t)

    value = c

    def c_prime(self, t):
        return self.a * self.c(t) - 2.0

    def scalar(self, t):
        return 2.0 / self.c(t)

    @property
    def collapse_time(self) -> float:
        """First ``t > 0`` with ``c(t) = 0`` (``inf`` if the metric never collapses)."""
        a, c0 = self.a, self.c0
        if a == 0:
            return c0 / 2.0
        q = 2.0 - a * c0
        if q <= 0:
            return math.inf
        return math.log(2.0 / q) / a

    def check_domain(self, model: ManifoldModel) -> None:
        if model.kind != "fubini_study_cp1":
            raise ValueError(f"CP1Scale describes CP¹ metrics, not {model.kind}")

    def metric(self, model: ManifoldModel, t: float) -> MetricField:
        self.check_domain(model)
        base = build_metric(model)
        return MetricField([G * (float(self.c(t)) / model.c0) for G in base.values], True, t)

    def spot_check(self, seed: int = 0, count: int = 10) -> float:
        rng = np.random.default_rng(seed)
        top = min(2.0, 0.9 * self.collapse_time)
        ts = rng.uniform(0.05 * top, top, size=count)
        return float(max(_ode_residual(self.c, lambda s: self.a * self.c(s) - 2.0, t) for t in ts))


@dataclass(frozen=True)
class ConstantODE(ExactSolution):
    """Spatially constant ``L`` with ``L' = R(t) + aL``.

    ``R`` is a constant scalar curvature or a ``CP1Scale`` path (``R = 2/c``).
    Constant R: ``L = (L₀ + R/a)e^{at} - R/a``.  CP¹ path:
    ``L = e^{at}[L₀ + (1 - e^{-at}) + (κa/2)(ln(c/c₀) - at)]`` with
    ``κ = c₀ - 2/a`` (from the partial fractions of ``2e^{-as}/c(s)``), and
    ``L₀ - ln(c/c₀)`` at ``a = 0``.
    """

    a: float = 0.0
    L0: float = 0.0
    R: object = 0.0
    kind = "ConstantODE"
    spatial = False

    def __post_init__(self):
        if isinstance(self.R, CP1Scale) and self.R.a != self.a:
            raise ValueError("R path must evolve with the same a")

    def scalar(self, t):
        if isinstance(self.R, CP1Scale):
            return self.R.scalar(t)
        return np.full_like(np.asarray(t, dtype=float), float(self.R))

    def value(self, t):
        t = np.asarray(t, dtype=float)
        a = self.a
        if isinstance(self.R, CP1Scale):
            c = self.R.c(t)
            if a == 0:
                return self.L0 - np.log(c / self.R.c0)
            kappa = self.R.c0 - 2.0 / a
            inner = -np.expm1(-a * t) + 0.5 * kappa * a * (np.log(c / self.R.c0) - a * t)
            return np.exp(a * t) * (self.L0 + inner)
        R = float(self.R)
        if a == 0:
            return self.L0 + R * t
        return (self.L0 + R / a) * np.exp(a * t) - R / a

    def L(self, z, t):
        return np.full(np.shape(z)[:-1], float(self.value(t)))

    def field(self, model: ManifoldModel, t: float) -> list:
        return [np.full(c.shape, float(self.value(t))) for c in model.charts]

    def check_domain(self, model: ManifoldModel) -> None:
        if isinstance(self.R, CP1Scale):
            self.R.check_domain(model)

    def spot_check(self, seed: int = 0, count: int = 10) -> float:
        rng = np.random.default_rng(seed)
        top = 2.0
        if isinstance(self.R, CP1Scale):
            top = min(top, 0.9 * self.R.collapse_time)
        ts = rng.uniform(0.05 * top, top, size=count)
        rhs = lambda s: self.scalar(s) + self.a * self.value(s)  # noqa: E731
        return float(max(_ode_residual(self.value, rhs, t) for t in ts))


def exact_evaluate(sol: ExactSolution, point, t: float):
    """``L(z, t)`` for field solutions (``point`` a length-n complex vector) or the scalar value."""
    if not sol.spatial:
        return float(sol.value(t))
    z = np.asarray(point, dtype=complex)
    if z.shape[-1] != sol.n:
        raise ValueError(f"point has {z.shape[-1]} complex coordinates, solution has n={sol.n}")
    return sol.L(z, t)


def exact_state(sol: ExactSolution, model: ManifoldModel, t: float) -> FlowState:
    """Flow state holding the exact solution at time ``t``."""
    if isinstance(sol, CP1Scale):
        metric = sol.metric(model, t)
        return FlowState(t, metric, [np.zeros(c.shape) for c in model.charts], sol.a, model)
    sol.check_domain(model)
    if isinstance(sol, ConstantODE) and isinstance(sol.R, CP1Scale):
        metric = sol.R.metric(model, t)
    else:
        metric = build_metric(model, t)
    return FlowState(t, metric, sol.field(model, t), sol.a, model)


def exact_boundary(sol: ExactSolution, model: ManifoldModel):
    """``boundary(t)`` callable for ``FlowConfig``: exact values on non-owned points."""
    sol.check_domain(model)
    return lambda t: {"L": sol.field(model, t)}


def oracle_compare(traj: Trajectory, sol: ExactSolution, t_min: float = 0.0) -> list:
    """Relative and absolute L∞ errors against the oracle at each recorded ``t >= t_min``.

    Field solutions compare ``L`` over owned points; ``CP1Scale`` compares the
    metric ``g`` against ``c(t) g_FS``.
    """
    model = traj.snapshots[0].model
    sol.check_domain(model)
    rows = []
    for st in traj.snapshots:
        if st.t < t_min:
            continue
        if isinstance(sol, CP1Scale):
            num = st.metric.values
            ex = sol.metric(model, st.t).values
        else:
            num = st.L
            ex = sol.field(model, st.t)
        err = max(c.mask_max(a - b, c.owned) for c, a, b in zip(model.charts, num, ex))
        ref = max(c.mask_max(b, c.owned) for c, b in zip(model.charts, ex))
        rows.append({"t": float(st.t), "abs_error": err, "rel_error": err / ref if ref > 0 else err})
    return rows


# -- lemma assemblers --------------------------------------------------------------

def _outer(x, y):
    return x[..., :, None] * y[..., None, :]


def _pack_of(state: FlowState) -> CurvaturePack:
    """Curvature of the state's metric, cached on the metric object."""
    cache = state.metric.__dict__
    key = ("_pack", id(state.model.charts))
    pack = cache.get(key)
    if pack is None:
        pack = curvature_pack(state.metric, state.model)
        cache[key] = pack
    return pack


def _ricci_action(calc: KahlerCalculus, Ric, H):
    """``½(R_{lj̄}H_{il̄} + R_{il̄}H_{lj̄})``."""
    return 0.5 * (calc.mm(H, Ric) + calc.mm(Ric, H))


def _rhs_hessian_nonlinear(calc: KahlerCalculus, R, Ric, L, F1, F2):
    """Right side for the Hessian of ``L`` with ``L_t = ΔL + |∇L|² + F(L)``.

    Expanded form: curvature action, the four gradient/Hessian products, the
    Ricci terms and ``F'(L)∇∇̄L + F''(L)∇L∇̄L``.
    """
    H = calc.hess_mixed(L)
    dL = calc.grad(L)
    dLb = np.conj(dL)
    Ginv = calc.Ginv
    out = calc.tensor_lap(H, "ub") + calc.riem_dot(R, H)
    out = out + calc.riem_dot(R, _outer(dL, dLb))
    Db, _ = calc.cov(H, "ub", bar=True)    # ∇_l̄ H_{ij̄} as [l, i, j]
    Du, _ = calc.cov(H, "ub", bar=False)   # ∇_k H_{ij̄} as [k, i, j]
    out = out + np.einsum("...kl,...k,...lij->...ij", Ginv, dL, Db)
    out = out + np.einsum("...kl,...l,...kij->...ij", Ginv, dLb, Du)
    out = out + calc.mm(H, H)
    S = calc.hess_pure(L, dL)
    out = out + np.einsum("...ik,...kl,...jl->...ij", S, Ginv, np.conj(S))
    out = out - _ricci_action(calc, Ric, H)
    F1 = np.asarray(F1)[..., None, None] if np.ndim(F1) else F1
    F2 = np.asarray(F2)[..., None, None] if np.ndim(F2) else F2
    return out + F1 * H + F2 * _outer(dL, dLb)


def _rhs_ricci(calc: KahlerCalculus, R, Ric):
    return calc.tensor_lap(Ric, "ub") + calc.riem_dot(R, Ric) - calc.mm(Ric, Ric)


def _rhs_l31(calc: KahlerCalculus, R, Ric, A, B):
    """Generic form: the B-part enters only through ``∇_i∇_j̄B`` on the grid."""
    H = calc.hess_mixed(A)
    out = calc.tensor_lap(H, "ub") + calc.riem_dot(R, H)
    out = out - 0.5 * (np.einsum("...lj,...pl,...ip->...ij", Ric, calc.Ginv, H)
                       + np.einsum("...il,...lp,...pj->...ij", Ric, calc.Ginv, H))
    if B is not None:
        out = out + calc.hess_mixed(B)
    return out


def _constrained_pieces(calc: KahlerCalculus, L, Lv):
    diff = Lv - L
    h = np.exp(diff)
    q = 1.0 - h * h
    dh = h[..., None] * calc.grad(diff)
    return h, q, dh


def _rhs_l41(calc: KahlerCalculus, Ric, L, Lv, a):
    h, q, dh = _constrained_pieces(calc, L, Lv)
    dhb = np.conj(dh)
    Ginv = calc.Ginv
    qq = q[..., None, None]
    hq = (2.0 * h / q)[..., None, None]
    T = _outer(dh, dhb) / qq
    dL = calc.grad(L)
    out = calc.tensor_lap(T, "ub")
    Db, _ = calc.cov(T, "ub", bar=True)
    Du, _ = calc.cov(T, "ub", bar=False)
    out = out + np.einsum("...kl,...k,...lij->...ij", Ginv, dL, Db)
    out = out + np.einsum("...kl,...l,...kij->...ij", Ginv, np.conj(dL), Du)
    # h is computed as a field so its Hessians use the same stencils as T
    U = calc.hess_pure(h) + hq * _outer(dh, dh)               # [i, k]
    V = calc.hess_mixed(h) + hq * _outer(dh, dhb)             # [i, k̄]
    out = out - np.einsum("...ik,...kl,...jl->...ij", U, Ginv, np.conj(U)) / qq
    out = out - calc.mm(V, V) / qq
    SL = calc.hess_pure(L, dL)
    HL = calc.hess_mixed(L)
    out = out + np.einsum("...ik,...kl,...l,...j->...ij", SL, Ginv, dhb, dhb) / qq
    out = out + calc.mm(HL, T) + calc.mm(T, HL)
    out = out + np.einsum("...i,...k,...kl,...jl->...ij", dh, dh, Ginv, np.conj(SL)) / qq
    out = out - _ricci_action(calc, Ric, T)
    grad_h2 = np.einsum("...kl,...k,...l->...", Ginv, dh, dhb).real
    out = out - 2.0 * T * (grad_h2 / q)[..., None, None]
    out = out + 2.0 * a * T * (1.0 + np.log(h) / q)[..., None, None]
    return out


def _rhs_h(calc: KahlerCalculus, L, Lv, a):
    h, _, dh = _constrained_pieces(calc, L, Lv)
    dL = calc.grad(L)
    adv = 2.0 * np.einsum("...kl,...k,...l->...", calc.Ginv, dL, np.conj(dh)).real
    return calc.lap(h) + adv + a * h * np.log(h)


def _rhs_l51(calc, R, Ric, L, B):
    H = calc.hessian(L)
    dL = calc.grad(L, 0)
    Gi = calc.Ginv
    out = calc.tensor_lap(H, 2)
    out = out + 2.0 * np.einsum("...kijl,...kp,...lq,...pq->...ij", R, Gi, Gi, H)
    out = out - np.einsum("...il,...lq,...jq->...ij", Ric, Gi, H)
    out = out - np.einsum("...jl,...lq,...iq->...ij", Ric, Gi, H)
    D = calc.cov(Ric, 2)  # ∇_l R_{ij} as [l, i, j]
    combo = np.einsum("...ijl->...lij", D) + np.einsum("...jil->...lij", D) - D
    out = out - np.einsum("...lij,...lq,...q->...ij", combo, Gi, dL)
    return out + calc.hessian(B)


def _flow_of(traj: Trajectory) -> str:
    if traj.config is None:
        raise LemmaError("trajectory carries no flow configuration")
    return traj.config.flow


def _reaction_of(traj: Trajectory, state: FlowState) -> Reaction:
    return traj.config.reaction or Reaction.linear(state.a)


def _check(traj: Trajectory, lemma: LemmaId, at: int):
    flows, needs_v = lemma.requires
    flow = _flow_of(traj)
    if flow not in flows:
        raise LemmaError(f"{lemma.value} needs a {' or '.join(flows)} trajectory, got {flow}")
    if needs_v and traj.snapshots[0].Lv is None:
        raise LemmaError(f"{lemma.value} needs the L_v field")
    if not 0 < at < len(traj) - 1:
        raise LemmaError(f"time index {at} is not interior to {len(traj)} snapshots")


def _subject(lemma: LemmaId, state: FlowState, part: str, A):
    calcs = state.metric.calculi(state.model)
    if lemma in (LemmaId.L31,):
        fields = A(state) if A is not None else state.L
        return [calc.hess_mixed(x) for calc, x in zip(calcs, fields)]
    if lemma in (LemmaId.L32, LemmaId.L35):
        return [calc.hess_mixed(x) for calc, x in zip(calcs, state.L)]
    if lemma is LemmaId.L33:
        return _pack_of(state).ricci
    if lemma is LemmaId.L41:
        out = []
        for calc, L, Lv in zip(calcs, state.L, state.Lv):
            h, q, dh = _constrained_pieces(calc, L, Lv)
            out.append(h if part == "h" else _outer(dh, np.conj(dh)) / q[..., None, None])
        return out
    if lemma is LemmaId.L51:
        return [calc.hessian(x) for calc, x in zip(calcs, state.L)]
    raise LemmaError(f"{lemma.value} is not a residual identity")


def lemma_rhs(traj: Trajectory, lemma, state: FlowState, part: str = "full", A=None, B=None) -> list:
    """Right-hand side of ``lemma`` at ``state``, one array per chart.

    ``A``/``B`` (L31 only) are callables ``state -> list of arrays``; by default
    ``A = L`` and ``B`` is the trajectory's own nonlinearity
    (``|∇L|² + F(L)``, plus ``R`` on the coupled flow), which turns the generic
    identity into the ``L`` Hessian evolution.
    """
    lemma = LemmaId(lemma)
    model = state.model
    pack = _pack_of(state)
    calcs = pack.calcs
    flow = _flow_of(traj)
    out = []
    if lemma is LemmaId.L31:
        As = A(state) if A is not None else state.L
        if B is not None:
            Bs = B(state)
        elif A is not None:
            raise LemmaError("L31 with a custom A needs its B")
        else:
            F = _reaction_of(traj, state)
            Bs = []
            for c, calc in enumerate(calcs):
                b = calc.norm2_grad(state.L[c])
                b = b + (state.a * state.L[c] + pack.scalar[c] if flow == "coupled_krf" else F(state.L[c]))
                Bs.append(b)
        for c, calc in enumerate(calcs):
            out.append(_rhs_l31(calc, pack.riemann[c], pack.ricci[c], As[c],
                                None if Bs is None else Bs[c]))
        return out
    if lemma is LemmaId.L32:
        F = _reaction_of(traj, state)
        for c, calc in enumerate(calcs):
            L = state.L[c]
            out.append(_rhs_hessian_nonlinear(calc, pack.riemann[c], pack.ricci[c], L, F.d1(L), F.d2(L)))
        return out
    if lemma is LemmaId.L33:
        return [_rhs_ricci(calc, pack.riemann[c], pack.ricci[c]) for c, calc in enumerate(calcs)]
    if lemma is LemmaId.L35:
        for c, calc in enumerate(calcs):
            R, Ric = pack.riemann[c], pack.ricci[c]
            out.append(_rhs_hessian_nonlinear(calc, R, Ric, state.L[c], state.a, 0.0)
                       + _rhs_ricci(calc, R, Ric))
        return out
    if lemma is LemmaId.L41:
        if flow == "fixed_kahler" and _reaction_of(traj, state).kind != "linear":
            raise LemmaError("the constrained identity needs the linear reaction aL")
        for c, calc in enumerate(calcs):
            if part == "h":
                out.append(_rhs_h(calc, state.L[c], state.Lv[c], state.a))
            else:
                out.append(_rhs_l41(calc, pack.ricci[c], state.L[c], state.Lv[c], state.a))
        return out
    if lemma is LemmaId.L51:
        F = _reaction_of(traj, state)
        for c, calc in enumerate(calcs):
            B = calc.norm2_grad(state.L[c]) + F(state.L[c])
            out.append(_rhs_l51(calc, pack.riemann[c], pack.ricci[c], state.L[c], B))
        return out
    raise LemmaError(f"{lemma.value} is checked as an inequality or monitor, not a residual "
                     f"(use lyh_rescaled_check / reparam_harnack_check)")


@dataclass
class ResidualRow:
    """One lemma residual at one snapshot."""

    lemma: str
    t: float
    index: int
    residual: float
    lhs_norm: float
    rhs_norm: float
    resolution: int | None = None
    part: str = "full"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _centered(times, i, fm, f0, fp):
    """Second-order derivative at ``times[i]`` on a possibly non-uniform triple."""
    hm = times[i] - times[i - 1]
    hp = times[i + 1] - times[i]
    wm = -hp / (hm * (hm + hp))
    w0 = (hp - hm) / (hm * hp)
    wp = hm / (hp * (hm + hp))
    return [wm * a + w0 * b + wp * c for a, b, c in zip(fm, f0, fp)]


def lemma_residual(traj: Trajectory, lemma, at: int, part: str = "full", A=None, B=None) -> ResidualRow:
    """Normalized residual ``max|LHS - RHS| / (max|RHS| + 1)`` at snapshot ``at``.

    Parameters
    ----------
    traj : Trajectory
        Needs at least three snapshots; ``at`` must be interior.
    lemma : LemmaId or str
        ``L31``, ``L32``, ``L33``, ``L35``, ``L41`` or ``L51``.
    part : str
        For ``L41``, ``"h"`` checks the scalar equation
        ``h_t = Δh + ∇_kL∇_k̄h + ∇_k̄L∇_kh + a h ln h`` instead of the full tensor identity.
    A, B : callable, optional
        Custom data for ``L31``.

    Raises
    ------
    LemmaError
        Wrong flow, missing field or boundary time index.
    """
    lemma = LemmaId(lemma)
    _check(traj, lemma, at)
    if part not in ("full", "h") or (part == "h" and lemma is not LemmaId.L41):
        raise LemmaError(f"unknown part {part!r} for {lemma.value}")
    s_prev, s_mid, s_next = traj.snapshots[at - 1], traj.snapshots[at], traj.snapshots[at + 1]
    times = traj.times
    lhs = _centered(times, at, _subject(lemma, s_prev, part, A), _subject(lemma, s_mid, part, A),
                    _subject(lemma, s_next, part, A))
    rhs = lemma_rhs(traj, lemma, s_mid, part, A, B)
    model = s_mid.model
    err = max(c.mask_max(l - r, c.owned) for c, l, r in zip(model.charts, lhs, rhs))
    rn = max(c.mask_max(r, c.owned) for c, r in zip(model.charts, rhs))
    ln = max(c.mask_max(l, c.owned) for c, l in zip(model.charts, lhs))
    return ResidualRow(lemma.value, float(times[at]), at, err / (rn + 1.0), ln, rn,
                       max(model.grid), part)


# -- Ricci Harnack inequality on the rescaled flow ---------------------------------------

@dataclass
class LYHReport:
    """Minimum g-relative eigenvalue of the Ricci Harnack expression."""

    minimum: float
    argmin: tuple
    rows: list
    samples: int

    def passed(self, tol: float) -> bool:
        return bool(self.minimum >= -tol)


def holomorphic_fields(model: ManifoldModel, count: int, seed: int = 0, scale: float = 1.0) -> list:
    """Sample global holomorphic vector fields, one list of chart arrays per sample.

    On CP¹ these are ``(α + βz + γz²)∂_z``, which read ``-(αw² + βw + γ)∂_w``
    in the second chart.  On flat tori they are constant vectors.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        if model.kind == "fubini_study_cp1":
            al, be, ga = scale * (rng.normal(size=3) + 1j * rng.normal(size=3)) / 2
            arrs = []
            for c in model.charts:
                z = c.coords[0] + 1j * c.coords[1]
                if c.name == "A":
                    X = al + be * z + ga * z * z
                else:
                    X = -(al * z * z + be * z + ga)
                arrs.append(X[..., None])
            out.append(arrs)
        elif model.kind == "flat_torus_c":
            v = scale * (rng.normal(size=model.dim) + 1j * rng.normal(size=model.dim))
            out.append([np.broadcast_to(v, c.shape + (model.dim,)).copy() for c in model.charts])
        else:
            raise ValueError(f"no holomorphic vector fields sampled for {model.kind}")
    return out


def _lyh_expression(state: FlowState, pack: CurvaturePack, dRic, X, c: int):
    calc = pack.calcs[c]
    Ric = pack.ricci[c]
    a, t = state.a, state.t
    coef = a * math.exp(-a * t) / -math.expm1(-a * t) if a != 0 else 1.0 / t
    M = dRic[c] + calc.mm(Ric, Ric) + coef * Ric
    if X is not None:
        Xc = X[c]
        Du, _ = calc.cov(Ric, "ub", bar=False)
        Db, _ = calc.cov(Ric, "ub", bar=True)
        M = M + np.einsum("...kij,...k->...ij", Du, Xc) + np.einsum("...kij,...k->...ij", Db, np.conj(Xc))
        M = M + np.einsum("...ijkl,...k,...l->...ij", pack.riemann[c], Xc, np.conj(Xc))
    return 0.5 * (M + np.conj(np.swapaxes(M, -1, -2)))


def lyh_rescaled_check(traj: Trajectory, X=None, samples: int = 0, seed: int = 0,
                       t_min: float = 0.0, curvature_tol: float = 1e-6) -> LYHReport:
    """Minimum over owned points, interior snapshots and vector fields of the Ricci Harnack expression.

    ``∂_tR_{ij̄}`` is the centered snapshot difference.  ``X`` is ``None``
    (zero field), a list of chart arrays, or a list of such lists; with
    ``samples > 0`` that many random holomorphic fields are added.

    Raises
    ------
    LemmaError
        Not a coupled trajectory, or the initial metric has negative
        bisectional curvature.
    """
    if _flow_of(traj) != "coupled_krf":
        raise LemmaError("the Ricci Harnack check needs a coupled Kähler-Ricci trajectory")
    if len(traj) < 3:
        raise LemmaError("need at least three snapshots")
    model = traj.snapshots[0].model
    first = _pack_of(traj.snapshots[0])
    if curvature_positivity(first) < -curvature_tol:
        raise LemmaError("model has negative bisectional curvature")
    fields = [None]
    if X is not None:
        fields += X if isinstance(X[0], list) else [X]
    if samples:
        fields += holomorphic_fields(model, samples, seed)
    times = traj.times
    best, arg, rows = np.inf, None, []
    for i in range(1, len(traj) - 1):
        st = traj.snapshots[i]
        if st.t <= t_min or st.t <= 0:
            continue
        pm, p0, pp = (_pack_of(traj.snapshots[j]) for j in (i - 1, i, i + 1))
        dRic = _centered(times, i, pm.ricci, p0.ricci, pp.ricci)
        row_min = np.inf
        for k, Xf in enumerate(fields):
            for c, chart in enumerate(model.charts):
                M = _lyh_expression(st, p0, dRic, Xf, c)
                ev = pencil_eigenvalues(M, st.metric.values[c])[..., 0]
                ev = np.where(chart.owned, ev, np.inf)
                j = int(np.argmin(ev))
                v = float(ev.flat[j])
                row_min = min(row_min, v)
                if v < best:
                    best = v
                    arg = (float(st.t), k, c) + tuple(int(q) for q in np.unravel_index(j, ev.shape))
        rows.append({"t": float(st.t), "min": row_min})
    return LYHReport(float(best), arg, rows, len(fields))


# -- reparametrization ---------------------------------------------------------------

def reparam(a: float, t):
    """``s = (1 - e^{-at})/a``; strictly increasing, ``s ∈ (0, 1/a)`` for ``a > 0``."""
    if a == 0:
        raise ValueError("a = 0: the reparametrization is the identity map")
    t = np.asarray(t, dtype=float)
    return -np.expm1(-a * t) / a


def reparam_inverse(a: float, s):
    """``t = -ln(1 - as)/a``."""
    if a == 0:
        raise ValueError("a = 0: the reparametrization is the identity map")
    s = np.asarray(s, dtype=float)
    if np.any(a * s >= 1):
        raise ValueError("s must satisfy a s < 1")
    return -np.log1p(-a * s) / a


def _unrescaled(traj: Trajectory):
    if _flow_of(traj) != "coupled_krf" or traj.snapshots[0].a != 0:
        raise LemmaError("expected a Kähler-Ricci flow trajectory with a = 0")


def reparam_metric(ghat: Trajectory, a: float, times) -> Trajectory:
    """Map an unrescaled KRF trajectory ``ĝ(s)`` to ``g(t) = e^{at} ĝ(s(t))``.

    Between snapshots ĝ is interpolated with cubic Hermite splines in ``s``
    whose slopes are ``∂_sĝ = -R̂ic`` from each snapshot's curvature, matching
    the stepper: zero slope where it freezes the metric, and CP¹ fringe points
    refilled from the other chart after interpolation.  ``L`` is carried
    along with a cubic spline.  Every requested ``t`` must map inside
    the recorded ``s`` range.
    """
    _unrescaled(ghat)
    s_rec = ghat.times
    times = np.asarray(sorted(times), dtype=float)
    s_req = reparam(a, times)
    if s_req.min() < s_rec[0] - 1e-12 or s_req.max() > s_rec[-1] + 1e-12:
        raise ValueError("requested times fall outside the recorded s range")
    model = ghat.snapshots[0].model
    packs = [_pack_of(st) for st in ghat.snapshots]
    snaps = []
    nc = len(model.charts)
    G_interp, L_interp = [], []
    for c in range(nc):
        Y = np.stack([st.metric.values[c] for st in ghat.snapshots])
        dY = np.stack([-p.ricci[c] for p in packs])
        if model.kind == "fubini_study_cp1":
            dY[:, ~model.evolution_mask(c)] = 0  # the flow freezes these; the fringe is restitched
        G_interp.append(CubicHermiteSpline(s_rec, Y, dY, axis=0))
        Ls = np.stack([st.L[c] for st in ghat.snapshots])
        L_interp.append(CubicSpline(s_rec, Ls, axis=0) if len(s_rec) > 2 else None)
    for t, s in zip(times, s_req):
        scale = math.exp(a * t)
        G = [scale * x for x in model.stitch([G_interp[c](s) for c in range(nc)], kind="metric")]
        G = [0.5 * (x + np.conj(np.swapaxes(x, -1, -2))) for x in G]
        L = [L_interp[c](s) if L_interp[c] is not None else ghat.snapshots[0].L[c] for c in range(nc)]
        snaps.append(FlowState(float(t), MetricField(G, True, float(t)), L, a, model))
    cfg = FlowConfig(T=float(times[-1]), flow="coupled_krf", t0=float(times[0]))
    return Trajectory(snaps, np.array([]), np.array([]), np.array([]), {}, 0, cfg)


def rescaled_flow_residual(traj: Trajectory, a: float | None = None) -> dict:
    """Residual of ``∂_tg = -Ric + ag`` on interior snapshots, normalized by ``max|rhs| + 1``."""
    model = traj.snapshots[0].model
    a = traj.snapshots[0].a if a is None else a
    times = traj.times
    worst = 0.0
    for i in range(1, len(traj) - 1):
        Gs = [traj.snapshots[j].metric.values for j in (i - 1, i, i + 1)]
        lhs = _centered(times, i, *Gs)
        p = _pack_of(traj.snapshots[i])
        rhs = [-p.ricci[c] + a * Gs[1][c] for c in range(len(model.charts))]
        err = max(ch.mask_max(l - r, ch.owned) for ch, l, r in zip(model.charts, lhs, rhs))
        rn = max(ch.mask_max(r, ch.owned) for ch, r in zip(model.charts, rhs))
        worst = max(worst, err / (rn + 1.0))
    return {"residual": worst, "snapshots": len(traj)}


def reparam_coefficient(a: float, s, naive: bool = False):
    """Coefficient of ĝ on the unrescaled side.

    The exact pullback of the rescaled-flow rate ``a/(1 - e^{-at})`` is
    ``1/s + a/(1 - as)``.  ``naive=True`` returns the ``1/s - a`` form,
    which is reported for comparison but is not equivalent.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("s must be positive")
    if naive:
        return 1.0 / s - a
    return 1.0 / s + a / (1.0 - a * s)


def reparam_harnack_check(ghat: Trajectory, a: float, naive: bool = False) -> dict:
    """Compare the ĝ-side monitor with the rescaled-flow monitor after transformation.

    For each snapshot with ``0 < s < 1/a``: ``P̂ = ∇∇̄L + R̂ic(ĝ) + c(s)ĝ`` and
    ``P = ∇∇̄L + Ric(g) + a/(1-e^{-at}) g`` with ``g = e^{at}ĝ`` and both Ricci
    tensors computed independently.  Reports the max of
    ``|P - P̂| / (1 + |P|)`` and of the eigenvalue mismatch
    ``|λ(P, g) e^{at} - λ(P̂, ĝ)|``.
    """
    _unrescaled(ghat)
    if a == 0:
        raise ValueError("a = 0: both sides coincide")
    model = ghat.snapshots[0].model
    rate = RateFunction("kahler_exp", a)
    worst_P, worst_eig, used = 0.0, 0.0, 0
    for st in ghat.snapshots:
        s = st.t
        if not 0 < s < (1.0 / a if a > 0 else np.inf):
            continue
        t = float(reparam_inverse(a, s))
        scale = math.exp(a * t)
        ghat_state = FlowState(s, st.metric, st.L, 0.0, model)
        g_metric = MetricField([scale * G for G in st.metric.values], True, t)
        g_state = FlowState(t, g_metric, st.L, a, model)
        P = harnack_matrix(g_state, "kahler_flow", rate)
        hat_pack = curvature_pack(st.metric, model)
        coef = float(reparam_coefficient(a, s, naive))
        for c, chart in enumerate(model.charts):
            calc = hat_pack.calcs[c]
            Ph = calc.hess_mixed(ghat_state.L[c]) + hat_pack.ricci[c] + coef * st.metric.values[c]
            Pg = P.P[c]
            err = chart.mask_max(Pg - Ph, chart.owned) / (1.0 + chart.mask_max(Pg, chart.owned))
            worst_P = max(worst_P, err)
            eh = pencil_eigenvalues(Ph, st.metric.values[c])
            eg = pencil_eigenvalues(Pg, g_metric.values[c]) * scale
            worst_eig = max(worst_eig, chart.mask_max(eg - eh, chart.owned) / (1.0 + chart.mask_max(eh, chart.owned)))
        used += 1
    if not used:
        raise ValueError("no snapshot with 0 < s < 1/a")
    return {"naive": naive, "tensor_mismatch": worst_P, "eigen_mismatch": worst_eig,
            "snapshots": used, "passed": bool(max(worst_P, worst_eig) <= 1e-8)}


# -- convergence studies -------------------------------------------------------------------

@dataclass
class ResidualReport:
    """Residuals across doubling resolutions with the fitted order.

    ``order`` is the least-squares slope of ``-log₂ residual`` against
    ``log₂ resolution``; ``"exact"`` when every residual is below the floor
    and ``"spectral"`` for spectral paths.
    """

    lemma: str
    resolutions: list
    residuals: list
    orders: list
    order: float | str
    passed: bool
    kind: str = "fd"
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"lemma": self.lemma, "kind": self.kind, "resolutions": list(self.resolutions),
                "residuals": [float(r) for r in self.residuals],
                "orders": [float(o) for o in self.orders], "order": self.order, "passed": self.passed}

    def csv_rows(self) -> list:
        return [{"lemma": self.lemma, "resolution": n, "residual": float(r),
                 "order": (float(self.orders[i - 1]) if i else "")}
                for i, (n, r) in enumerate(zip(self.resolutions, self.residuals))]


def convergence_study(fn, resolutions, label: str = "", kind: str = "fd", min_order: float = 1.8,
                      floor: float = 1e-11, spectral_tol: float = 1e-8, jobs: int = 1) -> ResidualReport:
    """Run ``fn(resolution) -> residual`` over doubling resolutions and fit the order.

    ``fn`` may also return a ``ResidualRow`` (its ``residual`` is used).  FD
    studies pass when the fitted order is at least ``min_order`` (or every
    residual is below ``floor``).  Spectral studies pass when the coarsest
    residual is below ``spectral_tol``.  With ``jobs > 1`` resolutions run in
    a thread pool; results are always reported in resolution order.

    Raises
    ------
    ValueError
        Fewer than three resolutions, or a resolution that is not double its predecessor.
    """
    res = [int(r) for r in resolutions]
    if len(res) < 3:
        raise ValueError("a convergence study needs at least three resolutions")
    if any(b != 2 * a for a, b in zip(res, res[1:])):
        raise ValueError(f"resolutions must double: {res}")
    if kind not in ("fd", "spectral"):
        raise ValueError(f"unknown study kind {kind!r}")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(fn, res))
    else:
        results = [fn(r) for r in res]
    rows = [r for r in results if isinstance(r, ResidualRow)]
    vals = [float(r.residual) if isinstance(r, ResidualRow) else float(r) for r in results]
    tiny = 1e-300
    orders = [math.log2(max(a, tiny) / max(b, tiny)) for a, b in zip(vals, vals[1:])]
    if kind == "spectral":
        return ResidualReport(label, res, vals, orders, "spectral", bool(vals[0] < spectral_tol), kind, rows)
    if all(v < floor for v in vals):
        return ResidualReport(label, res, vals, orders, "exact", True, kind, rows)
    slope = np.polyfit(np.log2(res), np.log2(np.maximum(vals, tiny)), 1)[0]
    order = float(-slope)
    return ResidualReport(label, res, vals, orders, order, bool(order >= min_order), kind, rows)


# -- tolerance calibration ---------------------------------------------------------------

def _equality_noise(sol: LogQuadratic, grid: int, cfl: float, T: float, half_width: float) -> tuple:
    model = ManifoldModel.flat_patch(n=sol.n, grid=grid, half_width=half_width)
    st = exact_state(sol, model, sol.t0)
    cfg = FlowConfig(T=T, flow="fixed_kahler", t0=sol.t0, cfl=cfl, record_stride=(T - sol.t0) / 8,
                     boundary=exact_boundary(sol, model))
    traj = integrate(st, cfg)
    rate = sol.rate()
    noise = max(abs(harnack_matrix(s, "kahler_fixed", rate).global_min) for s in traj.snapshots[1:])
    return noise, model.h, float(traj.step_dt.max())


def calibrate_tolerance(a: float = 1.0, t0: float = 0.2, T: float = 1.0, grids=(16, 32),
                        cfls=(0.2, 0.1), floor: float = 1e-9, half_width: float = 1.0,
                        factor: float = 3.0) -> tuple:
    """Fit ``C1 h^4 + C2 (dt/h²)^4`` from log-quadratic equality runs.

    Two runs on the finer grid at CFL factors ``cfls`` give ``C2``; two grids
    at the smaller factor give ``C1``.  Negative fits are clipped at zero (FD4
    is exact on quadratics, so ``C1`` is expected to vanish).  Returns the
    ``TolerancePolicy`` and the measured noise table.
    """
    sol = LogQuadratic(a=a, t0=t0)
    g_lo, g_hi = grids
    c_lo, c_hi = sorted(cfls)
    n_big, h_hi, dt_big = _equality_noise(sol, g_hi, c_hi, T, half_width)
    n_small, _, dt_small = _equality_noise(sol, g_hi, c_lo, T, half_width)
    n_coarse, h_lo, dt_coarse = _equality_noise(sol, g_lo, c_lo, T, half_width)
    nu_big, nu_small, nu_coarse = dt_big / h_hi ** 2, dt_small / h_hi ** 2, dt_coarse / h_lo ** 2
    C2 = max(0.0, (n_big - n_small) / (nu_big ** 4 - nu_small ** 4))
    resid_coarse = n_coarse - C2 * nu_coarse ** 4
    resid_fine = n_small - C2 * nu_small ** 4
    C1 = max(0.0, (resid_coarse - resid_fine) / (h_lo ** 4 - h_hi ** 4))
    table = [{"grid": g_hi, "cfl": c_hi, "dt": dt_big, "noise": n_big},
             {"grid": g_hi, "cfl": c_lo, "dt": dt_small, "noise": n_small},
             {"grid": g_lo, "cfl": c_lo, "dt": dt_coarse, "noise": n_coarse}]
    return TolerancePolicy(C1=C1, C2=C2, p=4.0, floor=floor, factor=factor), table


# -- standard studies ------------------------------------------------------------------

STUDY_SETUPS = {
    # lemma: (model family, default resolutions, snapshot spacing / h, CFL)
    "L31": ("flat_torus_c", (64, 128, 256), 0.05, 0.2),
    "L32": ("flat_torus_c", (64, 128, 256), 0.05, 0.2),
    "L41": ("flat_torus_c", (64, 128, 256), 0.05, 0.2),
    "L33": ("fubini_study_cp1", (32, 64, 128), 0.05, 0.2),
    "L35": ("fubini_study_cp1", (32, 64, 128), 0.05, 0.2),
    "L51": ("round_sphere", (16, 32, 64), 0.02, 0.05),
}


def _sphere_polynomial(chart, rng, amplitude=0.3):
    th, ph = chart.coords
    X, Y, Z = np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)
    basis = [X, Y, Z, X * Y, Y * Z, Z * X, X * X - Y * Y, 3 * Z * Z - 1, X * Y * Z, Y ** 3, Z ** 3]
    coef = rng.normal(size=len(basis))
    f = sum(c * b for c, b in zip(coef, basis))
    return amplitude * f / np.abs(f).max()


def study_trajectory(lemma, resolution: int, seed: int = 0, a: float = 1.0):
    """Short trajectory for a lemma-residual study at one resolution.

    Snapshots are spaced proportionally to the grid spacing (see
    ``STUDY_SETUPS``) so the centered time difference contributes O(h²);
    returns ``(trajectory, interior index)``.

    * L31/L32/L41: flat torus, band-limited random ``L`` (and ``h`` in (0.2, 0.8)).
    * L33/L35: CP¹ with a conformal perturbation (so curvature varies) and a
      random global quadratic ``L``, coupled to the rescaled flow.
    * L51: unit sphere with a random cubic spherical polynomial, CFL 0.05 so
      the polar filter keeps the resolved longitudinal modes on pole rows.
    """
    from .discretization import band_limited_field
    from .geometry import fs_global_function

    lemma = LemmaId(lemma).value
    if lemma not in STUDY_SETUPS:
        raise LemmaError(f"no standard study for {lemma}")
    family, _, ratio, cfl = STUDY_SETUPS[lemma]
    rng = np.random.default_rng(seed)
    Lv = None
    if family == "flat_torus_c":
        model = ManifoldModel.flat_torus_c(n=1, grid=resolution)
        ch = model.charts[0]
        L = [band_limited_field(ch, rng, modes=3, amplitude=0.5)]
        if lemma == "L41":
            h = 0.5 + 0.3 * band_limited_field(ch, rng, modes=3, amplitude=1.0)
            Lv = [L[0] + np.log(h)]
        flow, h_step = "fixed_kahler", model.h
    elif family == "fubini_study_cp1":
        model = ManifoldModel.fubini_study_cp1(c0=1.5, grid=resolution, perturbation=0.2)
        coef = rng.normal(size=8)
        coef = coef / np.abs(coef).sum()
        L = [0.3 * fs_global_function(ch, coef) for ch in model.charts]
        flow, h_step = "coupled_krf", model.h
    else:
        model = ManifoldModel.round_sphere(grid=resolution)
        L = [_sphere_polynomial(model.charts[0], rng)]
        flow, h_step = "riemannian", model.charts[0].axes[0].spacing
    state = FlowState(0.0, build_metric(model), L, a, model, Lv)
    D = ratio * h_step
    traj = integrate(state, FlowConfig(T=2 * D, flow=flow, record_stride=D, cfl=cfl))
    return traj, 1


def lemma_study(lemma, resolutions=None, seed: int = 0, a: float = 1.0, part: str = "full",
                jobs: int = 1, min_order: float = 1.8) -> ResidualReport:
    """Convergence study of one lemma over doubling resolutions with the standard setup."""
    lemma = LemmaId(lemma)
    res = resolutions or STUDY_SETUPS[lemma.value][1]

    def one(n):
        traj, i = study_trajectory(lemma, n, seed, a)
        return lemma_residual(traj, lemma, i, part=part)

    label = lemma.value if part == "full" else f"{lemma.value}:{part}"
    return convergence_study(one, res, label=label, jobs=jobs, min_order=min_order)


def l31_l32_agreement(resolution: int, seed: int = 0, a: float = 1.0) -> tuple:
    """Compare the general-A identity (with B = 0) against the ln u identity on one trajectory.

    Returns ``(|residual_L31 - residual_L32|, max|RHS_L31 - RHS_L32|)`` at the
    shared interior snapshot.  The second number carries round-off from the
    fourth-derivative term, which grows like N³ on spectral grids.
    """
    traj, i = study_trajectory("L32", resolution, seed, a)
    d = abs(lemma_residual(traj, "L31", i).residual - lemma_residual(traj, "L32", i).residual)
    r31, r32 = lemma_rhs(traj, "L31", traj[i]), lemma_rhs(traj, "L32", traj[i])
    d_rhs = max(ch.mask_max(x - y, ch.owned) for ch, x, y in zip(traj[i].model.charts, r31, r32))
    return d, d_rhs


def l33_soliton_residual(grid: int = 256, a: float = 1.0, spacing: float = 5e-4) -> ResidualRow:
    """L33 on the CP¹ soliton ``c₀ = 2/a`` (the metric is static, both sides vanish).

    The residual is dominated by round-off in the centered difference
    (``∝ 1/spacing``) and by the slowly growing chart-stitching mismatch, so a
    fine grid and a short window are used.
    """
    model = ManifoldModel.fubini_study_cp1(c0=2.0 / a, grid=grid)
    from .flow import constant_state

    traj = integrate(constant_state(model, 0.0, a),
                     FlowConfig(T=2 * spacing, flow="coupled_krf", record_stride=spacing))
    return lemma_residual(traj, LemmaId.L33, 1)


def reparam_study(ghat: Trajectory, a: float, levels: int = 3) -> ResidualReport:
    """Rescaled-flow residual of ``reparam_metric`` output under joint refinement.

    Level ``j`` keeps every ``2^(levels-1-j)``-th recorded ĝ snapshot and
    samples ``t`` with the same spacing.  The centered time difference
    contributes O(Δ²) and the derivative of the Hermite interpolant O(Δs³),
    so the fitted order is about 2.  Refining ``t`` alone would stall at the
    interpolation floor of the fixed snapshot spacing.
    """
    coarsest = 2 ** (levels - 1)
    n = len(ghat) - 1
    if n % coarsest:
        raise ValueError(f"{n} recorded intervals are not divisible by {coarsest}")
    stride = float(np.mean(np.diff(ghat.times)))
    s0, s1 = ghat.times[0], ghat.times[-1]
    if a * s1 >= 1:
        raise ValueError("recorded s range reaches the singular time s = 1/a")
    t_lo, t_hi = float(reparam_inverse(a, s0)), float(reparam_inverse(a, s1))

    def one(k):
        m = coarsest * counts[0] // k
        sub = Trajectory(ghat.snapshots[::m], ghat.step_t, ghat.step_dt, ghat.step_drift, {}, 0, ghat.config)
        dt = m * stride
        ts = t_lo + dt * np.arange(int((t_hi - t_lo) / dt) + 1)
        return rescaled_flow_residual(reparam_metric(sub, a, ts), a)["residual"]

    counts = [int(round(1 / (stride * coarsest))) * 2 ** j for j in range(levels)]
    return convergence_study(one, counts, label="reparam")


# -- audit studies ---------------------------------------------------------------------

def audit_study(model: ManifoldModel, resolutions, threshold: float = 1e-6, floor: float = 1e-11,
                min_order: float = 2.0) -> dict:
    """Curvature audits of ``model`` at each resolution plus per-identity orders.

    Orders are log₂ ratios between consecutive resolutions of every stored
    and raw residual; identities below ``floor`` at every resolution are
    reported as ``"exact"``.  Passes when every audit passes its threshold and
    every non-exact identity improves at ``min_order`` or better.
    """
    from .geometry import curvature_audit

    res = [int(r) for r in resolutions]
    reports = []
    for n in res:
        m = model.with_grid(n)
        reports.append(curvature_audit(curvature_pack(build_metric(m), m), threshold))
    orders = {}
    ok = all(r.passed for r in reports)
    keys = [("residual", k) for k in reports[0].residuals] + [("raw", k) for k in reports[0].raw]
    for src, k in keys:
        vals = [getattr(r, "residuals" if src == "residual" else "raw")[k] for r in reports]
        name = k if src == "residual" else f"raw_{k}"
        if all(v < floor for v in vals):
            orders[name] = "exact"
            continue
        o = [math.log2(max(v0, 1e-300) / max(v1, 1e-300)) / math.log2(n1 / n0)
             for v0, v1, n0, n1 in zip(vals, vals[1:], res, res[1:])]
        orders[name] = o
        ok = ok and len(o) > 0 and min(o) >= min_order
    return {"model": model.kind, "resolutions": res, "reports": [r.to_dict() for r in reports],
            "orders": orders, "passed": bool(ok)}


def commutation_study(model: ManifoldModel, resolutions, seed: int = 0, modes: int = 2,
                      min_order: float = 2.0) -> ResidualReport:
    """Commutator residual of a random smooth (1,0)-form under refinement.

    The same seed gives the same band-limited form at every resolution.
    Spectral models are judged by the coarsest residual instead of an order.
    """
    from .discretization import band_limited_field, commutation_residual

    if not model.is_kahler:
        raise ValueError("the commutation study needs a Kähler model")

    def one(n):
        m = model.with_grid(n)
        pack = curvature_pack(build_metric(m), m)
        rng = np.random.default_rng(seed)
        out = 0.0
        for c, ch in enumerate(m.charts):
            comps = (m.dim,)
            v = (band_limited_field(ch, rng, modes=modes, comps=comps)
                 + 1j * band_limited_field(ch, rng, modes=modes, comps=comps))
            mask = ch.owned if m.kind == "fubini_study_cp1" else None
            out = max(out, commutation_residual(v, pack.calcs[c], pack.riemann[c], mask))
        return out

    kind = "spectral" if model.spectral else "fd"
    return convergence_study(one, resolutions, label="commutation", kind=kind, min_order=min_order)
