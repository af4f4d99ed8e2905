"""Model manifolds, metrics and curvature on chart grids.

Kähler curvature uses ``R_{ij̄kl̄} = -g_{pj̄} ∂_l̄ Γ^p_{ik}`` with
``Γ^k_{ij} = g^{kl̄} ∂_j g_{il̄}``, so that ``Ric(g_FS) = 2 g_FS`` and
``∇_k∇_j̄ v_i = ∇_j̄∇_k v_i - R_{kj̄il̄} v_l``.  Riemannian curvature follows
``R_{ijkl} = g_{lm} R^m_{ijk}``, which gives ``K (g_{jk}g_{il} - g_{ik}g_{jl})``
on a space of constant curvature ``K``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import sparse

from .discretization import (
    Chart,
    KahlerCalculus,
    OpenAxis,
    PeriodicAxis,
    PolarAxis,
    RiemannCalculus,
    band_limited_field,
    ddbar,
    inverse,
    symmetrize_kahler,
    symmetrize_riemann,
)

__all__ = [
    "ManifoldModel",
    "MetricField",
    "CurvaturePack",
    "AuditReport",
    "ModelError",
    "CurvatureError",
    "build_metric",
    "metric_from_values",
    "curvature_pack",
    "curvature_audit",
    "curvature_positivity",
    "sectional_curvature",
    "parallel_ricci_residual",
    "kahler_condition_residual",
    "overlap_scalar_residual",
    "lagrange_plan",
    "apply_plan",
    "KINDS",
]

KINDS = ("flat_torus_c", "fubini_study_cp1", "round_sphere", "flat_torus_r", "flat_patch")
KAHLER_KINDS = ("flat_torus_c", "fubini_study_cp1", "flat_patch")

# CP¹ stitching geometry: each chart evolves |z| <= ACTIVE_RADIUS and owns |z| <= 1.
ACTIVE_RADIUS = 1.25
# fringe rows refilled from the other chart; farther points never enter an
# evolved point's stencils
FRINGE_CELLS = 8
FRINGE_WIDTH = 8
OVERLAP = (0.5, 2.0)


class ModelError(ValueError):
    """Invalid or unsupported model description."""


class CurvatureError(RuntimeError):
    """Curvature assembly failed (singular metric or runaway symmetry defect)."""


@dataclass(frozen=True)
class ManifoldModel:
    """Chart/grid description plus metric generator for one model manifold.

    Parameters
    ----------
    kind : str
        One of ``flat_torus_c``, ``fubini_study_cp1``, ``round_sphere``,
        ``flat_torus_r`` or ``flat_patch`` (an open box in C^n used for
        non-periodic exact solutions).
    grid : tuple of int
        Points per real axis.  A single entry is broadcast to all axes.  For
        the sphere it is ``(n_theta,)`` or ``(n_theta, n_phi)``.
    dim : int
        Complex dimension for Kähler kinds, real dimension otherwise.
    periods : tuple of float
        Torus periods per real axis (one entry is broadcast).
    c0 : float
        Fubini–Study scale; the metric is ``c0 * g_FS``.
    radius : float
        Sphere radius.
    half_width : float
        Half side of each CP¹ chart box or of the flat patch.
    perturbation, perturbation_seed, perturbation_kind :
        Optional smooth metric perturbation.  On ``flat_torus_c`` the
        ``"kahler"`` kind adds ``∂∂̄φ`` for a band-limited periodic φ and the
        ``"non_kahler"`` kind adds a term violating the Kähler condition.  On
        ``fubini_study_cp1`` the metric is multiplied by ``exp(ε ψ)`` with ψ a
        global quadratic polynomial on the embedded sphere.
    """

    kind: str
    grid: tuple = (64,)
    dim: int = 1
    periods: tuple = (2.0 * np.pi,)
    c0: float = 1.0
    radius: float = 1.0
    half_width: float = 0.0
    perturbation: float = 0.0
    perturbation_seed: int = 0
    perturbation_kind: str = "kahler"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unsupported model kind {self.kind!r}")
        grid = (self.grid,) if np.isscalar(self.grid) else tuple(int(g) for g in self.grid)
        object.__setattr__(self, "grid", grid)
        periods = (self.periods,) if np.isscalar(self.periods) else tuple(float(p) for p in self.periods)
        object.__setattr__(self, "periods", periods)
        if any(g < 8 for g in grid):
            raise ModelError(f"grid counts must be >= 8, got {grid}")
        if self.kind in ("flat_torus_c", "flat_torus_r", "round_sphere") and any(g % 2 for g in grid):
            raise ModelError(f"spectral axes need even grid counts, got {grid}")
        if any(p <= 0 for p in periods):
            raise ModelError("periods must be positive")
        if self.c0 <= 0 or self.radius <= 0:
            raise ModelError("scale and radius must be positive")
        if self.dim < 1:
            raise ModelError("dimension must be positive")
        if self.kind == "fubini_study_cp1" and self.dim != 1:
            raise ModelError("CP¹ has complex dimension 1")
        if self.kind == "round_sphere" and self.dim != 2:
            raise ModelError("only the 2-sphere is supported")
        if self.perturbation_kind not in ("kahler", "non_kahler"):
            raise ModelError(f"unknown perturbation kind {self.perturbation_kind!r}")

    # constructors -------------------------------------------------------
    @classmethod
    def flat_torus_c(cls, n=1, grid=64, periods=2.0 * np.pi, **kw):
        return cls("flat_torus_c", grid=grid, dim=n, periods=periods, **kw)

    @classmethod
    def fubini_study_cp1(cls, c0=1.0, grid=64, half_width=2.2, **kw):
        return cls("fubini_study_cp1", grid=grid, c0=c0, half_width=half_width, **kw)

    @classmethod
    def round_sphere(cls, grid=32, radius=1.0):
        return cls("round_sphere", grid=grid, dim=2, radius=radius)

    @classmethod
    def flat_torus_r(cls, m=2, grid=64, periods=2.0 * np.pi):
        return cls("flat_torus_r", grid=grid, dim=m, periods=periods)

    @classmethod
    def flat_patch(cls, n=1, grid=64, half_width=1.0):
        return cls("flat_patch", grid=grid, dim=n, half_width=half_width)

    def with_grid(self, grid) -> "ManifoldModel":
        return replace(self, grid=(grid,) if np.isscalar(grid) else tuple(grid))

    # descriptors --------------------------------------------------------
    @property
    def is_kahler(self) -> bool:
        return self.kind in KAHLER_KINDS

    @property
    def real_dim(self) -> int:
        return 2 * self.dim if self.is_kahler else self.dim

    def _counts(self):
        if self.kind == "round_sphere":
            nt = self.grid[0]
            nphi = self.grid[1] if len(self.grid) > 1 else 2 * nt
            return (nt, nphi)
        nd = self.real_dim
        if len(self.grid) == 1:
            return self.grid * nd
        if len(self.grid) != nd:
            raise ModelError(f"grid {self.grid} does not match {nd} real axes")
        return self.grid

    def _periods(self):
        nd = self.real_dim
        if len(self.periods) == 1:
            return self.periods * nd
        if len(self.periods) == self.dim and self.is_kahler:
            return tuple(p for p in self.periods for _ in range(2))
        if len(self.periods) != nd:
            raise ModelError(f"periods {self.periods} do not match {nd} real axes")
        return self.periods

    @property
    def h(self) -> float:
        """Representative grid spacing (smallest over charts and axes)."""
        return min(c.spacing for c in self.charts)

    @property
    def spectral(self) -> bool:
        return all(c.spectral for c in self.charts)

    @property
    def scheme_order(self):
        return None if self.spectral else 4

    @cached_property
    def charts(self) -> tuple:
        counts = self._counts()
        if self.kind in ("flat_torus_c", "flat_torus_r"):
            axes = [PeriodicAxis(n, 0.0, p) for n, p in zip(counts, self._periods())]
            return (Chart(axes, complex_dim=self.dim if self.is_kahler else 0, name="torus"),)
        if self.kind == "round_sphere":
            nt, nphi = counts
            if nphi % 2:
                raise ModelError("sphere longitude count must be even")
            axes = [PolarAxis(nt, partner=1), PeriodicAxis(nphi, 0.0, 2.0 * np.pi)]
            owned = np.ones((nt, nphi), bool)
            owned[[0, -1], :] = False  # pole-adjacent rows
            return (Chart(axes, owned=owned, name="sphere"),)
        hw = self.half_width or (2.2 if self.kind == "fubini_study_cp1" else 1.0)
        axes = [OpenAxis(n, -hw, hw) for n in counts]
        edge = np.ones(tuple(counts), bool)
        for a, n in enumerate(counts):
            idx = [slice(None)] * len(counts)
            idx[a] = np.r_[0:3, n - 3:n]
            edge[tuple(idx)] = False
        if self.kind == "flat_patch":
            inner = np.ones(tuple(counts), bool)
            for a, n in enumerate(counts):
                idx = [slice(None)] * len(counts)
                idx[a] = np.r_[0:2, n - 2:n]
                inner[tuple(idx)] = False
            return (Chart(axes, owned=inner, interior=inner, complex_dim=self.dim, name="patch"),)
        charts = []
        for name, strict in (("A", False), ("B", True)):
            c = Chart(axes, complex_dim=1, name=name)
            r = np.hypot(*c.coords)
            c.owned = r < 1.0 if strict else r <= 1.0
            c.interior = edge
            c.active = r <= ACTIVE_RADIUS
            charts.append(c)
        return tuple(charts)

    # stitching ---------------------------------------------------------
    @cached_property
    def _fringe_plans(self):
        """Interpolation plans filling each CP¹ chart's fringe from the other chart."""
        plans = []
        for me, other in ((0, 1), (1, 0)):
            c = self.charts[me]
            src = self.charts[other]
            r = np.hypot(*c.coords)
            fringe = ~c.active & (r <= ACTIVE_RADIUS + FRINGE_CELLS * c.spacing)
            x, y = c.coords[0][fringe], c.coords[1][fringe]
            r2 = x * x + y * y
            wx, wy = x / r2, -y / r2  # w = 1/z
            plan = plan_matrix(lagrange_plan(src, wx, wy, width=FRINGE_WIDTH), src.shape)
            plans.append((fringe, plan, r2))
        return plans

    def stitch(self, fields, kind: str = "scalar"):
        """Fill CP¹ fringe points from the other chart.  No-op on one-chart models.

        ``kind`` is ``"scalar"`` or ``"metric"`` (a (1,1)-tensor, which picks up
        the Jacobian factor ``|dw/dz|² = 1/|z|⁴``).
        """
        if self.kind != "fubini_study_cp1":
            return fields
        out = [np.array(f, copy=True) for f in fields]
        for me, (fringe, plan, r2) in enumerate(self._fringe_plans):
            F = fields[1 - me]
            vals = (plan @ F.reshape(plan.shape[1], -1)).reshape((plan.shape[0],) + F.shape[2:])
            if kind == "metric":
                vals = vals / (r2 * r2).reshape((-1,) + (1,) * (vals.ndim - 1))
            out[me][fringe] = vals
        return out

    def evolution_mask(self, chart_index: int) -> np.ndarray:
        c = self.charts[chart_index]
        return getattr(c, "active", np.ones(c.shape, bool))

    def cfl_dt(self, metric: "MetricField", cfl: float) -> float:
        """Explicit step bound ``cfl * h² * min-eig(g) / n`` over evolved points."""
        if self.kind == "round_sphere":
            return cfl * self.charts[0].axes[0].spacing ** 2 * self.radius ** 2 / self.dim
        lam = metric.min_eig(self, evolved=True)
        return cfl * self.h ** 2 * lam / self.dim


@dataclass
class MetricField:
    """Metric values per chart with cached inverse.

    ``values[c][..., i, j]`` is ``g_{ij̄}`` (Hermitian, complex) on Kähler
    models or ``g_{ij}`` (real symmetric) on Riemannian ones.
    ``inverse[c]`` is ``g^{ij̄}`` laid out as ``(G^T)^{-1}`` (Kähler) or
    ``G^{-1}``.
    """

    values: list
    kahler: bool
    time_stamp: float = 0.0
    inverse: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.inverse is None:
            inv = [inverse(G) for G in self.values]
            self.inverse = [np.swapaxes(i, -1, -2) for i in inv] if self.kahler else inv

    def min_eig(self, model: ManifoldModel | None = None, evolved: bool = False) -> float:
        out = np.inf
        for c, G in enumerate(self.values):
            ev = np.linalg.eigvalsh(G)[..., 0]
            if model is not None and evolved:
                ev = ev[model.evolution_mask(c)]
            out = min(out, float(ev.min()))
        return out

    def calculi(self, model: ManifoldModel) -> list:
        """Per-chart calculus objects, built once and cached on this field."""
        cache = self.__dict__.setdefault("_calculi", {})
        key = id(model.charts)
        if key not in cache:
            cls = KahlerCalculus if self.kahler else RiemannCalculus
            cache[key] = [cls(c, G) for c, G in zip(model.charts, self.values)]
        return cache[key]

    def scaled(self, lam: float) -> "MetricField":
        return MetricField([lam * G for G in self.values], self.kahler, self.time_stamp)


def metric_from_values(values, kahler: bool, t: float = 0.0) -> MetricField:
    return MetricField([np.asarray(v) for v in values], kahler, t)


def _fs_embedding(chart: Chart, name: str):
    x, y = chart.coords
    r2 = x * x + y * y
    if name == "A":
        return 2 * x / (1 + r2), 2 * y / (1 + r2), (1 - r2) / (1 + r2)
    return 2 * x / (1 + r2), -2 * y / (1 + r2), (r2 - 1) / (1 + r2)


def fs_global_function(chart: Chart, coeffs) -> np.ndarray:
    """Degree ≤ 2 polynomial in the embedded coordinates (X, Y, Z) of CP¹ = S²."""
    X, Y, Z = _fs_embedding(chart, chart.name)
    basis = [X, Y, Z, X * Y, Y * Z, Z * X, X * X - Y * Y, 3 * Z * Z - 1]
    return sum(c * b for c, b in zip(coeffs, basis))


def _fs_perturbation_coeffs(model: ManifoldModel):
    rng = np.random.default_rng(model.perturbation_seed)
    c = rng.normal(size=8)
    return c / np.abs(c).sum()


def build_metric(model: ManifoldModel, t: float = 0.0) -> MetricField:
    """Closed-form metric of the model at its native scale."""
    if t < 0:
        raise ModelError("t must be non-negative")
    vals = []
    if model.kind in ("flat_torus_c", "flat_patch"):
        c = model.charts[0]
        n = model.dim
        G = np.broadcast_to(np.eye(n, dtype=complex), c.shape + (n, n)).copy()
        if model.kind == "flat_torus_c" and model.perturbation:
            rng = np.random.default_rng(model.perturbation_seed)
            eps = model.perturbation
            if model.perturbation_kind == "kahler":
                phi = band_limited_field(c, rng, modes=2, amplitude=1.0)
                G = G + eps * ddbar(c, phi)
                G = 0.5 * (G + np.conj(np.swapaxes(G, -1, -2)))
            else:
                if n < 2:
                    raise ModelError("non-Kähler perturbation needs complex dimension >= 2")
                G[..., 0, 0] += eps * np.sin(2 * np.pi * c.coords[2] / c.axes[2].length)
        vals.append(G)
        return MetricField(vals, True, t)
    if model.kind == "fubini_study_cp1":
        coeffs = _fs_perturbation_coeffs(model) if model.perturbation else None
        for c in model.charts:
            x, y = c.coords
            g = model.c0 / (1.0 + x * x + y * y) ** 2
            if coeffs is not None:
                g = g * np.exp(model.perturbation * fs_global_function(c, coeffs))
            vals.append(g[..., None, None].astype(complex))
        return MetricField(vals, True, t)
    if model.kind == "round_sphere":
        c = model.charts[0]
        th = c.coords[0]
        G = np.zeros(c.shape + (2, 2))
        G[..., 0, 0] = model.radius ** 2
        G[..., 1, 1] = (model.radius * np.sin(th)) ** 2
        return MetricField([G], False, t)
    c = model.charts[0]
    m = model.dim
    return MetricField([np.broadcast_to(np.eye(m), c.shape + (m, m)).copy()], False, t)


@dataclass
class CurvaturePack:
    """Christoffels, curvature, Ricci and scalar curvature per chart."""

    model: ManifoldModel
    metric: MetricField
    calcs: list
    christoffel: list
    riemann: list
    riemann_raw: list
    ricci: list
    scalar: list
    defects: dict

    @property
    def kahler(self) -> bool:
        return self.metric.kahler


def curvature_pack(metric: MetricField, model: ManifoldModel, hard_cap: float = 0.1) -> CurvaturePack:
    """Assemble curvature on every chart with explicit symmetrization.

    The pre-symmetrization defect ``max|R_sym - R_raw| / (1 + max|R|)`` over
    owned points is recorded; above ``hard_cap`` the discretization is considered broken.
    """
    calcs, gams, Rs, raws, rics, scals = [], [], [], [], [], []
    defect = 0.0
    scalar_imag = 0.0
    for idx, (chart, G) in enumerate(zip(model.charts, metric.values)):
        try:
            calc = metric.calculi(model)[idx]
            if metric.kahler:
                dbar_gam = calc.grad(calc.Gam, bar=True)  # [l, p, i, k]
                raw = -np.einsum("...pj,...lpik->...ijkl", G, dbar_gam)
                R = symmetrize_kahler(raw)
                Ric = np.einsum("...kl,...ijkl->...ij", calc.Ginv, R)
                Ric = 0.5 * (Ric + np.conj(np.swapaxes(Ric, -1, -2)))
                S = np.einsum("...ij,...ij->...", calc.Ginv, Ric)
                scalar_imag = max(scalar_imag, float(np.abs(S.imag).max()))
                S = S.real
            else:
                raw = calc.riemann()
                R = symmetrize_riemann(raw)
                Ric = np.einsum("...il,...ijkl->...jk", calc.Ginv, R)
                Ric = 0.5 * (Ric + np.swapaxes(Ric, -1, -2))
                S = np.einsum("...ij,...ij->...", calc.Ginv, Ric)
        except np.linalg.LinAlgError as exc:
            raise CurvatureError(f"singular metric on chart {chart.name}: {exc}") from exc
        mask = chart.owned
        scale = 1.0 + chart.mask_max(R, mask)
        defect = max(defect, chart.mask_max(R - raw, mask) / scale)
        calcs.append(calc)
        gams.append(calc.Gam)
        Rs.append(R)
        raws.append(raw)
        rics.append(Ric)
        scals.append(S)
    if not np.isfinite(defect) or defect > hard_cap:
        raise CurvatureError(f"curvature symmetry defect {defect:.3g} exceeds cap {hard_cap}")
    return CurvaturePack(model, metric, calcs, gams, Rs, raws, rics, scals,
                         {"symmetrization": defect, "scalar_imag": scalar_imag})


@dataclass
class AuditReport:
    """Max-norm identity residuals of a curvature pack.

    ``residuals`` are evaluated on the stored (symmetrized) tensors;
    ``raw`` holds the same symmetry checks on the unsymmetrized tensor, which
    measure discretization error.
    """

    residuals: dict
    raw: dict
    threshold: float = 1e-6

    @property
    def max_residual(self) -> float:
        return max(list(self.residuals.values()) + [0.0])

    @property
    def max_raw(self) -> float:
        return max(list(self.raw.values()) + [0.0])

    @property
    def passed(self) -> bool:
        return self.max_residual < self.threshold

    def to_dict(self) -> dict:
        return {"residuals": self.residuals, "raw": self.raw, "threshold": self.threshold,
                "max_residual": self.max_residual, "max_raw": self.max_raw,
                "passed": self.passed}


def _kahler_symmetry(R):
    return {
        "symmetry_ik": R - np.einsum("...ijkl->...kjil", R),
        "symmetry_jl": R - np.einsum("...ijkl->...ilkj", R),
        "pair_swap": R - np.einsum("...ijkl->...klij", R),
        "reality": R - np.conj(np.einsum("...ijkl->...jilk", R)),
    }


def _riemann_symmetry(R):
    return {
        "antisymmetry_ij": R + np.einsum("...ijkl->...jikl", R),
        "antisymmetry_kl": R + np.einsum("...ijkl->...ijlk", R),
        "pair_swap": R - np.einsum("...ijkl->...klij", R),
        "first_bianchi": R + np.einsum("...ijkl->...jkil", R) + np.einsum("...ijkl->...kijl", R),
    }


def curvature_audit(pack: CurvaturePack, threshold: float = 1e-6) -> AuditReport:
    """Residuals of every curvature symmetry, both Bianchi forms, Ricci Hermitian-ness
    and reality of the scalar curvature, as max norms over audit points."""
    res: dict = {}
    raw: dict = {}

    def acc(d, key, chart, arr):
        d[key] = max(d.get(key, 0.0), chart.mask_max(arr))

    for c, chart in enumerate(pack.model.charts):
        calc = pack.calcs[c]
        R = pack.riemann[c]
        Ric = pack.ricci[c]
        if pack.kahler:
            for k, v in _kahler_symmetry(R).items():
                acc(res, k, chart, v)
            for k, v in _kahler_symmetry(pack.riemann_raw[c]).items():
                acc(raw, k, chart, v)
            D, _ = calc.cov(R, "ubub", bar=False)      # [p, i, j, k, l]
            acc(res, "bianchi_holomorphic", chart, D - np.einsum("...pijkl->...kijpl", D))
            Db, _ = calc.cov(R, "ubub", bar=True)      # [q, i, j, k, l]
            acc(res, "bianchi_antiholomorphic", chart, Db - np.einsum("...qijkl->...lijkq", Db))
            acc(res, "ricci_hermitian", chart, Ric - np.conj(np.swapaxes(Ric, -1, -2)))
            acc(res, "ricci_trace", chart, Ric - np.einsum("...kl,...ijkl->...ij", calc.Ginv, R))
            S = np.einsum("...ij,...ij->...", calc.Ginv, Ric)
            acc(res, "scalar_reality", chart, S.imag)
            acc(res, "kahler_condition", chart, kahler_condition_field(calc))
        else:
            for k, v in _riemann_symmetry(R).items():
                acc(res, k, chart, v)
            for k, v in _riemann_symmetry(pack.riemann_raw[c]).items():
                acc(raw, k, chart, v)
            D = calc.cov(R, 4)  # [m, i, j, k, l]
            # ∇_m R_ijkl + ∇_i R_jmkl + ∇_j R_mikl
            second = D + np.einsum("...ijmkl->...mijkl", D) + np.einsum("...jmikl->...mijkl", D)
            acc(res, "second_bianchi", chart, second)
            acc(res, "ricci_symmetric", chart, Ric - np.swapaxes(Ric, -1, -2))
            acc(res, "ricci_trace", chart, Ric - np.einsum("...il,...ijkl->...jk", calc.Ginv, R))
    return AuditReport(res, raw, threshold)


def kahler_condition_field(calc: KahlerCalculus):
    """``∂_k g_{ij̄} - ∂_i g_{kj̄}`` as an array ``[k, i, j]``."""
    dG = calc.grad(calc.G)  # [k, i, j]
    return dG - np.einsum("...kij->...ikj", dG)


def kahler_condition_residual(metric: MetricField, model: ManifoldModel) -> float:
    out = 0.0
    for chart, G in zip(model.charts, metric.values):
        out = max(out, chart.mask_max(kahler_condition_field(KahlerCalculus(chart, G))))
    return out


def curvature_positivity(pack: CurvaturePack, metric: MetricField | None = None,
                         samples: int = 16, seed: int = 0) -> float:
    """Minimum of the bisectional (Kähler) or sectional form ``R_{kijl}v^iv^jw^kw^l``.

    Sampled vector pairs are normalized to unit length in the local metric;
    the minimum runs over samples and owned grid points of every chart.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    metric = pack.metric if metric is None else metric
    rng = np.random.default_rng(seed)
    best = np.inf
    for c, chart in enumerate(pack.model.charts):
        G = metric.values[c]
        R = pack.riemann[c]
        dim = G.shape[-1]
        for _ in range(samples):
            if pack.kahler:
                v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
                w = rng.normal(size=dim) + 1j * rng.normal(size=dim)
                nv = np.einsum("...ij,i,j->...", G, v, v.conj()).real
                nw = np.einsum("...ij,i,j->...", G, w, w.conj()).real
                q = np.einsum("...ijkl,i,j,k,l->...", R, v, v.conj(), w, w.conj()).real
            else:
                v = rng.normal(size=dim)
                w = rng.normal(size=dim)
                nv = np.einsum("...ij,i,j->...", G, v, v)
                nw = np.einsum("...ij,i,j->...", G, w, w)
                q = np.einsum("...kijl,i,j,k,l->...", R, v, v, w, w)
            vals = (q / (nv * nw))[chart.owned]
            if vals.size:
                best = min(best, float(vals.min()))
    return best


def sectional_curvature(pack: CurvaturePack, chart_index: int = 0, a: int = 0, b: int = 1):
    """Sectional curvature of the coordinate plane (∂_a, ∂_b) as a grid field."""
    if pack.kahler:
        raise ModelError("sectional_curvature is defined for Riemannian packs")
    G = pack.metric.values[chart_index]
    R = pack.riemann[chart_index]
    num = R[..., b, a, a, b]  # R_{kijl} v^i v^j w^k w^l with v = ∂_a, w = ∂_b
    den = G[..., a, a] * G[..., b, b] - G[..., a, b] ** 2
    return num / den


def parallel_ricci_residual(pack: CurvaturePack) -> float:
    """Max of ``|∇_k R_ij|`` over owned points."""
    out = 0.0
    for c, chart in enumerate(pack.model.charts):
        calc = pack.calcs[c]
        if pack.kahler:
            D, _ = calc.cov(pack.ricci[c], "ub", bar=False)
        else:
            D = calc.cov(pack.ricci[c], 2)
        out = max(out, chart.mask_max(D, chart.owned))
    return out


# -- CP¹ overlap interpolation ------------------------------------------------

def lagrange_plan(chart: Chart, x, y, width: int = 6):
    """Tensor-product Lagrange interpolation weights at points ``(x, y)``."""
    plan = []
    for axis, pts in zip(chart.axes, (x, y)):
        h = axis.spacing
        i0 = np.floor((pts - axis.lo) / h).astype(int) - (width // 2 - 1)
        i0 = np.clip(i0, 0, axis.n - width)
        idx = i0[:, None] + np.arange(width)[None, :]
        nodes = axis.points[idx]
        w = np.ones_like(nodes)
        for a in range(width):
            for b in range(width):
                if a != b:
                    w[:, a] *= (pts - nodes[:, b]) / (nodes[:, a] - nodes[:, b])
        plan.append((idx, w))
    return plan


def plan_matrix(plan, shape):
    """Sparse matrix form of a two-axis interpolation plan (rows: target points)."""
    (ix, wx), (iy, wy) = plan
    nf, width = ix.shape
    rows = np.repeat(np.arange(nf), width * width)
    cols = (ix[:, :, None] * shape[1] + iy[:, None, :]).ravel()
    vals = (wx[:, :, None] * wy[:, None, :]).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(nf, shape[0] * shape[1]))


def apply_plan(plan, F):
    (ix, wx), (iy, wy) = plan
    vals = F[ix[:, :, None], iy[:, None, :]]
    W = wx[:, :, None] * wy[:, None, :]
    return np.einsum("fab,fab...->f...", W, vals)


def overlap_scalar_residual(model: ManifoldModel, fields) -> float:
    """Max |f_A(z) - f_B(1/z)| over chart-A audit points with 0.5 < |z| < 2."""
    if model.kind != "fubini_study_cp1":
        raise ModelError("overlap check applies to CP¹ only")
    A, B = model.charts
    r = np.hypot(*A.coords)
    sel = (r > OVERLAP[0]) & (r < OVERLAP[1]) & A.interior
    x, y = A.coords[0][sel], A.coords[1][sel]
    r2 = x * x + y * y
    vals = apply_plan(lagrange_plan(B, x / r2, -y / r2), fields[1])
    return float(np.abs(fields[0][sel] - vals).max())
