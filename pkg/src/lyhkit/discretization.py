"""Grid derivative operators and covariant calculus on chart grids.

Fields are plain numpy arrays whose leading axes are the chart grid and whose
trailing axes hold tensor components.  Every derivative operator inserts the
new derivative index directly after the grid axes, so ``d(T)[..., k, i, j]`` is
``∂_k T_{ij}``.

Three axis types are provided:

* ``PeriodicAxis`` -- Fourier spectral differentiation (tori, sphere longitude).
* ``OpenAxis`` -- fourth-order central differences with one-sided closures.
* ``PolarAxis`` -- sphere colatitude on a cell-centred grid, differentiated
  spectrally through the double-Fourier reflection
  ``f(-θ, φ) = ± f(θ, φ + π)``.
"""

from __future__ import annotations

from functools import lru_cache
from itertools import product

import numpy as np

__all__ = [
    "fd_weights",
    "PeriodicAxis",
    "OpenAxis",
    "PolarAxis",
    "Chart",
    "GridField",
    "DerivativeScheme",
    "partial_derivative",
    "wirtinger",
    "ddbar",
    "ddhol",
    "KahlerCalculus",
    "RiemannCalculus",
    "complex_hessian",
    "covariant_hessian_real",
    "commutation_residual",
    "band_limited_field",
    "SchemeError",
    "inverse",
]


class SchemeError(ValueError):
    """Raised when a derivative scheme does not match the chart it is applied on."""


def fd_weights(offsets, order: int) -> np.ndarray:
    """Finite-difference weights for the given stencil offsets (unit spacing).

    Solves the Vandermonde system ``sum_j w_j s_j^p / p! = δ_{p, order}``.
    """
    s = np.asarray(offsets, dtype=float)
    m = len(s)
    A = np.vander(s, m, increasing=True).T
    rhs = np.zeros(m)
    rhs[order] = float(np.prod(np.arange(1, order + 1)))
    return np.linalg.solve(A, rhs)


@lru_cache(maxsize=None)
def _fd4_tables():
    c1 = fd_weights([-2, -1, 0, 1, 2], 1)
    c2 = fd_weights([-2, -1, 0, 1, 2], 2)
    # one-sided closures for the first two rows: 5 points (first), 6 points (second),
    # stored as zero-padded matrices acting on the first six samples
    b1 = np.zeros((2, 6))
    b1[0, :5] = fd_weights(range(0, 5), 1)
    b1[1, :5] = fd_weights(range(-1, 4), 1)
    b2 = np.zeros((2, 6))
    b2[0] = fd_weights(range(0, 6), 2)
    b2[1] = fd_weights(range(-1, 5), 2)
    return c1, c2, b1, b2


@lru_cache(maxsize=None)
def _wavenumbers(n: int, length: float, real: bool) -> np.ndarray:
    if real:
        return 2.0 * np.pi * np.fft.rfftfreq(n, d=length / n)
    return 2.0 * np.pi * np.fft.fftfreq(n, d=length / n)


def _spectral(f: np.ndarray, axis: int, length: float, order: int) -> np.ndarray:
    n = f.shape[axis]
    real = not np.iscomplexobj(f)
    k = _wavenumbers(n, length, real)
    mult = (1j * k) ** order
    if order % 2 == 1 and n % 2 == 0:
        mult = mult.copy()
        mult[n // 2] = 0.0
    shape = [1] * f.ndim
    shape[axis] = mult.size
    mult = mult.reshape(shape)
    if real:
        return np.fft.irfft(np.fft.rfft(f, axis=axis) * mult, n=n, axis=axis)
    return np.fft.ifft(np.fft.fft(f, axis=axis) * mult, axis=axis)


class PeriodicAxis:
    """Uniform periodic axis ``lo + j*h`` differentiated spectrally."""

    scheme = "spectral"

    def __init__(self, n: int, lo: float, hi: float):
        if n < 8 or n % 2:
            raise SchemeError(f"periodic axis needs an even point count >= 8, got {n}")
        self.n, self.lo, self.hi = n, float(lo), float(hi)
        self.length = self.hi - self.lo
        self.spacing = self.length / n
        self.points = self.lo + self.spacing * np.arange(n)

    def d1(self, f, axis, ctx=None):
        return _spectral(f, axis, self.length, 1)

    def d2(self, f, axis, ctx=None):
        return _spectral(f, axis, self.length, 2)


class OpenAxis:
    """Closed interval ``[lo, hi]`` sampled at ``n`` points, central FD4."""

    scheme = "fd4"
    # below this size a dense matrix product beats stencil slicing
    DENSE_MAX = 128

    def __init__(self, n: int, lo: float, hi: float):
        if n < 8:
            raise SchemeError(f"open axis needs at least 8 points, got {n}")
        self.n, self.lo, self.hi = n, float(lo), float(hi)
        self.spacing = (self.hi - self.lo) / (n - 1)
        self.points = np.linspace(self.lo, self.hi, n)

    def _apply(self, f, axis, central, closures, order):
        g = np.moveaxis(f, axis, 0)
        out = np.empty_like(g)
        n = g.shape[0]
        out[2:-2] = sum(w * g[j:n - 4 + j] for j, w in enumerate(central) if w != 0.0)
        W = closures
        width = W.shape[1]
        rest = g.shape[1:]
        head = g[:width].reshape(width, -1)
        tail = g[n - width:][::-1].reshape(width, -1)
        sign = -1.0 if order % 2 else 1.0  # odd derivatives flip under reflection
        out[:2] = (W @ head).reshape((2,) + rest)
        out[n - 2:] = (sign * (W @ tail)).reshape((2,) + rest)[::-1]
        return np.moveaxis(out, 0, axis) / self.spacing ** order

    def matrix(self, order: int) -> np.ndarray:
        """Dense differentiation matrix equivalent to the stencil application."""
        cache = self.__dict__.setdefault("_matrices", {})
        if order not in cache:
            cache[order] = self._apply(np.eye(self.n), 0, *self._tables(order), order)
        return cache[order]

    @staticmethod
    def _tables(order):
        c1, c2, b1, b2 = _fd4_tables()
        return (c1, b1) if order == 1 else (c2, b2)

    def _diff(self, f, axis, order):
        if self.n > self.DENSE_MAX:
            return self._apply(f, axis, *self._tables(order), order)
        D = self.matrix(order)
        if axis == 0:
            return (D @ f.reshape(self.n, -1)).reshape(f.shape)
        lead = int(np.prod(f.shape[:axis], dtype=int))
        g = f.reshape(lead, self.n, -1)
        return np.matmul(D, g).reshape(f.shape)

    def d1(self, f, axis, ctx=None):
        return self._diff(f, axis, 1)

    def d2(self, f, axis, ctx=None):
        return self._diff(f, axis, 2)


class PolarAxis:
    """Cell-centred colatitude ``θ_j = (j + 1/2)π/n`` on the sphere.

    Differentiation extends a field across the poles with
    ``f(-θ, φ) = p f(θ, φ + π)`` where the parity ``p = (-1)^{#θ indices}``
    of each tensor component is derived from its trailing index axes, then
    differentiates the resulting 2π-periodic function spectrally.  Only
    covariant components are smooth under this extension.
    """

    scheme = "spectral"

    def __init__(self, n: int, partner: int):
        if n < 8 or n % 2:
            raise SchemeError(f"polar axis needs an even point count >= 8, got {n}")
        self.n = n
        self.partner = partner
        self.spacing = np.pi / n
        self.points = (np.arange(n) + 0.5) * self.spacing
        self.lo, self.hi = 0.0, np.pi

    @staticmethod
    def parity(rank: int, comp_shape) -> np.ndarray:
        if rank == 0:
            return np.ones(comp_shape)
        p = np.ones((2,) * rank)
        for idx in product(range(2), repeat=rank):
            p[idx] = (-1.0) ** sum(1 for c in idx if c == 0)
        return p.reshape(comp_shape)

    def _extend(self, f, axis, rank):
        nphi = f.shape[self.partner]
        mirrored = np.roll(np.flip(f, axis=axis), nphi // 2, axis=self.partner)
        comp_shape = f.shape[f.ndim - rank:] if rank else ()
        mirrored = mirrored * self.parity(rank, comp_shape)
        return np.concatenate([f, mirrored], axis=axis)

    def _deriv(self, f, axis, rank, order):
        ext = self._extend(f, axis, rank)
        d = _spectral(ext, axis, 2.0 * np.pi, order)
        return np.take(d, np.arange(self.n), axis=axis)

    def d1(self, f, axis, rank=0):
        return self._deriv(f, axis, rank, 1)

    def d2(self, f, axis, rank=0):
        return self._deriv(f, axis, rank, 2)


class Chart:
    """A tensor-product grid over one coordinate patch.

    Parameters
    ----------
    axes : sequence of axis objects
        One per real coordinate.  Kähler charts order them ``x1, y1, x2, y2, ...``.
    owned : ndarray of bool, optional
        Points that this chart is responsible for in global reductions.
    interior : ndarray of bool, optional
        Points used by identity audits (away from one-sided closures).
    complex_dim : int, optional
        Complex dimension for Kähler charts; zero for real charts.
    """

    def __init__(self, axes, owned=None, interior=None, complex_dim: int = 0, name: str = ""):
        self.axes = tuple(axes)
        self.ndim = len(self.axes)
        self.shape = tuple(ax.n for ax in self.axes)
        self.complex_dim = complex_dim
        self.name = name
        self.coords = np.meshgrid(*[ax.points for ax in self.axes], indexing="ij")
        self.owned = np.ones(self.shape, bool) if owned is None else owned
        self.interior = self.owned if interior is None else interior

    @property
    def spacing(self) -> float:
        return min(ax.spacing for ax in self.axes)

    @property
    def spectral(self) -> bool:
        return all(ax.scheme == "spectral" for ax in self.axes)

    def _rank(self, f, rank):
        return f.ndim - self.ndim if rank is None else rank

    def d(self, f, axis: int, rank=None):
        """First derivative along real grid axis ``axis``."""
        ax = self.axes[axis]
        if isinstance(ax, PolarAxis):
            return ax.d1(f, axis, self._rank(f, rank))
        return ax.d1(f, axis)

    def d2(self, f, axis: int, rank=None):
        ax = self.axes[axis]
        if isinstance(ax, PolarAxis):
            return ax.d2(f, axis, self._rank(f, rank))
        return ax.d2(f, axis)

    def dd(self, f, a: int, b: int, rank=None):
        """Second derivative ``∂_a ∂_b f``; pure directions use the direct stencil."""
        if a == b:
            return self.d2(f, a, rank)
        r = self._rank(f, rank)
        return self.d(self.d(f, a, r), b, r)

    def grad(self, f, rank=None):
        """Real gradient with the derivative index after the grid axes."""
        r = self._rank(f, rank)
        return np.stack([self.d(f, a, r) for a in range(self.ndim)], axis=self.ndim)

    def mask_max(self, f, mask=None) -> float:
        """Max-abs of ``f`` over masked grid points (all components)."""
        m = self.interior if mask is None else mask
        v = np.abs(np.asarray(f))[m]
        return float(v.max()) if v.size else 0.0


class DerivativeScheme:
    """Descriptor of how a chart differentiates: ``SpectralPeriodic`` or ``CentralFD(4)``."""

    def __init__(self, kind: str, spacing):
        if kind not in ("SpectralPeriodic", "CentralFD"):
            raise SchemeError(f"unknown scheme {kind!r}")
        self.kind = kind
        self.order = None if kind == "SpectralPeriodic" else 4
        self.spacing = tuple(spacing)

    @classmethod
    def of(cls, chart: Chart) -> "DerivativeScheme":
        kind = "SpectralPeriodic" if chart.spectral else "CentralFD"
        return cls(kind, [ax.spacing for ax in chart.axes])


class GridField:
    """Array on a chart tagged with the index type of each trailing axis.

    ``tags`` holds one character per component axis: ``'u'`` holomorphic
    (unbarred), ``'b'`` anti-holomorphic (barred), ``'r'`` real.
    """

    def __init__(self, data, chart: Chart, tags: str = ""):
        data = np.asarray(data)
        if data.shape[:chart.ndim] != chart.shape:
            raise ValueError(f"field shape {data.shape} does not match chart grid {chart.shape}")
        if data.ndim - chart.ndim != len(tags):
            raise ValueError(f"{len(tags)} index tags for {data.ndim - chart.ndim} component axes")
        self.data, self.chart, self.tags = data, chart, tags

    @property
    def rank(self) -> int:
        return len(self.tags)


def inverse(G):
    """Batched matrix inverse with a closed form for 1x1 blocks."""
    if G.shape[-1] == 1:
        if np.any(G == 0):
            raise np.linalg.LinAlgError("singular 1x1 metric block")
        return 1.0 / G
    return np.linalg.inv(G)


def wirtinger(chart: Chart, f, k: int, bar: bool = False):
    """``∂/∂z^k`` (or ``∂/∂z̄^k``) from the underlying real derivatives."""
    dx = chart.d(f, 2 * k)
    dy = chart.d(f, 2 * k + 1)
    return 0.5 * (dx + 1j * dy) if bar else 0.5 * (dx - 1j * dy)


def partial_derivative(field: GridField, direction: int, bar: bool = False,
                       scheme: DerivativeScheme | None = None) -> GridField:
    """Componentwise partial derivative of a tagged field.

    For Kähler charts ``direction`` is a complex index and ``bar`` selects
    ``∂_z̄``; for real charts it is the real axis and ``bar`` must be false.
    """
    chart = field.chart
    if scheme is not None and scheme.kind != DerivativeScheme.of(chart).kind:
        raise SchemeError(f"{scheme.kind} requested on a {DerivativeScheme.of(chart).kind} chart")
    if chart.complex_dim:
        if not 0 <= direction < chart.complex_dim:
            raise IndexError(direction)
        return GridField(wirtinger(chart, field.data, direction, bar), chart, field.tags)
    if bar:
        raise SchemeError("anti-holomorphic derivative requested on a real chart")
    if not 0 <= direction < chart.ndim:
        raise IndexError(direction)
    return GridField(chart.d(field.data, direction, field.rank), chart, field.tags)


def ddbar(chart: Chart, f):
    """``∂_i ∂_j̄ f`` with index order ``[i, j]`` after the grid axes.

    Diagonal entries use the direct second-derivative stencil.
    """
    n = chart.complex_dim
    rows = []
    for i in range(n):
        row = []
        for j in range(n):
            xi, yi, xj, yj = 2 * i, 2 * i + 1, 2 * j, 2 * j + 1
            if i == j:
                v = 0.25 * (chart.d2(f, xi) + chart.d2(f, yi)) + 0j
            else:
                v = 0.25 * (chart.dd(f, xi, xj) + chart.dd(f, yi, yj)
                            + 1j * (chart.dd(f, xi, yj) - chart.dd(f, yi, xj)))
            row.append(v)
        rows.append(np.stack(row, axis=chart.ndim))
    return np.stack(rows, axis=chart.ndim)


def ddhol(chart: Chart, f):
    """``∂_i ∂_k f`` (pure holomorphic type)."""
    n = chart.complex_dim
    rows = []
    for i in range(n):
        row = []
        for k in range(n):
            xi, yi, xk, yk = 2 * i, 2 * i + 1, 2 * k, 2 * k + 1
            row.append(0.25 * (chart.dd(f, xi, xk) - chart.dd(f, yi, yk)
                               - 1j * (chart.dd(f, xi, yk) + chart.dd(f, yi, xk))))
        rows.append(np.stack(row, axis=chart.ndim))
    return np.stack(rows, axis=chart.ndim)


_LETTERS = "abcdefgh"


class KahlerCalculus:
    """Covariant calculus for a Kähler metric on one chart.

    Conventions: ``G[..., i, j] = g_{ij̄}``, ``Ginv[..., i, j] = g^{ij̄}``
    (so ``Ginv = (G^T)^{-1}``), ``Gam[..., k, i, j] = Γ^k_{ij}``.  A tensor's
    signature string lists its lower indices as ``'u'`` (unbarred) or
    ``'b'`` (barred).
    """

    def __init__(self, chart: Chart, G):
        self.chart = chart
        self.n = chart.complex_dim
        self.nd = chart.ndim
        self.G = G
        self.Ginv = np.swapaxes(inverse(G), -1, -2)
        dG = self.grad(G)  # [j, i, l] = ∂_j g_{il̄}
        self.Gam = np.einsum("...kl,...jil->...kij", self.Ginv, dG)

    # plain derivatives -------------------------------------------------
    def grad(self, f, bar: bool = False):
        return np.stack([wirtinger(self.chart, f, k, bar) for k in range(self.n)], axis=self.nd)

    def ddbar(self, f):
        return ddbar(self.chart, f)

    def ddhol(self, f):
        return ddhol(self.chart, f)

    # covariant derivatives --------------------------------------------
    def cov(self, T, sig: str, bar: bool = False):
        """``∇_k T`` (or ``∇_k̄ T``); the new index is placed first.

        Returns the derivative array and its signature.
        """
        D = self.grad(T, bar)
        letters = _LETTERS[:len(sig)]
        comp = "".join(letters)
        target = "b" if bar else "u"
        Gam = np.conj(self.Gam) if bar else self.Gam
        for s, kind in enumerate(sig):
            if kind != target:
                continue
            src = comp[:s] + "p" + comp[s + 1:]
            spec = f"...pk{letters[s]},...{src}->...k{comp}"
            D = D - np.einsum(spec, Gam, T)
        return D, target + sig

    def hess_mixed(self, f, enforce: bool = True):
        """``∇_i∇_j̄ f = ∂_i∂_j̄ f``, Hermitian-enforced by default."""
        H = self.ddbar(f)
        if enforce:
            H = 0.5 * (H + np.conj(np.swapaxes(H, -1, -2)))
        return H

    def hess_pure(self, f, df=None):
        """``∇_i∇_k f = ∂_i∂_k f - Γ^p_{ik} ∂_p f``."""
        df = self.grad(f) if df is None else df
        return self.ddhol(f) - np.einsum("...pik,...p->...ik", self.Gam, df)

    def lap(self, f):
        """Scalar Laplacian ``g^{ij̄} ∂_i ∂_j̄ f`` (real part for real f)."""
        H = self.ddbar(f)
        out = np.einsum("...ij,...ij->...", self.Ginv, H)
        return out.real if not np.iscomplexobj(f) else out

    def norm2_grad(self, f, df=None):
        """``|∇f|² = g^{ij̄} ∂_i f ∂_j̄ f`` for real f."""
        df = self.grad(f) if df is None else df
        return np.einsum("...ij,...i,...j->...", self.Ginv, df, np.conj(df)).real

    def tensor_lap(self, T, sig: str):
        """``½ g^{kl̄}(∇_k∇_l̄ + ∇_l̄∇_k) T``."""
        D1, s1 = self.cov(T, sig, bar=True)
        D2, _ = self.cov(D1, s1, bar=False)      # [k, l̄, ...]
        E1, t1 = self.cov(T, sig, bar=False)
        E2, _ = self.cov(E1, t1, bar=True)       # [l̄, k, ...]
        comp = _LETTERS[:len(sig)]
        a = np.einsum(f"...kl,...kl{comp}->...{comp}", self.Ginv, D2)
        b = np.einsum(f"...kl,...lk{comp}->...{comp}", self.Ginv, E2)
        return 0.5 * (a + b)

    # contractions -----------------------------------------------------
    def mm(self, A, B):
        """``A_{iq̄} g^{pq̄} B_{pj̄}`` for (1,1)-tensors."""
        return np.einsum("...iq,...pq,...pj->...ij", A, self.Ginv, B)

    def riem_dot(self, R, H):
        """``R_{ij̄ pq̄} g^{p s̄} g^{r q̄} H_{r s̄}``."""
        return np.einsum("...ijpq,...ps,...rq,...rs->...ij", R, self.Ginv, self.Ginv, H)


class RiemannCalculus:
    """Levi-Civita calculus for a Riemannian metric on one chart.

    ``G[..., i, j] = g_{ij}``; ``Gam[..., k, i, j] = Γ^k_{ij}``; curvature
    follows ``R_{ijkl} = g_{lm} R^m_{ijk}`` with
    ``R^l_{ijk} = ∂_iΓ^l_{jk} - ∂_jΓ^l_{ik} + Γ^m_{jk}Γ^l_{im} - Γ^m_{ik}Γ^l_{jm}``,
    evaluated from second derivatives of ``g`` so that Christoffel symbols
    are never differentiated.
    """

    def __init__(self, chart: Chart, G):
        self.chart = chart
        self.m = chart.ndim
        self.nd = chart.ndim
        self.G = G
        self.Ginv = inverse(G)
        self.dG = chart.grad(G, rank=2)  # [k, i, j] = ∂_k g_ij
        dG = self.dG
        # Γ_{l,jk} = ½(∂_j g_kl + ∂_k g_jl - ∂_l g_jk)
        self.Gam_low = 0.5 * (np.einsum("...jkl->...ljk", dG) + np.einsum("...kjl->...ljk", dG)
                              - dG)
        self.Gam = np.einsum("...ml,...ljk->...mjk", self.Ginv, self.Gam_low)

    def grad(self, f, rank=None):
        return self.chart.grad(f, rank)

    def cov(self, T, rank: int):
        """``∇_k T`` for a covariant tensor of the given rank; new index first."""
        D = self.chart.grad(T, rank)
        comp = _LETTERS[:rank]
        for s in range(rank):
            src = comp[:s] + "p" + comp[s + 1:]
            D = D - np.einsum(f"...pk{comp[s]},...{src}->...k{comp}", self.Gam, T)
        return D

    def hessian(self, f):
        H = np.stack([np.stack([self.chart.dd(f, i, j, 0) for j in range(self.m)], axis=-1)
                      for i in range(self.m)], axis=-2)
        H = H - np.einsum("...kij,...k->...ij", self.Gam, self.chart.grad(f, 0))
        return 0.5 * (H + np.swapaxes(H, -1, -2))

    def lap(self, f):
        return np.einsum("...ij,...ij->...", self.Ginv, self.hessian(f))

    def norm2_grad(self, f):
        df = self.chart.grad(f, 0)
        return np.einsum("...ij,...i,...j->...", self.Ginv, df, df)

    def tensor_lap(self, T, rank: int):
        D = self.cov(T, rank)
        DD = self.cov(D, rank + 1)  # [l, k, ...]
        comp = _LETTERS[:rank]
        return np.einsum(f"...lk,...lk{comp}->...{comp}", self.Ginv, DD)

    def riemann(self):
        c = self.chart
        m = self.m
        d2G = np.empty(c.shape + (m, m, m, m))
        for a in range(m):
            for b in range(a, m):
                v = c.dd(self.G, a, b, 2)
                d2G[..., a, b, :, :] = v
                d2G[..., b, a, :, :] = v
        # ½(∂_i∂_k g_jl + ∂_j∂_l g_ik - ∂_i∂_l g_jk - ∂_j∂_k g_il)
        R = 0.5 * (np.einsum("...ikjl->...ijkl", d2G) + np.einsum("...jlik->...ijkl", d2G)
                   - np.einsum("...iljk->...ijkl", d2G) - np.einsum("...jkil->...ijkl", d2G))
        Gl = self.Gam_low
        R = R + np.einsum("...mn,...njl,...mik->...ijkl", self.Ginv, Gl, Gl)
        R = R - np.einsum("...mn,...nil,...mjk->...ijkl", self.Ginv, Gl, Gl)
        return R


def complex_hessian(L, metric_calc: KahlerCalculus, return_defect: bool = False):
    """Hermitian matrix field ``∇_i∇_j̄ L`` (Hermitian-ness enforced).

    With ``return_defect`` also returns the pre-enforcement max defect.
    """
    if not isinstance(metric_calc, KahlerCalculus):
        raise SchemeError("complex_hessian requires a Kähler chart")
    H = metric_calc.ddbar(L)
    defect = float(np.abs(H - np.conj(np.swapaxes(H, -1, -2))).max()) if H.size else 0.0
    H = 0.5 * (H + np.conj(np.swapaxes(H, -1, -2)))
    return (H, defect) if return_defect else H


def covariant_hessian_real(L, calc: RiemannCalculus):
    """Symmetric ``∇_i∇_j L = ∂_i∂_j L - Γ^k_{ij} ∂_k L``."""
    if not isinstance(calc, RiemannCalculus):
        raise SchemeError("covariant_hessian_real requires Riemannian Christoffels")
    return calc.hessian(L)


def commutation_residual(v, calc: KahlerCalculus, R, mask=None) -> float:
    """Max-norm of ``∇_k∇_j̄v_i - ∇_j̄∇_kv_i + R_{kj̄il̄} g^{pl̄} v_p``.

    ``v[..., i]`` is a (1,0)-form; ``R`` the curvature ``R_{ij̄kl̄}`` on the
    same chart.
    """
    Dk, sk = calc.cov(v, "u", bar=False)          # [k, i]
    Dkj, _ = calc.cov(Dk, sk, bar=True)           # [j̄, k, i]
    Dj, sj = calc.cov(v, "u", bar=True)           # [j̄, i]
    Djk, _ = calc.cov(Dj, sj, bar=False)          # [k, j̄, i]
    lhs = Djk                                    # ∇_k∇_j̄ v_i as [k, j, i]
    rhs = np.einsum("...jki->...kji", Dkj)       # ∇_j̄∇_k v_i as [k, j, i]
    curv = np.einsum("...kjil,...pl,...p->...kji", R, calc.Ginv, v)
    res = lhs - rhs + curv
    return calc.chart.mask_max(res, mask)


def band_limited_field(chart: Chart, rng: np.random.Generator, modes: int = 3,
                       amplitude: float = 1.0, comps=()):
    """Smooth random real field built from at most ``modes`` Fourier modes per axis.

    Wavelengths are set by each axis extent, so the field is periodic on
    periodic axes and smooth (not periodic) on open ones.  The mode count is
    capped at a quarter of the grid so every mode is resolved.
    """
    shape = chart.shape + tuple(comps)
    out = np.zeros(shape)
    kmax = [min(modes, ax.n // 4) for ax in chart.axes]
    for ks in product(*[range(-k, k + 1) for k in kmax]):
        if all(k == 0 for k in ks):
            continue
        phase = np.zeros(chart.shape)
        for ax, k, X in zip(chart.axes, ks, chart.coords):
            span = ax.hi - ax.lo
            phase = phase + 2.0 * np.pi * k * (X - ax.lo) / span
        norm = 1.0 + sum(k * k for k in ks)
        coef = rng.normal(size=(2,) + tuple(comps)) / norm
        out += (np.multiply.outer(np.cos(phase), coef[0]) + np.multiply.outer(np.sin(phase), coef[1]))
    scale = np.abs(out).max()
    return amplitude * out / scale if scale > 0 else out


def symmetrize_kahler(R):
    """Average ``R_{ij̄kl̄}`` over its index symmetries and conjugation reality."""
    S = 0.25 * (R + np.einsum("...ijkl->...kjil", R) + np.einsum("...ijkl->...ilkj", R)
                + np.einsum("...ijkl->...klij", R))
    return 0.5 * (S + np.conj(np.einsum("...ijkl->...jilk", S)))


def symmetrize_riemann(R):
    """Project onto antisymmetry in (ij), (kl) and pair symmetry."""
    S = 0.5 * (R - np.einsum("...ijkl->...jikl", R))
    S = 0.5 * (S - np.einsum("...ijkl->...ijlk", S))
    return 0.5 * (S + np.einsum("...ijkl->...klij", S))
