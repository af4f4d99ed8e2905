import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyhkit.discretization import band_limited_field
from lyhkit.flow import FlowConfig, FlowState, constant_state, integrate
from lyhkit.geometry import ManifoldModel, MetricField, build_metric
from lyhkit.harnack import (ConstraintError, RateFunction, TolerancePolicy, constrained_term,
                            f_condition_residual, g_function, harnack_matrix, k_threshold,
                            min_eig_monitor, pencil_eigenvalues, rate_function)
from lyhkit.verify import HeatKernel, LogQuadratic, exact_boundary, exact_state


def test_rate_function_values():
    f, fp = rate_function("kahler_exp", 1.0, 1.0)
    assert f == pytest.approx(1.581977, abs=1e-6)
    assert fp == pytest.approx(-math.exp(-1) / (1 - math.exp(-1)) ** 2, rel=1e-12)
    assert rate_function("limit_inverse_t", 0.0, 2.0) == (0.5, -0.25)
    assert rate_function("riemannian_exp", 1.0, 1.0)[0] == pytest.approx(0.790989, abs=1e-6)
    assert rate_function("kahler_exp", 0.0, 2.0) == pytest.approx((0.5, -0.25))
    with pytest.raises(ValueError):
        rate_function("kahler_exp", 1.0, 0.0)
    with pytest.raises(ValueError):
        RateFunction("cosh")


@pytest.mark.parametrize("a", [1e-9, -1e-9, 1e-7])
def test_series_branch_matches_inverse_t(a):
    for t in (0.1, 1.0, 3.0):
        f, fp = rate_function("kahler_exp", a, t)
        assert f == pytest.approx(1 / t, rel=1e-6)
        assert fp == pytest.approx(-1 / t ** 2, rel=1e-6)


def test_series_branch_agrees_with_closed_form_at_cutoff():
    for a in (0.999e-6, -0.999e-6):
        f, fp = rate_function("kahler_exp", a, 1.0)
        assert f == pytest.approx(a / -math.expm1(-a), rel=1e-12)


def test_user_table_rate():
    ts = np.linspace(0.1, 2, 20)
    rate = RateFunction("user_table", times=tuple(ts), values=tuple(1 / ts))
    assert rate(1.0) == pytest.approx(1.0, rel=1e-3)
    with pytest.raises(ValueError):
        rate(3.0)
    with pytest.raises(ValueError):
        RateFunction("user_table", times=(1.0, 2.0), values=(1.0, 2.0))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-3, 3).filter(lambda x: abs(x) > 1e-3), t=st.floats(0.05, 5))
def test_canonical_f_conditions_vanish(a, t):
    for family, case in (("riemannian_exp", "riemannian"), ("kahler_exp", "kahler")):
        rate = RateFunction(family, a)
        scale = 1 + rate(t) ** 2
        assert abs(f_condition_residual(rate, a, t, case)) <= 1e-12 * scale


def test_f_condition_inverse_t_and_range_minimum():
    rate = RateFunction("limit_inverse_t")
    assert f_condition_residual(rate, 0.0, 2.0, "riemannian") == pytest.approx(0.25)
    # affine in F', so the minimum is at the larger end for positive f
    assert f_condition_residual(rate, (0.0, 1.0), 1.0, "kahler") == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        f_condition_residual(rate, 0.0, 1.0, "hyperbolic")


def test_g_function_and_threshold():
    assert g_function(0.5) == pytest.approx(-0.848392, abs=1e-6)
    assert k_threshold(0.5) == pytest.approx(0.848392, abs=1e-6)
    h = np.linspace(0, 1, 1002)[1:-1]
    G = g_function(h)
    assert np.all(np.diff(G) > 0) and np.all(G < 0)
    assert abs(g_function(1 - 1e-6)) < 1e-5
    np.testing.assert_allclose(k_threshold(h), -G, atol=1e-12)
    for bad in (0.0, 1.0, -0.5, 2.0):
        with pytest.raises(ValueError):
            g_function(bad)
        with pytest.raises(ValueError):
            k_threshold(bad)


def test_pencil_eigenvalues_scale_and_identity():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 2, 2)) + 1j * rng.normal(size=(5, 2, 2))
    G = A @ np.conj(np.swapaxes(A, -1, -2)) + np.eye(2)
    B = rng.normal(size=(5, 2, 2)) + 1j * rng.normal(size=(5, 2, 2))
    P = B + np.conj(np.swapaxes(B, -1, -2))
    ev = pencil_eigenvalues(P, G)
    np.testing.assert_allclose(pencil_eigenvalues(4 * P, 4 * G), ev, atol=1e-12)
    np.testing.assert_allclose(pencil_eigenvalues(G, G), 1.0, atol=1e-12)
    ref = np.sort(np.linalg.eigvals(np.linalg.solve(G, P)).real, axis=-1)
    np.testing.assert_allclose(ev, ref, atol=1e-10)


def test_constant_data_gives_rate_times_metric():
    model = ManifoldModel.flat_torus_c(n=2, grid=8)
    state = constant_state(model, 0.3, 1.0, t=0.5)
    rate = RateFunction("kahler_exp", 1.0)
    rep = harnack_matrix(state, "kahler_fixed", rate)
    assert rep.global_min == pytest.approx(rate(0.5), rel=1e-12)
    scaled = FlowState(0.5, MetricField([4 * G for G in state.metric.values], True, 0.5), state.L, 1.0, model)
    assert harnack_matrix(scaled, "kahler_fixed", rate).global_min == pytest.approx(rep.global_min, rel=1e-12)


def test_heat_kernel_equality_case_is_zero():
    sol = HeatKernel(n=2)
    model = ManifoldModel.flat_patch(n=2, grid=12, half_width=1.0)
    rep = harnack_matrix(exact_state(sol, model, 0.7), "kahler_general", sol.rate())
    assert abs(rep.global_min) < 1e-10
    for P in rep.P:
        np.testing.assert_array_equal(P, np.conj(np.swapaxes(P, -1, -2)))


def test_log_quadratic_equality_run_stays_within_tolerance():
    sol = LogQuadratic(a=1.0, t0=0.2)
    model = ManifoldModel.flat_patch(n=1, grid=32, half_width=1.0)
    cfg = FlowConfig(T=1.0, t0=0.2, record_stride=0.2, boundary=exact_boundary(sol, model))
    traj = integrate(exact_state(sol, model, 0.2), cfg)
    series = min_eig_monitor(traj, "kahler_fixed", sol.rate(), TolerancePolicy(C1=4e-5, C2=7e-4))
    assert series.passed
    assert abs(series.minimum) < series.tolerance


def test_constrained_term_constant_h_and_rank_one():
    model = ManifoldModel.flat_torus_c(grid=16)
    g = build_metric(model)
    L = band_limited_field(model.charts[0], np.random.default_rng(1), modes=3)
    st_half = FlowState(0.1, g, [L], 0.0, model, [L + math.log(0.5)])
    assert np.abs(constrained_term(st_half)[0]).max() < 1e-12
    h = 0.5 + 0.3 * band_limited_field(model.charts[0], np.random.default_rng(2), modes=3, amplitude=1.0)
    T = constrained_term(FlowState(0.1, g, [L], 0.0, model, [L + np.log(h)]))[0]
    assert T[..., 0, 0].real.min() >= 0
    with pytest.raises(ConstraintError) as info:
        constrained_term(FlowState(0.1, g, [L], 0.0, model, [L + 0.1]))
    assert len(info.value.points) == 16 * 16


def test_constrained_term_matches_sine_oracle():
    P = 2 * np.pi
    model = ManifoldModel.flat_torus_c(grid=32, periods=P)
    ch = model.charts[0]
    x = ch.coords[0]
    h = 0.5 + 0.1 * np.sin(2 * np.pi * x / P)
    L = np.zeros(ch.shape)
    T = constrained_term(FlowState(0.1, build_metric(model), [L], 0.0, model, [np.log(h)]))[0]
    # ∂_z h = ½ ∂_x h for a function of x alone
    dz = 0.5 * 0.1 * (2 * np.pi / P) * np.cos(2 * np.pi * x / P)
    np.testing.assert_allclose(T[..., 0, 0].real, dz ** 2 / (1 - h * h), atol=1e-12)


def test_variant_ingredients_and_nesting():
    model = ManifoldModel.flat_torus_c(grid=16)
    g = build_metric(model)
    rng = np.random.default_rng(5)
    L = band_limited_field(model.charts[0], rng, modes=3)
    h = 0.5 + 0.3 * band_limited_field(model.charts[0], rng, modes=3, amplitude=1.0)
    state = FlowState(0.3, g, [L], 1.0, model, [L + np.log(h)])
    rate = RateFunction("kahler_exp", 1.0)
    fixed = harnack_matrix(state, "kahler_fixed", rate)
    constrained = harnack_matrix(state, "constrained_fixed", rate)
    assert np.all(constrained.min_eig_field[0] <= fixed.min_eig_field[0] + 1e-14)
    with pytest.raises(ValueError):
        harnack_matrix(FlowState(0.3, g, [L], 1.0, model), "constrained_fixed", rate)
    with pytest.raises(ValueError):
        harnack_matrix(state, "riemannian_general", rate)
    with pytest.raises(ValueError):
        harnack_matrix(state, "kahler_strange", rate)
    sph = ManifoldModel.round_sphere(grid=8)
    with pytest.raises(ValueError):
        harnack_matrix(constant_state(sph, 0.0, 1.0, t=0.5), "kahler_fixed", rate)


def test_min_eig_field_bounds_rayleigh_quotients():
    model = ManifoldModel.flat_torus_c(n=2, grid=8, perturbation=0.05, perturbation_seed=1)
    g = build_metric(model)
    rng = np.random.default_rng(3)
    L = band_limited_field(model.charts[0], rng, modes=2)
    rep = harnack_matrix(FlowState(0.5, g, [L], 1.0, model), "kahler_fixed", RateFunction("kahler_exp", 1.0))
    P, G = rep.P[0], g.values[0]
    for _ in range(5):
        v = rng.normal(size=2) + 1j * rng.normal(size=2)
        q = (np.einsum("...ij,i,j->...", P, np.conj(v), v) / np.einsum("...ij,i,j->...", G, np.conj(v), v)).real
        assert np.all(rep.min_eig_field[0] <= q + 1e-12)


def test_under_compensated_monitor_fails():
    sol = HeatKernel(n=1)
    model = ManifoldModel.flat_patch(n=1, grid=24, half_width=1.0)
    cfg = FlowConfig(T=0.6, t0=0.2, record_stride=0.1, boundary=exact_boundary(sol, model))
    traj = integrate(exact_state(sol, model, 0.2), cfg)
    good = min_eig_monitor(traj, "kahler_fixed", sol.rate(), TolerancePolicy(C1=4e-5, C2=7e-4))
    weak = min_eig_monitor(traj, "kahler_fixed", RateFunction("limit_inverse_t", scale=0.1),
                           TolerancePolicy(C1=4e-5, C2=7e-4))
    assert good.passed
    assert not weak.passed and weak.minimum < -1


def test_tolerance_policy_terms():
    pol = TolerancePolicy(C1=2.0, C2=3.0, p=4, floor=1e-9, factor=3)
    assert pol.noise(0.5, 0.025) == pytest.approx(2 * 0.5 ** 4 + 3 * 0.1 ** 4 + 1e-9)
    assert pol.tol(0.5, 0.025) == pytest.approx(3 * pol.noise(0.5, 0.025))
    assert TolerancePolicy().to_dict()["factor"] == 3.0
