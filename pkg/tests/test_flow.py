import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyhkit.discretization import band_limited_field
from lyhkit.flow import (DtUnderflowError, FlowConfig, FlowState, MetricDegeneracyError, Reaction,
                         ReactionError, constant_state, integrate, polar_filter, rhs_coupled_krf,
                         rhs_fixed_kahler, rhs_riemannian)
from lyhkit.geometry import ManifoldModel, build_metric
from lyhkit.harnack import HarnackMonitor, RateFunction
from lyhkit.verify import (CP1Scale, ConstantODE, HeatKernel, exact_boundary, exact_state,
                           oracle_compare)


def test_reaction_linear_and_table_agree_on_a_line():
    lin = Reaction.linear(0.7)
    pts = np.linspace(-3, 3, 13)
    tab = Reaction.table(pts, 0.7 * pts)
    L = np.linspace(-2.5, 2.5, 11)
    np.testing.assert_allclose(tab(L), lin(L), atol=1e-12)
    np.testing.assert_allclose(tab.d1(L), 0.7, atol=1e-12)
    np.testing.assert_allclose(tab.d2(L), 0.0, atol=1e-10)
    assert np.all(lin.d2(L) == 0)


def test_reaction_table_rejects_bad_input_and_out_of_range():
    with pytest.raises(ValueError):
        Reaction.table([0, 1, 2], [0, 1, 2])
    with pytest.raises(ValueError):
        Reaction.table([0, 2, 1, 3], [0, 1, 2, 3])
    with pytest.raises(ValueError):
        Reaction("quadratic")
    tab = Reaction.table([0, 1, 2, 3], [0, 1, 4, 9])
    with pytest.raises(ReactionError):
        tab(np.array([3.5]))


def test_flow_config_validation_and_schedule():
    for kw in ({"flow": "ricci"}, {"cfl": 0.0}, {"cfl": 1.5}, {"t0": -1.0}, {"record_stride": 0.0},
               {"dt": -1e-3}, {"integrator": "Euler"}):
        with pytest.raises(ValueError):
            FlowConfig(T=1.0, **kw)
    cfg = FlowConfig(T=1.0, record_stride=0.25, record_times=(0.1, 2.0))
    assert cfg.schedule(0.0) == [0.1, 0.25, 0.5, 0.75, 1.0]
    assert cfg.schedule(0.6) == [0.85, 1.0]


def test_state_shape_and_constraint_checks():
    model = ManifoldModel.flat_torus_c(grid=8)
    g = build_metric(model)
    with pytest.raises(ValueError):
        FlowState(0.0, g, [np.zeros((4, 4))], 0.0, model)
    st_ = FlowState(0.0, g, [np.zeros((8, 8))], 0.0, model, Lv=[np.full((8, 8), 0.1)])
    with pytest.raises(ValueError):
        st_.check_constraint()
    with pytest.raises(ValueError):
        integrate(st_, FlowConfig(T=0.1))
    with pytest.raises(ValueError):
        integrate(constant_state(model, 0.0, 0.0, t=1.0), FlowConfig(T=0.5))


def test_rhs_requires_matching_geometry():
    sph = ManifoldModel.round_sphere(grid=8)
    tor = ManifoldModel.flat_torus_c(grid=8)
    with pytest.raises(ValueError):
        rhs_fixed_kahler(constant_state(sph, 0.0, 0.0))
    with pytest.raises(ValueError):
        rhs_coupled_krf(constant_state(sph, 0.0, 0.0))
    with pytest.raises(ValueError):
        rhs_riemannian(constant_state(tor, 0.0, 0.0))
    with pytest.raises(ValueError):
        integrate(constant_state(sph, 0.0, 0.0), FlowConfig(T=0.1, flow="fixed_kahler"))


@settings(max_examples=10, deadline=None)
@given(a=st.floats(-1.5, 1.5), L0=st.floats(-2, 2))
def test_constant_data_follows_linear_ode_on_torus(a, L0):
    model = ManifoldModel.flat_torus_c(grid=8)
    traj = integrate(constant_state(model, L0, a), FlowConfig(T=0.5, record_stride=0.25, dt=0.005))
    exact = ConstantODE(a=a, L0=L0, R=0.0).value(traj.times)
    got = np.array([s.L[0].mean() for s in traj.snapshots])
    np.testing.assert_allclose(got, exact, rtol=1e-9, atol=1e-10)
    assert np.ptp(traj.snapshots[-1].L[0]) < 1e-12


def test_record_times_are_hit_exactly_and_monitors_respect_t0():
    model = ManifoldModel.flat_torus_c(grid=16)
    rng = np.random.default_rng(0)
    L = band_limited_field(model.charts[0], rng, modes=3, amplitude=0.5)
    mon = HarnackMonitor("kahler_fixed", RateFunction("kahler_exp", 1.0))
    cfg = FlowConfig(T=0.3, t0=0.1, record_stride=0.05)
    traj = integrate(FlowState(0.0, build_metric(model), [L], 1.0, model), cfg, [mon])
    assert traj.times.tolist() == [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
    out = traj.monitors[mon.name]
    assert out[0] is None and out[1] is None
    assert all(r.global_min > 0 for r in out[2:])
    assert traj.index(0.2) == 4
    with pytest.raises(KeyError):
        traj.index(0.123)
    with pytest.raises(ValueError):
        integrate(FlowState(0.0, build_metric(model), [L], 1.0, model), FlowConfig(T=0.1), [mon])


def test_integration_is_deterministic():
    model = ManifoldModel.flat_torus_c(grid=16)
    L = band_limited_field(model.charts[0], np.random.default_rng(4), modes=3)
    runs = [integrate(FlowState(0.0, build_metric(model), [L], -0.5, model), FlowConfig(T=0.2))
            for _ in range(2)]
    np.testing.assert_array_equal(runs[0].snapshots[-1].L[0], runs[1].snapshots[-1].L[0])
    np.testing.assert_array_equal(runs[0].step_dt, runs[1].step_dt)


def test_heat_kernel_with_exact_boundary_matches_oracle():
    sol = HeatKernel(n=1)
    model = ManifoldModel.flat_patch(n=1, grid=32, half_width=1.0)
    cfg = FlowConfig(T=1.0, t0=0.2, record_stride=0.2, boundary=exact_boundary(sol, model))
    traj = integrate(exact_state(sol, model, 0.2), cfg)
    rows = oracle_compare(traj, sol)
    assert rows[0]["abs_error"] < 1e-14
    assert max(r["rel_error"] for r in rows) < 1e-4


def test_coupled_flow_on_flat_torus_scales_the_metric():
    model = ManifoldModel.flat_torus_c(grid=8)
    cfg = FlowConfig(T=0.4, flow="coupled_krf", record_stride=0.2, dt=0.005)
    traj = integrate(constant_state(model, 0.0, 0.5), cfg)
    G = traj.snapshots[-1].metric.values[0][..., 0, 0].real
    np.testing.assert_allclose(G, math.exp(0.5 * 0.4), rtol=1e-10)


def test_coupled_flow_on_cp1_tracks_scale_and_ode():
    a, c0 = 1.0, 1.5
    model = ManifoldModel.fubini_study_cp1(c0=c0, grid=32)
    traj = integrate(constant_state(model, 0.2, a), FlowConfig(T=0.3, flow="coupled_krf", record_stride=0.1))
    metric_err = max(r["rel_error"] for r in oracle_compare(traj, CP1Scale(a=a, c0=c0)))
    assert metric_err < 1e-2
    ode = ConstantODE(a=a, L0=0.2, R=CP1Scale(a=a, c0=c0))
    last = traj.snapshots[-1]
    ch = model.charts[0]
    assert ch.mask_max(last.L[0] - float(ode.value(last.t)), ch.owned) < 1e-2


def test_cp1_collapse_raises_degeneracy():
    model = ManifoldModel.fubini_study_cp1(c0=1.0, grid=16)
    assert CP1Scale(a=0.0, c0=1.0).collapse_time == 0.5
    with pytest.raises(MetricDegeneracyError) as info:
        integrate(constant_state(model, 0.0, 0.0), FlowConfig(T=0.6, flow="coupled_krf"))
    assert 0.4 < info.value.t <= 0.5


def test_blow_up_aborts_with_dt_underflow_near_blow_up_time():
    # L' = 1000 L² from L = 1 blows up at t = 1e-3
    pts = np.linspace(-1, 200, 400)
    F = Reaction.table(pts, 1000 * pts ** 2)
    model = ManifoldModel.flat_torus_c(grid=8)
    with pytest.raises(DtUnderflowError) as info:
        integrate(constant_state(model, 1.0, 0.0), FlowConfig(T=0.01, reaction=F, dt_min=1e-7))
    assert 5e-4 < info.value.t < 1.1e-3


def test_riemannian_sphere_constant_data_and_polar_filter():
    model = ManifoldModel.round_sphere(grid=16)
    traj = integrate(constant_state(model, 0.5, -1.0), FlowConfig(T=0.2, flow="riemannian", cfl=0.05))
    np.testing.assert_allclose(traj.snapshots[-1].L[0], 0.5 * math.exp(-0.2), rtol=1e-8)
    ch = model.charts[0]
    th, ph = ch.coords
    low = np.sin(th) * np.cos(ph)
    np.testing.assert_allclose(polar_filter(model, low, dt=1e-3), low, atol=1e-12)
    high = np.cos(7 * ph) * np.ones_like(th)
    filtered = polar_filter(model, high, dt=1e-1)
    assert np.abs(filtered[0]).max() < 1e-12
    tor = ManifoldModel.flat_torus_c(grid=8)
    x = np.ones(tor.charts[0].shape)
    assert polar_filter(tor, x, dt=1.0) is x
