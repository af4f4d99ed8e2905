"""Acceptance criteria, one test per criterion.

Each test records a line ``AC<n> PASS|FAIL <details>``; ``conftest.py``
prints them together at the end of the run.
"""

import math
import time

import numpy as np
import pytest

from lyhkit import cli
from lyhkit import verify as V
from lyhkit.discretization import band_limited_field
from lyhkit.flow import FlowConfig, constant_state, integrate
from lyhkit.geometry import (ManifoldModel, build_metric, curvature_pack, parallel_ricci_residual,
                             sectional_curvature)
from lyhkit.harnack import (RateFunction, f_condition_residual, g_function, k_threshold,
                            min_eig_monitor)

SEEDS = (0, 1, 2)


@pytest.fixture
def report(record_property):
    def emit(n, ok, detail):
        line = f"AC{n} {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        record_property("acceptance", line)
        assert ok, line
    return emit


@pytest.fixture(scope="module")
def policy():
    return V.calibrate_tolerance()[0]


@pytest.fixture(scope="module")
def cp1_runs():
    """Coupled CP¹ trajectories shared by the monitor and Ricci Harnack criteria."""
    return {}


def test_ac1_curvature_audits(report):
    start = time.perf_counter()
    cp1 = V.audit_study(ManifoldModel.fubini_study_cp1(grid=128), (64, 128, 256))
    at128 = cp1["reports"][1]
    torus = V.audit_study(ManifoldModel.flat_torus_c(n=2, grid=8), (8, 16))
    torus_zero = all(r["max_residual"] == 0 and r["max_raw"] == 0 for r in torus["reports"])
    elapsed = time.perf_counter() - start
    raw_orders = {k: v for k, v in cp1["orders"].items() if v != "exact"}
    ok = cp1["passed"] and at128["max_residual"] < 1e-6 and torus_zero and elapsed < 10
    report(1, ok, f"CP1@128 max residual {at128['max_residual']:.1e}, non-exact orders {raw_orders}, "
                  f"torus exactly zero {torus_zero}, {elapsed:.1f}s")


def test_ac2_einstein_and_sphere(report):
    fs = ManifoldModel.fubini_study_cp1(c0=1.0, grid=768, half_width=1.2)
    g = build_metric(fs)
    pack = curvature_pack(g, fs)
    ric = max(ch.mask_max(pack.ricci[c] - 2 * g.values[c], ch.owned) for c, ch in enumerate(fs.charts))
    sph = ManifoldModel.round_sphere(grid=32)
    sp = curvature_pack(build_metric(sph), sph)
    K = np.abs(sectional_curvature(sp) - 1)[sph.charts[0].owned].max()
    par = [parallel_ricci_residual(curvature_pack(build_metric(m), m))
                         for m in (ManifoldModel.round_sphere(grid=n) for n in (16, 32, 64))]
    ok = ric < 1e-8 and K < 1e-8 and max(par) < 1e-8
    report(2, ok, f"|Ric-2g| {ric:.1e} (768-pt chart), |K-1| {K:.1e}, ∇Ric on S2 "
                  f"{', '.join(f'{p:.1e}' for p in par)} (spectral)")


def test_ac3_commutation(report):
    rep = V.commutation_study(ManifoldModel.fubini_study_cp1(grid=64), (64, 128, 256))
    report(3, rep.passed and rep.order >= 2,
           f"residuals {', '.join(f'{r:.1e}' for r in rep.residuals)}, order {rep.order:.2f}")


def test_ac4_lemma_suite(report):
    start = time.perf_counter()
    agree = [V.l31_l32_agreement(n) for n in V.STUDY_SETUPS["L32"][1]]
    diffs = [d for d, _ in agree]
    rhs_diffs = [d for _, d in agree]
    l32 = V.lemma_study("L32")
    soliton = V.l33_soliton_residual()
    l41 = V.lemma_study("L41")
    l41h = V.lemma_study("L41", part="h")
    l51 = V.lemma_study("L51")
    elapsed = time.perf_counter() - start
    orders = {"L32": l32.order, "L41": l41.order, "L41:h": l41h.order, "L51": l51.order}
    ok = (max(diffs) <= 1e-12 and soliton.residual < 1e-8 and all(o >= 1.8 for o in orders.values())
          and elapsed < 300)
    report(4, ok, f"L31-L32 residuals {max(diffs):.1e} (rhs {max(rhs_diffs):.1e}), L33 soliton {soliton.residual:.1e}, orders "
                  f"{ {k: round(v, 2) for k, v in orders.items()} }, {elapsed:.0f}s")


def test_ac5_equality_cases(report, policy):
    model = ManifoldModel.flat_patch(n=1, grid=32, half_width=1.0)
    heat = V.HeatKernel(n=1)
    traj = integrate(V.exact_state(heat, model, 0.2),
                     FlowConfig(T=1.0, t0=0.2, record_stride=0.1, boundary=V.exact_boundary(heat, model)))
    hs = min_eig_monitor(traj, "kahler_fixed", heat.rate(), policy)
    heat_worst = float(np.abs(hs.minima).max())
    lq = V.LogQuadratic(a=1.0, t0=0.2)
    traj = integrate(V.exact_state(lq, model, 0.2),
                     FlowConfig(T=1.0, t0=0.2, record_stride=0.1, boundary=V.exact_boundary(lq, model)))
    ls = min_eig_monitor(traj, "kahler_fixed", lq.rate(), policy)
    lq_worst = float(np.abs(ls.minima).max())
    rel = V.oracle_compare(traj, lq)[-1]["rel_error"]
    ok = heat_worst <= hs.tolerance and lq_worst <= ls.tolerance and rel < 1e-4
    report(5, ok, f"heat |min| {heat_worst:.1e}, log-quadratic |min| {lq_worst:.1e} "
                  f"(tol {hs.tolerance:.1e}), log-quadratic rel error at t=1 {rel:.1e}")


TORUS = {"kind": "flat_torus_c", "grid": 64}
THEOREM_RUNS = [
    # label, model, flow, a, variant, T, with h
    ("fixed a=1", TORUS, "fixed_kahler", 1.0, "kahler_fixed", 1.0, False),
    ("fixed a=-1", TORUS, "fixed_kahler", -1.0, "kahler_fixed", 1.0, False),
    ("flow CP1 c0=1", {"kind": "fubini_study_cp1", "grid": 64, "c0": 1.0}, "coupled_krf", 1.0,
     "kahler_flow", 0.5, False),
    ("flow CP1 c0=2", {"kind": "fubini_study_cp1", "grid": 64, "c0": 2.0}, "coupled_krf", 1.0,
     "kahler_flow", 1.0, False),
    ("flow torus", TORUS, "coupled_krf", 1.0, "kahler_flow", 1.0, False),
    ("constrained fixed", TORUS, "fixed_kahler", 1.0, "constrained_fixed", 1.0, True),
    ("constrained flow", TORUS, "coupled_krf", 1.0, "constrained_flow", 1.0, True),
    ("riemannian S2", {"kind": "round_sphere", "grid": 64}, "riemannian", 1.0, "riemannian_general", 1.0, False),
    ("general F=aL", TORUS, "fixed_kahler", 1.0, "kahler_general", 1.0, False),
]


def theorem_config(model, flow, a, variant, T, with_h, seed):
    init = {"recipe": "band_limited", "seed": seed, "amplitude": 0.5}
    if with_h:
        init["h"] = {"mean": 0.5, "amplitude": 0.3}
    return cli.parse_config({"model": model, "flow": flow, "a": a, "initial": init, "t0": 0.1, "T": T,
                             "record_stride": 0.1, "monitors": [variant], "tolerance": {"calibrate": True},
                             "output": {"snapshots": False}})


def test_ac6_theorem_monitors(report, cp1_runs):
    start = time.perf_counter()
    worst, failures = {}, []
    for label, model, flow, a, variant, T, with_h in THEOREM_RUNS:
        for seed in SEEDS:
            res = cli.run_simulation(theorem_config(model, flow, a, variant, T, with_h, seed))
            mon = res["summary"].get("monitors", {}).get(variant)
            if res["exit"] != cli.EXIT_OK or mon is None:
                failures.append((label, seed, res["exit"]))
                continue
            worst[label] = min(worst.get(label, math.inf), mon["minimum"])
            if model["kind"] == "fubini_study_cp1":
                cp1_runs[(model["c0"], seed)] = res["trajectory"]
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 600
    report(6, ok, f"{len(THEOREM_RUNS) * len(SEEDS) - len(failures)}/{len(THEOREM_RUNS) * len(SEEDS)} runs "
                  f"pass, worst minima { {k: round(v, 3) for k, v in worst.items()} }, {elapsed:.0f}s")


def test_ac7_rate_algebra(report):
    worst = 0.0
    for a in (-2.0, -0.5, 0.5, 1.0, 3.0):
        for t in np.linspace(0.05, 5, 40):
            for fam, case in (("riemannian_exp", "riemannian"), ("kahler_exp", "kahler")):
                rate = RateFunction(fam, a)
                worst = max(worst, abs(f_condition_residual(rate, a, t, case)) / (1 + rate(t) ** 2))
    h = np.linspace(0, 1, 1002)[1:-1]
    G = g_function(h)
    monotone = bool(np.all(np.diff(G) > 0) and np.all(G < 0))
    ident = float(np.abs(k_threshold(h) + G).max())
    ok = worst <= 1e-12 and monotone and ident <= 1e-12
    report(7, ok, f"f-condition residual {worst:.1e}, G increasing and negative {monotone}, "
                  f"|k(c)+G(c)| {ident:.1e}")


def test_ac8_reparametrization(report):
    model = ManifoldModel.fubini_study_cp1(c0=2.0, grid=32, perturbation=0.2)
    ghat = integrate(constant_state(model, 0.0, 0.0), FlowConfig(T=0.3, flow="coupled_krf", record_stride=0.0025))
    rep = V.reparam_study(ghat, 1.0)
    c36 = V.reparam_harnack_check(ghat, 1.0)
    mismatch = max(c36["tensor_mismatch"], c36["eigen_mismatch"])
    ok = rep.passed and rep.order >= 1.8 and mismatch <= 1e-8
    report(8, ok, f"flow residuals {', '.join(f'{r:.1e}' for r in rep.residuals)}, order {rep.order:.2f}, "
                  f"monitor equivalence {mismatch:.1e}")


def band_limited_vector_fields(model, count, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        out.append([band_limited_field(ch, rng, modes=2, comps=(1,))
                    + 1j * band_limited_field(ch, rng, modes=2, comps=(1,)) for ch in model.charts])
    return out


def test_ac9_ricci_harnack(report, cp1_runs, policy):
    trajs = dict(cp1_runs)
    model = ManifoldModel.fubini_study_cp1(c0=2.0, grid=32, perturbation=0.2)
    trajs["perturbed"] = integrate(constant_state(model, 0.0, 1.0),
                                   FlowConfig(T=0.5, t0=0.1, flow="coupled_krf", record_stride=0.01))
    if len(trajs) == 1:  # monitor runs not cached (criterion run alone)
        for c0, T in ((1.0, 0.5), (2.0, 1.0)):
            m = ManifoldModel.fubini_study_cp1(c0=c0, grid=64)
            trajs[(c0, 0)] = integrate(constant_state(m, 0.0, 1.0),
                                       FlowConfig(T=T, t0=0.1, flow="coupled_krf", record_stride=0.1))
    worst, failed = math.inf, []
    for key, traj in trajs.items():
        m = traj.snapshots[0].model
        X = band_limited_vector_fields(m, 5, seed=1)
        rep = V.lyh_rescaled_check(traj, X=X, t_min=0.1 - 1e-12)
        tol = policy.tol(m.h, float(traj.step_dt.max()))
        worst = min(worst, rep.minimum)
        if not rep.passed(tol):
            failed.append(key)
    report(9, not failed, f"{len(trajs)} CP1 runs, X = 0 plus 5 band-limited fields, worst minimum {worst:.3f}")


def test_ac10_determinism(report, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text('{"model": {"kind": "flat_torus_c", "grid": 32}, "a": 1.0, '
                   '"initial": {"recipe": "band_limited", "seed": 3}, "t0": 0.1, "T": 0.5, '
                   '"monitors": ["kahler_fixed", "kahler_general"]}')
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(out), "--seed", "11"]) == 0
        outs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    same = outs[0] == outs[1]
    report(10, same and len(outs[0]) > 3, f"{len(outs[0])} output files byte-identical {same}")
