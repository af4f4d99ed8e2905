import csv
import json

import numpy as np
import pytest

from lyhkit import cli


def write(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


TORUS = {"model": {"kind": "flat_torus_c", "grid": 16}, "flow": "fixed_kahler", "a": 1.0,
         "initial": {"recipe": "band_limited", "seed": 1, "amplitude": 0.5},
         "t0": 0.1, "T": 0.4, "record_stride": 0.1, "monitors": ["kahler_fixed", "kahler_general"]}


def test_simulate_writes_outputs_and_is_deterministic(tmp_path):
    cfg = write(tmp_path, "t.json", TORUS)
    outs = [tmp_path / "o1", tmp_path / "o2"]
    for o in outs:
        assert cli.main(["simulate", "--config", cfg, "--out", str(o)]) == cli.EXIT_OK
    for name in ("monitors.csv", "series.csv", "report.json", "snapshots/snap_0004.bin"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rows = read_csv(outs[0] / "monitors.csv")
    assert rows[0] == cli.MONITOR_COLUMNS
    assert len(rows) == 1 + 2 * 4
    assert all(float(r[2]) > 0 for r in rows[1:])
    report = json.loads((outs[0] / "report.json").read_text())
    assert report["exit_code"] == 0 and report["monitors"]["kahler_fixed"]["passed"]
    assert report["config_hash"] == cli.config_hash(cli.parse_config(TORUS))


def test_seed_override_changes_data(tmp_path):
    cfg = write(tmp_path, "t.json", TORUS)
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"])
    a = read_csv(tmp_path / "a" / "monitors.csv")
    b = read_csv(tmp_path / "b" / "monitors.csv")
    assert a[1] != b[1]
    assert cli.load_config(cfg, 7).initial.seed == 7


def test_snapshot_round_trip_and_restart(tmp_path):
    cfg = write(tmp_path, "t.json", TORUS)
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
    snap = tmp_path / "o" / "snapshots" / "snap_0002.json"
    head, arrays = cli.read_snapshot(snap)
    assert head["format"] == cli.SNAPSHOT_FORMAT and head["t"] == pytest.approx(0.2)
    assert arrays["L"][0].shape == (16, 16)
    restart = dict(TORUS, initial={"recipe": "file", "path": str(snap)}, t_start=0.2)
    rc = cli.main(["simulate", "--config", write(tmp_path, "r.json", restart), "--out", str(tmp_path / "r")])
    assert rc == cli.EXIT_OK
    full = read_csv(tmp_path / "o" / "series.csv")
    cont = read_csv(tmp_path / "r" / "series.csv")
    last_full = dict(zip(full[0], full[-1]))
    last_cont = dict(zip(cont[0], cont[-1]))
    assert float(last_cont["t"]) == pytest.approx(0.4)
    assert float(last_cont["L_max"]) == pytest.approx(float(last_full["L_max"]), abs=1e-6)
    other = dict(restart, model={"kind": "flat_torus_c", "grid": 8})
    assert cli.main(["simulate", "--config", write(tmp_path, "x.json", other), "--out",
                     str(tmp_path / "x")]) == cli.EXIT_CONFIG


@pytest.mark.parametrize("bad", [
    {"model": {"kind": "nope"}},
    {"model": {"kind": "flat_torus_c"}, "initial": {"recipe": "band_limited"}},
    dict(TORUS, flow="riemannian"),
    dict(TORUS, monitors=["kahler_strange"]),
    dict(TORUS, unknown_key=1),
    dict(TORUS, flow="coupled_krf", reaction={"kind": "table", "points": [0, 1, 2, 3], "values": [0, 1, 2, 3]}),
])
def test_bad_configs_exit_2(tmp_path, bad):
    assert cli.main(["simulate", "--config", write(tmp_path, "b.json", bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_missing_config_and_bad_jobs(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "none.json")]) == cli.EXIT_CONFIG
    cfg = write(tmp_path, "t.json", TORUS)
    assert cli.main(["sweep", "--config", cfg, "--jobs", "0"]) == cli.EXIT_CONFIG


def test_metric_degeneracy_exits_4(tmp_path):
    cfg = {"model": {"kind": "fubini_study_cp1", "grid": 16, "c0": 1.0}, "flow": "coupled_krf", "a": 1.0,
           "initial": {"recipe": "constant", "value": 0.0}, "T": 1.0, "monitors": ["kahler_flow"]}
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", write(tmp_path, "d.json", cfg), "--out", str(out)]) == cli.EXIT_DEGENERATE
    assert json.loads((out / "report.json").read_text())["abort"]["kind"] == "metric_degeneracy"


def test_dt_underflow_exits_3(tmp_path):
    pts = np.linspace(-1, 200, 400)
    cfg = dict(TORUS, a=0.0, T=0.01, monitors=["kahler_fixed"], t0=0.001,
               initial={"recipe": "constant", "value": 1.0},
               reaction={"kind": "table", "points": pts.tolist(), "values": (1000 * pts ** 2).tolist()})
    out = tmp_path / "o"
    rc = cli.main(["simulate", "--config", write(tmp_path, "u.json", cfg), "--out", str(out)])
    assert rc == cli.EXIT_DT
    assert json.loads((out / "report.json").read_text())["abort"]["kind"] == "dt_underflow"


def test_constant_data_reports_ode_error(tmp_path):
    cfg = {"model": {"kind": "flat_torus_c", "grid": 8}, "a": -0.5, "initial": {"recipe": "constant", "value": 0.4},
           "t0": 0.1, "T": 0.5, "monitors": ["kahler_fixed"], "output": {"snapshots": False}}
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", write(tmp_path, "c.json", cfg), "--out", str(out)]) == cli.EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    assert rep["ode"]["max_abs_error"] < 1e-6
    assert not (out / "snapshots").exists()


def test_exact_heat_kernel_run_with_calibrated_tolerance(tmp_path):
    cfg = {"model": {"kind": "flat_patch", "grid": 32, "half_width": 1.0}, "flow": "fixed_kahler", "a": 0.0,
           "initial": {"recipe": "exact", "solution": "heat_kernel"}, "t_start": 0.2, "t0": 0.2, "T": 1.0,
           "record_stride": 0.2, "monitors": [{"variant": "kahler_fixed", "rate": "limit_inverse_t"}],
           "output": {"snapshots": False}, "tolerance": {"calibrate": True}}
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", write(tmp_path, "h.json", cfg), "--out", str(out)]) == cli.EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    assert max(r["rel_error"] for r in rep["oracle"]) < 1e-4
    with pytest.raises(Exception):
        cli.parse_config(dict(cfg, model={"kind": "flat_torus_c", "grid": 16}))


def test_audit_pass_and_fail(tmp_path):
    good = {"model": {"kind": "fubini_study_cp1", "grid": 32}, "audit": {"resolutions": [32, 64]}}
    out = tmp_path / "g"
    assert cli.main(["audit", "--config", write(tmp_path, "g.json", good), "--out", str(out)]) == cli.EXIT_OK
    rows = read_csv(out / "audit.csv")
    assert len(rows) > 1
    data = json.loads((out / "audit.json").read_text())
    assert data["audit"]["passed"]
    bad = {"model": {"kind": "flat_torus_c", "dim": 2, "grid": 8, "perturbation": 0.05,
                     "perturbation_kind": "non_kahler"}}
    assert cli.main(["audit", "--config", write(tmp_path, "b.json", bad), "--out", str(tmp_path / "b")]) == cli.EXIT_FAIL


def test_verify_fixed_metric_studies(tmp_path):
    cfg = {"model": {"kind": "flat_torus_c", "grid": 64}, "a": 1.0, "initial": {"recipe": "band_limited", "seed": 0},
           "studies": ["L32", "L31=L32", {"name": "L41:h"}, "L51"]}
    out = tmp_path / "v"
    assert cli.main(["verify", "--config", write(tmp_path, "v.json", cfg), "--out", str(out), "--jobs", "2"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert "report_L32.json" in names and "residuals_L51.csv" in names
    rep = json.loads((out / "report_L32.json").read_text())
    assert rep["passed"]
    rows = read_csv(out / "residuals_L32.csv")
    assert rows[0][:3] == ["lemma", "resolution", "residual"] and len(rows) == 4


def test_verify_rejects_soliton_without_positive_a(tmp_path):
    cfg = {"model": {"kind": "fubini_study_cp1", "grid": 32}, "flow": "coupled_krf", "a": 0.0,
           "initial": {"recipe": "constant", "value": 0.0}, "studies": ["L33_soliton"]}
    assert cli.main(["verify", "--config", write(tmp_path, "s.json", cfg), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_sweep_rows_order_and_jobs_independence(tmp_path):
    cfg = {"model": {"kind": "flat_torus_c", "grid": 16}, "a": 1.0,
           "initial": {"recipe": "band_limited", "seed": 0, "h": {"mean": 0.5, "amplitude": 0.3}},
           "t0": 0.1, "T": 0.3, "monitors": ["kahler_fixed", {"variant": "constrained_fixed"}],
           "sweep": {"a": [-1, "0+", 1], "seeds": [0, 1, 2]}}
    path = write(tmp_path, "s.json", cfg)
    assert cli.main(["sweep", "--config", path, "--out", str(tmp_path / "s1")]) == cli.EXIT_OK
    assert cli.main(["sweep", "--config", path, "--out", str(tmp_path / "s3"), "--jobs", "3"]) == cli.EXIT_OK
    a = (tmp_path / "s1" / "sweep.csv").read_bytes()
    assert a == (tmp_path / "s3" / "sweep.csv").read_bytes()
    rows = read_csv(tmp_path / "s1" / "sweep.csv")
    head = rows[0]
    assert head[:4] == ["cell", "a", "c0", "seed"] and "min_constrained_fixed" in head
    body = [dict(zip(head, r)) for r in rows[1:]]
    assert len(body) == 9
    assert [r["cell"] for r in body] == [str(i) for i in range(9)]
    assert {r["rate_family"] for r in body if r["a"] == "0+"} == {"limit_inverse_t"}
    assert [r["a"] for r in body[::3]] == ["-1.0", "0+", "1.0"]


def test_sweep_cap_and_empty_grid(tmp_path):
    base = dict(TORUS, monitors=["kahler_fixed"])
    big = dict(base, sweep={"a": list(range(1, 9)), "seeds": list(range(9))})
    assert cli.main(["sweep", "--config", write(tmp_path, "big.json", big), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    empty = dict(base, sweep={"a": []})
    assert cli.main(["sweep", "--config", write(tmp_path, "e.json", empty), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_parser_requires_command_and_config():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args([])
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["simulate"])
