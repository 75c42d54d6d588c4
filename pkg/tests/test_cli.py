import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from avcbf import cli, report, sim
from avcbf.acc import AccParams, BoundProfile, make_scenario
from avcbf.integrate import IntegrationError
from avcbf.sim import run_closed_loop


def write(tmp_path: Path, text: str, name: str = "case.ini") -> Path:
    p = tmp_path / name
    p.write_text(text.strip() + "\n", encoding="utf-8")
    return p


FIG1 = """
[plant]
[method]
name = avcbf
preset = fig1
"""


def test_preset_expansion(tmp_path):
    s = cli.load_scenario(write(tmp_path, FIG1))
    p = s.params
    assert s.plant0.v == 6.0
    assert (p.k1, p.k2, p.l1, p.l2, p.W1, p.Q, p.a1w) == (0.1, 0.1, 0.1, 0.1, 1000.0, 1000.0, 1.0)
    assert s.acc == AccParams()
    assert s.T == 50.0 and s.dt == 0.1


def test_overrides(tmp_path):
    s = cli.load_scenario(write(tmp_path, """
[plant]
v_p = 12.5
z0 = 80
[method]
name = avcbf
preset = fig34
a1w = 0
a1 = 2.0
[bounds]
kind = piecewise
points = 0:0.4, 20:0.23, 50:0.23
[run]
T = 20
integrator = rk4
substep = 0.002
"""))
    assert s.acc.v_p == 12.5 and s.plant0.z == 80.0 and s.plant0.v == 20.0
    assert s.params.a1w == 0.0 and s.aux0.a1 == 2.0
    assert s.bounds.c_d(10.0) == pytest.approx(0.315)
    assert s.integrator.method == "rk4" and s.integrator.substep == 0.002


def test_ramp_order_error_names_field(tmp_path):
    path = write(tmp_path, """
[method]
name = hocbf
preset = fig1
[bounds]
kind = linear_ramp
c_start = 0.4
c_end = 0.2
t_start = 10
t_end = 5
""")
    with pytest.raises(cli.ConfigError) as info:
        cli.load_config(path)
    msg = str(info.value)
    assert "t_end" in msg and f"{path}:9:" in msg


def test_unknown_key_rejected(tmp_path, capsys):
    path = write(tmp_path, "[method]\nname = avcbf\nfoo = 1\n")
    with pytest.raises(cli.ConfigError, match=r":3: .*foo"):
        cli.load_config(path)
    assert cli.main(["validate", str(path)]) == cli.EXIT_CONFIG
    assert "foo" in capsys.readouterr().err


@pytest.mark.parametrize(
    "text",
    [
        "[method]\nname = mpc\n",
        "[method]\nname = avcbf\nk1 = -1\n",
        "[method]\nname = avcbf\n[run]\ndt = abc\n",
        "[method]\nname = avcbf\n[bounds]\nkind = wave\n",
        "[method]\nname = avcbf\n[extra]\nx = 1\n",
        "[plant]\nM = 0\n[method]\nname = hocbf\n",
        "no section header\n",
    ],
)
def test_invalid_configs_exit_2(tmp_path, text):
    assert cli.main(["validate", str(write(tmp_path, text))]) == cli.EXIT_CONFIG


def test_missing_file_exit_2(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.ini")]) == cli.EXIT_CONFIG


def test_single_step_csv(tmp_path):
    path = write(tmp_path, FIG1 + "[run]\nT = 0.1\n")
    assert cli.main(["run", str(path), "--out", str(tmp_path)]) == cli.EXIT_OK
    with (tmp_path / "case.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == report.CSV_COLUMNS
    assert len(rows) == 2
    summary = json.loads((tmp_path / "case.summary.json").read_text())
    assert summary["steps_solved"] == 1 and summary["stop_cause"] == "horizon"


def test_inapplicable_columns_empty(tmp_path):
    traj = run_closed_loop(make_scenario("fig1", "hocbf", T=0.3))
    rows = report.read_csv(report.write_csv(traj, tmp_path / "h.csv"))
    for name in ("a1", "pi12", "nu1", "nu2", "p1", "p2", "delta_p", "phi11"):
        assert all(r[name] is None for r in rows)
    assert all(r["psi2"] is not None for r in rows)


@pytest.mark.parametrize("method", ["hocbf", "avcbf", "pacbf"])
def test_csv_round_trip(tmp_path, method):
    traj = run_closed_loop(make_scenario("fig1", method, BoundProfile.ramp(0.4, 0.2), T=5.0))
    back = report.read_csv(report.write_csv(traj, tmp_path / f"{method}.csv"))
    assert back == report.trajectory_rows(traj)


def test_run_exit_codes(tmp_path):
    ok = write(tmp_path, FIG1, "ok.ini")
    assert cli.main(["run", str(ok), "--out", str(tmp_path)]) == cli.EXIT_OK
    bad = write(tmp_path, "[method]\nname = avcbf\npreset = fig2\n", "fig2.ini")
    assert cli.main(["run", str(bad), "--out", str(tmp_path)]) == cli.EXIT_INFEASIBLE
    summary = json.loads((tmp_path / "fig2.summary.json").read_text())
    assert summary["stop_cause"] == "infeasible" and summary["feasible_to"] < 50.0
    assert math.isfinite(summary["min_gap"])


def test_integration_failure_exit_4(tmp_path, monkeypatch):
    def fail(*args, t0=0.0, **kwargs):
        raise IntegrationError("step size underflow", t0)

    monkeypatch.setattr(sim, "integrate_hold", fail)
    path = write(tmp_path, FIG1)
    assert cli.main(["run", str(path), "--out", str(tmp_path)]) == cli.EXIT_INTEGRATION
    assert cli.main(["compare", str(path), "--methods", "hocbf", "--out", str(tmp_path)]) == cli.EXIT_INTEGRATION


def test_dt_override(tmp_path):
    path = write(tmp_path, FIG1 + "[run]\nT = 1\n")
    assert cli.main(["run", str(path), "--dt", "0.05", "--out", str(tmp_path)]) == cli.EXIT_OK
    assert len(report.read_csv(tmp_path / "case.csv")) == 20
    assert cli.main(["run", str(path), "--dt", "-1"]) == cli.EXIT_CONFIG


def test_compare_outputs(tmp_path):
    c = 1e6 / (1650.0 * 9.81)
    path = write(tmp_path, f"""
[method]
name = hocbf
preset = fig1
[bounds]
c = {c!r}
c_a = {c!r}
[run]
T = 5
""", "wide.ini")
    assert cli.main(["compare", str(path), "--methods", "hocbf,avcbf", "--out", str(tmp_path)]) == cli.EXIT_OK
    table = (tmp_path / "wide-comparison.txt").read_text()
    assert "hocbf" in table and "avcbf" in table
    rows = json.loads((tmp_path / "wide-comparison.json").read_text())
    assert [r["method"] for r in rows] == ["hocbf", "avcbf"]
    for r in rows:
        assert r["stop_cause"] == "horizon"
        data = report.read_csv(tmp_path / f"wide-{r['method']}.csv")
        # the table is computed from the very trajectory that was written out
        u = [d["u"] for d in data]
        rate = max(abs(b - a) / (tb - ta) for a, b, ta, tb in zip(u, u[1:], [d["t"] for d in data], [d["t"] for d in data[1:]]))
        assert r["max_rate"] == pytest.approx(rate, rel=1e-12)
        assert r["min_gap"] <= min(d["z"] for d in data) - 10.0
        assert r["steps_solved"] == len(data) == 50
    with (tmp_path / "wide-comparison.csv").open(newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    assert cli.main(["compare", str(path), "--methods", "hocbf,mpc"]) == cli.EXIT_CONFIG


def test_first_brake_metric():
    class R:
        def __init__(self, t, u):
            self.t, self.u = t, u

    class T:
        def __init__(self, us):
            self.records = [R(0.1 * i, u) for i, u in enumerate(us)]

        def column(self, name):
            return np.array([getattr(r, name) for r in self.records], dtype=float)

        @property
        def times(self):
            return self.column("t")

    assert report.first_brake_time(T([5, -2, 3, -2, -2, -2, -5])) == pytest.approx(0.3)
    assert report.first_brake_time(T([5, -2, -2, 0, 1])) is None
    assert report.max_rate(T([0.0, 1.0, -1.0])) == pytest.approx(20.0)
    assert report.final_window_rate(T([0.0] * 80 + [10.0] + [10.0] * 10), window=0.5) == 0.0


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out
