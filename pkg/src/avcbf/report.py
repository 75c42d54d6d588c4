"""Run summaries, CSV trajectories and method-comparison metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import acc as models
from .sim import StepRecord, Trajectory

CSV_COLUMNS = (
    "t", "z", "v", "u", "u_min", "u_max", "a1", "pi12", "nu1", "nu2", "p1", "p2",
    "delta", "delta_p", "psi0", "psi1", "psi2", "phi11", "qp_status", "kkt_residual",
)

BRAKE_THRESHOLD = -1.0  # N; u below this counts as braking
BRAKE_STEPS = 3  # consecutive steps required
FINAL_WINDOW = 5.0  # s, window for the end-of-run smoothness metric
STIFF_SPREAD = 1e15  # cost-coefficient spread flagged as stiff scaling


@dataclass(frozen=True)
class RunSummary:
    name: str
    method: str
    stop_cause: str
    feasible_to: float
    min_gap: float
    terminal_speed_error: float
    max_decel_used: float  # N, largest braking force applied
    max_kkt_residual: float
    a1_range: tuple[float, float] | None
    p1_range: tuple[float, float] | None
    steps_solved: int
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, allow_nan=True)


def _range(col: np.ndarray) -> tuple[float, float] | None:
    col = col[np.isfinite(col)]
    return (float(col.min()), float(col.max())) if col.size else None


def summarize(traj: Trajectory, wall_time: float = 0.0) -> RunSummary:
    u = traj.column("u")
    kkt = traj.column("kkt_residual")
    brake = -np.nanmin(u) if np.any(np.isfinite(u)) else 0.0
    return RunSummary(
        name=traj.scenario.name,
        method=traj.scenario.method,
        stop_cause=traj.stop_cause,
        feasible_to=float(traj.feasible_to),
        min_gap=traj.min_gap(),
        terminal_speed_error=abs(traj.final_plant.v - traj.scenario.acc.v_p),
        max_decel_used=float(max(brake, 0.0)),
        max_kkt_residual=float(np.nanmax(kkt)) if np.any(np.isfinite(kkt)) else float("nan"),
        a1_range=_range(traj.column("a1")),
        p1_range=_range(traj.column("p1")),
        steps_solved=len(traj.solved()),
        wall_time=wall_time,
    )


# --------------------------------------------------------------------------
# CSV


def _row(r: StepRecord) -> list:
    psi = list(r.psi) + [None] * (3 - len(r.psi))
    phi11 = r.phi[1] if len(r.phi) > 1 else None
    return [
        r.t, r.z, r.v, r.u, r.u_min, r.u_max, r.a1, r.pi12, r.nu1, r.nu2, r.p1, r.p2,
        r.delta, r.delta_p, psi[0], psi[1], psi[2], phi11, r.status, r.kkt_residual,
    ]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


def write_csv(traj: Trajectory, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in traj.records:
            w.writerow([_fmt(x) for x in _row(r)])
    return path


def trajectory_rows(traj: Trajectory) -> list[dict]:
    """In-memory rows keyed by CSV column (None where not applicable)."""
    return [dict(zip(CSV_COLUMNS, _row(r))) for r in traj.records]


def read_csv(path) -> list[dict]:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        for line in reader:
            rows.append({
                k: (v if k == "qp_status" else (None if v == "" else float(v)))
                for k, v in zip(header, line)
            })
    return rows


# --------------------------------------------------------------------------
# comparison


def first_brake_time(traj: Trajectory) -> float | None:
    """First t from which u < -1 N holds for three consecutive steps."""
    u, t = traj.column("u"), traj.times
    run = 0
    for i, ui in enumerate(u):
        run = run + 1 if ui < BRAKE_THRESHOLD else 0
        if run == BRAKE_STEPS:
            return float(t[i - BRAKE_STEPS + 1])
    return None


def _rates(traj: Trajectory, t_from: float = -math.inf) -> np.ndarray:
    recs = [r for r in traj.records if r.u is not None and r.t >= t_from - 1e-9]
    if len(recs) < 2:
        return np.zeros(0)
    u = np.array([r.u for r in recs])
    t = np.array([r.t for r in recs])
    return np.abs(np.diff(u)) / np.diff(t)


def max_rate(traj: Trajectory) -> float:
    """max |du|/dt between consecutive solved steps over the run."""
    r = _rates(traj)
    return float(r.max()) if r.size else 0.0


def final_window_rate(traj: Trajectory, window: float = FINAL_WINDOW) -> float:
    """max |du|/dt over the last ``window`` seconds of recorded steps."""
    if not traj.records:
        return 0.0
    r = _rates(traj, traj.records[-1].t - window)
    return float(r.max()) if r.size else 0.0


def cost_spread(scenario) -> float:
    """Ratio of the largest to the smallest nonzero cost coefficient at t = 0."""
    s = scenario
    qp, _, _ = models.build_stage(
        s.method, s.plant0, s.aux0, s.acc, s.params, models.control_bounds(0.0, s.bounds, s.acc)
    )
    mags = np.abs(np.concatenate([qp.hessian_diag, qp.linear_cost]))
    mags = mags[mags > 0]
    return float(mags.max() / mags.min())


@dataclass(frozen=True)
class ComparisonRow:
    summary: RunSummary
    first_brake_time: float | None
    max_rate: float
    final_window_rate: float
    notes: str = ""

    def flat(self) -> dict:
        d = asdict(self.summary)
        d.update(
            first_brake_time=self.first_brake_time,
            max_rate=self.max_rate,
            final_window_rate=self.final_window_rate,
            notes=self.notes,
        )
        return d


def compare_row(traj: Trajectory, summary: RunSummary) -> ComparisonRow:
    notes = []
    if cost_spread(traj.scenario) > STIFF_SPREAD:
        notes.append("stiff cost scaling")
    return ComparisonRow(summary, first_brake_time(traj), max_rate(traj), final_window_rate(traj), "; ".join(notes))


def format_table(rows: list[ComparisonRow]) -> str:
    head = f"{'method':<8} {'stop':<10} {'feas_to':>8} {'min_gap':>9} {'|vT-vp|':>8} " \
           f"{'brake_t':>8} {'max du/dt':>11} {'end du/dt':>11}  notes"
    lines = [head, "-" * len(head)]
    for r in rows:
        s = r.summary
        fb = "-" if r.first_brake_time is None else f"{r.first_brake_time:.1f}"
        lines.append(
            f"{s.method:<8} {s.stop_cause:<10} {s.feasible_to:>8.1f} {s.min_gap:>9.3f} "
            f"{s.terminal_speed_error:>8.3f} {fb:>8} {r.max_rate:>11.4g} {r.final_window_rate:>11.4g}  {r.notes}"
        )
    return "\n".join(lines)


def rows_csv(rows: list[ComparisonRow]) -> str:
    flat = [r.flat() for r in rows]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(flat[0]) if flat else [])
    w.writeheader()
    for d in flat:
        w.writerow({k: ("" if v is None else v) for k, v in d.items()})
    return buf.getvalue()
