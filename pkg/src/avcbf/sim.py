"""Discretized CBF-QP closed loop: solve, hold, integrate, repeat."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import acc as models
from .acc import AuxState, PlantState, Scenario
from .cbf import PhiChain, PsiChain
from .integrate import integrate_hold
from .qp import solve_qp

log = logging.getLogger(__name__)


class InitialSetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StepRecord:
    t: float
    z: float
    v: float
    u_min: float
    u_max: float
    status: str
    a1: float | None = None
    pi12: float | None = None
    p1: float | None = None
    p2: float | None = None
    u: float | None = None
    nu1: float | None = None
    nu2: float | None = None
    delta: float | None = None
    delta_p: float | None = None
    psi: tuple[float, ...] = ()  # psi_0 .. psi_{m-1}, then psi_m at the applied decision
    phi: tuple[float, ...] = ()  # phi_{1,0}, phi_{1,1}, then the top value at the applied nu1
    kkt_residual: float | None = None
    decision: tuple[float, ...] = field(default=(), repr=False)
    substeps: tuple = field(default=(), repr=False)  # ((t, y), ...) when dense logging is on


@dataclass(frozen=True)
class Trajectory:
    scenario: Scenario
    records: tuple[StepRecord, ...]
    stop_cause: str  # "horizon" | "infeasible" | "velocity"
    final_t: float
    final_plant: PlantState
    final_aux: AuxState
    diagnostics: tuple[str, ...] = ()

    @property
    def feasible_to_horizon(self) -> bool:
        return self.stop_cause == "horizon"

    @property
    def feasible_to(self) -> float:
        """Time of the first infeasible QP (or the horizon)."""
        if self.stop_cause == "horizon":
            return self.scenario.T
        return self.records[-1].t if self.records else 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], dtype=float)

    @property
    def times(self) -> np.ndarray:
        return self.column("t")

    def solved(self) -> list[StepRecord]:
        return [r for r in self.records if r.status == "optimal"]

    def min_gap(self) -> float:
        """Smallest z - l_p over the recorded states and the final state."""
        zs = [r.z for r in self.records] + [self.final_plant.z]
        return float(min(zs)) - self.scenario.acc.l_p


def initial_set_violations(scenario: Scenario) -> list[str]:
    """Which of the chain sets C_0..C_{m-1} (and auxiliary sets) exclude the initial state."""
    s = scenario
    lo, hi = models.control_bounds(0.0, s.bounds, s.acc)
    _, psi, phi = models.build_stage(s.method, s.plant0, s.aux0, s.acc, s.params, (lo, hi))
    out = [f"psi{i}(0) = {val:.6g} < 0" for i, val in enumerate(psi.values) if val < 0]
    if phi is not None:
        out += [f"phi1{j}(0) = {val:.6g} <= 0" for j, val in enumerate(phi.values) if val <= 0]
    if s.method == "pacbf" and not (0.0 <= s.aux0.p1 <= s.params.p1_max):
        out.append(f"p1(0) = {s.aux0.p1} outside [0, {s.params.p1_max}]")
    return out


def _record(t, plant, aux, bounds, sol, psi: PsiChain, phi: PhiChain | None, substeps=()) -> StepRecord:
    common = dict(t=t, z=plant.z, v=plant.v, u_min=bounds[0], u_max=bounds[1], a1=aux.a1, pi12=aux.pi12, p1=aux.p1)
    if not sol.optimal:
        return StepRecord(status=sol.status, psi=psi.values, phi=phi.values if phi else (), **common)
    x = sol.x_opt
    get = {name: float(x[i]) for i, name in enumerate(sol.labels)}
    return StepRecord(
        status=sol.status,
        p2=get.get("nu2", aux.p2) if aux.p1 is not None else None,
        u=get["u"],
        nu1=get.get("nu1"),
        nu2=get.get("nu2"),
        delta=get["delta"],
        delta_p=get.get("delta_p"),
        psi=psi.values + (psi.top.value(x),),
        phi=phi.values + (phi.top.value(x),) if phi else (),
        kkt_residual=sol.kkt_residual,
        decision=tuple(float(v) for v in x),
        substeps=substeps,
        **common,
    )


def run_closed_loop(scenario: Scenario, substep_log: bool = False) -> Trajectory:
    """Simulate ``scenario`` until the horizon, the first infeasible QP, or v <= 0."""
    s = scenario
    diags = initial_set_violations(s) if s.plant0.v > 0 else []
    for msg in diags:
        warnings.warn(f"initial state outside the safe-set intersection: {msg}", InitialSetWarning, stacklevel=2)
    diags = [f"initial-set: {m}" for m in diags]
    for msg in s.params.tuning_warnings():
        diags.append(f"tuning: {msg}")

    f = models.augmented_dynamics(s.method, s.acc)
    y = models.pack_state(s.method, s.plant0, s.aux0)
    p2 = s.aux0.p2
    records: list[StepRecord] = []
    stop = "horizon"
    t = 0.0
    for k in range(s.steps):
        t = k * s.dt
        plant, aux = models.unpack_state(s.method, y, p2)
        if not plant.v > 0:
            diags.append(f"velocity left v > 0 at t={t:.4g} (v={plant.v:.6g})")
            stop = "velocity"
            break
        bounds = models.control_bounds(t, s.bounds, s.acc)
        qp, psi, phi = models.build_stage(s.method, plant, aux, s.acc, s.params, bounds)
        sol = solve_qp(qp)
        if not sol.optimal:
            records.append(_record(t, plant, aux, bounds, sol, psi, phi))
            stop = "infeasible"
            log.info("%s: QP infeasible at t=%.2f", s.name or s.method, t)
            break
        held = [sol["u"]] if s.method == "hocbf" else [sol["u"], sol["nu1"]]
        if substep_log:
            y_next, samples = integrate_hold(f, y, held, s.dt, s.integrator, t0=t, log_substeps=True)
            samples = tuple((ts, ys.copy()) for ts, ys in samples)
        else:
            y_next, samples = integrate_hold(f, y, held, s.dt, s.integrator, t0=t), ()
        records.append(_record(t, plant, aux, bounds, sol, psi, phi, samples))
        if s.method == "pacbf":
            p2 = sol["nu2"]
        y = y_next
        t = (k + 1) * s.dt
    final_plant, final_aux = models.unpack_state(s.method, y, p2)
    return Trajectory(s, tuple(records), stop, t, final_plant, final_aux, tuple(diags))


def chain_evaluator(scenario: Scenario):
    """``(augmented_state, decision) -> PsiChain`` for derivative checks along a run."""
    s = scenario

    def evaluate(y, decision):
        plant, aux = models.unpack_state(s.method, y)
        lo, hi = -1e9, 1e9
        _, psi, _ = models.build_stage(s.method, plant, aux, s.acc, s.params, (lo, hi))
        return psi

    return evaluate


def substep_samples(traj: Trajectory):
    """Dense samples grouped per hold interval, as expected by ``finite_diff_validate``."""
    out = []
    for r in traj.solved():
        if not r.substeps:
            raise ValueError("trajectory was recorded without substep logging")
        out.append((list(r.substeps), np.array(r.decision)))
    return out
