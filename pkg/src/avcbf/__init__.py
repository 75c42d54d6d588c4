"""Adaptive control-barrier-function controllers for adaptive cruise control.

Modules: ``qp`` (dense active-set QP solver with infeasibility certificates),
``integrate`` (zero-order-hold RKF45/RK4 integration), ``cbf`` (HOCBF, AVCBF
and PACBF constraint chains), ``acc`` (vehicle model, presets, stage
builders), ``sim`` (closed loop), ``report`` (summaries and CSV) and ``cli``.
"""

from .acc import (
    PRESETS,
    AccParams,
    AuxState,
    BoundProfile,
    PlantState,
    Scenario,
    build_stage,
    control_bounds,
    make_scenario,
)
from .cbf import MethodParams, finite_diff_validate
from .integrate import IntegrationError, IntegratorConfig, integrate_hold
from .qp import ConstraintRow, QpSolution, StageQp, check_kkt, phase1_feasibility, solve_qp
from .sim import Trajectory, run_closed_loop

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "AccParams",
    "AuxState",
    "BoundProfile",
    "ConstraintRow",
    "IntegrationError",
    "IntegratorConfig",
    "MethodParams",
    "PlantState",
    "QpSolution",
    "Scenario",
    "StageQp",
    "Trajectory",
    "build_stage",
    "check_kkt",
    "control_bounds",
    "finite_diff_validate",
    "integrate_hold",
    "make_scenario",
    "phase1_feasibility",
    "run_closed_loop",
    "solve_qp",
]
