"""Quick self-checks behind ``avcbf selftest``: QP oracle and chain derivatives."""

from __future__ import annotations

import itertools
import warnings

import numpy as np

from .acc import BoundProfile, make_scenario
from .cbf import finite_diff_validate
from .qp import ConstraintRow, StageQp, solve_qp
from .sim import chain_evaluator, run_closed_loop


def brute_force_qp(h, c, A, b):
    """Minimizer of 1/2 x'diag(h)x + c'x s.t. A x + b >= 0 by trying every active set."""
    n, m = len(h), len(b)
    for size in range(min(n, m) + 1):
        for S in itertools.combinations(range(m), size):
            S = list(S)
            K = np.block([[np.diag(h), -A[S].T], [A[S], np.zeros((size, size))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-c, -b[S]]))
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.all(A @ x + b >= -1e-9) and np.all(lam >= -1e-9):
                return x
    return None


def qp_oracle_check(instances: int = 200, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst, disagree = 0.0, 0
    for _ in range(instances):
        n, m = int(rng.integers(2, 6)), int(rng.integers(0, 9))
        h = rng.uniform(0.1, 10.0, n)
        c = rng.normal(0.0, 3.0, n)
        A = rng.normal(0.0, 1.0, (m, n))
        x0 = rng.normal(0.0, 1.0, n)
        b = -A @ x0 + rng.uniform(-1.0, 1.0, m)
        sol = solve_qp(StageQp(h, c, tuple(ConstraintRow(a, bi) for a, bi in zip(A, b))))
        ref = brute_force_qp(h, c, A, b)
        if (ref is None) == sol.optimal:
            disagree += 1
        elif ref is not None:
            worst = max(worst, float(np.linalg.norm(sol.x_opt - ref)))
    return {"instances": instances, "max_dx": worst, "verdict_disagreements": disagree}


def derivative_check(T: float = 5.0) -> dict:
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for method in ("hocbf", "avcbf", "pacbf"):
            s = make_scenario("fig1", method, BoundProfile.constant(0.4), T=T)
            traj = run_closed_loop(s, substep_log=True)
            out[method] = finite_diff_validate(traj, chain_evaluator(s))
    return out


def run_all() -> tuple[bool, list[str]]:
    lines, ok = [], True
    q = qp_oracle_check()
    q_ok = q["max_dx"] <= 1e-6 and q["verdict_disagreements"] == 0
    ok &= q_ok
    lines.append(f"{'PASS' if q_ok else 'FAIL'} qp oracle: {q}")
    for method, err in derivative_check().items():
        d_ok = err <= 1e-4
        ok &= d_ok
        lines.append(f"{'PASS' if d_ok else 'FAIL'} chain derivatives ({method}): max rel err {err:.3g}")
    return ok, lines
