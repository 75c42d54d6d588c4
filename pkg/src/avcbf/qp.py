"""Dense QP solver for the small, strictly convex per-step problems.

Problems have the form::

    minimize    1/2 x' diag(h) x + c' x
    subject to  a_i' x + b_i >= 0        (general rows)
                lo <= x <= hi            (box bounds, may be infinite)

Feasibility is settled first by a phase-1 LP (which also produces a Farkas
certificate when the constraints are inconsistent); the optimum is then found
with a primal active-set method started from the phase-1 point. Single-variable
rows are handled like bounds, i.e. an active one fixes its variable exactly.
Each working face is solved exactly through an equilibrated KKT system, which
keeps component-wise accuracy when the cost coefficients span many decades.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

FEAS_TOL = 1e-9
KKT_TOL = 1e-8
_DUAL_TOL = 1e-10


class InvalidQpError(ValueError):
    """Raised for malformed problems (shape mismatch, non-positive curvature, ...)."""


class SolverError(RuntimeError):
    """Raised when the active-set iteration fails to terminate."""


@dataclass(frozen=True)
class ConstraintRow:
    """Affine inequality ``coeffs @ x + constant >= 0``."""

    coeffs: np.ndarray
    constant: float
    tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float).ravel())
        object.__setattr__(self, "constant", float(self.constant))

    def value(self, x) -> float:
        return float(self.coeffs @ np.asarray(x, dtype=float) + self.constant)


@dataclass(frozen=True)
class StageQp:
    hessian_diag: np.ndarray
    linear_cost: np.ndarray
    rows: tuple[ConstraintRow, ...] = ()
    lower_bounds: np.ndarray | None = None
    upper_bounds: np.ndarray | None = None
    var_labels: tuple[str, ...] = ()

    def __post_init__(self):
        h = np.asarray(self.hessian_diag, dtype=float).ravel()
        n = h.size
        c = np.asarray(self.linear_cost, dtype=float).ravel()
        lo = np.full(n, -np.inf) if self.lower_bounds is None else np.asarray(self.lower_bounds, dtype=float).ravel()
        hi = np.full(n, np.inf) if self.upper_bounds is None else np.asarray(self.upper_bounds, dtype=float).ravel()
        labels = tuple(self.var_labels) or tuple(f"x{j}" for j in range(n))
        object.__setattr__(self, "hessian_diag", h)
        object.__setattr__(self, "linear_cost", c)
        object.__setattr__(self, "lower_bounds", lo)
        object.__setattr__(self, "upper_bounds", hi)
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "var_labels", labels)

        if n == 0:
            raise InvalidQpError("QP has no decision variables")
        if not np.all(np.isfinite(h)) or np.any(h <= 0):
            raise InvalidQpError(f"hessian_diag must be finite and strictly positive, got {h}")
        if c.size != n or lo.size != n or hi.size != n or len(labels) != n:
            raise InvalidQpError(
                f"dimension mismatch: hessian {n}, linear_cost {c.size}, "
                f"bounds {lo.size}/{hi.size}, labels {len(labels)}"
            )
        if not np.all(np.isfinite(c)):
            raise InvalidQpError("linear_cost must be finite")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo == np.inf) or np.any(hi == -np.inf):
            raise InvalidQpError("bounds must not be NaN, +inf lower or -inf upper")
        if np.any(lo > hi):
            bad = int(np.argmax(lo > hi))
            raise InvalidQpError(f"lower bound exceeds upper bound for {labels[bad]!r}")
        for i, row in enumerate(self.rows):
            if row.coeffs.size != n:
                raise InvalidQpError(f"row {i} ({row.tag!r}) has {row.coeffs.size} coefficients, expected {n}")
            if not (np.all(np.isfinite(row.coeffs)) and np.isfinite(row.constant)):
                raise InvalidQpError(f"row {i} ({row.tag!r}) is not finite")

    @property
    def dim(self) -> int:
        return self.hessian_diag.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * self.hessian_diag @ (x * x) + self.linear_cost @ x)

    def index(self, label: str) -> int:
        return self.var_labels.index(label)


@dataclass(frozen=True)
class FarkasCertificate:
    """Nonnegative weights whose combination of constraints reads ``0 >= const`` with ``const > 0``.

    ``row_weights[i]`` multiplies row ``i``; ``lower_weights[j]`` multiplies
    ``x_j - lo_j >= 0`` and ``upper_weights[j]`` multiplies ``hi_j - x_j >= 0``.
    Weights are scaled so the largest one equals 1.
    """

    row_weights: np.ndarray
    lower_weights: np.ndarray
    upper_weights: np.ndarray

    def combination(self, rows: Sequence[ConstraintRow], lower, upper, n: int) -> tuple[np.ndarray, float]:
        coeff = np.zeros(n)
        const = 0.0
        for w, row in zip(self.row_weights, rows):
            if w:
                coeff += w * row.coeffs
                const += w * row.constant
        for j in range(n):
            if self.lower_weights[j]:
                coeff[j] += self.lower_weights[j]
                const -= self.lower_weights[j] * lower[j]
            if self.upper_weights[j]:
                coeff[j] -= self.upper_weights[j]
                const += self.upper_weights[j] * upper[j]
        return coeff, const

    def is_valid(self, rows, lower, upper, n: int, tol: float = FEAS_TOL) -> bool:
        weights = np.concatenate([self.row_weights, self.lower_weights, self.upper_weights])
        if np.any(weights < 0) or not np.any(weights > 0):
            return False
        coeff, const = self.combination(rows, lower, upper, n)
        # scale by the weighted size of the combined constraints
        norms = [np.linalg.norm(r.coeffs) for r in rows]
        scale = float(np.dot(self.row_weights, norms) + self.lower_weights.sum() + self.upper_weights.sum())
        return bool(np.max(np.abs(coeff), initial=0.0) <= 1e-9 * scale and const < -tol * scale)


@dataclass(frozen=True)
class Phase1Result:
    feasible: bool
    point: np.ndarray | None
    certificate: FarkasCertificate | None
    max_violation: float  # optimal phase-1 slack on normalized rows


@dataclass(frozen=True)
class QpSolution:
    status: str  # "optimal" | "infeasible"
    x_opt: np.ndarray | None = None
    active_set: tuple[int, ...] = ()
    row_multipliers: np.ndarray | None = None
    lower_multipliers: np.ndarray | None = None
    upper_multipliers: np.ndarray | None = None
    kkt_residual: float = float("nan")
    farkas_certificate: FarkasCertificate | None = None
    iterations: int = 0
    labels: tuple[str, ...] = field(default=(), repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def __getitem__(self, label: str) -> float:
        return float(self.x_opt[self.labels.index(label)])


# --------------------------------------------------------------------------
# constraint normalization


@dataclass
class _Cons:
    """Internal constraint list: ``A x + b >= 0`` with unit-norm rows."""

    A: np.ndarray
    b: np.ndarray
    norms: np.ndarray          # norm of the original coefficient vector
    origin: list[tuple[str, int]]  # ("row", i) | ("lo", j) | ("hi", j)


def _collect(rows: Sequence[ConstraintRow], lower, upper, n: int):
    """Normalize rows and bounds. Returns (_Cons, hopeless) where hopeless is the
    index of a coefficient-free row with a negative constant, if any."""
    A, b, norms, origin = [], [], [], []
    for i, row in enumerate(rows):
        nrm = float(np.linalg.norm(row.coeffs))
        if nrm == 0.0:
            if row.constant < 0:
                return None, i
            continue
        A.append(row.coeffs / nrm)
        b.append(row.constant / nrm)
        norms.append(nrm)
        origin.append(("row", i))
    for j in range(n):
        if np.isfinite(lower[j]):
            e = np.zeros(n)
            e[j] = 1.0
            A.append(e)
            b.append(-lower[j])
            norms.append(1.0)
            origin.append(("lo", j))
        if np.isfinite(upper[j]):
            e = np.zeros(n)
            e[j] = -1.0
            A.append(e)
            b.append(upper[j])
            norms.append(1.0)
            origin.append(("hi", j))
    A = np.array(A, dtype=float).reshape(-1, n)
    return _Cons(A, np.array(b, dtype=float), np.array(norms), origin), None


def _certificate_from(cons: _Cons, lam: np.ndarray, nrows: int, n: int) -> FarkasCertificate:
    rw, lw, uw = np.zeros(nrows), np.zeros(n), np.zeros(n)
    for k, (kind, idx) in enumerate(cons.origin):
        w = lam[k] / cons.norms[k]
        if kind == "row":
            rw[idx] += w
        elif kind == "lo":
            lw[idx] += w
        else:
            uw[idx] += w
    top = max(rw.max(initial=0.0), lw.max(initial=0.0), uw.max(initial=0.0))
    return FarkasCertificate(rw / top, lw / top, uw / top)


# --------------------------------------------------------------------------
# phase 1


def phase1_feasibility(rows: Sequence[ConstraintRow], lower=None, upper=None, n: int | None = None) -> Phase1Result:
    """Find a point satisfying all rows and bounds, or certify that none exists.

    Solves ``min t  s.t.  a_i'x + b_i + t >= 0`` (unit-norm rows, bounds
    included, ``t >= -1``) by gradient projection. A strictly positive optimum
    (beyond ``FEAS_TOL``) is an infeasibility proof whose multipliers form the
    Farkas certificate.
    """
    rows = tuple(rows)
    if n is None:
        if rows:
            n = rows[0].coeffs.size
        elif lower is not None:
            n = np.asarray(lower).size
        else:
            raise InvalidQpError("cannot infer dimension")
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)

    cons, hopeless = _collect(rows, lower, upper, n)
    if hopeless is not None:
        rw = np.zeros(len(rows))
        rw[hopeless] = 1.0
        cert = FarkasCertificate(rw, np.zeros(n), np.zeros(n))
        return Phase1Result(False, None, cert, float(-rows[hopeless].constant))
    m = cons.A.shape[0]
    x0 = np.clip(np.zeros(n), lower, upper)
    if m == 0:
        return Phase1Result(True, x0, None, 0.0)

    # decision vector z = (x, t); constraint k: [A_k, 1] z + b_k >= 0; cap: t + 1 >= 0
    G = np.hstack([cons.A, np.ones((m, 1))])
    G = np.vstack([G, np.eye(n + 1)[-1]])
    h = np.append(cons.b, 1.0)
    gnorm = np.linalg.norm(G, axis=1)
    G = G / gnorm[:, None]
    h = h / gnorm
    grad = np.zeros(n + 1)
    grad[-1] = 1.0

    z = np.append(x0, 0.0)
    z[-1] = max(-1.0, float(np.max(-(cons.A @ x0 + cons.b))))
    slack = G @ z + h
    working: list[int] = []
    for k in np.flatnonzero(slack <= 1e-12):
        if _independent(G, working, int(k)):
            working.append(int(k))

    lam_full = np.zeros(m + 1)
    for _ in range(200 * (m + n + 2)):
        p = _project_out(G[working], -grad)
        if np.max(np.abs(p)) > 1e-13:
            d = G @ p
            slack = G @ z + h
            alpha, block = np.inf, -1
            for k in range(m + 1):
                if k in working or d[k] >= -1e-15:
                    continue
                a = max(slack[k], 0.0) / -d[k]
                if a < alpha:
                    alpha, block = a, k
            z = z + alpha * p
            working.append(block)
            continue
        lam = _multipliers(G[working], grad)
        if lam.size == 0 or lam.min() >= -1e-12:
            lam_full[:] = 0.0
            lam_full[working] = np.maximum(lam, 0.0)
            break
        working.pop(int(np.argmin(lam)))
    else:
        raise SolverError("phase-1 iteration limit reached")

    t = float(z[-1])
    x = z[:-1]
    if t > FEAS_TOL:
        # rescale multipliers back to the [A_k, 1] rows before mapping to originals
        lam_rows = lam_full[:m] / gnorm[:m]
        return Phase1Result(False, None, _certificate_from(cons, lam_rows, len(rows), n), t)
    x = np.clip(x, lower, upper)
    return Phase1Result(True, x, None, t)


def _independent(G: np.ndarray, working: list[int], k: int) -> bool:
    if not working:
        return bool(np.linalg.norm(G[k]) > 0)
    M = G[working + [k]]
    return int(np.linalg.matrix_rank(M, tol=1e-10)) == len(working) + 1


def _project_out(A_w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Component of v orthogonal to the row space of A_w."""
    if A_w.shape[0] == 0:
        return v.copy()
    Q, _ = np.linalg.qr(A_w.T)
    return v - Q @ (Q.T @ v)


def _multipliers(A_w: np.ndarray, g: np.ndarray) -> np.ndarray:
    if A_w.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.lstsq(A_w.T, g, rcond=None)[0]


def _equilibrate(K: np.ndarray, sweeps: int = 8) -> np.ndarray:
    """Symmetric diagonal scaling that brings every row/column max of |K| near 1."""
    d = np.ones(K.shape[0])
    for _ in range(sweeps):
        r = np.max(np.abs(K * d[:, None] * d[None, :]), axis=1)
        r[r == 0] = 1.0
        d = d / np.sqrt(r)
    return d


def _face_minimizer(h, c, A_f, rhs):
    """Minimize 1/2 x'diag(h)x + c'x subject to A_f x = rhs.

    Solved through the equilibrated KKT matrix plus one refinement step;
    returns (x, lam) with  h*x + c = A_f' lam.
    """
    nf, k = h.size, A_f.shape[0]
    if k == 0:
        return -c / h, np.zeros(0)
    K = np.zeros((nf + k, nf + k))
    K[:nf, :nf] = np.diag(h)
    K[:nf, nf:] = -A_f.T
    K[nf:, :nf] = -A_f
    r = np.concatenate([-c, -rhs])
    d = _equilibrate(K)
    Ks = K * d[:, None] * d[None, :]
    sol = d * np.linalg.solve(Ks, d * r)
    sol = sol + d * np.linalg.solve(Ks, d * (r - K @ sol))
    return sol[:nf], sol[nf:]


# --------------------------------------------------------------------------
# primal active set


def solve_qp(qp: StageQp) -> QpSolution:
    """Solve ``qp``; returns an optimal point with multipliers or an infeasibility certificate."""
    if not isinstance(qp, StageQp):
        raise InvalidQpError("solve_qp expects a StageQp")
    n = qp.dim
    lower, upper = qp.lower_bounds, qp.upper_bounds
    ph1 = phase1_feasibility(qp.rows, lower, upper, n)
    if not ph1.feasible:
        return QpSolution("infeasible", farkas_certificate=ph1.certificate, labels=qp.var_labels)

    h, c = qp.hessian_diag, qp.linear_cost
    cons, _ = _collect(qp.rows, lower, upper, n)
    A, b = cons.A, cons.b
    m = A.shape[0]
    single = [int(np.count_nonzero(A[k])) == 1 for k in range(m)]
    single_var = [int(np.flatnonzero(A[k])[0]) if single[k] else -1 for k in range(m)]

    x = ph1.point.copy()
    working: list[int] = []
    fixed: dict[int, int] = {}  # variable -> constraint fixing it

    def add(k: int) -> bool:
        if single[k]:
            j = single_var[k]
            if j in fixed:
                return False
            fixed[j] = k
            x[j] = -b[k] / A[k, j]
            working.append(k)
            return True
        free = [j for j in range(n) if j not in fixed]
        gen = [w for w in working if not single[w]] + [k]
        M = A[np.ix_(gen, free)]
        if np.linalg.matrix_rank(M, tol=1e-10) < len(gen):
            return False
        working.append(k)
        return True

    if m:
        slack = A @ x + b
        for k in np.flatnonzero(slack <= FEAS_TOL):
            add(int(k))

    lam = np.zeros(m)
    ignored: set[int] = set()  # dependent blockers at zero step, until the face changes
    iters = 0
    limit = 100 * (m + n + 1)
    while True:
        iters += 1
        if iters > limit:
            raise SolverError("active-set iteration limit reached")
        free = [j for j in range(n) if j not in fixed]
        fix = list(fixed)
        gen = [w for w in working if not single[w]]
        rhs = -b[gen] - A[np.ix_(gen, fix)] @ x[fix]
        xf, lam_gen = _face_minimizer(h[free], c[free], A[np.ix_(gen, free)], rhs)
        p = np.zeros(n)
        p[free] = xf - x[free]
        if np.any(np.abs(p) > 1e-13 * (np.abs(x) + np.abs(p)) + 1e-300):
            d = A @ p
            slack = A @ x + b
            alpha, block = 1.0, -1
            for k in range(m):
                if k in working or k in ignored or d[k] >= -1e-300:
                    continue
                a = max(slack[k], 0.0) / -d[k]
                if a < alpha:
                    alpha, block = a, k
            if block < 0:
                x[free] = xf  # land exactly on the face minimizer
            else:
                x = x + alpha * p
                if add(block):
                    ignored.clear()
                else:
                    ignored.add(block)
            continue

        # stationary on the working face: check multiplier signs, each judged
        # against the size of the gradient terms it balances
        g = h * x + c
        w = np.abs(h * x) + np.abs(c)
        w = np.maximum(w, max(float(w.max(initial=0.0)) * 1e-16, 1e-300))
        mult: dict[int, float] = {}
        rel: dict[int, float] = {}
        for k, lk in zip(gen, lam_gen):
            mult[k] = float(lk)
            rel[k] = float(lk) * float(np.max(np.abs(A[k, free]) / w[free], initial=0.0))
        resid = g - (A[gen].T @ lam_gen if gen else 0.0)
        for j, k in fixed.items():
            lk = float(resid[j] / A[k, j])
            mult[k], rel[k] = lk, lk * abs(A[k, j]) / w[j]
        neg = [(r, k) for k, r in rel.items() if r < -_DUAL_TOL]
        if not neg:
            for k, v in mult.items():
                lam[k] = max(v, 0.0)
            break
        _, drop = min(neg)
        working.remove(drop)
        ignored.clear()
        if single[drop]:
            del fixed[single_var[drop]]

    # back to the original (unnormalized) rows and bounds
    row_mult = np.zeros(len(qp.rows))
    lo_mult, hi_mult = np.zeros(n), np.zeros(n)
    for k, (kind, idx) in enumerate(cons.origin):
        orig = lam[k] / cons.norms[k]
        if kind == "row":
            row_mult[idx] = orig
        elif kind == "lo":
            lo_mult[idx] = orig
        else:
            hi_mult[idx] = orig
    active = tuple(sorted(idx for k, (kind, idx) in enumerate(cons.origin) if kind == "row" and k in working))
    sol = QpSolution(
        "optimal",
        x_opt=x,
        active_set=active,
        row_multipliers=row_mult,
        lower_multipliers=lo_mult,
        upper_multipliers=hi_mult,
        iterations=iters,
        labels=qp.var_labels,
    )
    return _with_residual(qp, sol)


def _with_residual(qp: StageQp, sol: QpSolution) -> QpSolution:
    return replace(sol, kkt_residual=check_kkt(qp, sol))


def check_kkt(qp: StageQp, sol: QpSolution) -> float:
    """Worst violation of the KKT conditions at ``sol``.

    Returns the max of: stationarity (component-wise, relative to the sum of
    magnitudes of the terms that cancel), primal violation of unit-norm rows
    and of bounds, negative multipliers and complementarity products (both
    relative to the gradient scale).
    """
    x = np.asarray(sol.x_opt, dtype=float)
    n = qp.dim
    lam = np.zeros(len(qp.rows)) if sol.row_multipliers is None else np.asarray(sol.row_multipliers)
    mu_lo = np.zeros(n) if sol.lower_multipliers is None else np.asarray(sol.lower_multipliers)
    mu_hi = np.zeros(n) if sol.upper_multipliers is None else np.asarray(sol.upper_multipliers)

    hx = qp.hessian_diag * x
    grad = hx + qp.linear_cost
    stat = grad.copy()
    mag = np.abs(hx) + np.abs(qp.linear_cost) + np.abs(mu_lo) + np.abs(mu_hi)
    for li, row in zip(lam, qp.rows):
        stat -= li * row.coeffs
        mag += np.abs(li * row.coeffs)
    stat = stat - mu_lo + mu_hi
    # rounding floor: a term 1e-14 of the largest gradient term in the
    # scaled coordinates sqrt(h) * x is indistinguishable from zero
    D = np.sqrt(qp.hessian_diag)
    floor = 1e-14 * D * float(np.max(mag / D, initial=0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(np.abs(stat) == 0, 0.0, np.abs(stat) / np.maximum(np.maximum(mag, floor), 1e-300))
    worst = float(rel.max(initial=0.0))

    gscale = max(float(np.max(mag, initial=0.0)), 1e-300)
    for li, row in zip(lam, qp.rows):
        nrm = float(np.linalg.norm(row.coeffs))
        s = row.value(x) / nrm if nrm else row.constant
        worst = max(worst, -s, -li * nrm / gscale, abs(li * nrm * s) / gscale)
    lo, hi = qp.lower_bounds, qp.upper_bounds
    for j in range(n):
        if np.isfinite(lo[j]):
            s = x[j] - lo[j]
            worst = max(worst, -s, abs(mu_lo[j] * s) / gscale)
        elif mu_lo[j] != 0:
            worst = max(worst, abs(mu_lo[j]) / gscale)
        if np.isfinite(hi[j]):
            s = hi[j] - x[j]
            worst = max(worst, -s, abs(mu_hi[j] * s) / gscale)
        elif mu_hi[j] != 0:
            worst = max(worst, abs(mu_hi[j]) / gscale)
        worst = max(worst, -mu_lo[j] / gscale, -mu_hi[j] / gscale)
    return max(worst, 0.0)
