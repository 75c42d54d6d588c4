"""Barrier-function chains and per-step QP assembly.

A chain value that depends on time along the closed loop is represented by a
*jet*: its value and time derivatives up to some order, each an affine
expression in the QP decision vector (control and auxiliary inputs only show
up in the highest derivatives). The generic recursions below operate on jets;
``eval_psi_chain_avcbf``/``eval_psi_chain_pacbf`` additionally carry the
hand-expanded relative-degree-2 formulas used by the cruise-control models.
"""

from __future__ import annotations

import logging
import warnings
from math import comb
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .qp import ConstraintRow, StageQp

log = logging.getLogger(__name__)

METHODS = ("hocbf", "avcbf", "pacbf")
LAYOUTS = {
    "hocbf": ("u", "delta"),
    "avcbf": ("u", "nu1", "delta"),
    "pacbf": ("u", "nu1", "nu2", "delta", "delta_p"),
}
# curvature given to PACBF's nu1, whose cost term is purely linear
NU1_REGULARIZER = 1e-9


class ParameterWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# class-kappa functions


@dataclass(frozen=True)
class ClassKappa:
    kind: str
    k: float

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic"):
            raise ValueError(f"unknown class-kappa kind {self.kind!r}")
        if not self.k >= 0:
            raise ValueError("class-kappa gain must be nonnegative")

    def __call__(self, s: float) -> float:
        return self.k * s if self.kind == "linear" else self.k * s * s

    def jet(self, f: "Jet") -> "Jet":
        return f.scale(self.k) if self.kind == "linear" else (f * f).scale(self.k)


def linear(k: float) -> ClassKappa:
    return ClassKappa("linear", k)


def quadratic(k: float) -> ClassKappa:
    return ClassKappa("quadratic", k)


def eval_class_kappa(fn: ClassKappa, s: float) -> float:
    if s < 0:
        log.debug("class-kappa %s evaluated at negative argument %g", fn, s)
    return fn(s)


# --------------------------------------------------------------------------
# affine expressions and jets


@dataclass(frozen=True)
class Affine:
    """``const + coeffs @ decision``."""

    const: float
    coeffs: np.ndarray

    @classmethod
    def constant(cls, value: float, dim: int) -> "Affine":
        return cls(float(value), np.zeros(dim))

    @classmethod
    def variable(cls, index: int, dim: int, scale: float = 1.0) -> "Affine":
        c = np.zeros(dim)
        c[index] = scale
        return cls(0.0, c)

    @property
    def is_constant(self) -> bool:
        return not np.any(self.coeffs)

    def __add__(self, other: "Affine") -> "Affine":
        return Affine(self.const + other.const, self.coeffs + other.coeffs)

    def scale(self, s: float) -> "Affine":
        return Affine(s * self.const, s * self.coeffs)

    def __mul__(self, other: "Affine") -> "Affine":
        if not self.is_constant and not other.is_constant:
            raise ValueError("product of two decision-dependent terms is not affine")
        return Affine(self.const * other.const, self.const * other.coeffs + other.const * self.coeffs)

    def at(self, decision) -> float:
        return float(self.const + self.coeffs @ np.asarray(decision, dtype=float))


class Jet:
    """Value and time derivatives ``[f, f', f'', ...]`` of a chain quantity."""

    __slots__ = ("terms",)

    def __init__(self, terms: Sequence[Affine]):
        self.terms = list(terms)

    @classmethod
    def of(cls, values: Sequence[float], dim: int, top: Affine | None = None) -> "Jet":
        terms = [Affine.constant(v, dim) for v in values]
        if top is not None:
            terms.append(top)
        return cls(terms)

    def __len__(self) -> int:
        return len(self.terms)

    def __getitem__(self, i: int) -> Affine:
        return self.terms[i]

    def derivative(self) -> "Jet":
        return Jet(self.terms[1:])

    def scale(self, s: float) -> "Jet":
        return Jet([t.scale(s) for t in self.terms])

    def __add__(self, other: "Jet") -> "Jet":
        n = min(len(self), len(other))
        return Jet([self.terms[i] + other.terms[i] for i in range(n)])

    def __mul__(self, other: "Jet") -> "Jet":
        # Leibniz rule, truncated to the shorter jet
        n = min(len(self), len(other))
        out = []
        for order in range(n):
            acc = None
            for j in range(order + 1):
                term = (self.terms[j] * other.terms[order - j]).scale(float(comb(order, j)))
                acc = term if acc is None else acc + term
            out.append(acc)
        return Jet(out)


def _one(order: int, dim: int) -> Jet:
    return Jet([Affine.constant(1.0, dim)] + [Affine.constant(0.0, dim)] * order)


# --------------------------------------------------------------------------
# chain containers


@dataclass(frozen=True)
class LieChain:
    """Derivatives of a barrier ``b`` along the plant.

    ``values = (b, L_f b, ..., L_f^m b)`` and ``control_gain`` is ``L_g L_f^{m-1} b``
    (one entry per plant input), so ``b^(m) = L_f^m b + control_gain @ u``.
    """

    values: tuple[float, ...]
    control_gain: tuple[float, ...]

    @property
    def degree(self) -> int:
        return len(self.values) - 1

    def jet(self, dim: int, input_index: Sequence[int]) -> Jet:
        top = Affine.constant(self.values[-1], dim)
        for g, idx in zip(self.control_gain, input_index):
            top = top + Affine.variable(idx, dim, g)
        return Jet.of(self.values[:-1], dim, top)


@dataclass(frozen=True)
class PsiChain:
    """psi_0..psi_{m-1} as scalars plus the top-order constraint row.

    ``derivs[i]`` is the time derivative of ``psi_i`` as an affine expression
    in the decision vector (decision-free for ``i < m-1``).
    """

    values: tuple[float, ...]
    top: ConstraintRow
    derivs: tuple[Affine, ...] = field(default=(), repr=False)

    @property
    def order(self) -> int:
        return len(self.values)

    def top_value(self, decision) -> float:
        return self.top.value(decision)


@dataclass(frozen=True)
class PhiChain:
    """phi_{i,0}..phi_{i,top-1} for an auxiliary barrier ``h_i = a_i`` and its top row."""

    values: tuple[float, ...]
    top: ConstraintRow


def _chain_from_jets(jets: list[Jet], top: Affine, tag: str) -> PsiChain:
    values = []
    for j in jets:
        if not j[0].is_constant:
            raise ValueError("lower-order chain value depends on the decision vector")
        values.append(j[0].const)
    derivs = tuple(j[1] for j in jets)
    return PsiChain(tuple(values), ConstraintRow(top.coeffs, top.const, tag), derivs)


# --------------------------------------------------------------------------
# psi recursions (general relative degree)


def psi_chain_recursive(
    lie: LieChain,
    gains: Sequence[ClassKappa],
    dim: int,
    input_index: Sequence[int] = (0,),
    aux: Sequence[Jet] = (),
    penalties: Sequence[Jet] = (),
) -> PsiChain:
    """Generic psi recursion on jets.

    * HOCBF: ``psi_i = psi_{i-1}' + alpha_i(psi_{i-1})``.
    * AVCBF (``aux`` = jets of a_1..a_r, r <= m):
      ``psi_0 = a_1 b``, ``psi_i = a_{i+1} (psi_{i-1}' + alpha_i(psi_{i-1}))``
      for i < m, with missing a_i taken as 1.
    * PACBF (``penalties`` = jets of p_1..p_m):
      ``psi_i = psi_{i-1}' + p_i * alpha_i(psi_{i-1})``.
    """
    m = lie.degree
    if len(gains) != m:
        raise ValueError(f"need {m} class-kappa functions, got {len(gains)}")
    b = lie.jet(dim, input_index)
    a = list(aux) + [_one(m, dim)] * (m - len(aux))
    psi = a[0] * b if aux else b
    jets = [psi]
    for i in range(1, m + 1):
        prev = jets[-1]
        kappa = gains[i - 1].jet(prev)
        if penalties:
            kappa = penalties[i - 1] * kappa
        nxt = prev.derivative() + kappa
        if i < m and aux:
            nxt = a[i] * nxt
        jets.append(nxt)
    return _chain_from_jets(jets[:-1], jets[-1][0], f"psi{m}")


def eval_psi_chain_hocbf(lie: LieChain, gains: Sequence[ClassKappa], dim: int = 1, u_index: int = 0) -> PsiChain:
    return psi_chain_recursive(lie, gains, dim, (u_index,))


def eval_psi_chain_avcbf(
    lie: LieChain,
    aux_states: Sequence[Sequence[float]],
    gains: Sequence[ClassKappa],
    dim: int,
    u_index: int = 0,
    nu_index: Sequence[int] = (1,),
) -> PsiChain:
    """AVCBF chain. ``aux_states[i]`` is pi_{i+1} = (a_{i+1}, a_{i+1}', ...).

    Relative degree 2 with a single auxiliary variable and linear gains uses
    the expanded form
      psi_0 = a b,  psi_1 = a' b + a b' + k1 a b,
      psi_2 = nu b + 2 a' b' + a b'' + k1 (a' b + a b') + k2 psi_1;
    everything else goes through the jet recursion.
    """
    m = lie.degree
    for pi in aux_states:
        if pi[0] <= 0:
            log.warning("auxiliary variable is not positive: %g", pi[0])
    if m == 2 and len(aux_states) == 1 and all(g.kind == "linear" for g in gains):
        a, ad = aux_states[0]
        k1, k2 = gains[0].k, gains[1].k
        b, bd, lf2 = lie.values
        psi0 = a * b
        psi0d = ad * b + a * bd
        psi1 = psi0d + k1 * psi0
        coeffs = np.zeros(dim)
        coeffs[nu_index[0]] = b
        coeffs[u_index] = a * lie.control_gain[0]
        const = 2 * ad * bd + a * lf2 + k1 * psi0d + k2 * psi1
        top = ConstraintRow(coeffs, const, "psi2")
        # psi_1' = psi_2 - k2 psi_1
        d1 = Affine(const - k2 * psi1, coeffs.copy())
        return PsiChain((psi0, psi1), top, (Affine.constant(psi0d, dim), d1))
    jets = []
    for i, pi in enumerate(aux_states):
        jets.append(Jet.of(pi, dim, Affine.variable(nu_index[i], dim)))
    return psi_chain_recursive(lie, gains, dim, (u_index,), aux=jets)


def eval_psi_chain_pacbf(
    lie: LieChain,
    p1: float,
    gains: Sequence[ClassKappa],
    dim: int,
    u_index: int = 0,
    nu1_index: int = 1,
    nu2_index: int = 2,
) -> PsiChain:
    """PACBF chain with p_1' = nu_1 and p_2 = nu_2:
    psi_1 = b' + p1 kappa1(b),  psi_2 = psi_1' + nu2 kappa2(psi_1)."""
    if lie.degree != 2:
        raise ValueError("PACBF chain is implemented for relative degree 2")
    p1_jet = Jet([Affine.constant(p1, dim), Affine.variable(nu1_index, dim)])
    p2_jet = Jet([Affine.variable(nu2_index, dim)])
    return psi_chain_recursive(lie, gains, dim, (u_index,), penalties=(p1_jet, p2_jet))


def psi1_ratio_form(b: float, bdot: float, a1: float, a1dot: float, k1: float, a2: float = 1.0) -> float:
    """First-order AVCBF value written with the adaptive ratio a1'/a1:
    ``a2 a1 (b' + k1 (1 + a1'/(k1 a1)) b)``."""
    return a2 * a1 * (bdot + k1 * (1.0 + a1dot / (k1 * a1)) * b)


# --------------------------------------------------------------------------
# auxiliary barrier chain


def eval_phi_chain(
    pi: Sequence[float],
    gains: Sequence[ClassKappa],
    eps: float,
    dim: int,
    nu_index: int = 1,
    tag: str = "phi",
) -> PhiChain:
    """HOCBF chain for ``h = a`` on the integrator chain ``a^(len(pi)) = nu``.

    For pi = (a, a') and linear gains l1, l2 this gives
    phi_0 = a, phi_1 = a' + l1 a and the row ``nu + (l1 + l2) a' + l1 l2 a - eps >= 0``.
    """
    r = len(pi)
    if len(gains) != r:
        raise ValueError(f"need {r} class-kappa functions, got {len(gains)}")
    phi = Jet.of(pi, dim, Affine.variable(nu_index, dim))
    values = []
    for g in gains:
        if not phi[0].is_constant:
            raise ValueError("auxiliary chain value depends on the decision vector")
        values.append(phi[0].const)
        phi = phi.derivative() + g.jet(phi)
    top = phi[0]
    return PhiChain(tuple(values), ConstraintRow(top.coeffs, top.const - eps, f"{tag}{r}"))


# --------------------------------------------------------------------------
# parameters and assembly


@dataclass(frozen=True)
class MethodParams:
    """Gains, weights and targets for one CBF family.

    HOCBF uses k1, k2, c3, Q. AVCBF adds l1, l2, W1, a1w, eps.
    PACBF uses c3, W1 (linear nu1 cost), W2, Q, Qp, rho, p1_star, p1_max.
    """

    k1: float = 0.1
    k2: float = 0.1
    l1: float = 0.1
    l2: float = 0.1
    W1: float = 1000.0
    W2: float = 2e12
    Q: float = 1000.0
    Qp: float = 1.0
    a1w: float = 1.0
    p1_star: float = 0.103
    rho: float = 10.0
    c3: float = 2.0
    eps: float = 1e-10
    p1_max: float = 3.0
    nu1_fixed: float | None = None  # pin nu1 (degeneracy experiments)

    def __post_init__(self):
        for name in ("k1", "k2", "l1", "l2", "W1", "W2", "Q", "Qp", "rho", "c3", "eps", "p1_max"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be positive, got {val}")
        for name in ("a1w", "p1_star"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def tuning_warnings(self) -> list[str]:
        """The auxiliary gains should not exceed the matching barrier gains."""
        out = []
        if self.l1 > self.k1:
            out.append(f"l1={self.l1} exceeds k1={self.k1}")
        if self.l2 > self.k2:
            out.append(f"l2={self.l2} exceeds k2={self.k2}")
        return out

    def check(self) -> None:
        for msg in self.tuning_warnings():
            warnings.warn(msg, ParameterWarning, stacklevel=2)


@dataclass(frozen=True)
class ClfTerms:
    """``V``, ``L_f V`` and ``L_g V`` (per plant input) at the current state."""

    V: float
    LfV: float
    LgV: tuple[float, ...]


@dataclass(frozen=True)
class AuxValues:
    """Auxiliary state as seen by the QP: AVCBF pi_1 = (a1, a1'), PACBF p1."""

    pi1: tuple[float, float] | None = None
    p1: float | None = None


def assemble_rows(
    method: str,
    lie: LieChain,
    clf: ClfTerms,
    aux: AuxValues,
    params: MethodParams,
    bounds: tuple[float, float],
    nominal: tuple[float, float],
) -> tuple[StageQp, PsiChain, PhiChain | None]:
    """Build the per-step QP for ``method``.

    ``nominal = (u_ref, scale)`` gives the tracking cost ``((u - u_ref)/scale)^2``.
    Decision layouts: hocbf (u, delta); avcbf (u, nu1, delta);
    pacbf (u, nu1, nu2, delta, delta_p). All rows read ``expr >= 0``; the
    relaxed CLF ``LfV + LgV u + c3 V <= delta`` is stored negated.
    """
    if method not in LAYOUTS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    labels = LAYOUTS[method]
    n = len(labels)
    ix = {name: i for i, name in enumerate(labels)}
    u_ref, scale = nominal
    u_min, u_max = bounds
    if not (np.isfinite(u_min) and np.isfinite(u_max)):
        raise ValueError("control bounds must be finite")

    h = np.zeros(n)
    c = np.zeros(n)
    h[ix["u"]] = 2.0 / scale**2
    c[ix["u"]] = -2.0 * u_ref / scale**2
    h[ix["delta"]] = 2.0 * params.Q
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    lo[ix["u"]], hi[ix["u"]] = u_min, u_max

    rows: list[ConstraintRow] = []
    kappa = (linear(params.k1), linear(params.k2))
    phi = None
    if method == "hocbf":
        psi = eval_psi_chain_hocbf(lie, kappa, n, ix["u"])
        rows.append(psi.top)
    elif method == "avcbf":
        if aux.pi1 is None:
            raise ValueError("AVCBF stage needs the auxiliary state (a1, pi12)")
        psi = eval_psi_chain_avcbf(lie, [aux.pi1], kappa, n, ix["u"], (ix["nu1"],))
        phi = eval_phi_chain(aux.pi1, (linear(params.l1), linear(params.l2)), params.eps, n, ix["nu1"])
        rows += [psi.top, phi.top]
        h[ix["nu1"]] = 2.0 * params.W1
        c[ix["nu1"]] = -2.0 * params.W1 * params.a1w
    else:
        if aux.p1 is None:
            raise ValueError("PACBF stage needs the penalty state p1")
        p1 = aux.p1
        psi = eval_psi_chain_pacbf(lie, p1, (quadratic(1.0), linear(1.0)), n, ix["u"], ix["nu1"], ix["nu2"])
        rows.append(psi.top)
        e_nu1 = np.zeros(n)
        e_nu1[ix["nu1"]] = 1.0
        rows.append(ConstraintRow(-e_nu1, params.p1_max - p1, "p1_upper"))
        rows.append(ConstraintRow(e_nu1, p1, "p1_lower"))
        dp = p1 - params.p1_star
        clf_p = np.zeros(n)
        clf_p[ix["nu1"]] = -2.0 * dp
        clf_p[ix["delta_p"]] = 1.0
        rows.append(ConstraintRow(clf_p, -params.rho * dp * dp, "clf_p1"))
        h[ix["nu1"]] = NU1_REGULARIZER
        c[ix["nu1"]] = params.W1
        h[ix["nu2"]] = 2.0 * params.W2
        c[ix["nu2"]] = -2.0 * params.W2
        h[ix["delta_p"]] = 2.0 * params.Qp
        lo[ix["nu2"]] = 0.0

    clf_row = np.zeros(n)
    clf_row[ix["u"]] = -clf.LgV[0]
    clf_row[ix["delta"]] = 1.0
    rows.append(ConstraintRow(clf_row, -(clf.LfV + params.c3 * clf.V), "clf"))

    if params.nu1_fixed is not None and "nu1" in ix:
        lo[ix["nu1"]] = hi[ix["nu1"]] = params.nu1_fixed

    qp = StageQp(h, c, tuple(rows), lo, hi, labels)
    return qp, psi, phi


def finite_diff_validate(samples, evaluator) -> float:
    """Worst relative mismatch between analytic and central-difference chain derivatives.

    ``samples`` is either a trajectory recorded with substep logging (anything
    with ``records`` whose entries carry ``substeps`` and ``decision``) or a
    sequence of ``(interval, decision)`` pairs, where ``interval`` lists
    ``(t, state)`` at uniform spacing under one held decision.
    ``evaluator(state, decision)`` returns a ``PsiChain``; analytic derivatives
    come from ``PsiChain.derivs`` at the held decision.

    The error of each chain order is taken relative to the largest analytic
    derivative of that order over all samples (an infinity-norm relative
    error), so zero crossings and flat stretches do not inflate the ratio.
    """
    if hasattr(samples, "records"):
        recs = [r for r in samples.records if r.status == "optimal"]
        if any(not r.substeps for r in recs):
            raise ValueError("trajectory was recorded without substep logging")
        samples = [(list(r.substeps), np.asarray(r.decision)) for r in recs]
    err: dict[int, float] = {}
    scale: dict[int, float] = {}
    for interval, decision in samples:
        if len(interval) < 3:
            continue
        chains = [evaluator(y, decision) for _, y in interval]
        ts = np.array([t for t, _ in interval])
        for order in range(chains[0].order):
            vals = np.array([ch.values[order] for ch in chains])
            an = np.array([ch.derivs[order].at(decision) for ch in chains])
            fd = (vals[2:] - vals[:-2]) / (ts[2:] - ts[:-2])
            err[order] = max(err.get(order, 0.0), float(np.max(np.abs(fd - an[1:-1]))))
            scale[order] = max(scale.get(order, 0.0), float(np.max(np.abs(an))))
    return max((err[o] / scale[o] for o in err if scale[o] > 0), default=0.0)
