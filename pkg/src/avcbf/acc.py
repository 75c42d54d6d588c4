"""Cruise-control plant models, control-bound profiles, presets and stage builders."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import cbf
from .cbf import AuxValues, ClfTerms, LieChain, MethodParams, PhiChain, PsiChain
from .integrate import IntegratorConfig
from .qp import StageQp


class VelocityDomainError(ValueError):
    """The ego velocity left the v > 0 operating regime."""


@dataclass(frozen=True)
class AccParams:
    M: float = 1650.0
    v_p: float = 13.89
    v_d: float = 24.0
    l_p: float = 10.0
    f0: float = 0.1
    f1: float = 5.0
    f2: float = 0.25
    g: float = 9.81

    def __post_init__(self):
        for name in ("M", "v_p", "v_d", "l_p", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("f0", "f1", "f2"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class PlantState:
    z: float  # gap to the lead vehicle (m)
    v: float  # ego speed (m/s)


@dataclass(frozen=True)
class AuxState:
    """AVCBF: a1, pi12 (= a1'); PACBF: p1, p2. HOCBF has none."""

    a1: float | None = None
    pi12: float | None = None
    p1: float | None = None
    p2: float | None = None


# --------------------------------------------------------------------------
# dynamics


def resistance_force(v: float, params: AccParams = AccParams(), strict: bool = True) -> float:
    """Rolling/viscous/aerodynamic resistance ``f0 sgn(v) + f1 v + f2 v^2``."""
    if strict and not v > 0:
        raise VelocityDomainError(f"resistance model requires v > 0, got {v}")
    return params.f0 * float(np.sign(v)) + params.f1 * v + params.f2 * v * v


def acc_dynamics(state, u: float, params: AccParams = AccParams()) -> np.ndarray:
    z, v = state[0], state[1]
    return np.array([params.v_p - v, (u - resistance_force(v, params, strict=False)) / params.M])


def sacc_dynamics(state, u: float, v_p: float = 13.89) -> np.ndarray:
    """Double-integrator cruise model: z' = v_p - v, v' = u."""
    return np.array([v_p - state[1], u])


def acc_lie_chain(state: PlantState, params: AccParams) -> LieChain:
    """Derivatives of b = z - l_p along the cruise dynamics (relative degree 2)."""
    fr = resistance_force(state.v, params)
    return LieChain((state.z - params.l_p, params.v_p - state.v, fr / params.M), (-1.0 / params.M,))


def sacc_lie_chain(state: PlantState, v_p: float = 13.89, l_p: float = 10.0) -> LieChain:
    return LieChain((state.z - l_p, v_p - state.v, 0.0), (-1.0,))


def acc_clf(state: PlantState, params: AccParams) -> ClfTerms:
    """Speed-tracking CLF V = (v - v_d)^2."""
    e = state.v - params.v_d
    fr = resistance_force(state.v, params)
    return ClfTerms(e * e, -2.0 * e * fr / params.M, (2.0 * e / params.M,))


# --------------------------------------------------------------------------
# control bounds


@dataclass(frozen=True)
class BoundProfile:
    """Deceleration coefficient c_d(t); the acceleration coefficient c_a is constant."""

    kind: str = "constant"
    c: float = 0.4
    c_start: float = 0.4
    c_end: float = 0.2
    t_start: float = 0.0
    t_end: float = 50.0
    points: tuple[tuple[float, float], ...] = ()
    c_a: float = 0.4

    def __post_init__(self):
        if self.kind == "constant":
            if not self.c > 0:
                raise ValueError(f"c must be positive, got {self.c}")
        elif self.kind == "linear_ramp":
            if self.t_end < self.t_start:
                raise ValueError(f"t_end ({self.t_end}) must not precede t_start ({self.t_start})")
            if not (self.c_start > 0 and self.c_end > 0):
                raise ValueError("c_start and c_end must be positive")
        elif self.kind == "piecewise":
            if len(self.points) < 1:
                raise ValueError("points must list at least one (t, c_d) knot")
            ts = [p[0] for p in self.points]
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("points must have strictly increasing times")
            if any(p[1] <= 0 for p in self.points):
                raise ValueError("points must have positive c_d values")
        else:
            raise ValueError(f"unknown bound profile kind {self.kind!r}")
        if not self.c_a > 0:
            raise ValueError("c_a must be positive")

    @classmethod
    def constant(cls, c: float, c_a: float = 0.4) -> "BoundProfile":
        return cls("constant", c=c, c_a=c_a)

    @classmethod
    def ramp(cls, c_start: float, c_end: float, t_start: float = 0.0, t_end: float = 50.0) -> "BoundProfile":
        return cls("linear_ramp", c_start=c_start, c_end=c_end, t_start=t_start, t_end=t_end)

    @classmethod
    def piecewise(cls, points: Sequence[tuple[float, float]]) -> "BoundProfile":
        return cls("piecewise", points=tuple((float(t), float(c)) for t, c in points))

    def c_d(self, t: float) -> float:
        if self.kind == "constant":
            if t < 0:
                raise ValueError(f"t={t} outside profile domain")
            return self.c
        if self.kind == "linear_ramp":
            if t < 0:
                raise ValueError(f"t={t} outside profile domain")
            if t <= self.t_start:
                return self.c_start
            if t >= self.t_end:
                return self.c_end
            s = (t - self.t_start) / (self.t_end - self.t_start)
            return self.c_start + s * (self.c_end - self.c_start)
        ts = [p[0] for p in self.points]
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise ValueError(f"t={t} outside profile domain [{ts[0]}, {ts[-1]}]")
        return float(np.interp(t, ts, [p[1] for p in self.points]))


def control_bounds(t: float, profile: BoundProfile, params: AccParams = AccParams()) -> tuple[float, float]:
    return -profile.c_d(t) * params.M * params.g, profile.c_a * params.M * params.g


# --------------------------------------------------------------------------
# scenarios and presets


@dataclass(frozen=True)
class Scenario:
    method: str
    params: MethodParams = field(default_factory=MethodParams)
    acc: AccParams = field(default_factory=AccParams)
    bounds: BoundProfile = field(default_factory=BoundProfile)
    plant0: PlantState = PlantState(100.0, 6.0)
    aux0: AuxState = AuxState()
    T: float = 50.0
    dt: float = 0.1
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    name: str = ""

    def __post_init__(self):
        if self.method not in cbf.METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.T > 0 and self.dt > 0):
            raise ValueError("T and dt must be positive")
        if self.method == "avcbf" and (self.aux0.a1 is None or self.aux0.pi12 is None):
            raise ValueError("AVCBF scenario needs initial a1 and pi12")
        if self.method == "pacbf" and (self.aux0.p1 is None or self.aux0.p2 is None):
            raise ValueError("PACBF scenario needs initial p1 and p2")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))


# Per-preset, per-method settings. fig1 is the nominal approach, fig34 the
# urgent-braking case, fig2 a large-gain setting that runs out of braking.
PRESETS: dict[str, dict] = {
    "fig1": {
        "v0": 6.0,
        "hocbf": dict(k1=0.1, k2=0.1, c3=2.0, Q=1000.0),
        "avcbf": dict(k1=0.1, k2=0.1, l1=0.1, l2=0.1, W1=1000.0, Q=1000.0, a1w=1.0, c3=2.0),
        "pacbf": dict(c3=10.0, W1=2e12, W2=2e12, Q=1.0, Qp=1.0, rho=10.0, p1_star=0.103),
    },
    # large gains on a slippery road; gains and c_d here are our own choice
    "fig2": {
        "v0": 6.0,
        "c_d": 0.1,
        "hocbf": dict(k1=0.5, k2=0.5, c3=2.0, Q=1000.0),
        "avcbf": dict(k1=0.5, k2=0.5, l1=0.5, l2=0.5, W1=1000.0, Q=1000.0, a1w=1.0, c3=2.0),
        "pacbf": dict(c3=10.0, W1=2e12, W2=2e12, Q=1.0, Qp=1.0, rho=10.0, p1_star=0.103),
    },
    "fig34": {
        "v0": 20.0,
        "hocbf": dict(k1=0.1, k2=0.1, c3=70.0, Q=7e5),
        "avcbf": dict(k1=0.1, k2=0.1, l1=0.1, l2=0.1, W1=2e5, Q=7e5, a1w=1.0, c3=70.0),
        "pacbf": dict(c3=10.0, W1=2e12, W2=2e12, Q=1.0, Qp=1.0, rho=10.0, p1_star=0.103),
    },
}
PRESETS["fig34_c3_100"] = {
    **PRESETS["fig34"],
    "avcbf": {**PRESETS["fig34"]["avcbf"], "c3": 100.0},
}

DEFAULT_AUX = {
    "hocbf": AuxState(),
    "avcbf": AuxState(a1=1.0, pi12=1.0),
    "pacbf": AuxState(p1=0.103, p2=1.0),
}


def make_scenario(
    preset: str,
    method: str,
    bounds: BoundProfile | None = None,
    *,
    acc: AccParams | None = None,
    T: float = 50.0,
    dt: float = 0.1,
    integrator: IntegratorConfig | None = None,
    z0: float = 100.0,
    v0: float | None = None,
    aux0: AuxState | None = None,
    **param_overrides,
) -> Scenario:
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
    if method not in cbf.METHODS:
        raise ValueError(f"unknown method {method!r}")
    cfg = PRESETS[preset]
    params = MethodParams(**{**cfg[method], **param_overrides})
    return Scenario(
        method=method,
        params=params,
        acc=acc or AccParams(),
        bounds=bounds or BoundProfile.constant(cfg.get("c_d", 0.4)),
        plant0=PlantState(z0, cfg["v0"] if v0 is None else v0),
        aux0=aux0 or DEFAULT_AUX[method],
        T=T,
        dt=dt,
        integrator=integrator or IntegratorConfig(),
        name=f"{preset}-{method}",
    )


# --------------------------------------------------------------------------
# stage builders


def _aux_values(method: str, aux: AuxState) -> AuxValues:
    if method == "avcbf":
        if aux.a1 is None or aux.pi12 is None:
            raise ValueError("AVCBF stage requires a1 and pi12")
        return AuxValues(pi1=(aux.a1, aux.pi12))
    if method == "pacbf":
        if aux.p1 is None:
            raise ValueError("PACBF stage requires p1")
        return AuxValues(p1=aux.p1)
    if aux.a1 is not None or aux.p1 is not None:
        raise ValueError("HOCBF stage takes no auxiliary state")
    return AuxValues()


def build_stage(
    method: str,
    state: PlantState,
    aux: AuxState,
    acc: AccParams,
    params: MethodParams,
    bounds: tuple[float, float],
) -> tuple[StageQp, PsiChain, PhiChain | None]:
    """Assemble the per-step QP and the chains it was built from."""
    return cbf.assemble_rows(
        method,
        acc_lie_chain(state, acc),
        acc_clf(state, acc),
        _aux_values(method, aux),
        params,
        bounds,
        (resistance_force(state.v, acc), acc.M),
    )


def build_hocbf_stage(state, aux, acc, params, bounds) -> StageQp:
    return build_stage("hocbf", state, aux, acc, params, bounds)[0]


def build_avcbf_stage(state, aux, acc, params, bounds) -> StageQp:
    return build_stage("avcbf", state, aux, acc, params, bounds)[0]


def build_pacbf_stage(state, aux, acc, params, bounds) -> StageQp:
    return build_stage("pacbf", state, aux, acc, params, bounds)[0]


def augmented_dynamics(method: str, acc: AccParams):
    """Right-hand side on the augmented state used by the closed loop.

    hocbf: (z, v) with inputs (u,); avcbf: (z, v, a1, pi12) with (u, nu1);
    pacbf: (z, v, p1) with (u, nu1).
    """
    vp, M = acc.v_p, acc.M

    def plant(y, u):
        return [vp - y[1], (u - resistance_force(y[1], acc, strict=False)) / M]

    if method == "hocbf":
        return lambda y, w: np.array(plant(y, w[0]))
    if method == "avcbf":
        return lambda y, w: np.array(plant(y, w[0]) + [y[3], w[1]])
    if method == "pacbf":
        return lambda y, w: np.array(plant(y, w[0]) + [w[1]])
    raise ValueError(f"unknown method {method!r}")


def pack_state(method: str, plant: PlantState, aux: AuxState) -> np.ndarray:
    if method == "avcbf":
        return np.array([plant.z, plant.v, aux.a1, aux.pi12], dtype=float)
    if method == "pacbf":
        return np.array([plant.z, plant.v, aux.p1], dtype=float)
    return np.array([plant.z, plant.v], dtype=float)


def unpack_state(method: str, y, p2: float | None = None) -> tuple[PlantState, AuxState]:
    plant = PlantState(float(y[0]), float(y[1]))
    if method == "avcbf":
        return plant, AuxState(a1=float(y[2]), pi12=float(y[3]))
    if method == "pacbf":
        return plant, AuxState(p1=float(y[2]), p2=p2)
    return plant, AuxState()


def with_params(scenario: Scenario, **overrides) -> Scenario:
    return replace(scenario, params=replace(scenario.params, **overrides))
