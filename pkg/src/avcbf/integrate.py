"""Zero-order-hold integration of plant plus auxiliary dynamics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Dynamics = Callable[[np.ndarray, np.ndarray], np.ndarray]


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t_reached: float):
        super().__init__(f"{message} (reached t={t_reached:.6g})")
        self.t_reached = t_reached


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rkf45"  # "rkf45" | "rk4"
    atol: float = 1e-8
    rtol: float = 1e-6
    substep: float = 1e-3  # fixed RK4 step, also the dense-log spacing

    def __post_init__(self):
        if self.method not in ("rkf45", "rk4"):
            raise ValueError(f"unknown integrator {self.method!r}")
        if not (self.atol > 0 and self.rtol > 0 and self.substep > 0):
            raise ValueError("integrator tolerances and substep must be positive")


# Fehlberg 4(5) tableau
_C = np.array([0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2])
_A = [
    [],
    [1 / 4],
    [3 / 32, 9 / 32],
    [1932 / 2197, -7200 / 2197, 7296 / 2197],
    [439 / 216, -8.0, 3680 / 513, -845 / 4104],
    [-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40],
]
_B4 = np.array([25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0])
_B5 = np.array([16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55])


def _rkf45_step(f, y, h):
    k = np.empty((6, y.size))
    k[0] = f(y)
    for s in range(1, 6):
        k[s] = f(y + h * (np.dot(_A[s], k[:s])))
    y4 = y + h * (_B4 @ k)
    y5 = y + h * (_B5 @ k)
    return y4, y5 - y4


def _rk4_step(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _segment(f, y, duration, cfg: IntegratorConfig, t0: float):
    if cfg.method == "rk4":
        n = max(1, int(round(duration / cfg.substep)))
        h = duration / n
        for _ in range(n):
            y = _rk4_step(f, y, h)
        return y
    t, h = 0.0, duration
    hmin = 1e-12 * max(duration, 1.0)
    while t < duration:
        h = min(h, duration - t)
        y_new, err = _rkf45_step(f, y, h)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        enorm = float(np.max(np.abs(err) / scale))
        if not np.all(np.isfinite(y_new)):
            enorm = np.inf
        if enorm <= 1.0:
            t += h
            y = y_new
            grow = 5.0 if enorm == 0 else min(5.0, max(0.2, 0.9 * enorm ** -0.2))
            h *= grow
        else:
            h *= max(0.1, 0.9 * enorm ** -0.25) if np.isfinite(enorm) else 0.1
            if h < hmin:
                raise IntegrationError("step size underflow", t0 + t)
    return y


def integrate_hold(
    dynamics: Dynamics,
    state,
    held_inputs,
    duration: float,
    config: IntegratorConfig = IntegratorConfig(),
    t0: float = 0.0,
    log_substeps: bool = False,
):
    """Integrate ``dynamics(y, inputs)`` over ``duration`` with the inputs held.

    Returns the final state, or ``(final_state, samples)`` when
    ``log_substeps`` is set; samples are ``(t, y)`` pairs every
    ``config.substep`` including both interval ends.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    u = np.asarray(held_inputs, dtype=float)
    y = np.asarray(state, dtype=float).copy()

    def f(x):
        return np.asarray(dynamics(x, u), dtype=float)

    if not log_substeps:
        return _segment(f, y, duration, config, t0)
    n = max(1, int(round(duration / config.substep)))
    h = duration / n
    samples = [(t0, y.copy())]
    for i in range(n):
        y = _segment(f, y, h, config, t0 + i * h)
        samples.append((t0 + (i + 1) * h, y.copy()))
    return y, samples
