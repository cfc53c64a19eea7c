"""Kinematic bicycle model and pedal mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass

DT = 0.1


@dataclass(frozen=True)
class VehicleKind:
    length: float = 4.8
    width: float = 2.0
    l_f: float = 1.4
    l_r: float = 1.4
    accel_max: float = 4.0
    accel_min: float = -8.0
    steer_max: float = 0.6
    v_max: float = 30.0
    c_drag: float = 0.004

    def __post_init__(self):
        if not self.length > self.l_f + self.l_r > 0:
            raise ValueError("need length > l_f + l_r > 0")
        if not self.accel_min < 0 < self.accel_max:
            raise ValueError("need accel_min < 0 < accel_max")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    @property
    def max_brake(self) -> float:
        """Magnitude of the hardest deceleration, |max(alpha)| in the safety distances."""
        return abs(self.accel_min)


DEFAULT_KIND = VehicleKind()


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    v: float
    psi: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.v, self.psi)):
            raise ValueError(f"non-finite vehicle state {self}")
        if self.v < 0:
            raise ValueError(f"negative speed {self.v}")


@dataclass(frozen=True)
class ControlInput:
    accel: float
    steer: float

    def clipped(self, kind: VehicleKind) -> "ControlInput":
        return ControlInput(
            min(max(self.accel, kind.accel_min), kind.accel_max),
            min(max(self.steer, -kind.steer_max), kind.steer_max),
        )


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]; in-range angles pass through untouched."""
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def step_bicycle(state: VehicleState, u: ControlInput, dt: float = DT, kind: VehicleKind = DEFAULT_KIND) -> VehicleState:
    """One forward-Euler step of the c.g.-referenced kinematic bicycle."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not (math.isfinite(u.accel) and math.isfinite(u.steer)):
        raise ValueError(f"non-finite control {u}")
    eps = 1e-9
    if not (kind.accel_min - eps <= u.accel <= kind.accel_max + eps and abs(u.steer) <= kind.steer_max + eps):
        raise ValueError(f"control {u} outside vehicle bounds")
    beta = math.atan(kind.l_r * math.tan(u.steer) / kind.wheelbase)
    x = state.x + state.v * math.cos(state.psi + beta) * dt
    y = state.y + state.v * math.sin(state.psi + beta) * dt
    psi = wrap_angle(state.psi + (state.v / kind.l_r) * math.sin(beta) * dt)
    v = min(max(state.v + u.accel * dt, 0.0), kind.v_max)
    return VehicleState(x, y, v, psi)


def pedal_to_accel(throttle: float, brake: float, v: float, kind: VehicleKind = DEFAULT_KIND) -> float:
    if not (0.0 <= throttle <= 1.0 and 0.0 <= brake <= 1.0):
        raise ValueError(f"pedals out of [0, 1]: throttle={throttle}, brake={brake}")
    if throttle > 0.0 and brake > 0.0:
        raise ValueError("throttle and brake both active")
    a = throttle * kind.accel_max - brake * abs(kind.accel_min) - kind.c_drag * v * v
    return min(max(a, kind.accel_min), kind.accel_max)
