"""Kinematic bicycle model and the intelligent driver model (IDM)."""

from dataclasses import dataclass
import math

from .geometry import wrap_angle

WHEELBASE = 2.7
DT = 0.1
ACCEL_MAX = 3.0
STEER_MAX = 0.6


class InvalidStateError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    yaw: float
    v: float

    def __post_init__(self):
        if not all(math.isfinite(f) for f in (self.x, self.y, self.yaw, self.v)):
            raise InvalidStateError("invalid state")


@dataclass(frozen=True)
class Action:
    accel: float = 0.0
    steer: float = 0.0

    def clipped(self, accel_max=ACCEL_MAX, steer_max=STEER_MAX):
        return Action(min(max(self.accel, -accel_max), accel_max),
                      min(max(self.steer, -steer_max), steer_max))


def step_vehicle(state, action, dt=DT, wheelbase=WHEELBASE, check_bounds=True):
    """Advance a kinematic bicycle by one explicit Euler step.

    Speed is floored at zero (no reversing) and yaw is wrapped to (-pi, pi].
    """
    accel, steer = float(action.accel), float(action.steer)
    if not (math.isfinite(accel) and math.isfinite(steer)) or not dt > 0:
        raise InvalidStateError("invalid state")
    if check_bounds and (abs(accel) > ACCEL_MAX + 1e-12 or abs(steer) > STEER_MAX + 1e-12):
        raise ValueError(f"action out of bounds: {action}")
    x, y, yaw, v = state.x, state.y, state.yaw, state.v
    return VehicleState(
        x + v * math.cos(yaw) * dt,
        y + v * math.sin(yaw) * dt,
        wrap_angle(yaw + (v / wheelbase) * math.tan(steer) * dt),
        max(0.0, v + accel * dt),
    )


@dataclass(frozen=True)
class IdmParams:
    v0: float = 12.0
    T_headway: float = 1.5
    a_max: float = 1.5
    b_comf: float = 2.0
    s0: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        if min(self.v0, self.T_headway, self.a_max, self.b_comf, self.s0, self.delta) <= 0:
            raise ValueError("IDM parameters must be positive")


def idm_accel(gap, v, v_lead, p):
    """Treiber IDM acceleration, clamped to [-2*b_comf, a_max].

    A non-positive gap is treated as an imminent collision (full braking).
    """
    if gap <= 0:
        return -2.0 * p.b_comf
    s_star = p.s0 + v * p.T_headway + v * (v - v_lead) / (2.0 * math.sqrt(p.a_max * p.b_comf))
    a = p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / gap) ** 2)
    return min(max(a, -2.0 * p.b_comf), p.a_max)
