"""CBF safety shield: nominal controller, barriers, and per-action feasibility."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .actions import ACTION_SET, K_THROTTLE, Action
from .dynamics import DEFAULT_KIND, ControlInput, VehicleKind, VehicleState, pedal_to_accel
from .world import (
    LaneIndex,
    LanePosition,
    NoSuchLane,
    RoadNetwork,
    crossing_conflicts,
    relation_lane,
    waypoint_for_action,
)

BRAKE_PEDAL = 0.25
EMERGENCY_BRAKE_PEDAL = 1.0


@dataclass(frozen=True)
class ShieldConfig:
    c1: float = 0.6
    c2: float = 1.0
    D: float = 3.0
    gamma_cbf: float = 0.8
    horizon_check: int = 20

    def __post_init__(self):
        for name in ("c1", "c2", "D", "gamma_cbf"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ShieldConfig.{name} must be positive")
        if self.horizon_check < 1:
            raise ValueError("ShieldConfig.horizon_check must be >= 1")


DEFAULT_SHIELD = ShieldConfig()


# ---------------------------------------------------------------------------
# safety distances and barriers


def _following_raw(v, v_f, cfg, kind, kind_f):
    return cfg.c1 * v + cfg.c2 * (v * v / (2 * kind.max_brake) - v_f * v_f / (2 * kind_f.max_brake))


def safety_following_distance(v: float, v_f: float, cfg: ShieldConfig = DEFAULT_SHIELD,
                              kind: VehicleKind = DEFAULT_KIND, kind_f: VehicleKind = DEFAULT_KIND) -> float:
    """Reaction term plus braking-distance difference plus buffer, never below the buffer."""
    return max(_following_raw(v, v_f, cfg, kind, kind_f), 0.0) + cfg.D


def _leading_raw(v, v_b, cfg, kind, kind_b):
    return cfg.c1 * v_b + cfg.c2 * (v_b * v_b / (2 * kind_b.max_brake) - v * v / (2 * kind.max_brake))


def safety_leading_distance(v: float, v_b: float, cfg: ShieldConfig = DEFAULT_SHIELD,
                            kind: VehicleKind = DEFAULT_KIND, kind_b: VehicleKind = DEFAULT_KIND) -> float:
    return max(_leading_raw(v, v_b, cfg, kind, kind_b), 0.0) + cfg.D


@dataclass(frozen=True)
class Barrier:
    """h and the split of its time derivative: hdot = hdot_free + coef * ego_accel."""

    h: float
    hdot_free: float
    coef: float
    target: object = None
    direction: str = "front"


def barrier_values(v: float, gap: float, v_t: float, a_t: float, direction: str,
                   cfg: ShieldConfig = DEFAULT_SHIELD, kind: VehicleKind = DEFAULT_KIND,
                   kind_t: VehicleKind = DEFAULT_KIND, target=None) -> Barrier:
    """Barrier for one target; ``gap`` is the bumper gap along the ego's lane frame.

    The target's acceleration is frozen at ``a_t``. When the distance floor is
    active the distance is constant and contributes no derivative.
    """
    if direction == "front":
        raw = _following_raw(v, v_t, cfg, kind, kind_t)
        h = gap - (max(raw, 0.0) + cfg.D)
        if raw >= 0.0:
            d_dv = cfg.c1 + cfg.c2 * v / kind.max_brake
            d_dvt = -cfg.c2 * v_t / kind_t.max_brake
        else:
            d_dv = d_dvt = 0.0
        return Barrier(h, (v_t - v) - d_dvt * a_t, -d_dv, target, direction)
    if direction == "rear":
        raw = _leading_raw(v, v_t, cfg, kind, kind_t)
        h = gap - (max(raw, 0.0) + cfg.D)
        if raw >= 0.0:
            d_dv = -cfg.c2 * v / kind.max_brake
            d_dvt = cfg.c1 + cfg.c2 * v_t / kind_t.max_brake
        else:
            d_dv = d_dvt = 0.0
        return Barrier(h, (v - v_t) - d_dvt * a_t, -d_dv, target, direction)
    raise ValueError(f"direction must be 'front' or 'rear', got {direction!r}")


def feasible_interval(barriers: Iterable[Barrier], gamma: float, lo: float, hi: float) -> tuple[float, float] | None:
    """Accelerations satisfying hdot >= -gamma * h for all barriers, within [lo, hi]."""
    for b in barriers:
        rhs = b.hdot_free + gamma * b.h
        if b.coef < 0.0:
            hi = min(hi, rhs / -b.coef)
        elif b.coef > 0.0:
            lo = max(lo, -rhs / b.coef)
        elif rhs < 0.0:
            return None
        if lo > hi:
            return None
    return lo, hi


def cbf_qp(barriers: Sequence[Barrier], u_nominal: ControlInput, kind: VehicleKind = DEFAULT_KIND,
           gamma: float = DEFAULT_SHIELD.gamma_cbf) -> ControlInput | None:
    """Project the nominal input onto the CBF-feasible set; None when infeasible.

    Every constraint is affine in the scalar acceleration and steering is not
    constrained, so the QP reduces to clamping onto an interval.
    """
    interval = feasible_interval(barriers, gamma, kind.accel_min, kind.accel_max)
    if interval is None:
        return None
    lo, hi = interval
    return ControlInput(min(max(u_nominal.accel, lo), hi), u_nominal.steer)


# ---------------------------------------------------------------------------
# nominal controller


def pure_pursuit(state: VehicleState, waypoint: tuple[float, float], kind: VehicleKind = DEFAULT_KIND) -> float:
    dx, dy = waypoint[0] - state.x, waypoint[1] - state.y
    ld = math.hypot(dx, dy)
    if ld < 1e-6:
        return 0.0
    alpha = math.atan2(dy, dx) - state.psi
    steer = math.atan2(2.0 * kind.wheelbase * math.sin(alpha), ld)
    return min(max(steer, -kind.steer_max), kind.steer_max)


def throttle_for_bin(j: int, k: int = K_THROTTLE) -> float:
    """Midpoint of the j-th of k throttle intervals."""
    return (j - 0.5) / k


def nominal_accel(action: Action, v: float, kind: VehicleKind = DEFAULT_KIND) -> float:
    if action == Action.BRAKE:
        return pedal_to_accel(0.0, BRAKE_PEDAL, v, kind)
    if action == Action.EMERGENCY_STOP:
        return pedal_to_accel(0.0, EMERGENCY_BRAKE_PEDAL, v, kind)
    j = action.throttle_bin
    if j is not None:
        return pedal_to_accel(throttle_for_bin(j), 0.0, v, kind)
    # keep-lane and lane changes hold the current speed; the input is net acceleration
    return 0.0


def nominal_control(net: RoadNetwork, state: VehicleState, action: Action, kind: VehicleKind = DEFAULT_KIND,
                    lane_pos: LanePosition | None = None) -> ControlInput:
    """Pure-pursuit steering plus a pedal-derived acceleration; raises NoSuchLane."""
    steer_action = action if action.is_lane_change else Action.KEEP_LANE_SPEED
    wp = waypoint_for_action(net, state, steer_action, lane_pos)
    return ControlInput(nominal_accel(action, state.v, kind), pure_pursuit(state, wp, kind))


# ---------------------------------------------------------------------------
# targets and safety checking


@dataclass(frozen=True)
class Target:
    vid: object
    direction: str
    gap: float
    v: float
    a: float


def _lane_targets(index: LaneIndex, ego, lane_id: int, directions, hidden, half_len: float,
                  known=None) -> list[Target]:
    out = []
    for direction in directions:
        hit = index.nearest(ego, lane_id, direction, exclude=hidden)
        if hit is None:
            continue
        occ, gap = hit
        bumper = abs(gap) - half_len - occ.half_length
        # acceleration is only available for vehicles that share it
        a = occ.a_long if known is None or known.get(occ.vid) is not None else 0.0
        out.append(Target(occ.vid, direction, bumper, max(occ.v_long, 0.0), a))
    return out


def relevant_targets(index: LaneIndex, ego, action: Action, known=None,
                     kind: VehicleKind = DEFAULT_KIND) -> list[Target]:
    """Vehicles whose barriers apply when ``action`` is executed.

    ``known`` maps the ids the ego can perceive (own sensing plus shared
    observations) to their acceleration, or None where it is not shared;
    ``known=None`` means full knowledge.
    Raises NoSuchLane for a lane change toward a missing lane.
    """
    net = index.net
    host = index.host.get(ego)
    if host is None:
        raise NoSuchLane("ego is not on any lane")
    hidden = () if known is None else tuple(v for v in index.states if v != ego and v not in known)
    half = kind.length / 2
    occupied = list(dict.fromkeys([host] + index.occupancy.get(ego, [])))
    targets: list[Target] = []
    path_lanes = [host]
    if action.is_lane_change:
        side = "left" if action == Action.CHANGE_LANE_LEFT else "right"
        target_lane = relation_lane(net, host, "front-target-lane", side)
        if target_lane is None:
            raise NoSuchLane(f"lane {host} has no {side} neighbor")
        for lid in occupied:
            targets += _lane_targets(index, ego, lid, ("front",), hidden, half, known)
        targets += _lane_targets(index, ego, target_lane, ("front", "rear"), hidden, half, known)
        other = relation_lane(net, host, "front-other-side", side)
        if other is not None:
            targets += _lane_targets(index, ego, other, ("front", "rear"), hidden, half, known)
        path_lanes.append(target_lane)
    else:
        for lid in occupied:
            targets += _lane_targets(index, ego, lid, ("front", "rear"), hidden, half, known)
    if net.intersections:
        cands = None if known is None else set(known)
        for lid in path_lanes:
            for vid, gap, v_long, half_w in crossing_conflicts(index, ego, lid, cands):
                bumper = abs(gap) - half - half_w
                direction = "front" if gap >= 0 else "rear"
                targets.append(Target(vid, direction, bumper, max(v_long, 0.0), 0.0))
    # one barrier per (vehicle, direction): keep the tightest
    best: dict = {}
    for t in targets:
        key = (t.vid, t.direction)
        if key not in best or t.gap < best[key].gap:
            best[key] = t
    return list(best.values())


def barriers_for(targets: Iterable[Target], v: float, cfg: ShieldConfig, kind: VehicleKind = DEFAULT_KIND,
                 kinds=None) -> list[Barrier]:
    kinds = kinds or {}
    return [
        barrier_values(v, t.gap, t.v, t.a, t.direction, cfg, kind, kinds.get(t.vid, DEFAULT_KIND), t.vid)
        for t in targets
    ]


@dataclass
class SafeActionSet:
    actions: list[Action]
    controls: dict[Action, ControlInput]

    def __post_init__(self):
        if not self.actions:
            raise ValueError("safe action set must not be empty")

    @property
    def is_emergency(self) -> bool:
        return self.actions == [Action.EMERGENCY_STOP]

    def mask(self) -> tuple[bool, ...]:
        return tuple(a in self.actions for a in ACTION_SET)


def emergency_control(net: RoadNetwork, state: VehicleState, kind: VehicleKind = DEFAULT_KIND,
                      lane_pos: LanePosition | None = None) -> ControlInput:
    """Full brake, steering toward the current lane center."""
    try:
        wp = waypoint_for_action(net, state, Action.KEEP_LANE_SPEED, lane_pos)
        steer = pure_pursuit(state, wp, kind)
    except Exception:
        steer = 0.0
    return ControlInput(nominal_accel(Action.EMERGENCY_STOP, state.v, kind), steer)


def check_agent(index: LaneIndex, ego, cfg: ShieldConfig = DEFAULT_SHIELD, known=None,
                kind: VehicleKind = DEFAULT_KIND, lane_pos: LanePosition | None = None,
                kinds=None) -> SafeActionSet:
    """Evaluate every action in fixed order; fall back to an emergency stop."""
    net = index.net
    state = index.states[ego]
    if lane_pos is None:
        host = index.host.get(ego)
        if host is None:
            return SafeActionSet([Action.EMERGENCY_STOP], {Action.EMERGENCY_STOP: ControlInput(kind.accel_min, 0.0)})
        s, d, _ = index.proj[ego][host]
        lane_pos = LanePosition(host, min(max(s, 0.0), net.lanes[host].length), d)
    safe: list[Action] = []
    controls: dict[Action, ControlInput] = {}
    keep_barriers = None
    for action in ACTION_SET:
        try:
            u_nom = nominal_control(net, state, action, kind, lane_pos)
            if action.is_lane_change:
                barriers = barriers_for(relevant_targets(index, ego, action, known, kind), state.v, cfg, kind, kinds)
                # never steer into a gap that is already too short
                if any(b.h < 0.0 for b in barriers):
                    continue
            else:
                if keep_barriers is None:
                    keep_barriers = barriers_for(relevant_targets(index, ego, action, known, kind), state.v, cfg,
                                                 kind, kinds)
                barriers = keep_barriers
        except NoSuchLane:
            continue
        u = cbf_qp(barriers, u_nom, kind, cfg.gamma_cbf)
        if u is not None:
            safe.append(action)
            controls[action] = u
    if not safe:
        return SafeActionSet([Action.EMERGENCY_STOP],
                             {Action.EMERGENCY_STOP: emergency_control(net, state, kind, lane_pos)})
    return SafeActionSet(safe, controls)


def safety_checking(world, cfg: ShieldConfig = DEFAULT_SHIELD) -> dict:
    """Safe action sets for every active CAV of a world snapshot.

    ``world`` supplies ``lane_index()``, ``active_cavs()``, ``known_vehicles(i)``,
    ``kind_of(i)`` and ``kinds()``.
    """
    index = world.lane_index()
    kinds = world.kinds()
    return {
        i: check_agent(index, i, cfg, world.known_vehicles(i), world.kind_of(i), kinds=kinds)
        for i in sorted(world.active_cavs())
    }
