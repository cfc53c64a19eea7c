"""Episode construction and stepping for the built-in traffic scenarios."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .actions import Action
from .comms import ObservationBundle, build_observation, host_key
from .dynamics import DEFAULT_KIND, DT, ControlInput, VehicleKind, VehicleState, pedal_to_accel, step_bicycle
from .shield import emergency_control, nominal_control, pure_pursuit
from .world import (
    APPROACH,
    EB,
    NB,
    LaneIndex,
    LanePosition,
    NoSuchLane,
    OffRoad,
    RoadNetwork,
    highway_map,
    intersection_lane_id,
    intersection_map,
    phantom_waypoint,
    preview_distance,
    project_to_lane,
)

CAV, UCV, HAZV = "CAV", "UCV", "HAZV"
ROLES = (CAV, UCV, HAZV)

KINDS = ("Intersection", "Highway", "HighwayHard", "IntersectionNormal", "HighwayNormal")
_ALIASES = {k.lower(): k for k in KINDS}
_ALIASES.update({"highway-hard": "HighwayHard", "highway_hard": "HighwayHard",
                 "intersection-normal": "IntersectionNormal", "highway-normal": "HighwayNormal"})

HIGHWAY_GOAL_S = 400.0
EXIT_GOAL_S = 30.0
COST_CAP = 50.0
SPAWN_CLEARANCE = 2.0
DEFAULT_HORIZON = 300

MU_SELF = 1.0
MU_OTHER = 0.5

# scripted-driver constants
UCV_THROTTLE = (0.3, 0.7)
UCV_BRAKE = 0.5
UCV_HEADWAY = 2.0
UCV_STANDSTILL = 4.0
HAZV_RUN_THROTTLE = (0.65, 0.85)
HAZV_JITTER = 0.02
HAZV_CRUISE_THROTTLE = (0.3, 0.5)
HAZV_BRAKE = (0.9, 1.0)
HAZV_TRIGGER = (2.0, 4.0)
YIELD_STOP_MARGIN = 2.0
YIELD_WATCH = 40.0


def canonical_kind(kind: str) -> str:
    k = _ALIASES.get(str(kind).lower())
    if k is None:
        raise ValueError(f"unknown scenario kind {kind!r}; expected one of {', '.join(KINDS)}")
    return k


def is_normal(kind: str) -> bool:
    return kind.endswith("Normal")


def is_intersection(kind: str) -> bool:
    return kind.startswith("Intersection")


@dataclass(frozen=True)
class VehicleSpawn:
    role: str
    lane: int
    s_range: tuple[float, float]
    v_range: tuple[float, float]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        lo, hi = self.s_range
        vlo, vhi = self.v_range
        if not (lo <= hi and 0 <= vlo <= vhi):
            raise ValueError(f"bad spawn ranges {self.s_range}, {self.v_range}")


_COUNTS = {
    "Intersection": (3, 0),
    "IntersectionNormal": (3, 0),
    "Highway": (3, 1),
    "HighwayNormal": (3, 1),
    "HighwayHard": (5, 4),
}


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    n_cav: int
    n_ucv: int
    has_hazv: bool
    spawns: tuple[VehicleSpawn, ...]
    seed: int = 0
    comm_enabled: bool = True
    episode_horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        object.__setattr__(self, "spawns", tuple(self.spawns))
        if (self.n_cav, self.n_ucv) != _COUNTS[self.kind] or not self.has_hazv:
            n_cav, n_ucv = _COUNTS[self.kind]
            raise ValueError(f"{self.kind} needs n_cav={n_cav}, n_ucv={n_ucv} and a hazard vehicle")
        roles = [sp.role for sp in self.spawns]
        if roles.count(CAV) != self.n_cav or roles.count(UCV) != self.n_ucv or roles.count(HAZV) != 1:
            raise ValueError("spawn list does not match the declared vehicle counts")
        if self.episode_horizon < 1:
            raise ValueError("episode_horizon must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def with_(self, **changes) -> "ScenarioSpec":
        return replace(self, **changes)


def _highway_spawns() -> tuple[VehicleSpawn, ...]:
    v = (11.0, 13.0)
    return (
        VehicleSpawn(CAV, 1, (60.0, 66.0), v),
        VehicleSpawn(CAV, 0, (70.0, 76.0), v),
        VehicleSpawn(CAV, 2, (50.0, 56.0), v),
        VehicleSpawn(UCV, 0, (40.0, 46.0), v),
        VehicleSpawn(HAZV, 1, (88.0, 95.0), v),
    )


def _hard_spawns() -> tuple[VehicleSpawn, ...]:
    v = (11.0, 13.0)
    layout = [
        (CAV, 0, 82.0), (CAV, 0, 28.0), (CAV, 1, 75.0), (CAV, 1, 45.0), (CAV, 2, 92.0),
        (UCV, 0, 110.0), (UCV, 0, 55.0), (UCV, 2, 65.0), (UCV, 2, 38.0),
        (HAZV, 1, 100.0),
    ]
    return tuple(VehicleSpawn(role, lane, (s - 3.0, s + 3.0), v) for role, lane, s in layout)


def _intersection_spawns() -> tuple[VehicleSpawn, ...]:
    approach = 140.0
    inner, outer = intersection_lane_id(EB, APPROACH, 0), intersection_lane_id(EB, APPROACH, 1)
    v = (6.0, 8.0)

    def upstream(lo, hi):
        return (approach - hi, approach - lo)

    return (
        VehicleSpawn(CAV, inner, upstream(25.0, 30.0), v),
        VehicleSpawn(CAV, outer, upstream(30.0, 38.0), v),
        VehicleSpawn(CAV, inner, upstream(38.0, 45.0), v),
        VehicleSpawn(HAZV, intersection_lane_id(NB, APPROACH, 1), upstream(40.0, 40.0), (8.0, 8.0)),
    )


def builtin_spec(kind: str, seed: int = 0, comm_enabled: bool = True,
                 episode_horizon: int = DEFAULT_HORIZON) -> ScenarioSpec:
    kind = canonical_kind(kind)
    if kind == "HighwayHard":
        spawns = _hard_spawns()
    elif is_intersection(kind):
        spawns = _intersection_spawns()
    else:
        spawns = _highway_spawns()
    n_cav, n_ucv = _COUNTS[kind]
    return ScenarioSpec(kind, n_cav, n_ucv, True, spawns, seed, comm_enabled, episode_horizon)


def network_for(kind: str) -> RoadNetwork:
    return intersection_map() if is_intersection(canonical_kind(kind)) else highway_map()


# ---------------------------------------------------------------------------
# world state


class SpawnError(ValueError):
    pass


@dataclass
class VehicleRecord:
    vid: int
    role: str
    state: VehicleState
    kind: VehicleKind = DEFAULT_KIND
    accel: float = 0.0
    lane_id: int | None = None
    active: bool = True
    reached: bool = False
    script: dict = field(default_factory=dict)


@dataclass
class StepOutcome:
    rewards: dict[int, float]
    costs: dict[int, float]
    collisions: dict[int, bool]
    done: bool
    done_reason: str | None

    def __post_init__(self):
        if self.done_reason == "collision" and not any(self.collisions.values()):
            raise ValueError("collision termination without a collision flag")


class World:
    """Mutable simulation state for one episode; confined to one rollout."""

    def __init__(self, spec: ScenarioSpec, net: RoadNetwork, vehicles: dict[int, VehicleRecord],
                 rng: np.random.Generator):
        self.spec = spec
        self.net = net
        self.vehicles = vehicles
        self.rng = rng
        self.t = 0
        self.done = False
        self.done_reason: str | None = None
        self._index: LaneIndex | None = None
        self._obs: dict[int, ObservationBundle] = {}
        self._hosts: dict = {}

    @property
    def comm_enabled(self) -> bool:
        return self.spec.comm_enabled

    @property
    def cav_ids(self) -> list[int]:
        return [v for v, r in self.vehicles.items() if r.role == CAV]

    def active_cavs(self) -> list[int]:
        return [v for v, r in self.vehicles.items() if r.role == CAV and r.active]

    def kind_of(self, vid) -> VehicleKind:
        return self.vehicles[vid].kind

    def kinds(self) -> dict:
        return {v: r.kind for v, r in self.vehicles.items()}

    def _invalidate(self):
        self._index = None
        self._obs = {}
        self._hosts = {}

    def host_of(self, vid, ob=None) -> tuple[str, int]:
        """Graph host (junction or lane) of a vehicle at the current step."""
        key = self._hosts.get(vid)
        if key is None:
            st = self.vehicles[vid].state
            key = self._hosts[vid] = host_key(self.net, st.x, st.y, st.psi)
        return key

    def lane_index(self) -> LaneIndex:
        if self._index is None:
            act = {v: r for v, r in self.vehicles.items() if r.active}
            hosts = {v: r.lane_id for v, r in act.items() if r.role != CAV}
            self._index = LaneIndex.build(
                self.net,
                {v: r.state for v, r in act.items()},
                {v: r.kind for v, r in act.items()},
                {v: r.accel for v, r in act.items()},
                hosts,
            )
        return self._index

    def observation(self, i) -> ObservationBundle:
        ob = self._obs.get(i)
        if ob is None:
            ob = self._obs[i] = build_observation(self, i, self.comm_enabled)
        return ob

    def known_vehicles(self, i) -> dict:
        return self.observation(i).known()

    def lane_position(self, vid) -> LanePosition | None:
        idx = self.lane_index()
        host = idx.host.get(vid)
        if host is None:
            return None
        s, d, _ = idx.proj[vid][host]
        return LanePosition(host, min(max(s, 0.0), self.net.lanes[host].length), d)

    def snapshot(self) -> dict:
        return {v: (r.role, r.state, r.accel, r.active) for v, r in self.vehicles.items()}


def _rng_pair(seed: int):
    ss = np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def _too_close(a: VehicleRecord, b: VehicleRecord) -> bool:
    dx, dy = b.state.x - a.state.x, b.state.y - a.state.y
    c, s = math.cos(a.state.psi), math.sin(a.state.psi)
    lon, lat = abs(c * dx + s * dy), abs(-s * dx + c * dy)
    length = max(a.kind.length, b.kind.length)
    width = max(a.kind.width, b.kind.width)
    return lat < width + 1.0 and lon < length + SPAWN_CLEARANCE


def spawn(spec: ScenarioSpec, seed: int | None = None, net: RoadNetwork | None = None) -> World:
    """Deterministic world for (spec, seed); raises SpawnError on overlapping or off-road spawns."""
    seed = spec.seed if seed is None else seed
    net = net or network_for(spec.kind)
    place_rng, run_rng = _rng_pair(seed)
    vehicles: dict[int, VehicleRecord] = {}
    for vid, sp in enumerate(spec.spawns):
        if sp.lane not in net.lanes:
            raise SpawnError(f"vehicle {vid}: unknown lane {sp.lane}")
        ln = net.lanes[sp.lane]
        s = float(place_rng.uniform(*sp.s_range))
        v = float(place_rng.uniform(*sp.v_range))
        if not 0.0 <= s <= ln.length:
            raise SpawnError(f"vehicle {vid}: s={s:.1f} is off lane {sp.lane}")
        x, y = ln.point_at(s)
        rec = VehicleRecord(vid, sp.role, VehicleState(x, y, v, ln.heading_at(s)), lane_id=sp.lane)
        for other in vehicles.values():
            if _too_close(rec, other) or _too_close(other, rec):
                raise SpawnError(f"vehicles {other.vid} and {vid} spawn closer than length + {SPAWN_CLEARANCE} m")
        vehicles[vid] = rec
    for rec in vehicles.values():
        if rec.role == HAZV:
            rec.script["t_brk"] = float(run_rng.uniform(*HAZV_TRIGGER))
            rec.script["base"] = float(run_rng.uniform(*HAZV_RUN_THROTTLE))
    return World(spec, net, vehicles, run_rng)


# ---------------------------------------------------------------------------
# scripted drivers


def _front_gap(world: World, vid) -> tuple[float, float] | None:
    """Bumper gap and longitudinal speed of the vehicle ahead in the driver's lane."""
    idx = world.lane_index()
    lane = world.vehicles[vid].lane_id
    if lane is None or vid not in idx.states:
        return None
    hit = idx.nearest(vid, lane, "front")
    if hit is None:
        return None
    occ, gap = hit
    return gap - occ.half_length - world.vehicles[vid].kind.length / 2, max(occ.v_long, 0.0)


def _following_brake(gap: float, v: float) -> float:
    """Fixed brake inside the headway band, nothing outside it."""
    return UCV_BRAKE if gap < UCV_HEADWAY * v + UCV_STANDSTILL else 0.0


def ucv_policy(world: World, vid, rng: np.random.Generator) -> tuple[float, float]:
    """(throttle, brake) of an unconnected lane-keeping driver."""
    rec = world.vehicles[vid]
    throttle = float(rng.uniform(*UCV_THROTTLE))
    front = _front_gap(world, vid)
    if front is not None:
        brake = _following_brake(front[0], rec.state.v)
        if brake > 0.0:
            return 0.0, brake
    return throttle, 0.0


def _stop_line_distance(world: World, rec: VehicleRecord) -> float | None:
    """Distance from the front bumper to the end of the approach lane, if on one."""
    reg = world.net.connected_region(rec.lane_id) if rec.lane_id is not None else None
    if reg is None or rec.lane_id not in reg.entry_lanes:
        return None
    ln = world.net.lanes[rec.lane_id]
    s = ln.project_point(rec.state.x, rec.state.y)[0]
    return ln.length - s - rec.kind.length / 2


def _crossing_traffic(world: World, vid) -> bool:
    """Another vehicle inside the box, or near it on a non-parallel heading."""
    me = world.vehicles[vid]
    for reg in world.net.intersections:
        cx, cy = reg.center
        for other in world.vehicles.values():
            if other.vid == vid or not other.active:
                continue
            st = other.state
            if reg.contains(st.x, st.y):
                return True
            parallel = abs(math.cos(st.psi - me.state.psi)) > 0.9
            if not parallel and math.hypot(st.x - cx, st.y - cy) < YIELD_WATCH:
                return True
    return False


def hazv_policy(world: World, t: int, rng: np.random.Generator, vid=None) -> tuple[float, float]:
    """(throttle, brake) for the hazard vehicle at step ``t``."""
    if vid is None:
        vid = next(v for v, r in world.vehicles.items() if r.role == HAZV)
    rec = world.vehicles[vid]
    kind = world.spec.kind
    if kind == "Intersection":
        eps = float(rng.uniform(-HAZV_JITTER, HAZV_JITTER))
        return rec.script.get("base", 0.75) + eps, 0.0
    if kind == "IntersectionNormal":
        throttle = float(rng.uniform(*HAZV_CRUISE_THROTTLE))
        dist = _stop_line_distance(world, rec)
        if dist is not None and dist > -0.5 and _crossing_traffic(world, vid):
            v = rec.state.v
            room = max(dist - YIELD_STOP_MARGIN, 0.05)
            need = v * v / (2.0 * room)
            if dist < YIELD_STOP_MARGIN + 0.5 or need > 0.3 * rec.kind.max_brake or room < 2.0 * v:
                return 0.0, min(1.0, max(need / rec.kind.max_brake, 0.3))
        return throttle, 0.0
    if kind == "HighwayNormal":
        return ucv_policy(world, vid, rng)
    # Highway and HighwayHard: cruise, then hard-brake to a stop after the trigger time
    if t * DT >= rec.script.get("t_brk", 3.0):
        return 0.0, float(rng.uniform(*HAZV_BRAKE))
    return float(rng.uniform(*HAZV_CRUISE_THROTTLE)), 0.0


# ---------------------------------------------------------------------------
# reward, cost, collisions


def reward(world: World, i, mu_self: float = MU_SELF, mu_other: float = MU_OTHER, dt: float = DT) -> float:
    total = 0.0
    for j in world.cav_ids:
        rec = world.vehicles[j]
        if not rec.active:
            continue
        total += (mu_self if j == i else mu_other) * rec.state.v
    return total * dt


def _ahead(st: VehicleState, dt: float) -> tuple[float, float]:
    return st.x + st.v * math.cos(st.psi) * dt, st.y + st.v * math.sin(st.psi) * dt


def cost(world: World, i, dt: float = DT) -> float:
    """Distance to the closest other CAV or sensed vehicle, now or one step ahead."""
    me = world.vehicles[i].state
    ids = set(v for v in world.cav_ids if v != i and world.vehicles[v].active)
    ids.update(ob.vid for ob in world.observation(i).detected)
    best = COST_CAP
    mx, my = _ahead(me, dt)
    for j in ids:
        st = world.vehicles[j].state
        jx, jy = _ahead(st, dt)
        best = min(best, math.hypot(st.x - me.x, st.y - me.y), math.hypot(jx - mx, jy - my))
    return best


def rectangle_corners(st: VehicleState, kind: VehicleKind = DEFAULT_KIND) -> np.ndarray:
    c, s = math.cos(st.psi), math.sin(st.psi)
    hl, hw = kind.length / 2, kind.width / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([st.x, st.y])


def rectangles_overlap(a: np.ndarray, b: np.ndarray, eps: float = 1e-9) -> bool:
    """Separating-axis test; touching counts as overlap."""
    for poly in (a, b):
        for k in range(2):
            edge = poly[k + 1] - poly[k]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() - eps or pb.max() < pa.min() - eps:
                return False
    return True


def _left_map(net: RoadNetwork, rec: VehicleRecord) -> bool:
    """Past the end of a terminal lane, within its corridor."""
    st = rec.state
    for ln in net.lanes.values():
        if ln.successors:
            continue
        s, d, hd = ln.project_point(st.x, st.y)
        if s > ln.length and abs(d) <= ln.width / 2 + 1.0 and math.cos(hd - st.psi) > 0:
            return True
    return False


def off_road(net: RoadNetwork, st: VehicleState) -> bool:
    if net.region_at(st.x, st.y) is not None:
        return False
    try:
        project_to_lane(net, st.x, st.y)
    except OffRoad:
        return True
    return False


def detect_collision(world: World) -> dict[int, bool]:
    act = [r for r in world.vehicles.values() if r.active]
    flags = {r.vid: False for r in world.vehicles.values()}
    corners = {r.vid: rectangle_corners(r.state, r.kind) for r in act}
    for a_idx, a in enumerate(act):
        if off_road(world.net, a.state):
            flags[a.vid] = True
        for b in act[a_idx + 1:]:
            reach = math.hypot(a.kind.length, a.kind.width) / 2 + math.hypot(b.kind.length, b.kind.width) / 2
            if math.hypot(a.state.x - b.state.x, a.state.y - b.state.y) > reach + 1e-6:
                continue
            if rectangles_overlap(corners[a.vid], corners[b.vid]):
                flags[a.vid] = flags[b.vid] = True
    return flags


def goal_reached(world: World, rec: VehicleRecord) -> bool:
    st = rec.state
    if not world.net.intersections:
        return st.x >= HIGHWAY_GOAL_S
    try:
        pos = project_to_lane(world.net, st.x, st.y, st.psi)
    except OffRoad:
        return False
    reg = world.net.connected_region(pos.lane_id)
    return reg is not None and pos.lane_id in reg.exit_lanes and pos.s >= EXIT_GOAL_S


# ---------------------------------------------------------------------------
# stepping


def cav_control(world: World, i, action: Action) -> ControlInput:
    """Nominal control for a CAV action; a lane change off the road steers past the edge."""
    rec = world.vehicles[i]
    pos = world.lane_position(i)
    if action == Action.EMERGENCY_STOP:
        return emergency_control(world.net, rec.state, rec.kind, pos)
    if pos is None:
        return ControlInput(0.0, 0.0)
    try:
        return nominal_control(world.net, rec.state, action, rec.kind, pos)
    except NoSuchLane:
        side = "left" if action == Action.CHANGE_LANE_LEFT else "right"
        wp = phantom_waypoint(world.net, rec.state, pos, side)
        return ControlInput(0.0, pure_pursuit(rec.state, wp, rec.kind))


def _lane_keep_steer(world: World, rec: VehicleRecord) -> float:
    ln = world.net.lanes[rec.lane_id]
    s = ln.project_point(rec.state.x, rec.state.y)[0]
    wp = world.net.point_along(rec.lane_id, s + preview_distance(rec.state.v))
    return pure_pursuit(rec.state, wp, rec.kind)


def _advance_lane(world: World, rec: VehicleRecord) -> None:
    ln = world.net.lanes[rec.lane_id]
    while ln.successors:
        s = ln.project_point(rec.state.x, rec.state.y)[0]
        if s <= ln.length:
            return
        rec.lane_id = ln.successors[0]
        ln = world.net.lanes[rec.lane_id]


def step_world(world: World, cav_actions: dict, rng: np.random.Generator | None = None,
               controls: dict | None = None) -> StepOutcome:
    """Advance every active vehicle by one dt and score the result.

    ``controls`` optionally overrides the nominal control of individual CAVs
    (the shield supplies its filtered inputs this way).
    """
    if world.done:
        raise RuntimeError("episode already finished")
    rng = world.rng if rng is None else rng
    controls = controls or {}
    inputs: dict[int, ControlInput] = {}
    for vid in sorted(world.vehicles):
        rec = world.vehicles[vid]
        if not rec.active:
            continue
        if rec.role == CAV:
            if vid in controls:
                u = controls[vid]
            else:
                u = cav_control(world, vid, Action(cav_actions.get(vid, Action.KEEP_LANE_SPEED)))
        else:
            if rec.role == HAZV:
                throttle, brake = hazv_policy(world, world.t, rng, vid)
            else:
                throttle, brake = ucv_policy(world, vid, rng)
            u = ControlInput(pedal_to_accel(throttle, brake, rec.state.v, rec.kind), _lane_keep_steer(world, rec))
        inputs[vid] = u.clipped(rec.kind)
    for vid, u in inputs.items():
        rec = world.vehicles[vid]
        rec.state = step_bicycle(rec.state, u, DT, rec.kind)
        rec.accel = u.accel
        if rec.role != CAV:
            _advance_lane(world, rec)
        if _left_map(world.net, rec):
            rec.active = False
    world.t += 1
    world._invalidate()

    collisions = detect_collision(world)
    for i in world.cav_ids:
        rec = world.vehicles[i]
        if rec.active and not rec.reached and goal_reached(world, rec):
            rec.reached = True
    cavs = world.cav_ids
    rewards = {i: reward(world, i) for i in cavs}
    costs = {i: cost(world, i) for i in cavs}
    if any(collisions.values()):
        reason = "collision"
    elif all(world.vehicles[i].reached for i in cavs):
        reason = "all-goals-reached"
    elif world.t >= world.spec.episode_horizon:
        reason = "horizon"
    else:
        reason = None
    world.done = reason is not None
    world.done_reason = reason
    return StepOutcome(rewards, costs, collisions, world.done, reason)
