"""Per-agent observation bundles and per-timestep scene graphs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .world import OffRoad, RoadNetwork, project_all, project_to_lane

COMM_RANGE = 100.0
SENSING_RANGE = 50.0
RADAR_APPROACH = 80.0
EDGE_RANGE = 100.0

FEATURE_DIM = 8
POS_SCALE = 100.0
SPEED_SCALE = 30.0
ACCEL_SCALE = 8.0

KIND_CODE = {"vehicle": 0.0, "road": 0.5, "intersection": 1.0}


@dataclass(frozen=True)
class Observed:
    vid: int
    x: float
    y: float
    v: float
    psi: float
    accel: float | None
    is_cav: bool


@dataclass
class ObservationBundle:
    ego: Observed
    shared: list[Observed] = field(default_factory=list)
    infra: list[Observed] = field(default_factory=list)
    detected: list[Observed] = field(default_factory=list)

    def merged(self) -> dict[int, Observed]:
        """One record per vehicle; shared beats infra beats detected."""
        out: dict[int, Observed] = {}
        for source in (self.shared, self.infra, self.detected):
            for ob in source:
                out.setdefault(ob.vid, ob)
        out.pop(self.ego.vid, None)
        return out

    def known(self) -> dict[int, float | None]:
        return {vid: ob.accel for vid, ob in self.merged().items()}


def _observe(rec, with_accel: bool) -> Observed:
    st = rec.state
    return Observed(rec.vid, st.x, st.y, st.v, st.psi, rec.accel if with_accel else None, rec.role == "CAV")


def in_radar_zone(net: RoadNetwork, x: float, y: float) -> bool:
    """Infrastructure coverage: the junction box plus its approaches, or the whole road."""
    if not net.intersections:
        return True
    for reg in net.intersections:
        (x0, y0), (x1, y1) = reg.polygon.min(axis=0), reg.polygon.max(axis=0)
        along_x = x0 - RADAR_APPROACH <= x <= x1 + RADAR_APPROACH and y0 <= y <= y1
        along_y = y0 - RADAR_APPROACH <= y <= y1 + RADAR_APPROACH and x0 <= x <= x1
        if along_x or along_y:
            return True
    return False


def build_observation(world, i, comm_enabled: bool) -> ObservationBundle:
    me = world.vehicles[i]
    ego = _observe(me, True)
    bundle = ObservationBundle(ego)
    for vid in sorted(world.vehicles):
        rec = world.vehicles[vid]
        if vid == i or not rec.active:
            continue
        dx, dy = rec.state.x - ego.x, rec.state.y - ego.y
        dist = math.hypot(dx, dy)
        if comm_enabled:
            if rec.role == "CAV" and dist <= COMM_RANGE:
                bundle.shared.append(_observe(rec, True))
            if in_radar_zone(world.net, rec.state.x, rec.state.y):
                bundle.infra.append(_observe(rec, False))
        # forward half-plane field of view
        if dist <= SENSING_RANGE and dx * math.cos(ego.psi) + dy * math.sin(ego.psi) >= 0.0:
            bundle.detected.append(_observe(rec, False))
    return bundle


# ---------------------------------------------------------------------------
# scene graphs


@dataclass
class SceneGraph:
    kinds: list[str]
    features: np.ndarray
    edges: list[tuple[int, int]]
    ego_index: int
    timestep: int
    keys: list[str] = field(default_factory=list)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.kinds)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1.0
        return a

    def permuted(self, order) -> "SceneGraph":
        """Same graph with node ``order[k]`` moved to position k."""
        order = list(order)
        inv = {old: new for new, old in enumerate(order)}
        return SceneGraph(
            [self.kinds[k] for k in order],
            self.features[order],
            [(inv[u], inv[v]) for u, v in self.edges],
            inv[self.ego_index],
            self.timestep,
            [self.keys[k] for k in order] if self.keys else [],
        )


def host_key(net: RoadNetwork, x: float, y: float, psi: float) -> tuple[str, int]:
    """The junction containing a point, else its heading-consistent lane, else the nearest lane."""
    reg = net.region_at(x, y)
    if reg is not None:
        return "intersection", reg.id
    try:
        return "road", project_to_lane(net, x, y, psi).lane_id
    except OffRoad:
        proj = project_all(net, x, y)
        return "road", min(proj, key=lambda lid: (abs(proj[lid][1]), lid))


def _relative(ego: Observed, x: float, y: float) -> tuple[float, float]:
    dx, dy = x - ego.x, y - ego.y
    c, s = math.cos(ego.psi), math.sin(ego.psi)
    return (c * dx + s * dy) / POS_SCALE, (-s * dx + c * dy) / POS_SCALE


def _angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


def vehicle_features(ego: Observed, ob: Observed, is_ego: bool) -> list[float]:
    rx, ry = _relative(ego, ob.x, ob.y)
    return [
        rx,
        ry,
        ob.v / SPEED_SCALE,
        _angle(ob.psi - ego.psi) / math.pi,
        (ob.accel or 0.0) / ACCEL_SCALE,
        1.0 if is_ego else 0.0,
        1.0 if ob.is_cav else 0.0,
        KIND_CODE["vehicle"],
    ]


def build_scene_graph(bundle: ObservationBundle, world, i=None) -> SceneGraph:
    """Vehicle nodes for everything the bundle knows, plus their host roads/junctions."""
    net = world.net
    ego = bundle.ego
    hosts = getattr(world, "host_of", None)
    vehicles = [ego] + list(bundle.merged().values())
    kinds, feats, keys, edges = [], [], [], []
    host_nodes: dict[tuple[str, int], int] = {}
    vehicle_hosts = []
    for k, ob in enumerate(vehicles):
        kinds.append("vehicle")
        feats.append(vehicle_features(ego, ob, k == 0))
        keys.append(f"vehicle:{ob.vid}")
        vehicle_hosts.append(hosts(ob.vid, ob) if hosts else host_key(net, ob.x, ob.y, ob.psi))
    for host in vehicle_hosts:
        if host in host_nodes:
            continue
        host_nodes[host] = len(kinds)
        kind, hid = host
        if kind == "intersection":
            cx, cy = net.intersections[hid].center
            rx, ry = _relative(ego, cx, cy)
            feats.append([rx, ry, 0.0, 0.0, 0.0, 0.0, 0.0, KIND_CODE["intersection"]])
        else:
            ln = net.lanes[hid]
            s, _, hd = ln.project_point(ego.x, ego.y)
            px, py = ln.point_at(min(max(s, 0.0), ln.length))
            rx, ry = _relative(ego, px, py)
            feats.append([rx, ry, 0.0, _angle(hd - ego.psi) / math.pi, 0.0, 0.0, 0.0, KIND_CODE["road"]])
        kinds.append(kind)
        keys.append(f"{kind}:{hid}")
    for k, host in enumerate(vehicle_hosts):
        edges.append((k, host_nodes[host]))
    for a in range(len(vehicles)):
        for b in range(a + 1, len(vehicles)):
            if math.hypot(vehicles[a].x - vehicles[b].x, vehicles[a].y - vehicles[b].y) <= EDGE_RANGE:
                edges.append((a, b))
    for (kind, hid), node in host_nodes.items():
        if kind != "road":
            continue
        reg = net.connected_region(hid)
        if reg is not None and ("intersection", reg.id) in host_nodes:
            edges.append((node, host_nodes[("intersection", reg.id)]))
    return SceneGraph(kinds, np.asarray(feats, dtype=np.float64), edges, 0, getattr(world, "t", 0), keys)
