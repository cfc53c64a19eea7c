"""Road geometry, lane-frame projection and neighbor queries."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .actions import Action
from .dynamics import DEFAULT_KIND, VehicleKind, VehicleState

LOOKAHEAD = 120.0
PROJECTION_TOLERANCE = 1.0
# lateral footprint must overlap a lane corridor by this much to count as occupying it
OCCUPANCY_MARGIN = 0.3
CROSSING_HORIZON = 4.0
CROSSING_ANGLE = math.pi / 6


class OffRoad(Exception):
    """Point is outside every lane corridor."""


class NoSuchLane(Exception):
    """Requested neighbor lane does not exist."""


@dataclass
class Lane:
    id: int
    centerline: np.ndarray
    width: float
    left_neighbor: int | None = None
    right_neighbor: int | None = None
    successors: tuple[int, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError(f"lane {self.id}: centerline needs >= 2 (x, y) points")
        seg = np.diff(pts, axis=0)
        lens = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lens <= 0):
            raise ValueError(f"lane {self.id}: consecutive centerline points must differ")
        self.centerline = pts
        self.seg_len = lens
        self.seg_dir = seg / lens[:, None]
        self.seg_s0 = np.concatenate([[0.0], np.cumsum(lens)[:-1]])
        self.length = float(lens.sum())
        self.successors = tuple(self.successors)
        # plain-float copies for the scalar hot paths
        self._segs = [
            (float(pts[k, 0]), float(pts[k, 1]), float(self.seg_dir[k, 0]), float(self.seg_dir[k, 1]),
             float(lens[k]), float(self.seg_s0[k]), math.atan2(self.seg_dir[k, 1], self.seg_dir[k, 0]))
            for k in range(len(lens))
        ]

    def _segment(self, s: float):
        segs = self._segs
        k = len(segs) - 1
        while k > 0 and segs[k][5] > s:
            k -= 1
        return segs[k]

    def point_at(self, s: float) -> tuple[float, float]:
        """Centerline point at arclength s, extrapolated linearly past either end."""
        x0, y0, ux, uy, _, s0, _ = self._segment(s)
        return x0 + ux * (s - s0), y0 + uy * (s - s0)

    def heading_at(self, s: float) -> float:
        return self._segment(s)[6]

    def project_point(self, x: float, y: float) -> tuple[float, float, float]:
        """Scalar version of :meth:`project_points`."""
        best = None
        for x0, y0, ux, uy, ln, s0, hd in self._segs:
            rx, ry = x - x0, y - y0
            t = rx * ux + ry * uy
            tc = min(max(t, 0.0), ln)
            dist = math.hypot(rx - tc * ux, ry - tc * uy)
            if best is None or dist < best[0]:
                best = (dist, s0 + t, ux * ry - uy * rx, hd)
        return best[1], best[2], best[3]

    def project_points(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unclipped arclength, signed lateral offset (left positive) and tangent heading."""
        pts = np.atleast_2d(pts)
        r = pts[:, None, :] - self.centerline[None, :-1, :]
        t = np.einsum("nkj,kj->nk", r, self.seg_dir)
        tc = np.clip(t, 0.0, self.seg_len[None, :])
        foot = self.centerline[None, :-1, :] + tc[..., None] * self.seg_dir[None]
        dist = np.hypot(pts[:, None, 0] - foot[..., 0], pts[:, None, 1] - foot[..., 1])
        best = np.argmin(dist, axis=1)
        rows = np.arange(len(pts))
        u = self.seg_dir[best]
        rb = r[rows, best]
        s = self.seg_s0[best] + t[rows, best]
        d = u[:, 0] * rb[:, 1] - u[:, 1] * rb[:, 0]
        return s, d, np.arctan2(u[:, 1], u[:, 0])


@dataclass
class IntersectionRegion:
    id: int
    polygon: np.ndarray
    entry_lanes: tuple[int, ...] = ()
    exit_lanes: tuple[int, ...] = ()

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=np.float64)
        self.entry_lanes = tuple(self.entry_lanes)
        self.exit_lanes = tuple(self.exit_lanes)

    def contains(self, x: float, y: float) -> bool:
        inside = False
        poly = self.polygon
        n = len(poly)
        for k in range(n):
            x1, y1 = poly[k]
            x2, y2 = poly[(k + 1) % n]
            if (y1 > y) != (y2 > y):
                xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
                if x < xc:
                    inside = not inside
        return inside

    @property
    def center(self) -> tuple[float, float]:
        c = self.polygon.mean(axis=0)
        return float(c[0]), float(c[1])


@dataclass(frozen=True)
class LanePosition:
    lane_id: int
    s: float
    d: float


class RoadNetwork:
    def __init__(self, lanes, intersections=(), name: str = "custom"):
        self.name = name
        self.lanes: dict[int, Lane] = {ln.id: ln for ln in sorted(lanes, key=lambda ln: ln.id)}
        self.intersections: list[IntersectionRegion] = list(intersections)
        self.lane_ids = tuple(self.lanes)
        self.predecessors: dict[int, tuple[int, ...]] = {i: () for i in self.lanes}
        for ln in self.lanes.values():
            for s in ln.successors:
                if s not in self.lanes:
                    raise ValueError(f"lane {ln.id}: unknown successor {s}")
                self.predecessors[s] = self.predecessors[s] + (ln.id,)
        for ln in self.lanes.values():
            if ln.left_neighbor is not None:
                other = self.lanes.get(ln.left_neighbor)
                if other is None or other.right_neighbor != ln.id:
                    raise ValueError(f"lane {ln.id}: left neighbor {ln.left_neighbor} is not symmetric")
            if ln.right_neighbor is not None:
                other = self.lanes.get(ln.right_neighbor)
                if other is None or other.left_neighbor != ln.id:
                    raise ValueError(f"lane {ln.id}: right neighbor {ln.right_neighbor} is not symmetric")
        for reg in self.intersections:
            for i in reg.entry_lanes + reg.exit_lanes:
                if i not in self.lanes:
                    raise ValueError(f"intersection {reg.id}: unknown lane {i}")
        self._chain_cache: dict[int, dict[int, float]] = {}

    def lane(self, lane_id: int) -> Lane:
        return self.lanes[lane_id]

    def neighbor(self, lane_id: int, side: str) -> int | None:
        ln = self.lanes[lane_id]
        if side == "left":
            return ln.left_neighbor
        if side == "right":
            return ln.right_neighbor
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")

    def region_at(self, x: float, y: float) -> IntersectionRegion | None:
        for reg in self.intersections:
            if reg.contains(x, y):
                return reg
        return None

    def point_along(self, lane_id: int, s: float) -> tuple[float, float]:
        """Follow first successors past the lane end; extrapolate past a terminal lane."""
        ln = self.lanes[lane_id]
        while s > ln.length and ln.successors:
            s -= ln.length
            ln = self.lanes[ln.successors[0]]
        return ln.point_at(s)

    def chain_offsets(self, lane_id: int) -> dict[int, float]:
        """Path offsets of lanes reachable along first successors / unique predecessors."""
        cached = self._chain_cache.get(lane_id)
        if cached is not None:
            return cached
        out = {lane_id: 0.0}
        ln, off = self.lanes[lane_id], 0.0
        while ln.successors and off < 2 * LOOKAHEAD:
            off += ln.length
            ln = self.lanes[ln.successors[0]]
            if ln.id in out:
                break
            out[ln.id] = off
        cur, off = lane_id, 0.0
        while self.predecessors[cur] and off > -2 * LOOKAHEAD:
            cur = self.predecessors[cur][0]
            if cur in out:
                break
            off -= self.lanes[cur].length
            out[cur] = off
        self._chain_cache[lane_id] = out
        return out

    def connected_region(self, lane_id: int) -> IntersectionRegion | None:
        for reg in self.intersections:
            if lane_id in reg.entry_lanes or lane_id in reg.exit_lanes:
                return reg
        return None

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lanes": [
                {
                    "id": ln.id,
                    "centerline": ln.centerline.tolist(),
                    "width": ln.width,
                    "left": ln.left_neighbor,
                    "right": ln.right_neighbor,
                    "successors": list(ln.successors),
                }
                for ln in self.lanes.values()
            ],
            "intersections": [
                {
                    "id": reg.id,
                    "polygon": reg.polygon.tolist(),
                    "entry": list(reg.entry_lanes),
                    "exit": list(reg.exit_lanes),
                }
                for reg in self.intersections
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RoadNetwork":
        lanes = [
            Lane(
                int(d["id"]),
                np.asarray(d["centerline"], dtype=np.float64),
                float(d["width"]),
                d.get("left"),
                d.get("right"),
                tuple(d.get("successors", ())),
            )
            for d in data["lanes"]
        ]
        regions = [
            IntersectionRegion(int(d["id"]), d["polygon"], tuple(d.get("entry", ())), tuple(d.get("exit", ())))
            for d in data.get("intersections", ())
        ]
        return cls(lanes, regions, name=str(data.get("name", "custom")))


def load_map(path) -> RoadNetwork:
    return RoadNetwork.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_map(net: RoadNetwork, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# built-in maps

LANE_WIDTH = 3.5


def highway_map(length: float = 500.0, n_lanes: int = 3, width: float = LANE_WIDTH) -> RoadNetwork:
    """Straight multi-lane road along +x; lane 0 is the rightmost."""
    lanes = []
    for k in range(n_lanes):
        y = k * width
        lanes.append(
            Lane(
                k,
                np.array([[0.0, y], [length, y]]),
                width,
                left_neighbor=k + 1 if k + 1 < n_lanes else None,
                right_neighbor=k - 1 if k > 0 else None,
            )
        )
    return RoadNetwork(lanes, name="highway")


EB, WB, NB, SB = 0, 1, 2, 3
APPROACH, CONNECTOR, EXIT = 0, 1, 2


def intersection_lane_id(direction: int, part: int, k: int) -> int:
    """k = 0 inner (left) lane, 1 outer (right) lane."""
    return direction * 6 + part * 2 + k


def intersection_map(half_box: float = 10.0, arm: float = 140.0, width: float = LANE_WIDTH) -> RoadNetwork:
    """Two perpendicular roads, two lanes per direction, crossing in a square box."""
    h, far = half_box, half_box + arm
    lanes = []
    # direction -> (unit heading, unit right-hand normal)
    frames = {EB: ((1, 0), (0, -1)), WB: ((-1, 0), (0, 1)), NB: ((0, 1), (1, 0)), SB: ((0, -1), (-1, 0))}
    bounds = {APPROACH: (-far, -h), CONNECTOR: (-h, h), EXIT: (h, far)}
    for direction, (u, n) in frames.items():
        for part, (a, b) in bounds.items():
            for k in (0, 1):
                off = (k + 0.5) * width
                p0 = (u[0] * a + n[0] * off, u[1] * a + n[1] * off)
                p1 = (u[0] * b + n[0] * off, u[1] * b + n[1] * off)
                lid = intersection_lane_id(direction, part, k)
                succ = (intersection_lane_id(direction, part + 1, k),) if part < EXIT else ()
                lanes.append(
                    Lane(
                        lid,
                        np.array([p0, p1], dtype=np.float64),
                        width,
                        left_neighbor=intersection_lane_id(direction, part, 0) if k == 1 else None,
                        right_neighbor=intersection_lane_id(direction, part, 1) if k == 0 else None,
                        successors=succ,
                    )
                )
    box = IntersectionRegion(
        0,
        [[-h, -h], [h, -h], [h, h], [-h, h]],
        entry_lanes=tuple(intersection_lane_id(d, APPROACH, k) for d in range(4) for k in (0, 1)),
        exit_lanes=tuple(intersection_lane_id(d, EXIT, k) for d in range(4) for k in (0, 1)),
    )
    return RoadNetwork(lanes, [box], name="intersection")


# ---------------------------------------------------------------------------
# projection


def _heading_ok(lane_heading: float, heading: float | None) -> bool:
    if heading is None:
        return True
    return math.cos(lane_heading - heading) > 0.0


def project_all(net: RoadNetwork, x: float, y: float):
    """Per-lane (unclipped s, d, tangent heading) for a single point."""
    return {lid: ln.project_point(x, y) for lid, ln in net.lanes.items()}


def project_to_lane(net: RoadNetwork, x: float, y: float, heading: float | None = None) -> LanePosition:
    """Nearest lane by |d| within its corridor; ties go to the lower lane id.

    ``heading`` optionally restricts candidates to lanes running within 90
    degrees of it, which disambiguates overlapping connectors in a junction box.
    """
    best = None
    for lid, (s, d, hd) in project_all(net, x, y).items():
        ln = net.lanes[lid]
        if not (-1e-9 <= s <= ln.length + 1e-9):
            continue
        if abs(d) > ln.width / 2 + PROJECTION_TOLERANCE or not _heading_ok(hd, heading):
            continue
        if best is None or abs(d) < abs(best.d):
            best = LanePosition(lid, min(max(s, 0.0), ln.length), d)
    if best is None:
        raise OffRoad(f"point ({x:.2f}, {y:.2f}) is off-road")
    return best


# ---------------------------------------------------------------------------
# neighbor queries


@dataclass
class Occupant:
    vid: object
    s: float
    v_long: float
    a_long: float
    half_length: float


@dataclass
class LaneIndex:
    """Per-snapshot lane occupancy for a set of vehicles.

    A vehicle occupies every lane whose corridor its lateral footprint
    overlaps, so a vehicle midway through a lane change is visible in both.
    """

    net: RoadNetwork
    states: dict
    kinds: dict
    accels: dict
    host: dict = field(default_factory=dict)
    proj: dict = field(default_factory=dict)
    occupancy: dict = field(default_factory=dict)
    members: dict = field(default_factory=dict)

    @classmethod
    def build(cls, net: RoadNetwork, states: Mapping, kinds: Mapping | None = None, accels: Mapping | None = None,
              hosts: Mapping | None = None) -> "LaneIndex":
        idx = cls(net, dict(states), dict(kinds or {}), dict(accels or {}))
        idx.members = {lid: [] for lid in net.lanes}
        for vid, st in idx.states.items():
            kind = idx.kinds.get(vid, DEFAULT_KIND)
            proj = project_all(net, st.x, st.y)
            idx.proj[vid] = proj
            occ = []
            best = None
            for lid, (s, d, hd) in proj.items():
                ln = net.lanes[lid]
                if not (0.0 <= s <= ln.length):
                    continue
                if abs(d) < (ln.width + kind.width) / 2 - OCCUPANCY_MARGIN:
                    occ.append(lid)
                    c = math.cos(st.psi - hd)
                    a = idx.accels.get(vid, 0.0)
                    idx.members[lid].append(Occupant(vid, s, st.v * c, a * c, kind.length / 2))
                if abs(d) <= ln.width / 2 + PROJECTION_TOLERANCE and _heading_ok(hd, st.psi):
                    if best is None or abs(d) < best[1]:
                        best = (lid, abs(d))
            idx.occupancy[vid] = occ
            if hosts is not None and hosts.get(vid) is not None:
                idx.host[vid] = hosts[vid]
            else:
                idx.host[vid] = best[0] if best is not None else None
        return idx

    def s_on(self, vid, lane_id: int) -> float:
        return self.proj[vid][lane_id][0]

    def nearest(self, ego, lane_id: int, direction: str, exclude=()) -> tuple[Occupant, float] | None:
        """Closest vehicle ahead/behind the ego along ``lane_id``'s path.

        Returns the occupant and its signed path gap (center to center).
        """
        offsets = self.net.chain_offsets(lane_id)
        s_ego = self.s_on(ego, lane_id)
        best, best_gap = None, None
        seen = set()
        for lid, off in offsets.items():
            for occ in self.members[lid]:
                if occ.vid == ego or occ.vid in exclude or occ.vid in seen:
                    continue
                gap = off + occ.s - s_ego
                if direction == "front":
                    if gap < 0 or gap > LOOKAHEAD:
                        continue
                    if best is None or gap < best_gap:
                        best, best_gap = occ, gap
                else:
                    if gap >= 0 or -gap > LOOKAHEAD:
                        continue
                    if best is None or gap > best_gap:
                        best, best_gap = occ, gap
                seen.add(occ.vid)
        return None if best is None else (best, best_gap)


RELATIONS = (
    "front-same-lane",
    "rear-same-lane",
    "front-target-lane",
    "rear-target-lane",
    "front-other-side",
    "rear-other-side",
)


def relation_lane(net: RoadNetwork, host: int, relation: str, side: str | None) -> int | None:
    if relation not in RELATIONS:
        raise ValueError(f"unknown relation {relation!r}")
    if relation.endswith("same-lane"):
        return host
    if side is None:
        raise ValueError(f"relation {relation!r} needs a target side")
    target = net.neighbor(host, side)
    if relation.endswith("target-lane") or target is None:
        return target
    # the lane beyond the target, whose traffic may also merge into it
    return net.neighbor(target, side)


def neighbor_query(net: RoadNetwork, vehicles: Mapping | LaneIndex, ego_id, relation: str,
                   side: str | None = None):
    """Vehicle id with the smallest forward (or reverse) path gap in the related lane."""
    index = vehicles if isinstance(vehicles, LaneIndex) else LaneIndex.build(net, vehicles)
    host = index.host.get(ego_id)
    if host is None:
        return None
    lane_id = relation_lane(net, host, relation, side)
    if lane_id is None:
        return None
    hit = index.nearest(ego_id, lane_id, "front" if relation.startswith("front") else "rear")
    return None if hit is None else hit[0].vid


# ---------------------------------------------------------------------------
# crossing traffic


def crossing_conflicts(index: LaneIndex, ego, lane_id: int, candidates=None,
                       horizon: float = CROSSING_HORIZON, step: float = 0.1):
    """Crossing vehicles predicted to enter the ego's path corridor.

    Each non-aligned vehicle is rolled forward at constant velocity; the first
    predicted position inside the corridor of ``lane_id`` or its successors
    becomes a target at that path position. Returns tuples
    ``(vid, signed center gap, speed along path, footprint half-extent)``.
    """
    net = index.net
    offsets = net.chain_offsets(lane_id)
    s_ego = index.s_on(ego, lane_id)
    ts = np.arange(0.0, horizon + 1e-9, step)
    out = []
    for vid, st in index.states.items():
        if vid == ego or (candidates is not None and vid not in candidates):
            continue
        path_heading = net.lanes[lane_id].heading_at(s_ego)
        if abs(math.cos(st.psi - path_heading)) > math.cos(CROSSING_ANGLE):
            continue
        kind = index.kinds.get(vid, DEFAULT_KIND)
        pts = np.stack([st.x + st.v * math.cos(st.psi) * ts, st.y + st.v * math.sin(st.psi) * ts], axis=1)
        first = None
        for lid, off in offsets.items():
            if off + net.lanes[lid].length < s_ego - LOOKAHEAD or off > s_ego + LOOKAHEAD:
                continue
            ln = net.lanes[lid]
            s, d, hd = ln.project_points(pts)
            inside = (s >= 0) & (s <= ln.length) & (np.abs(d) < ln.width / 2 + kind.length / 2)
            if inside.any():
                k = int(np.argmax(inside))
                if first is None or k < first[0]:
                    first = (k, off + s[k], math.cos(st.psi - hd[k]))
        if first is None:
            continue
        _, path_s, c = first
        out.append((vid, path_s - s_ego, st.v * c, kind.width / 2))
    return out


# ---------------------------------------------------------------------------
# waypoints


def preview_distance(v: float) -> float:
    return max(8.0, 1.5 * v)


def waypoint_for_action(net: RoadNetwork, state: VehicleState, action: Action,
                        lane_pos: LanePosition | None = None) -> tuple[float, float]:
    """Target centerline point for lane keeping or a lane change."""
    if lane_pos is None:
        lane_pos = project_to_lane(net, state.x, state.y, state.psi)
    ahead = preview_distance(state.v)
    if action == Action.CHANGE_LANE_LEFT or action == Action.CHANGE_LANE_RIGHT:
        side = "left" if action == Action.CHANGE_LANE_LEFT else "right"
        target = net.neighbor(lane_pos.lane_id, side)
        if target is None:
            raise NoSuchLane(f"lane {lane_pos.lane_id} has no {side} neighbor")
        s = net.lanes[target].project_point(state.x, state.y)[0]
        return net.point_along(target, s + ahead)
    return net.point_along(lane_pos.lane_id, lane_pos.s + ahead)


def phantom_waypoint(net: RoadNetwork, state: VehicleState, lane_pos: LanePosition, side: str) -> tuple[float, float]:
    """Waypoint one lane width beyond a lane edge that has no neighbor."""
    ln = net.lanes[lane_pos.lane_id]
    s = lane_pos.s + preview_distance(state.v)
    x, y = net.point_along(ln.id, s)
    hd = ln.heading_at(min(s, ln.length))
    sign = 1.0 if side == "left" else -1.0
    return x - sign * math.sin(hd) * ln.width, y + sign * math.cos(hd) * ln.width
