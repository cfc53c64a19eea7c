import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cmaa2c.comms import (
    COMM_RANGE,
    FEATURE_DIM,
    SENSING_RANGE,
    ObservationBundle,
    Observed,
    build_observation,
    build_scene_graph,
    in_radar_zone,
)
from cmaa2c.dynamics import VehicleState
from cmaa2c.scenario import builtin_spec, spawn
from cmaa2c.world import highway_map, intersection_map


def _highway_world(comm=True):
    w = spawn(builtin_spec("Highway", comm_enabled=comm))
    # CAVs 0,1,2; UCV 3; HAZV 4
    layout = {0: (100.0, 3.5), 1: (180.0, 0.0), 2: (230.0, 7.0), 3: (80.0, 0.0), 4: (140.0, 3.5)}
    for vid, (x, y) in layout.items():
        w.vehicles[vid].state = VehicleState(x, y, 10.0 + vid, 0.0)
        w.vehicles[vid].accel = 0.5 * vid
    w._invalidate()
    return w


def test_comm_on_sources():
    ob = build_observation(_highway_world(), 0, True)
    assert [o.vid for o in ob.shared] == [1]          # CAV 2 is 130 m away
    assert all(o.accel is not None for o in ob.shared)
    assert sorted(o.vid for o in ob.infra) == [1, 2, 3, 4]  # radar covers the whole highway
    assert all(o.accel is None for o in ob.infra)
    assert [o.vid for o in ob.detected] == [4]        # UCV 3 is behind, CAV 1 beyond 50 m


def test_comm_off_sees_only_forward_sensor():
    ob = build_observation(_highway_world(False), 0, False)
    assert ob.shared == [] and ob.infra == []
    assert ob.known() == {4: None}


def test_merge_prefers_shared_record():
    ob = build_observation(_highway_world(), 0, True)
    known = ob.known()
    assert known[1] == pytest.approx(0.5)
    assert known[4] is None and 0 not in known


def test_ranges():
    w = _highway_world()
    w.vehicles[1].state = VehicleState(100.0 + COMM_RANGE + 0.1, 0.0, 10.0, 0.0)
    w.vehicles[4].state = VehicleState(100.0 + SENSING_RANGE + 0.1, 3.5, 10.0, 0.0)
    w._invalidate()
    ob = build_observation(w, 0, True)
    assert ob.shared == [] and ob.detected == []


def test_inactive_vehicles_are_invisible():
    w = _highway_world()
    w.vehicles[4].active = False
    ob = build_observation(w, 0, True)
    assert 4 not in ob.known()


def test_radar_zone_on_intersection():
    net = intersection_map()
    assert in_radar_zone(net, 0.0, 0.0)
    assert in_radar_zone(net, -85.0, -1.75)
    assert not in_radar_zone(net, -95.0, -1.75)
    assert not in_radar_zone(net, -50.0, -50.0)
    assert in_radar_zone(highway_map(), 400.0, 7.0)


def test_scene_graph_ego_node():
    w = _highway_world()
    g = build_scene_graph(w.observation(0), w)
    assert g.ego_index == 0 and g.features.shape[1] == FEATURE_DIM
    np.testing.assert_allclose(g.features[0], [0, 0, 10 / 30, 0, 0, 1, 1, 0])
    assert g.keys[0] == "vehicle:0"


def test_scene_graph_structure():
    w = _highway_world()
    g = build_scene_graph(w.observation(0), w)
    vehicles = {k for k, kind in zip(g.keys, g.kinds) if kind == "vehicle"}
    assert vehicles == {"vehicle:0", "vehicle:1", "vehicle:2", "vehicle:3", "vehicle:4"}
    roads = sorted(k for k, kind in zip(g.keys, g.kinds) if kind == "road")
    assert roads == ["road:0", "road:1", "road:2"]
    key = {k: n for n, k in enumerate(g.keys)}
    edges = {frozenset(e) for e in g.edges}
    assert frozenset((key["vehicle:0"], key["road:1"])) in edges
    assert frozenset((key["vehicle:4"], key["road:1"])) in edges
    # 130 m apart: beyond the vehicle-vehicle edge range
    assert frozenset((key["vehicle:0"], key["vehicle:2"])) not in edges
    assert frozenset((key["vehicle:0"], key["vehicle:1"])) in edges


def test_relative_features_rotate_with_ego():
    ego = Observed(0, 10.0, 5.0, 0.0, math.pi / 2, 0.0, True)
    other = Observed(1, 10.0, 25.0, 6.0, math.pi / 2, None, False)
    w = spawn(builtin_spec("Highway"))
    g = build_scene_graph(ObservationBundle(ego, detected=[other]), _StubWorld(w.net))
    np.testing.assert_allclose(g.features[1, :4], [0.2, 0.0, 0.2, 0.0], atol=1e-12)


class _StubWorld:
    def __init__(self, net):
        self.net = net
        self.t = 7


def test_intersection_graph_links_box_to_roads():
    w = spawn(builtin_spec("Intersection"))
    hz = max(w.vehicles)
    w.vehicles[hz].state = VehicleState(0.0, 0.0, 8.0, math.pi / 2)
    w._invalidate()
    g = build_scene_graph(w.observation(0), w)
    key = {k: n for n, k in enumerate(g.keys)}
    assert "intersection:0" in key
    edges = {frozenset(e) for e in g.edges}
    assert frozenset((key[f"vehicle:{hz}"], key["intersection:0"])) in edges
    road = next(k for k in key if k.startswith("road:"))
    assert frozenset((key[road], key["intersection:0"])) in edges


@given(st.permutations(range(8)))
def test_permutation_relabels_adjacency(order):
    w = _highway_world()
    g = build_scene_graph(w.observation(0), w)
    order = [k for k in order if k < g.n_nodes] + list(range(8, g.n_nodes))
    p = g.permuted(order)
    a = g.adjacency()
    np.testing.assert_array_equal(p.adjacency(), a[np.ix_(order, order)])
    np.testing.assert_array_equal(p.features, g.features[order])
    assert p.kinds[p.ego_index] == "vehicle" and p.keys[p.ego_index] == "vehicle:0"
