import math

import pytest
from hypothesis import given, strategies as st

from cmaa2c.dynamics import (
    DEFAULT_KIND,
    ControlInput,
    VehicleKind,
    VehicleState,
    pedal_to_accel,
    step_bicycle,
    wrap_angle,
)

K = DEFAULT_KIND
speeds = st.floats(0.0, 30.0)
headings = st.floats(-math.pi, math.pi)
accels = st.floats(K.accel_min, K.accel_max)
steers = st.floats(-K.steer_max, K.steer_max)


def test_default_kind():
    assert (K.length, K.width, K.l_f, K.l_r) == (4.8, 2.0, 1.4, 1.4)
    assert (K.accel_max, K.accel_min, K.steer_max, K.v_max, K.c_drag) == (4.0, -8.0, 0.6, 30.0, 0.004)


def test_zero_dynamics():
    s = VehicleState(0, 0, 0, 0)
    assert step_bicycle(s, ControlInput(0, 0), 0.1) == s


def test_coasting_step():
    s = step_bicycle(VehicleState(0, 0, 10, 0), ControlInput(0, 0), 0.1)
    assert (s.x, s.y, s.v, s.psi) == pytest.approx((1.0, 0.0, 10.0, 0.0))


def test_accelerating_step():
    s = step_bicycle(VehicleState(0, 0, 5, 0), ControlInput(2, 0), 0.1)
    assert s.v == pytest.approx(5.2)
    assert s.x == pytest.approx(0.5)


def test_steering_closed_form():
    st0 = VehicleState(1.0, -2.0, 8.0, 0.3)
    u = ControlInput(1.0, 0.2)
    beta = math.atan(K.l_r * math.tan(0.2) / (K.l_f + K.l_r))
    s = step_bicycle(st0, u, 0.1)
    assert s.x == pytest.approx(1.0 + 8.0 * math.cos(0.3 + beta) * 0.1)
    assert s.y == pytest.approx(-2.0 + 8.0 * math.sin(0.3 + beta) * 0.1)
    assert s.psi == pytest.approx(0.3 + 8.0 / K.l_r * math.sin(beta) * 0.1)
    assert s.v == pytest.approx(8.1)


def test_heading_wraps():
    s = step_bicycle(VehicleState(0, 0, 30, math.pi - 1e-3), ControlInput(0, 0.6), 0.1)
    assert -math.pi < s.psi <= math.pi
    assert s.psi < 0


@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_speed_clamps():
    assert step_bicycle(VehicleState(0, 0, 0.3, 0), ControlInput(-8, 0)).v == 0.0
    assert step_bicycle(VehicleState(0, 0, 29.9, 0), ControlInput(4, 0)).v == 30.0


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        VehicleState(0, 0, -1, 0)
    with pytest.raises(ValueError):
        VehicleState(math.nan, 0, 1, 0)
    with pytest.raises(ValueError):
        step_bicycle(VehicleState(0, 0, 1, 0), ControlInput(math.inf, 0))
    with pytest.raises(ValueError):
        step_bicycle(VehicleState(0, 0, 1, 0), ControlInput(9, 0))
    with pytest.raises(ValueError):
        step_bicycle(VehicleState(0, 0, 1, 0), ControlInput(0, 0), dt=0)


def test_kind_invariants():
    with pytest.raises(ValueError):
        VehicleKind(length=2.0, l_f=1.4, l_r=1.4)
    with pytest.raises(ValueError):
        VehicleKind(accel_min=1.0)


@given(speeds, headings, accels, steers)
def test_speed_never_negative(v, psi, a, d):
    assert step_bicycle(VehicleState(0, 0, v, psi), ControlInput(a, d)).v >= 0.0


@given(speeds, headings, accels)
def test_straight_motion_keeps_heading(v, psi, a):
    s = step_bicycle(VehicleState(0, 0, v, psi), ControlInput(a, 0.0))
    assert s.psi == psi
    # displacement collinear with heading
    assert abs(s.x * math.sin(psi) - s.y * math.cos(psi)) <= 1e-9


@given(speeds, accels, steers, st.integers(1, 30))
def test_mirror_symmetry(v, a, d, n):
    left = right = VehicleState(0, 0, v, 0)
    for _ in range(n):
        left = step_bicycle(left, ControlInput(a, d))
        right = step_bicycle(right, ControlInput(a, -d))
    assert left.x == right.x and left.v == right.v
    assert left.y == -right.y
    assert left.psi == -right.psi


def test_pedal_examples():
    assert pedal_to_accel(1, 0, 0) == K.accel_max
    assert pedal_to_accel(0, 1, 20) == K.accel_min
    assert pedal_to_accel(0.5, 0, 10) == pytest.approx(1.6)


def test_pedal_rejects_both():
    with pytest.raises(ValueError):
        pedal_to_accel(0.5, 0.5, 0)
    with pytest.raises(ValueError):
        pedal_to_accel(1.5, 0, 0)


@given(st.floats(0, 1), st.floats(0, 1), speeds)
def test_pedal_within_bounds(throttle, brake, v):
    if throttle > 0 and brake > 0:
        return
    assert K.accel_min <= pedal_to_accel(throttle, brake, v) <= K.accel_max
