"""Independent reference computations shared by the test modules."""

import itertools

import numpy as np


def central_fd(f, params: dict, eps: float = 1e-5) -> dict:
    """Central finite differences of scalar ``f(params)`` for every entry."""
    out = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        for idx in itertools.product(*map(range, value.shape)):
            orig = value[idx]
            value[idx] = orig + eps
            up = f(params)
            value[idx] = orig - eps
            down = f(params)
            value[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def rel_error(a: dict, b: dict, floor: float = 1e-4) -> float:
    """Largest per-block ||a - b|| / max(||a||, ||b||, floor).

    The floor keeps all-but-zero blocks (dead relu units) from turning
    finite-difference round-off into a large ratio.
    """
    worst = 0.0
    for k in a:
        num = np.linalg.norm(a[k] - b[k])
        den = max(np.linalg.norm(a[k]), np.linalg.norm(b[k]), floor)
        worst = max(worst, num / den)
    return worst


def scalar(x) -> float:
    return float(np.asarray(getattr(x, "value", x)).reshape(-1)[0])


def grid_qp(barriers, a_nominal: float, gamma: float, lo: float, hi: float, step: float = 0.01):
    """Brute-force CBF-QP over an acceleration grid; None when no grid point is feasible."""
    n = int(round((hi - lo) / step))
    grid = lo + step * np.arange(n + 1)
    ok = np.ones_like(grid, dtype=bool)
    for b in barriers:
        ok &= b.hdot_free + b.coef * grid >= -gamma * b.h - 1e-9
    if not ok.any():
        return None
    feasible = grid[ok]
    return float(feasible[np.argmin(np.abs(feasible - a_nominal))])


def random_barriers(rng, count: int):
    from cmaa2c.shield import Barrier

    out = []
    for _ in range(count):
        coef = rng.choice([rng.uniform(-3.0, -0.2), rng.uniform(0.2, 2.0), 0.0], p=[0.6, 0.3, 0.1])
        out.append(Barrier(float(rng.uniform(-3.0, 25.0)), float(rng.uniform(-12.0, 12.0)), float(coef)))
    return out


def following_rollout(gap0: float, v0: float, vf0: float, a_front: float, a_nominal, cfg, steps=None):
    """Ego behind a front vehicle on a straight road, ego filtered by the shield each step.

    ``a_nominal(t, v)`` gives the ego's requested acceleration. Returns the
    barrier trace and whether the constraint was infeasible at t = 0.
    """
    from cmaa2c.dynamics import DEFAULT_KIND, DT, ControlInput, VehicleState, step_bicycle
    from cmaa2c.shield import barrier_values, cbf_qp

    kind = DEFAULT_KIND
    steps = cfg.horizon_check if steps is None else steps
    ego = VehicleState(0.0, 0.0, v0, 0.0)
    front = VehicleState(gap0 + kind.length, 0.0, vf0, 0.0)
    hs, infeasible0 = [], False
    for t in range(steps + 1):
        gap = front.x - ego.x - kind.length
        a_t = a_front if front.v > 0.0 else 0.0
        b = barrier_values(ego.v, gap, front.v, a_t, "front", cfg)
        hs.append(b.h)
        if t == steps:
            break
        u = cbf_qp([b], ControlInput(a_nominal(t, ego.v), 0.0), kind, cfg.gamma_cbf)
        if u is None:
            infeasible0 = infeasible0 or t == 0
            u = ControlInput(kind.accel_min, 0.0)
        ego = step_bicycle(ego, u, DT, kind)
        front = step_bicycle(front, ControlInput(a_front, 0.0), DT, kind)
    return hs, infeasible0
