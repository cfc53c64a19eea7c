"""Constrained multi-agent advantage actor-critic with consensus and gradient tracking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .actions import ACTION_SET, N_ACTIONS, Action
from .comms import build_scene_graph
from .encoder import (
    EMBED,
    GraphWindow,
    attend_windows,
    encode_batch,
    encode_fc,
    encoder_kind,
    gcn_ego_rows,
    init_encoder,
    project,
)
from .numeric import Eval, Tape, grad, load_blocks, save_blocks
from .scenario import StepOutcome, World, step_world
from .shield import DEFAULT_SHIELD, ShieldConfig, safety_checking

ACTOR_HIDDEN = 64
VALUE_HIDDEN = 64


# ---------------------------------------------------------------------------
# configuration


def metropolis_weights(adj: np.ndarray) -> np.ndarray:
    """Symmetric doubly stochastic weights from an undirected graph."""
    a = np.asarray(adj, dtype=bool)
    n = len(a)
    deg = a.sum(axis=1) - np.diag(a)
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j and a[i, j]:
                w[i, j] = 1.0 / (1.0 + max(deg[i], deg[j]))
        w[i, i] = 1.0 - w[i].sum()
    return w


def check_weights(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("W must be square")
    if not np.allclose(w.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("W must be row-stochastic")
    if not np.allclose(w, w.T, atol=1e-12):
        raise ValueError("W must be symmetric")
    if np.any(np.diag(w) <= 0) or np.any(w < 0):
        raise ValueError("W needs a positive diagonal and non-negative entries")
    return w


@dataclass(frozen=True)
class TrainerConfig:
    gamma_r: float = 0.99
    gamma_c: float = 0.9
    zeta: float = 10.0
    cycle_len: int = 16
    sigma: float = 3e-4
    rho: float = 1e-2
    gamma_reg: float = 0.99
    critic_lr: float = 1e-3
    critic_steps: int = 1
    batch_size: int = 64
    eps_start: float = 0.5
    eps_end: float = 0.05
    eps_fraction: float = 0.6
    W: tuple | None = None

    def __post_init__(self):
        for name in ("gamma_r", "gamma_c", "gamma_reg"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        for name in ("cycle_len", "batch_size", "critic_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("sigma", "rho", "critic_lr"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1 and 0 < self.eps_fraction <= 1):
            raise ValueError("eps_start, eps_end and eps_fraction must lie in [0, 1]")
        if self.W is not None:
            check_weights(np.asarray(self.W))

    def weights(self, n: int) -> np.ndarray:
        if self.W is None:
            return metropolis_weights(np.ones((n, n)))
        w = check_weights(np.asarray(self.W))
        if len(w) != n:
            raise ValueError(f"W is {len(w)}x{len(w)} but there are {n} agents")
        return w


def epsilon_at(cfg: TrainerConfig, episode: int, total: int) -> float:
    """Linear decay over the first ``eps_fraction`` of training, then constant."""
    span = max(cfg.eps_fraction * total, 1.0)
    frac = min(episode / span, 1.0)
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


# ---------------------------------------------------------------------------
# parameters and networks


@dataclass
class AgentParams:
    theta: dict
    phi: dict
    omega: dict
    vartheta: dict
    lam: float = 0.0
    # last local gradient estimate fed to the tracker; empty means zeros
    last_grad: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def _uniform(rng, fan_in, shape):
    b = math.sqrt(1.0 / fan_in)
    return rng.uniform(-b, b, size=shape)


def init_mlp(rng, prefix: str, n_in: int, hidden: int, n_out: int) -> dict:
    return {
        f"{prefix}.W1": _uniform(rng, n_in, (n_in, hidden)),
        f"{prefix}.b1": _uniform(rng, n_in, (1, hidden)),
        f"{prefix}.W2": _uniform(rng, hidden, (hidden, n_out)),
        f"{prefix}.b2": _uniform(rng, hidden, (1, n_out)),
    }


def mlp(x, params, prefix: str, ops=None):
    ops = ops or Eval()
    h = ops.relu(ops.linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return ops.linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def init_agents(n: int, rng: np.random.Generator, encoder: str | None = "gcn-transformer", embed: int = EMBED,
                n_actions: int = N_ACTIONS, hidden: int = ACTOR_HIDDEN) -> list[AgentParams]:
    """All actors start from one shared draw; critics and cost nets are drawn per agent."""
    theta = init_mlp(rng, "actor", embed, hidden, n_actions)
    if encoder is not None:
        theta.update(init_encoder(rng, encoder, embed=embed))
    agents = []
    for _ in range(n):
        agents.append(
            AgentParams(
                {k: v.copy() for k, v in theta.items()},
                init_mlp(rng, "critic", n * embed, VALUE_HIDDEN, 1),
                init_mlp(rng, "cost", n * embed, VALUE_HIDDEN, 1),
                {k: np.zeros_like(v) for k, v in theta.items()},
            )
        )
    return agents


def actor_logits(embedding, theta, ops=None):
    return mlp(embedding, theta, "actor", ops)


def policy_forward(embedding, theta, ops=None):
    """Action probabilities (rows sum to one)."""
    ops = ops or Eval()
    return ops.softmax(actor_logits(embedding, theta, ops))


def value_forward(joint, params, prefix: str, ops=None):
    return mlp(joint, params, prefix, ops)


def select_action(dist, safe_set, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over the safe set; otherwise sample the renormalized restricted policy."""
    p = np.asarray(dist, dtype=np.float64).reshape(-1)
    safe = sorted(int(a) for a in safe_set)
    if not safe:
        raise ValueError("safe set is empty")
    if rng.random() < epsilon:
        return safe[int(rng.integers(len(safe)))]
    mass = np.array([p[a] if a < len(p) else 0.0 for a in safe])
    total = mass.sum()
    if not total > 0:
        return safe[int(rng.integers(len(safe)))]
    return safe[int(rng.choice(len(safe), p=mass / total))]


# ---------------------------------------------------------------------------
# memory, returns and losses


@dataclass
class Transition:
    """One agent-step; ``window`` is the encoder input (graphs, or a raw 1 x E embedding)."""

    window: object
    joint: np.ndarray
    action: int
    reward: float
    cost: float
    mask: tuple
    next_joint: np.ndarray
    done: bool = False
    terminal: bool = False

    def __post_init__(self):
        if self.reward < 0:
            raise ValueError("rewards are non-negative")
        if not any(self.mask):
            raise ValueError("mask must allow at least one action")


def _values(batch: Sequence[Transition], params, prefix, next_state=False) -> np.ndarray:
    x = np.concatenate([(t.next_joint if next_state else t.joint).reshape(1, -1) for t in batch])
    return value_forward(x, params, prefix)[:, 0]


def returns_and_advantages(batch: Sequence[Transition], gamma_r: float, gamma_c: float, phi, omega):
    """Discounted returns within an ordered segment, bootstrapped at the cut.

    A segment ends at a terminal transition (no bootstrap), at an episode end
    cut by the horizon, or at the end of the batch (both bootstrap from the
    value of the next state).
    """
    n = len(batch)
    if n == 0:
        z = np.zeros(0)
        return z, z, z, z
    v = _values(batch, phi, "critic")
    vc = _values(batch, omega, "cost")
    v_next = _values(batch, phi, "critic", True)
    vc_next = _values(batch, omega, "cost", True)
    R = np.zeros(n)
    RC = np.zeros(n)
    run_r = run_c = 0.0
    for k in range(n - 1, -1, -1):
        t = batch[k]
        if t.terminal:
            run_r = run_c = 0.0
        elif t.done or k == n - 1:
            run_r, run_c = v_next[k], vc_next[k]
        run_r = t.reward + gamma_r * run_r
        run_c = t.cost + gamma_c * run_c
        R[k], RC[k] = run_r, run_c
    return R, RC, R - v, RC - vc


def _value_loss(joint: np.ndarray, target: np.ndarray, params, prefix, ops):
    out = value_forward(joint, params, prefix, ops)
    diff = ops.add(out, -target.reshape(-1, 1))
    return ops.mean(ops.mul(diff, diff))


def critic_cost_losses(batch: Sequence[Transition], phi, omega, R: np.ndarray, RC: np.ndarray):
    """Mean squared errors of the critic and cost net against the given targets."""
    joint = np.concatenate([t.joint.reshape(1, -1) for t in batch])
    ev = Eval()
    lc = float(_value_loss(joint, np.asarray(R), phi, "critic", ev)[0, 0])
    lk = float(_value_loss(joint, np.asarray(RC), omega, "cost", ev)[0, 0])
    return lc, lk


def value_gradient(batch: Sequence[Transition], params, prefix: str, target: np.ndarray):
    joint = np.concatenate([t.joint.reshape(1, -1) for t in batch])
    tape = Tape()
    bound = tape.bind(params)
    loss = _value_loss(joint, np.asarray(target), bound, prefix, tape)
    return float(loss.value[0, 0]), grad(tape, loss, bound)


def _embeddings(batch: Sequence[Transition], theta, ops):
    if any(k.startswith("enc.") for k in theta):
        return encode_batch([t.window for t in batch], theta, ops)
    return np.concatenate([np.asarray(t.window, dtype=np.float64).reshape(1, -1) for t in batch])


def surrogate(batch: Sequence[Transition], theta, lam: float, A, AC, ops=None):
    """mean(log pi(a|s) * (A + lam * A^C)) on the unrestricted policy."""
    ops = ops or Eval()
    emb = _embeddings(batch, theta, ops)
    logp = ops.log(policy_forward(emb, theta, ops))
    n_actions = theta["actor.b2"].shape[1]
    weights = np.zeros((len(batch), n_actions))
    for k, t in enumerate(batch):
        # forced emergency stops are outside the policy's support
        if t.action < n_actions:
            weights[k, t.action] = (A[k] + lam * AC[k]) / len(batch)
    return ops.sum(ops.mul(logp, weights))


def primal_gradient(batch: Sequence[Transition], theta, lam: float, A, AC) -> dict:
    """Ascent direction of the Lagrangian J^R + lam (J^C - zeta) in theta."""
    tape = Tape()
    bound = tape.bind(theta)
    out = surrogate(batch, bound, lam, A, AC, tape)
    return grad(tape, out, bound)


def dual_gradient(cost_returns, zeta: float) -> float:
    return float(zeta - np.mean(cost_returns))


def consensus_update(thetas: Sequence[dict], varthetas: Sequence[dict], W: np.ndarray, sigma: float) -> list[dict]:
    """theta_i' = sum_j W_ij theta_j - sigma vartheta_i, blockwise."""
    n = len(thetas)
    out = []
    for i in range(n):
        new = {}
        for k in thetas[i]:
            acc = np.zeros_like(thetas[i][k])
            for j in range(n):
                if W[i, j] != 0.0:
                    acc = acc + W[i, j] * thetas[j][k]
            new[k] = acc - sigma * varthetas[i][k]
        out.append(new)
    return out


def gradient_tracking_update(varthetas: Sequence[dict], W: np.ndarray, grad_new: Sequence[dict],
                             grad_old: Sequence[dict]) -> list[dict]:
    """vartheta_i' = sum_j W_ij vartheta_j + grad_new_i - grad_old_i."""
    n = len(varthetas)
    out = []
    for i in range(n):
        new = {}
        for k in varthetas[i]:
            acc = np.zeros_like(varthetas[i][k])
            for j in range(n):
                if W[i, j] != 0.0:
                    acc = acc + W[i, j] * varthetas[j][k]
            new[k] = acc + grad_new[i][k] - grad_old[i][k]
        out.append(new)
    return out


def dual_update(lam: float, dual_grad: float, rho: float, gamma_reg: float, tau: int) -> float:
    return max(0.0, (1.0 - rho * gamma_reg ** tau) * lam + rho * dual_grad)


def _sample(memory: list, size: int, rng: np.random.Generator) -> list:
    if len(memory) <= size:
        return list(memory)
    idx = np.sort(rng.choice(len(memory), size=size, replace=False))
    return [memory[k] for k in idx]


@dataclass
class CycleStats:
    tau: int
    skipped: bool = False
    critic_loss: list = field(default_factory=list)
    cost_loss: list = field(default_factory=list)
    cost_return: list = field(default_factory=list)
    lam: list = field(default_factory=list)


def train_cycle(memories: Sequence[list], agents: list[AgentParams], cfg: TrainerConfig, tau: int,
                rng: np.random.Generator) -> CycleStats:
    """One training round on cycle-local memories; updates ``agents`` in place.

    Order: consensus step, batch sampling, critic/cost descent, primal
    gradient at the new actor, gradient tracking, dual step.
    The tracker increment is the new local gradient minus the one stored
    from the previous cycle (zero before the first), so the trackers always
    sum to the agents' current gradient estimates. It follows the descent
    direction (negated ascent gradient); subtracting it in the consensus
    step ascends the Lagrangian.
    """
    stats = CycleStats(tau)
    if not any(memories):
        stats.skipped = True
        return stats
    n = len(agents)
    W = cfg.weights(n)
    old_thetas = [a.theta for a in agents]
    old_tracks = [a.vartheta for a in agents]
    new_thetas = consensus_update(old_thetas, old_tracks, W, cfg.sigma)
    g_old = [a.last_grad or {k: np.zeros_like(v) for k, v in a.theta.items()} for a in agents]
    g_new = []
    for i, agent in enumerate(agents):
        batch = _sample(memories[i], cfg.batch_size, rng) if memories[i] else []
        if not batch:
            g_new.append(g_old[i])
            stats.critic_loss.append(float("nan"))
            stats.cost_loss.append(float("nan"))
            stats.cost_return.append(float("nan"))
            continue
        R, RC, _, _ = returns_and_advantages(memories[i], cfg.gamma_r, cfg.gamma_c, agent.phi, agent.omega)
        pos = {id(t): k for k, t in enumerate(memories[i])}
        sel = [pos[id(t)] for t in batch]
        R, RC = R[sel], RC[sel]
        for _ in range(cfg.critic_steps):
            lc, gc = value_gradient(batch, agent.phi, "critic", R)
            lk, gk = value_gradient(batch, agent.omega, "cost", RC)
            agent.phi = {k: v - cfg.critic_lr * gc[k] for k, v in agent.phi.items()}
            agent.omega = {k: v - cfg.critic_lr * gk[k] for k, v in agent.omega.items()}
        A = R - _values(batch, agent.phi, "critic")
        AC = RC - _values(batch, agent.omega, "cost")
        new = primal_gradient(batch, new_thetas[i], agent.lam, A, AC)
        g_new.append({k: -v for k, v in new.items()})
        stats.critic_loss.append(lc)
        stats.cost_loss.append(lk)
        stats.cost_return.append(float(np.mean(RC)))
    new_tracks = gradient_tracking_update(old_tracks, W, g_new, g_old)
    for i, agent in enumerate(agents):
        agent.theta = new_thetas[i]
        agent.vartheta = new_tracks[i]
        agent.last_grad = g_new[i]
        jc = stats.cost_return[i]
        if not math.isnan(jc):
            agent.lam = dual_update(agent.lam, cfg.zeta - jc, cfg.rho, cfg.gamma_reg, tau)
        stats.lam.append(agent.lam)
    return stats


# ---------------------------------------------------------------------------
# checkpoints


def agent_blocks(agents: Sequence[AgentParams]) -> dict[str, np.ndarray]:
    blocks = {}
    for i, a in enumerate(agents):
        for k, v in a.theta.items():
            blocks[f"agent{i}.{k}"] = v
        for k, v in a.phi.items():
            blocks[f"agent{i}.{k}"] = v
        for k, v in a.omega.items():
            blocks[f"agent{i}.{k}"] = v
        for k, v in a.vartheta.items():
            blocks[f"agent{i}.tracker.{k}"] = v
        for k, v in a.last_grad.items():
            blocks[f"agent{i}.lastgrad.{k}"] = v
        blocks[f"agent{i}.lambda"] = np.array([[a.lam]])
    return blocks


def save_agents(path, agents: Sequence[AgentParams]) -> None:
    save_blocks(path, agent_blocks(agents))


def load_agents(path) -> list[AgentParams]:
    blocks = load_blocks(path)
    per: dict[int, dict] = {}
    for name, v in blocks.items():
        head, rest = name.split(".", 1)
        per.setdefault(int(head[len("agent"):]), {})[rest] = v
    agents = []
    for i in sorted(per):
        b = per[i]
        theta = {k: v for k, v in b.items() if k.startswith(("actor.", "enc."))}
        agents.append(
            AgentParams(
                theta,
                {k: v for k, v in b.items() if k.startswith("critic.")},
                {k: v for k, v in b.items() if k.startswith("cost.")},
                {k[len("tracker."):]: v for k, v in b.items() if k.startswith("tracker.")},
                float(b["lambda"][0, 0]),
                {k[len("lastgrad."):]: v for k, v in b.items() if k.startswith("lastgrad.")},
            )
        )
    return agents


# ---------------------------------------------------------------------------
# rollouts


class _Embedder:
    """Per-agent encoder front end that convolves each new scene graph once."""

    def __init__(self):
        self.rows: dict[int, tuple] = {}

    def clear(self):
        self.rows = {}

    def __call__(self, graphs, theta) -> np.ndarray:
        if encoder_kind(theta) == "fc":
            return encode_fc(graphs, theta)
        missing = list({id(g): g for g in graphs if id(g) not in self.rows}.values())
        if missing:
            rows = gcn_ego_rows(missing, theta)
            for g, r in zip(missing, rows):
                self.rows[id(g)] = (g, r)
        seq = np.stack([self.rows[id(g)][1] for g in graphs])
        return project(attend_windows(seq, np.arange(len(graphs))[None, :], theta), theta)


@dataclass
class EpisodeResult:
    returns: dict[int, float]
    cost_returns: dict[int, float]
    collided: bool
    steps: int
    done_reason: str | None
    actions: list = field(default_factory=list)
    safe_sets: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    @property
    def mean_return(self) -> float:
        return float(np.mean(list(self.returns.values()))) if self.returns else 0.0


class Learner:
    """Agents plus the rollout state needed across episodes and cycles."""

    def __init__(self, agents: list[AgentParams], cfg: TrainerConfig = TrainerConfig(), seed: int = 0):
        self.agents = agents
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.memories: list[list[Transition]] = [[] for _ in agents]
        self.tau = 0
        self.steps = 0
        self.embedders = [_Embedder() for _ in agents]
        self.history: list[CycleStats] = []

    def on_step(self) -> None:
        self.steps += 1
        if self.steps % self.cfg.cycle_len == 0:
            self.history.append(train_cycle(self.memories, self.agents, self.cfg, self.tau, self.rng))
            self.tau += 1
            self.memories = [[] for _ in self.agents]
            for e in self.embedders:
                e.clear()


def run_episode(world: World, agents: list[AgentParams], shield_on: bool, comm_on: bool,
                rng: np.random.Generator, epsilon: float = 0.0, shield_cfg: ShieldConfig = DEFAULT_SHIELD,
                learner: Learner | None = None, trace: list | None = None,
                embedders: list | None = None) -> EpisodeResult:
    """Roll one episode; with a learner, transitions are stored and cycles run every few steps."""
    if world.spec.comm_enabled != comm_on:
        world.spec = world.spec.with_(comm_enabled=comm_on)
        world._invalidate()
    cavs = world.cav_ids
    if len(cavs) != len(agents):
        raise ValueError(f"{len(cavs)} CAVs but {len(agents)} agents")
    slot = {vid: k for k, vid in enumerate(cavs)}
    if learner is not None:
        embedders = learner.embedders
    elif embedders is None:
        embedders = [_Embedder() for _ in agents]
    windows = {vid: GraphWindow() for vid in cavs}
    embed_dim = agents[0].theta["actor.W1"].shape[0]

    def observe():
        emb = {}
        for vid in cavs:
            if not world.vehicles[vid].active:
                continue
            windows[vid].push(build_scene_graph(world.observation(vid), world, vid))
            k = slot[vid]
            emb[vid] = embedders[k](windows[vid].graphs, agents[k].theta)
        joint = np.concatenate([emb.get(v, np.zeros((1, embed_dim))) for v in cavs], axis=1)
        return emb, joint

    result = EpisodeResult({v: 0.0 for v in cavs}, {v: 0.0 for v in cavs}, False, 0, None)
    if trace is not None:
        trace.append((world.t, world.snapshot()))
    emb, joint = observe()
    while not world.done:
        active = [v for v in cavs if world.vehicles[v].active]
        if shield_on:
            sets = safety_checking(world, shield_cfg)
            safe = {v: [int(a) for a in sets[v].actions] for v in active}
        else:
            sets = None
            safe = {v: [int(a) for a in ACTION_SET] for v in active}
        acts = {}
        for v in active:
            dist = policy_forward(emb[v], agents[slot[v]].theta)
            acts[v] = select_action(dist, safe[v], epsilon, rng)
        if shield_on:
            controls = {v: sets[v].controls[Action(a)] for v, a in acts.items()}
        else:
            controls = None
        windows_now = {v: windows[v].snapshot() for v in active}
        out: StepOutcome = step_world(world, acts, controls=controls)
        result.steps += 1
        result.actions.append(dict(acts))
        result.safe_sets.append({v: tuple(s) for v, s in safe.items()})
        result.rewards.append(dict(out.rewards))
        for v in active:
            result.returns[v] += out.rewards[v]
            result.cost_returns[v] += out.costs[v]
        if trace is not None:
            trace.append((world.t, world.snapshot()))
        next_emb, next_joint = observe()
        if learner is not None:
            for v in active:
                gone = not world.vehicles[v].active
                terminal = out.done_reason in ("collision", "all-goals-reached") or gone
                mask = tuple(int(a) in safe[v] for a in Action)
                learner.memories[slot[v]].append(
                    Transition(windows_now[v], joint, acts[v], out.rewards[v], out.costs[v], mask,
                               next_joint, out.done or gone, terminal)
                )
            learner.on_step()
        emb, joint = next_emb, next_joint
        if out.done:
            result.collided = out.done_reason == "collision"
            result.done_reason = out.done_reason
    return result
