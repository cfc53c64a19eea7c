"""Command-line experiment runner: train, eval, ablate, trace."""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import ENCODERS
from .marl import (
    Learner,
    TrainerConfig,
    epsilon_at,
    init_agents,
    load_agents,
    run_episode,
    save_agents,
)
from .scenario import DEFAULT_HORIZON, KINDS, builtin_spec, canonical_kind, spawn
from .shield import ShieldConfig

log = logging.getLogger("cmaa2c")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3
DEFAULT_EPISODES = 2000
DEFAULT_EVAL_EPISODES = 100
CHECKPOINT = "checkpoint.bin"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class MissingArtifact(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "Highway"
    episodes: int = DEFAULT_EPISODES
    eval_episodes: int = DEFAULT_EVAL_EPISODES
    seed: int = 0
    shield_on: bool = True
    comm_on: bool = True
    encoder: str = "gcn-transformer"
    workers: int = 1
    episode_horizon: int = DEFAULT_HORIZON
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    shield: ShieldConfig = field(default_factory=ShieldConfig)
    out: str = "runs/default"

    def __post_init__(self):
        try:
            object.__setattr__(self, "scenario", canonical_kind(self.scenario))
        except ValueError as e:
            raise ConfigError("run.scenario", str(e)) from None
        if self.episodes < 1:
            raise ConfigError("run.episodes", "must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("run.eval_episodes", "must be >= 1")
        if self.encoder not in ENCODERS:
            raise ConfigError("run.encoder", f"must be one of {', '.join(ENCODERS)}")
        if not 0 <= self.seed < 2**63:
            raise ConfigError("run.seed", "must be a non-negative 63-bit integer")
        if self.workers < 1:
            raise ConfigError("run.workers", "must be >= 1")
        if self.episode_horizon < 1:
            raise ConfigError("run.episode_horizon", "must be >= 1")


# ---------------------------------------------------------------------------
# config files

_RUN_FIELDS = ("scenario", "episodes", "eval_episodes", "seed", "shield_on", "comm_on", "encoder", "workers",
               "episode_horizon", "out")


def _typed(section: str, name: str, raw: str, like):
    try:
        if isinstance(like, bool):
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if like is None or isinstance(like, tuple):
            raw = raw.strip()
            if raw.lower() in ("", "none", "metropolis"):
                return None
            rows = [[float(x) for x in r.split(",")] for r in raw.split(";")]
            return tuple(tuple(r) for r in rows)
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"{section}.{name}", str(e)) from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "metropolis"
    if isinstance(value, tuple):
        return "; ".join(", ".join(repr(x) for x in row) for row in value)
    return str(value)


def config_text(cfg: RunConfig) -> str:
    """Every setting spelled out, in the config-file format."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["run"] = {k: _format(getattr(cfg, k)) for k in _RUN_FIELDS}
    parser["trainer"] = {f.name: _format(getattr(cfg.trainer, f.name)) for f in dataclasses.fields(TrainerConfig)}
    parser["shield"] = {f.name: _format(getattr(cfg.shield, f.name)) for f in dataclasses.fields(ShieldConfig)}
    lines = ["# cmaa2c run configuration; every default is listed explicitly"]
    for section in parser.sections():
        lines.append(f"\n[{section}]")
        lines += [f"{k} = {v}" for k, v in parser[section].items()]
    return "\n".join(lines) + "\n"


def _section(parser, name, cls, base):
    if not parser.has_section(name):
        return base
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    values = dict(known)
    for key, raw in parser[name].items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown setting")
        values[key] = _typed(name, key, raw, known[key])
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        bad = next((k for k in parser[name] if k in str(e)), None) or next(iter(parser[name]), name)
        raise ConfigError(f"{name}.{bad}", str(e)) from None


def load_config(path=None, **overrides) -> RunConfig:
    base = RunConfig()
    trainer, shield = base.trainer, base.shield
    run_values = {k: getattr(base, k) for k in _RUN_FIELDS}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"config file {p} not found")
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read_string(p.read_text(encoding="utf-8"))
        except configparser.Error as e:
            raise ConfigError("config", str(e)) from None
        for section in parser.sections():
            if section not in ("run", "trainer", "shield"):
                raise ConfigError(section, "unknown section")
        if parser.has_section("run"):
            for key, raw in parser["run"].items():
                if key not in run_values:
                    raise ConfigError(f"run.{key}", "unknown setting")
                run_values[key] = _typed("run", key, raw, getattr(base, key))
        trainer = _section(parser, "trainer", TrainerConfig, trainer)
        shield = _section(parser, "shield", ShieldConfig, shield)
    run_values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(trainer=trainer, shield=shield, **run_values)


# ---------------------------------------------------------------------------
# seeding


def _seed_of(seed: int, stream: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, stream, k]).generate_state(1, np.uint64)[0])


def _episode_rng(seed: int, stream: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, k, 1]))


TRAIN_STREAM, EVAL_STREAM, TRACE_STREAM = 0, 1, 2
LEARNER_SLOT = 2**32 - 1


# ---------------------------------------------------------------------------
# training and evaluation


def _fmt(x: float) -> str:
    return repr(float(x))


def train(cfg: RunConfig, out: Path | None = None, progress: bool = False):
    """Train from scratch; writes the checkpoint, curve CSV and effective config."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = builtin_spec(cfg.scenario, comm_enabled=cfg.comm_on, episode_horizon=cfg.episode_horizon)
    agents = init_agents(spec.n_cav, np.random.default_rng(np.random.SeedSequence([cfg.seed, 9])), cfg.encoder)
    learner = Learner(agents, cfg.trainer, seed=_seed_of(cfg.seed, TRAIN_STREAM, LEARNER_SLOT))
    (out / "config.cfg").write_text(config_text(cfg), encoding="utf-8")
    with open(out / "curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "agent", "return", "cost_return", "collided", "lambda", "epsilon"])
        for ep in range(cfg.episodes):
            eps = epsilon_at(cfg.trainer, ep, cfg.episodes)
            world = spawn(spec, seed=_seed_of(cfg.seed, TRAIN_STREAM, ep))
            res = run_episode(world, agents, cfg.shield_on, cfg.comm_on, learner.rng, eps, cfg.shield, learner=learner)
            for k, vid in enumerate(world.cav_ids):
                w.writerow([ep, k, _fmt(res.returns[vid]), _fmt(res.cost_returns[vid]), int(res.collided),
                            _fmt(agents[k].lam), _fmt(eps)])
            if progress and (ep + 1) % max(1, cfg.episodes // 20) == 0:
                log.info("episode %d/%d collided=%s return=%.1f", ep + 1, cfg.episodes, res.collided, res.mean_return)
                fh.flush()
    save_agents(out / CHECKPOINT, agents)
    return agents


@dataclass
class EvalRecord:
    episode: int
    seed: int
    collided: bool
    episode_return: float


@dataclass
class EvalReport:
    collision_free_rate: float
    mean_episode_return: float
    records: list[EvalRecord]

    @classmethod
    def from_records(cls, records: list[EvalRecord]) -> "EvalReport":
        if not records:
            raise ValueError("no episodes")
        rate = sum(not r.collided for r in records) / len(records)
        mean = float(np.mean([r.episode_return for r in records]))
        return cls(rate, mean, records)


def _eval_one(args) -> EvalRecord:
    agents, spec, k, seed, shield_on, comm_on, shield_cfg = args
    world_seed = _seed_of(seed, EVAL_STREAM, k)
    world = spawn(spec, seed=world_seed)
    res = run_episode(world, agents, shield_on, comm_on, _episode_rng(seed, EVAL_STREAM, k), 0.0, shield_cfg)
    return EvalRecord(k, world_seed, res.collided, res.mean_return)


def evaluate(agents, spec, n: int, seed: int, shield_on: bool = True, comm_on: bool | None = None,
             shield_cfg: ShieldConfig = ShieldConfig(), workers: int = 1) -> EvalReport:
    """n policy-sampled episodes without exploration, each from its own seed."""
    comm_on = spec.comm_enabled if comm_on is None else comm_on
    spec = spec.with_(comm_enabled=comm_on)
    jobs = [(agents, spec, k, seed, shield_on, comm_on, shield_cfg) for k in range(n)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_eval_one, jobs))
    else:
        records = [_eval_one(j) for j in jobs]
    return EvalReport.from_records(records)


def write_eval_csv(path: Path, report: EvalReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "seed", "collided", "episode_return"])
        for r in report.records:
            w.writerow([r.episode, r.seed, int(r.collided), _fmt(r.episode_return)])


def _agents_for(cfg: RunConfig, checkpoint, n_cav: int):
    if checkpoint is None:
        return init_agents(n_cav, np.random.default_rng(np.random.SeedSequence([cfg.seed, 9])), cfg.encoder)
    p = Path(checkpoint)
    if not p.is_file():
        raise MissingArtifact(f"checkpoint {p} not found")
    agents = load_agents(p)
    if len(agents) != n_cav:
        raise ConfigError("run.scenario", f"checkpoint has {len(agents)} agents, scenario needs {n_cav}")
    return agents


def cell_name(scenario: str, shield_on: bool, encoder: str, comm_on: bool) -> str:
    return f"{scenario}_{'shield' if shield_on else 'noshield'}_{encoder}_{'comm' if comm_on else 'nocomm'}"


def ablate(cfg: RunConfig, out: Path, cells=None, progress: bool = False) -> list[dict]:
    """Train (unless a cell checkpoint exists) and evaluate every grid cell."""
    out.mkdir(parents=True, exist_ok=True)
    if cells is None:
        cells = [(s, e, c) for s in (True, False) for e in ENCODERS for c in (True, False)]
    rows = []
    for shield_on, encoder, comm_on in cells:
        cell_cfg = dataclasses.replace(cfg, shield_on=shield_on, encoder=encoder, comm_on=comm_on)
        cell_dir = out / cell_name(cfg.scenario, shield_on, encoder, comm_on)
        ckpt = cell_dir / CHECKPOINT
        if ckpt.is_file():
            agents = load_agents(ckpt)
        else:
            agents = train(cell_cfg, cell_dir, progress)
        spec = builtin_spec(cfg.scenario, comm_enabled=comm_on, episode_horizon=cfg.episode_horizon)
        report = evaluate(agents, spec, cfg.eval_episodes, cfg.seed, shield_on, comm_on, cfg.shield, cfg.workers)
        write_eval_csv(cell_dir / "eval.csv", report)
        rows.append({
            "scenario": cfg.scenario, "shield": int(shield_on), "encoder": encoder, "comm": int(comm_on),
            "rate": report.collision_free_rate, "mean_return": report.mean_episode_return,
            "n_episodes": cfg.eval_episodes,
        })
    with open(out / "ablate.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "shield", "encoder", "comm", "rate", "mean_return", "n_episodes"])
        for r in rows:
            w.writerow([r["scenario"], r["shield"], r["encoder"], r["comm"], _fmt(r["rate"]),
                        _fmt(r["mean_return"]), r["n_episodes"]])
    return rows


def trace_episode(cfg: RunConfig, agents, path: Path) -> int:
    """Write one episode's full state trajectory; returns the number of steps."""
    spec = builtin_spec(cfg.scenario, comm_enabled=cfg.comm_on, episode_horizon=cfg.episode_horizon)
    world = spawn(spec, seed=_seed_of(cfg.seed, TRACE_STREAM, 0))
    frames: list = []
    res = run_episode(world, agents, cfg.shield_on, cfg.comm_on, _episode_rng(cfg.seed, TRACE_STREAM, 0), 0.0,
                      cfg.shield, trace=frames)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "vehicle", "role", "x", "y", "v", "psi", "accel", "active"])
        for t, snap in frames:
            for vid in sorted(snap):
                role, st, accel, active = snap[vid]
                w.writerow([t, vid, role, _fmt(st.x), _fmt(st.y), _fmt(st.v), _fmt(st.psi), _fmt(accel), int(active)])
    return res.steps


# ---------------------------------------------------------------------------
# CLI


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help=f"one of {', '.join(KINDS)} (case-insensitive)")
    common.add_argument("--episodes", type=int, help="training episodes (train/ablate) or eval episodes (eval)")
    common.add_argument("--seed", type=int)
    common.add_argument("--no-shield", dest="shield_on", action="store_const", const=False)
    common.add_argument("--no-comm", dest="comm_on", action="store_const", const=False)
    common.add_argument("--encoder", help=f"one of {', '.join(ENCODERS)}")
    common.add_argument("--config", help="config file (see `cmaa2c default-config`)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="parameter checkpoint to load")
    common.add_argument("--eval-episodes", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--horizon", type=int, dest="episode_horizon", help="steps before an episode is cut")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="cmaa2c", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train agents and write a checkpoint plus learning curve")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint over fresh seeds")
    ab = sub.add_parser("ablate", parents=[common], help="shield x encoder x comm grid into one CSV")
    ab.add_argument("--cells", help="subset of cells, e.g. 'shield:gcn-transformer:comm,noshield:fc:nocomm'")
    sub.add_parser("trace", parents=[common], help="dump one episode's state trajectory")
    sub.add_parser("default-config", parents=[common], help="print every setting with its default value")
    return p


def _parse_cells(text: str):
    cells = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3 or parts[0] not in ("shield", "noshield") or parts[1] not in ENCODERS \
                or parts[2] not in ("comm", "nocomm"):
            raise ConfigError("cells", f"bad cell {item!r}")
        cells.append((parts[0] == "shield", parts[1], parts[2] == "comm"))
    return cells


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        over = dict(scenario=args.scenario, seed=args.seed, shield_on=args.shield_on, comm_on=args.comm_on,
                    encoder=args.encoder, out=args.out, workers=args.workers, eval_episodes=args.eval_episodes,
                    episode_horizon=args.episode_horizon)
        if args.command == "eval":
            over["eval_episodes"] = args.episodes if args.episodes is not None else args.eval_episodes
        else:
            over["episodes"] = args.episodes
        cfg = load_config(args.config, **over)
        out = Path(cfg.out)
        if args.command == "default-config":
            sys.stdout.write(config_text(cfg))
            return EXIT_OK
        if args.command == "train":
            train(cfg, out, progress=args.verbose)
            print(f"checkpoint written to {out / CHECKPOINT}")
        elif args.command == "eval":
            spec = builtin_spec(cfg.scenario, comm_enabled=cfg.comm_on, episode_horizon=cfg.episode_horizon)
            agents = _agents_for(cfg, args.checkpoint, spec.n_cav)
            report = evaluate(agents, spec, cfg.eval_episodes, cfg.seed, cfg.shield_on, cfg.comm_on, cfg.shield,
                              cfg.workers)
            out.mkdir(parents=True, exist_ok=True)
            write_eval_csv(out / "eval.csv", report)
            print(f"collision_free_rate={report.collision_free_rate:.4f} "
                  f"mean_episode_return={report.mean_episode_return:.4f} episodes={len(report.records)}")
        elif args.command == "ablate":
            cells = _parse_cells(args.cells) if args.cells else None
            rows = ablate(cfg, out, cells, progress=args.verbose)
            for r in rows:
                print(f"{r['scenario']} shield={r['shield']} encoder={r['encoder']} comm={r['comm']} "
                      f"rate={r['rate']:.3f} mean_return={r['mean_return']:.1f}")
        elif args.command == "trace":
            spec = builtin_spec(cfg.scenario, episode_horizon=cfg.episode_horizon)
            agents = _agents_for(cfg, args.checkpoint, spec.n_cav)
            out.mkdir(parents=True, exist_ok=True)
            steps = trace_episode(cfg, agents, out / "trace.csv")
            print(f"{steps} steps written to {out / 'trace.csv'}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"missing: {e}", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
