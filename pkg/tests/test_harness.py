import csv
import dataclasses

import numpy as np
import pytest

from cmaa2c.harness import (
    CHECKPOINT,
    EXIT_CONFIG,
    EXIT_MISSING,
    EXIT_OK,
    ConfigError,
    EvalRecord,
    EvalReport,
    MissingArtifact,
    RunConfig,
    ablate,
    config_text,
    evaluate,
    load_config,
    main,
    train,
)
from cmaa2c.marl import init_agents
from cmaa2c.scenario import builtin_spec


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_default_config_round_trips(tmp_path):
    cfg = RunConfig(scenario="intersection", seed=4, encoder="fc", comm_on=False)
    path = tmp_path / "c.cfg"
    path.write_text(config_text(cfg))
    assert load_config(path) == cfg


def test_custom_weights_round_trip(tmp_path):
    from cmaa2c.marl import TrainerConfig
    cfg = RunConfig(trainer=TrainerConfig(W=((0.5, 0.25, 0.25), (0.25, 0.5, 0.25), (0.25, 0.25, 0.5))))
    path = tmp_path / "c.cfg"
    path.write_text(config_text(cfg))
    assert load_config(path).trainer.W == cfg.trainer.W


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("[run]\nseed = 3\nscenario = HighwayHard\n[shield]\nD = 4.5\n")
    cfg = load_config(path, seed=9)
    assert (cfg.seed, cfg.scenario, cfg.shield.D) == (9, "HighwayHard", 4.5)


@pytest.mark.parametrize("text, field", [
    ("[run]\nepisodes = 0\n", "run.episodes"),
    ("[run]\nencoder = lstm\n", "run.encoder"),
    ("[run]\nscenario = roundabout\n", "run.scenario"),
    ("[run]\nbogus = 1\n", "run.bogus"),
    ("[trainer]\ngamma_r = 1.5\n", "trainer.gamma_r"),
    ("[trainer]\nbatch_size = many\n", "trainer.batch_size"),
    ("[shield]\nc1 = -1\n", "shield.c1"),
    ("[extra]\nx = 1\n", "extra"),
])
def test_config_errors_name_the_field(tmp_path, text, field):
    path = tmp_path / "c.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.field == field


def test_missing_config_file(tmp_path):
    with pytest.raises(MissingArtifact):
        load_config(tmp_path / "nope.cfg")


def test_report_mean_is_average_of_episode_returns():
    recs = [EvalRecord(0, 1, False, 10.0), EvalRecord(1, 2, True, 4.0), EvalRecord(2, 3, False, 7.0)]
    rep = EvalReport.from_records(recs)
    assert rep.collision_free_rate == pytest.approx(2 / 3)
    assert rep.mean_episode_return == pytest.approx(7.0)
    with pytest.raises(ValueError):
        EvalReport.from_records([])


def test_evaluate_is_deterministic_and_parallel_safe():
    spec = builtin_spec("Highway", episode_horizon=30)
    agents = init_agents(3, np.random.default_rng(0))
    a = evaluate(agents, spec, 4, seed=7)
    b = evaluate(agents, spec, 4, seed=7)
    c = evaluate(agents, spec, 4, seed=7, workers=2)
    assert a == b == c
    assert len({r.seed for r in a.records}) == 4


def _short(tmp_path, name, **kw):
    base = dict(scenario="Highway", episodes=2, eval_episodes=2, episode_horizon=20, out=str(tmp_path / name))
    base.update(kw)
    return RunConfig(**base)


def test_train_writes_artifacts(tmp_path):
    cfg = _short(tmp_path, "t")
    train(cfg, tmp_path / "t")
    rows = _rows(tmp_path / "t" / "curve.csv")
    assert len(rows) == 2 * 3
    assert {r["agent"] for r in rows} == {"0", "1", "2"}
    assert (tmp_path / "t" / CHECKPOINT).is_file()
    assert load_config(tmp_path / "t" / "config.cfg") == cfg


def test_ablate_one_row_per_cell(tmp_path):
    cfg = _short(tmp_path, "a", episodes=1)
    cells = [(True, "fc", True), (False, "fc", True), (True, "fc", False)]
    rows = ablate(cfg, tmp_path / "a", cells)
    table = _rows(tmp_path / "a" / "ablate.csv")
    assert len(rows) == len(table) == 3
    assert [(r["shield"], r["encoder"], r["comm"]) for r in table] == [("1", "fc", "1"), ("0", "fc", "1"),
                                                                       ("1", "fc", "0")]
    for r in table:
        assert 0.0 <= float(r["rate"]) <= 1.0 and r["n_episodes"] == "2"


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[run]\nepisodes = -3\n")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert "run.episodes" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "none.bin"), "--out", str(tmp_path)]) == EXIT_MISSING
    assert main(["train", "--config", str(tmp_path / "none.cfg")]) == EXIT_MISSING
    assert main(["ablate", "--cells", "shield:rnn:comm", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_cli_default_config(capsys):
    assert main(["default-config", "--seed", "5"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "seed = 5" in out and "[trainer]" in out and "[shield]" in out


def test_cli_eval_twice_identical(tmp_path):
    args = ["eval", "--scenario", "highway", "--episodes", "3", "--seed", "7", "--horizon", "25"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "eval.csv").read_bytes() == (tmp_path / "b" / "eval.csv").read_bytes()
    assert len(_rows(tmp_path / "a" / "eval.csv")) == 3


def test_cli_trace_rows(tmp_path):
    assert main(["trace", "--scenario", "Intersection", "--horizon", "30", "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "trace.csv")
    steps = max(int(r["step"]) for r in rows)
    vehicles = {r["vehicle"] for r in rows}
    assert len(vehicles) == 4
    assert len(rows) == (steps + 1) * len(vehicles)


def test_cli_train_then_eval_checkpoint(tmp_path):
    out = tmp_path / "run"
    common = ["--scenario", "Highway", "--horizon", "20", "--out", str(out), "--encoder", "fc"]
    assert main(["train", "--episodes", "1"] + common) == EXIT_OK
    assert main(["eval", "--episodes", "2", "--checkpoint", str(out / CHECKPOINT)] + common) == EXIT_OK
    assert len(_rows(out / "eval.csv")) == 2
