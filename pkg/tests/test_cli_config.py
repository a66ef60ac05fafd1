import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iclcbf.cli import main
from iclcbf.config import OUTPUT_ROOT_ENV, RunConfig, load_config, parse_config, serialize_config
from iclcbf.dynamics import read_trajectory_csv
from iclcbf.icl import CbfLossWeights, IclConfig
from iclcbf.neural import Mlp
from iclcbf.scenarios import ConfigurationError, QuadrotorParams

FAST = ["--set", "icl.iterations=2", "--set", "icl.rollouts_barrier=6", "--set", "icl.rollouts_constraint=6",
        "--set", "icl.barrier_epochs=2", "--set", "icl.constraint_epochs=2"]


# -- config -----------------------------------------------------------------


def test_default_config_roundtrip():
    cfg = RunConfig()
    assert parse_config(serialize_config(cfg)) == cfg


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    delta=st.one_of(st.none(), st.floats(0, 1)),
    alpha=st.one_of(st.none(), st.floats(1e-3, 100)),
    lr=st.floats(1e-6, 1.0),
    heuristic=st.booleans(),
    mass=st.floats(0.1, 10),
    seeds=st.lists(st.integers(0, 99), min_size=1, max_size=5),
)
def test_config_roundtrip(seed, delta, alpha, lr, heuristic, mass, seeds):
    cfg = RunConfig(scenario="quadrotor", mode="eval", seed=seed, delta=delta, seeds=tuple(seeds),
                    icl=IclConfig(learning_rate=lr, heuristic=heuristic, constraint_starts="random"),
                    loss=CbfLossWeights(alpha=alpha), quadrotor=QuadrotorParams(m=mass))
    text = serialize_config(cfg)
    back = parse_config(text)
    assert back == cfg
    assert serialize_config(back) == text


def test_config_file_and_comments(tmp_path):
    p = tmp_path / "run.config"
    p.write_text("# comment\nscenario = dubins_car\nicl.iterations = 3  # trailing\nquadrotor.m = 2.0\n")
    cfg = load_config(p)
    assert cfg.scenario == "dubins_car" and cfg.icl.iterations == 3 and cfg.quadrotor.m == 2.0


@pytest.mark.parametrize("text", ["nonsense", "icl.nope = 1", "foo.bar = 1", "bogus = 1", "mode = fly",
                                  "no_filter = maybe"])
def test_config_errors(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.config")


def test_stage_seeds_are_independent():
    cfg = RunConfig(seed=3)
    assert cfg.stage_seed("demo") != cfg.stage_seed("train")
    assert cfg.stage_seed("eval", 0) != cfg.stage_seed("eval", 1)
    assert cfg.stage_seed("demo") == RunConfig(seed=3).stage_seed("demo")


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert RunConfig(out="runs/a").output_dir() == tmp_path / "runs/a"
    assert RunConfig(out="/abs").output_dir().as_posix() == "/abs"


# -- commands ---------------------------------------------------------------


def test_demo_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["demo", "--scenario", "single_integrator", "--demos", "12", "--seed", "4",
                     "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "demos.csv").read_bytes()
    assert a == (tmp_path / "b" / "demos.csv").read_bytes()
    batch = read_trajectory_csv(tmp_path / "a" / "demos.csv")
    assert len(batch) == 12
    manifest = (tmp_path / "a" / "demos_manifest.txt").read_text()
    assert "count = 12" in manifest and "seed = 4" in manifest


def test_unknown_scenario_is_usage_error(tmp_path, capsys):
    assert main(["demo", "--scenario", "unicycle", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    for name in ("single_integrator", "inverted_pendulum", "dubins_car", "quadrotor"):
        assert name in err


def test_train_without_demos_is_usage_error(tmp_path):
    assert main(["train-icl", "--out", str(tmp_path)]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["demo", "--demos", "6", "--out", str(out)]) == 0
    assert main(["train-icl", "--out", str(out), *FAST]) == 0
    return out


def test_train_writes_artifacts(trained):
    for f in ("barrier.ckpt", "constraint.ckpt", "history.csv", "train-icl.config"):
        assert (trained / f).exists()
    rows = list(csv.reader((trained / "history.csv").open()))
    assert len(rows) == 3
    cfg = load_config(trained / "train-icl.config")
    assert cfg.icl.iterations == 2 and cfg.mode == "train-icl"


def test_checkpoint_forward_matches_after_reload(trained):
    net = Mlp.load(trained / "barrier.ckpt")
    again = Mlp.load(trained / "barrier.ckpt")
    x = np.random.default_rng(0).normal(size=(20, 2))
    assert np.array_equal(net.forward(x), again.forward(x))


def test_eval_is_reproducible(trained, tmp_path):
    args = ["eval", "--checkpoint", str(trained / "barrier.ckpt"), "--episodes", "5", "--seeds", "0,1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_text()
    assert a == (tmp_path / "b" / "metrics.csv").read_text()
    rows = list(csv.DictReader(a.splitlines()))
    assert len(rows) == 2 and all(int(r["infeasible_solves"]) >= 0 for r in rows)


def test_eval_no_filter_reports_reference(tmp_path):
    assert main(["eval", "--no-filter", "--episodes", "20", "--seeds", "0", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert rows[0]["policy"] == "reference"
    assert float(rows[0]["cr"]) > 0


def test_eval_dimension_mismatch(trained, tmp_path):
    assert main(["eval", "--scenario", "dubins_car", "--checkpoint", str(trained / "barrier.ckpt"),
                 "--out", str(tmp_path)]) == 2


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path)]) == 2


def test_train_lcbf(tmp_path):
    assert main(["train-lcbf", "--out", str(tmp_path), "--set", "icl.rollouts_barrier=5",
                 "--set", "icl.barrier_epochs=1"]) == 0
    assert (tmp_path / "barrier_lcbf.ckpt").exists()


def test_sweep_row_count(trained, tmp_path):
    assert main(["sweep", "--demos", str(trained / "demos.csv"), "--delta-list", "0.4,0.6", "--episodes", "3",
                 "--seeds", "0", "--out", str(tmp_path), *FAST]) == 0
    rows = list(csv.reader((tmp_path / "sweep.csv").open()))
    assert len(rows) == 3


def test_export_grid(tmp_path):
    assert main(["export-grid", "--resolution", "10", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "grid.csv").read_text().splitlines()) == 101


def test_export_grid_quadrotor_needs_checkpoint(tmp_path):
    assert main(["export-grid", "--scenario", "quadrotor", "--out", str(tmp_path)]) == 2


def test_cli_flags_override_config_file(tmp_path):
    p = tmp_path / "c.config"
    p.write_text("seed = 1\nepisodes = 7\n")
    assert main(["eval", "--config", str(p), "--seed", "9", "--no-filter", "--seeds", "0",
                 "--out", str(tmp_path)]) == 0
    cfg = load_config(tmp_path / "eval.config")
    assert cfg.seed == 9 and cfg.episodes == 7


def test_full_flag_sets_mode(tmp_path):
    assert main(["demo", "--demos", "2", "--full", "--out", str(tmp_path)]) == 0
    assert load_config(tmp_path / "demo.config").icl.heuristic is False
