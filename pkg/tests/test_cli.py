import json

import numpy as np
import pandas as pd
import pytest

from app import cli
from app.cli import EXIT_FILE_ERROR, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from app.core.exceptions import NumericalFailureError
from app.core.manifest import load_manifest
from app.core.ppo import TrainedPolicy, build_model, save_checkpoint
from app.core.race_env import observation_size
from app.models.schemas import RunMode, TrainConfig, TrainingCurve

TARGET = np.array([212.0, 371.0, 795.0])


class FakeTrainer:
    """Stands in for ``train``: records what it was asked to do, returns an untrained policy"""

    def __init__(self):
        self.calls = []

    def __call__(self, curriculum, config, seed, eval_set, env_config=None, max_workers=1):
        self.calls.append((curriculum, config))
        policy = TrainedPolicy(build_model(observation_size(env_config.lookahead), config, seed))
        return policy, TrainingCurve(train_rewards=[0.0] * 3)


class BowlObjective:
    def __init__(self, *args, **kwargs):
        pass

    def __call__(self, x):
        return -float(np.sum((np.asarray(x) - TARGET) ** 2)) / 100.0, None


@pytest.fixture
def fake_trainer(monkeypatch):
    trainer = FakeTrainer()
    monkeypatch.setattr(cli, "train", trainer)
    monkeypatch.setattr(cli, "objective_from_training", lambda *args, **kwargs: 12.5)
    return trainer


@pytest.fixture
def saved_policy(tmp_path):
    config = TrainConfig(hidden_width=8)
    path = tmp_path / "bo.pt"
    save_checkpoint(path, TrainedPolicy(build_model(observation_size(5), config, 0)), config, "digest")
    return path


def test_train_manual_uses_reference_changepoints(tmp_path, fake_trainer):
    out = tmp_path / "manual"
    assert main(["--mode", "train-manual", "--profile", "paper", "--seed", "1", "--out", str(out)]) == EXIT_OK

    curriculum, _ = fake_trainer.calls[0]
    assert curriculum.changepoints == [198, 396, 775]
    saved = json.loads((out / "curriculum.json").read_text())
    assert saved["changepoints"] == [198, 396, 775]
    assert [e["start_epoch"] for e in saved["schedule"]] == [0, 198, 396, 775]
    assert json.loads((out / "summary.json").read_text())["objective"] == 12.5
    assert (out / "policy.pt").is_file()
    assert (out / "curve.csv").is_file()


def test_train_default_uses_baseline_learning_rate(tmp_path, fake_trainer):
    out = tmp_path / "default"
    assert main(["--mode", "train-default", "--profile", "paper", "--out", str(out)]) == EXIT_OK
    curriculum, config = fake_trainer.calls[0]
    assert curriculum.changepoints == []
    assert config.learning_rate == 0.0005


def test_desk_manual_curriculum_is_rescaled(tmp_path, fake_trainer):
    assert main(["--mode", "train-manual", "--out", str(tmp_path / "desk")]) == EXIT_OK
    curriculum, config = fake_trainer.calls[0]
    assert config.total_epochs == 120
    assert curriculum.changepoints == [24, 48, 93]


def test_search_writes_trials_and_best(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "CurriculumObjective", BowlObjective)
    out = tmp_path / "search"
    assert main(["--mode", "search-bo", "--profile", "paper", "--out", str(out)]) == EXIT_OK

    trials = pd.read_csv(out / "trials.csv")
    assert len(trials) == 19
    assert trials["phase"].tolist() == ["warmup"] * 5 + ["bo"] * 14
    best = json.loads((out / "best.json").read_text())
    assert set(best) == {"final", "curve"}
    assert best["final"]["y"] == pytest.approx(trials["y"].max())

    manifest = load_manifest(out)
    assert manifest.mode is RunMode.SEARCH_BO
    assert {"trials.csv", "search_result.json", "best.json", "run_config.json"} <= set(manifest.outputs)
    assert len(manifest.config_digest) == 64


def test_search_override_reaches_the_search(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "CurriculumObjective", BowlObjective)
    out = tmp_path / "short"
    argv = ["--mode", "search-bo", "--profile", "paper", "--override", "search.n_iterations=1", "--out", str(out)]
    assert main(argv) == EXIT_OK
    assert len(pd.read_csv(out / "trials.csv")) == 6


def test_evaluate_writes_one_metrics_row(tmp_path, saved_policy):
    out = tmp_path / "eval"
    argv = ["--mode", "evaluate", "--checkpoint", str(saved_policy), "--set", "hard", "--n", "20", "--out", str(out)]
    assert main(argv) == EXIT_OK
    frame = pd.read_csv(out / "metrics.csv")
    assert len(frame) == 1
    assert frame.loc[0, "training_scheme"] == "bo"
    assert frame.loc[0, "test_setting"] == "hard"
    assert frame.loc[0, "n_eval"] == 20
    assert list(frame.columns)[:3] == ["training_scheme", "test_setting", "average_reward"]


def test_sweep_writes_five_buckets(tmp_path, saved_policy):
    out = tmp_path / "sweep"
    argv = ["--mode", "sweep", "--checkpoint", str(saved_policy), "--override", "eval.n_per_bucket=2", "--out", str(out)]
    assert main(argv) == EXIT_OK
    frame = pd.read_csv(out / "buckets.csv")
    assert frame["bucket"].tolist() == [1, 2, 3, 4, 5]
    assert (frame["n_eval"] == 2).all()


def test_missing_mode_is_a_usage_error():
    assert main([]) == EXIT_USAGE


def test_unknown_override_field_is_a_usage_error(tmp_path):
    argv = ["--mode", "train-default", "--override", "train.learning_rat=0.1", "--out", str(tmp_path / "x")]
    assert main(argv) == EXIT_USAGE


def test_evaluate_without_checkpoint_is_a_usage_error(tmp_path):
    assert main(["--mode", "evaluate", "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_missing_files_exit_with_file_error(tmp_path):
    assert main(["--config", str(tmp_path / "nope.json")]) == EXIT_FILE_ERROR
    argv = ["--mode", "evaluate", "--checkpoint", str(tmp_path / "nope.pt"), "--out", str(tmp_path / "x")]
    assert main(argv) == EXIT_FILE_ERROR


def test_config_file_and_flags(tmp_path, fake_trainer):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"mode": "train-manual", "profile": "paper", "seed": 4, "train": {"total_epochs": 500}}))
    out = tmp_path / "from-file"
    assert main(["--config", str(path), "--seed", "9", "--out", str(out)]) == EXIT_OK
    curriculum, config = fake_trainer.calls[0]
    assert config.total_epochs == 500
    assert curriculum.max_epoch == 500
    assert load_manifest(out).seed == 9


def test_unsupported_checkpoint_is_a_usage_error(tmp_path):
    import torch

    path = tmp_path / "old.pt"
    torch.save({"format_version": 99}, path)
    argv = ["--mode", "evaluate", "--checkpoint", str(path), "--out", str(tmp_path / "x")]
    assert main(argv) == EXIT_USAGE


def test_numerical_failure_exits_with_runtime_error(tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise NumericalFailureError("GP posterior covariance is not positive definite")

    monkeypatch.setattr(cli, "run_search", diverge)
    monkeypatch.setattr(cli, "CurriculumObjective", BowlObjective)
    argv = ["--mode", "search-bo", "--out", str(tmp_path / "x")]
    assert main(argv) == EXIT_RUNTIME
