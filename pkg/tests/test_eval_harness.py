import math
import random

import pandas as pd
import pytest

from app.core.eval_harness import (
    BUCKET_COLUMNS,
    H_KAPPA,
    H_P,
    TABLE_COLUMNS,
    aggregate_metrics,
    bucket_sets,
    build_sets,
    difficulty_sweep,
    evaluate_policy,
    metrics_row,
    sample_episodes,
    write_bucket_csv,
    write_metrics_csv,
)
from app.core.exceptions import InvalidArgumentError
from app.core.race_env import idle_policy, lane_keeping_policy, random_policy
from app.models.schemas import EnvConfig, EnvMode, EnvParams, EvalSet

DESK = EnvConfig(base_tiles=100, max_steps=250)


def test_kp_sets():
    sets = build_sets(EnvMode.KP)
    assert sets["easy"].candidates == [EnvParams(kappa=0.31, p=0.05)]
    hard = sets["hard"].candidates
    assert len(hard) == 25
    assert {c.kappa for c in hard} == set(H_KAPPA)
    assert {c.p for c in hard} == set(H_P)


def test_one_dimensional_sets():
    kappa = build_sets(EnvMode.KAPPA)
    assert kappa["easy"].candidates == [EnvParams(kappa=0.31, p=0.0)]
    assert [c.kappa for c in kappa["hard"].candidates] == list(H_KAPPA)
    assert all(c.p == 0.0 for c in kappa["hard"].candidates)

    p = build_sets(EnvMode.P)
    assert [c.p for c in p["hard"].candidates] == list(H_P)
    assert all(c.kappa == 0.31 for c in p["hard"].candidates)


def test_buckets_increase_in_difficulty():
    buckets = bucket_sets(EnvMode.KP)
    assert [b.name for b in buckets] == [f"bucket_{i}" for i in range(1, 6)]
    params = [b.candidates[0] for b in buckets]
    assert all(a.kappa < b.kappa and a.p < b.p for a, b in zip(params, params[1:]))


def test_single_episode_has_zero_std():
    report = evaluate_policy(random_policy, build_sets()["hard"], 1, seed=3, env_config=DESK)
    assert report.n_eval == 1
    assert report.std_reward == 0.0


def test_no_collisions_without_obstacles():
    flat = EvalSet(name="flat", candidates=[EnvParams(kappa=0.41, p=0.0)])
    report = evaluate_policy(random_policy, flat, 5, seed=0, env_config=DESK)
    assert report.mean_collisions == 0.0
    assert report.collision_obstacle_ratio == 0.0


def test_mean_is_exact_episode_average():
    report = evaluate_policy(random_policy, build_sets()["hard"], 8, seed=4, env_config=DESK)
    rewards = [e.total_reward for e in report.episodes]
    assert report.mean_reward == math.fsum(rewards) / 8
    assert report.mean_collisions == pytest.approx(sum(e.collisions for e in report.episodes) / 8)


def test_aggregation_ignores_order():
    report = evaluate_policy(random_policy, build_sets()["hard"], 12, seed=7, env_config=DESK)
    shuffled = list(report.episodes)
    random.Random(0).shuffle(shuffled)
    again = aggregate_metrics(report.name, shuffled)
    assert again.mean_reward == report.mean_reward
    assert again.std_reward == pytest.approx(report.std_reward, rel=1e-12)
    assert again.collision_obstacle_ratio == report.collision_obstacle_ratio


def test_aggregate_rejects_empty():
    with pytest.raises(InvalidArgumentError):
        aggregate_metrics("empty", [])


def test_sampling_covers_hard_set():
    hard = build_sets()["hard"]
    specs = sample_episodes(hard, 500, seed=0)
    assert {s.params for s in specs} == set(hard.candidates)
    assert len({s.track_seed for s in specs}) == 500


def test_sampling_rejects_zero_episodes():
    with pytest.raises(InvalidArgumentError):
        sample_episodes(build_sets()["easy"], 0, seed=0)


def test_evaluation_is_deterministic_and_thread_safe():
    hard = build_sets()["hard"]
    serial = evaluate_policy(lane_keeping_policy, hard, 6, seed=21, env_config=DESK)
    again = evaluate_policy(lane_keeping_policy, hard, 6, seed=21, env_config=DESK)
    threaded = evaluate_policy(lane_keeping_policy, hard, 6, seed=21, env_config=DESK, max_workers=3)
    assert serial == again == threaded


def test_difficulty_sweep():
    reports = difficulty_sweep(idle_policy, 3, seed=1, env_config=DESK)
    assert [r.name for r in reports] == [f"bucket_{i}" for i in range(1, 6)]
    assert all(r.n_eval == 3 for r in reports)
    assert difficulty_sweep(idle_policy, 3, seed=1, env_config=DESK) == reports


def test_metrics_csv(tmp_path):
    report = evaluate_policy(idle_policy, build_sets()["easy"], 2, seed=0, env_config=DESK)
    write_metrics_csv([metrics_row("default", report)], tmp_path / "metrics.csv")
    frame = pd.read_csv(tmp_path / "metrics.csv")
    assert list(frame.columns) == TABLE_COLUMNS
    assert frame.loc[0, "training_scheme"] == "default"
    assert frame.loc[0, "test_setting"] == "easy"


def test_bucket_csv(tmp_path):
    buckets = bucket_sets()
    reports = difficulty_sweep(idle_policy, 2, seed=0, env_config=DESK)
    write_bucket_csv("bo", reports, buckets, tmp_path / "buckets.csv")
    frame = pd.read_csv(tmp_path / "buckets.csv")
    assert list(frame.columns) == BUCKET_COLUMNS
    assert frame["bucket"].tolist() == [1, 2, 3, 4, 5]
    assert frame["kappa"].tolist() == list(H_KAPPA)
