"""Robustness evaluation over easy/hard environment sets and difficulty buckets"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, NamedTuple, Optional

import pandas as pd

from ..models.schemas import EnvConfig, EnvMode, EnvParams, EpisodeMetrics, EvalSet, MetricsReport
from .curriculum import default_params
from .exceptions import InvalidArgumentError
from .race_env import Policy, episode_seeds, generate_track, run_episode
from .seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

H_KAPPA = (0.31, 0.41, 0.51, 0.61, 0.71)
H_P = (0.05, 0.07, 0.09, 0.11, 0.13)

TABLE_COLUMNS = [
    "training_scheme",
    "test_setting",
    "average_reward",
    "std_reward",
    "collision_obstacle_ratio",
    "tiles_visited",
    "time_on_grass",
    "collisions",
    "n_eval",
]
BUCKET_COLUMNS = ["training_scheme", "bucket", "kappa", "p", "average_reward", "std_reward", "collision_obstacle_ratio", "n_eval"]


class EpisodeSpec(NamedTuple):
    params: EnvParams
    track_seed: int
    policy_seed: int


def build_sets(env_mode: EnvMode = EnvMode.KP) -> Dict[str, EvalSet]:
    """Easy singleton and hard set for a parameter mode.

    ``kp`` crosses the kappa and p lists; the one-dimensional modes vary a
    single parameter with the other held at its baseline.
    """
    env_mode = EnvMode(env_mode)
    base = default_params(env_mode)
    if env_mode is EnvMode.KP:
        hard = [EnvParams(kappa=k, p=p) for k in H_KAPPA for p in H_P]
    elif env_mode is EnvMode.KAPPA:
        hard = [EnvParams(kappa=k, p=0.0) for k in H_KAPPA]
    else:
        hard = [EnvParams(kappa=base.kappa, p=p) for p in H_P]
    return {
        "easy": EvalSet(name="easy", candidates=[base]),
        "hard": EvalSet(name="hard", candidates=hard),
    }


def bucket_sets(env_mode: EnvMode = EnvMode.KP) -> List[EvalSet]:
    """Five singleton sets of increasing nominal difficulty"""
    env_mode = EnvMode(env_mode)
    base = default_params(env_mode)
    buckets = []
    for i, (k, p) in enumerate(zip(H_KAPPA, H_P), start=1):
        if env_mode is EnvMode.KAPPA:
            params = EnvParams(kappa=k, p=0.0)
        elif env_mode is EnvMode.P:
            params = EnvParams(kappa=base.kappa, p=p)
        else:
            params = EnvParams(kappa=k, p=p)
        buckets.append(EvalSet(name=f"bucket_{i}", candidates=[params]))
    return buckets


def sample_episodes(eval_set: EvalSet, n_eval: int, seed: int) -> List[EpisodeSpec]:
    """Uniform draws (with replacement) over the candidates, one track seed each"""
    if n_eval < 1:
        raise InvalidArgumentError("n_eval must be at least 1")
    rng = make_rng(seed, "candidates")
    picks = rng.integers(0, len(eval_set.candidates), size=n_eval)
    specs = []
    for i, pick in enumerate(picks):
        track_seed, policy_seed = episode_seeds(seed, i)
        specs.append(EpisodeSpec(eval_set.candidates[int(pick)], track_seed, policy_seed))
    return specs


def aggregate_metrics(name: str, episodes: List[EpisodeMetrics]) -> MetricsReport:
    """Exact recombination of per-episode records; independent of episode order"""
    if not episodes:
        raise InvalidArgumentError("cannot aggregate an empty episode list")
    n = len(episodes)
    rewards = [e.total_reward for e in episodes]
    mean = math.fsum(rewards) / n
    std = math.sqrt(math.fsum((r - mean) ** 2 for r in rewards) / n)
    ratios = [e.collisions / e.obstacle_count if e.obstacle_count else 0.0 for e in episodes]
    return MetricsReport(
        name=name,
        mean_reward=mean,
        std_reward=std,
        collision_obstacle_ratio=math.fsum(ratios) / n,
        mean_tiles_visited=math.fsum(e.tiles_visited_count for e in episodes) / n,
        mean_grass_fraction=min(1.0, math.fsum(e.grass_fraction for e in episodes) / n),
        mean_collisions=math.fsum(e.collisions for e in episodes) / n,
        n_eval=n,
        episodes=episodes,
    )


def evaluate_policy(
    policy: Policy,
    eval_set: EvalSet,
    n_eval: int,
    seed: int,
    env_config: Optional[EnvConfig] = None,
    max_workers: int = 1,
) -> MetricsReport:
    """Mean episodic performance over ``n_eval`` environments sampled from the set"""
    env_config = env_config or EnvConfig()
    specs = sample_episodes(eval_set, n_eval, seed)

    def run(spec: EpisodeSpec) -> EpisodeMetrics:
        track = generate_track(spec.params, spec.track_seed, env_config)
        return run_episode(track, policy, spec.policy_seed, max_steps=env_config.max_steps, lookahead=env_config.lookahead)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            episodes = list(pool.map(run, specs))
    else:
        episodes = [run(spec) for spec in specs]

    report = aggregate_metrics(eval_set.name, episodes)
    logger.debug(f"Evaluated {n_eval} episodes on '{eval_set.name}': {report.mean_reward:.2f} +/- {report.std_reward:.2f}")
    return report


def difficulty_sweep(
    policy: Policy,
    n_per_bucket: int,
    seed: int,
    env_mode: EnvMode = EnvMode.KP,
    env_config: Optional[EnvConfig] = None,
    max_workers: int = 1,
) -> List[MetricsReport]:
    """One report per bucket, easiest first"""
    return [
        evaluate_policy(policy, bucket, n_per_bucket, derive_seed(seed, "bucket", i), env_config, max_workers)
        for i, bucket in enumerate(bucket_sets(env_mode), start=1)
    ]


def metrics_row(training_scheme: str, report: MetricsReport) -> dict:
    return {
        "training_scheme": training_scheme,
        "test_setting": report.name,
        "average_reward": report.mean_reward,
        "std_reward": report.std_reward,
        "collision_obstacle_ratio": report.collision_obstacle_ratio,
        "tiles_visited": report.mean_tiles_visited,
        "time_on_grass": report.mean_grass_fraction,
        "collisions": report.mean_collisions,
        "n_eval": report.n_eval,
    }


def write_metrics_csv(rows: Iterable[dict], path) -> None:
    frame = pd.DataFrame(list(rows), columns=TABLE_COLUMNS)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} metrics rows to {path}")


def write_bucket_csv(training_scheme: str, reports: List[MetricsReport], buckets: List[EvalSet], path) -> None:
    rows = []
    for i, (report, bucket) in enumerate(zip(reports, buckets), start=1):
        params = bucket.candidates[0]
        rows.append(
            {
                "training_scheme": training_scheme,
                "bucket": i,
                "kappa": params.kappa,
                "p": params.p,
                "average_reward": report.mean_reward,
                "std_reward": report.std_reward,
                "collision_obstacle_ratio": report.collision_obstacle_ratio,
                "n_eval": report.n_eval,
            }
        )
    pd.DataFrame(rows, columns=BUCKET_COLUMNS).to_csv(path, index=False)
    logger.info(f"Wrote bucket sweep to {path}")
