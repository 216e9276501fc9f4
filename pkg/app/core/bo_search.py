"""Bayesian-optimization search over curriculum changepoints.

A warm-up design seeds the dataset; every later trial refits the GP on all
observations, maximizes the UCB acquisition inside the bounds and trains a
policy on the proposed curriculum. Search state is checkpointed after every
trial so an interrupted search can resume.
"""

import copy
import itertools
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import qmc

from ..models.schemas import (
    EnvConfig,
    EvalConfig,
    EvalSet,
    PsiLadder,
    SearchCheckpoint,
    SearchConfig,
    SearchResult,
    SelectionMode,
    TrainConfig,
    TrainingCurve,
    TrialPhase,
    TrialRecord,
)
from . import gp
from .boxopt import box_arrays, multistart_minimize
from .curriculum import from_changepoints
from .exceptions import ConfigError, InvalidArgumentError, InvalidCurriculumError, NumericalFailureError
from .manifest import config_digest
from .ppo import objective_from_training, save_checkpoint, train, write_curve_csv
from .seeding import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (1.75, 1.9, 2.0)
GRID_BUDGET = 4096


class ObjectiveOutcome(NamedTuple):
    y: float
    training_curve: Optional[TrainingCurve] = None
    checkpoint_path: Optional[str] = None


ObjectiveResult = Union[ObjectiveOutcome, Tuple[float, Optional[TrainingCurve]]]
Objective = Callable[[np.ndarray], ObjectiveResult]


@dataclass(frozen=True)
class Proposal:
    x: np.ndarray
    acquisition: float
    fallback: bool = False


def ucb(model: gp.GPModel, x, lambda_ucb: float) -> float:
    mean, std = gp.posterior(model, x)
    return mean + lambda_ucb * std


def ucb_with_gradient(model: gp.GPModel, x, lambda_ucb: float) -> Tuple[float, np.ndarray]:
    mean, std = gp.posterior(model, x)
    grad = gp.posterior_gradient(model, x)
    return mean + lambda_ucb * std, grad.dmean + lambda_ucb * grad.dstd


def acquisition_grid(lower: np.ndarray, upper: np.ndarray, budget: int = GRID_BUDGET) -> np.ndarray:
    k = lower.shape[0]
    per_dim = int(round(budget ** (1.0 / k)))
    while per_dim > 2 and per_dim**k > budget:
        per_dim -= 1
    per_dim = max(2, per_dim)
    axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(lower, upper)]
    return np.array(list(itertools.product(*axes)))


def _grid_best(model: gp.GPModel, config: SearchConfig) -> Tuple[np.ndarray, float]:
    lower, upper = box_arrays(config.bounds)
    grid = acquisition_grid(lower, upper)
    mean, std = gp.posterior_batch(model, grid)
    values = mean + config.lambda_ucb * std
    best = int(np.argmax(values))
    return grid[best], float(values[best])


def propose_next(
    model: gp.GPModel,
    config: SearchConfig,
    rng_seed: Optional[int] = None,
    max_workers: int = 1,
) -> Proposal:
    """Maximize UCB over the bounds.

    Starts are Latin-hypercube points plus the observed inputs and the best
    grid point. If every start fails numerically the best grid point is
    returned with ``fallback`` set.
    """
    if rng_seed is None:
        rng_seed = derive_seed(config.master_seed, "acquisition", model.n)
    grid_x, grid_value = _grid_best(model, config)
    lower, upper = box_arrays(config.bounds)
    extra = [np.clip(row, lower, upper) for row in model.X] + [grid_x]

    def negated(x: np.ndarray):
        value, grad = ucb_with_gradient(model, x, config.lambda_ucb)
        return -value, -grad

    try:
        result = multistart_minimize(
            negated,
            config.bounds,
            config.n_starts,
            rng_seed,
            config=config.optimizer,
            extra_starts=extra,
            max_workers=max_workers,
        )
    except NumericalFailureError as e:
        logger.warning(f"Acquisition optimization failed on every start, using grid point: {e}")
        return Proposal(x=grid_x, acquisition=grid_value, fallback=True)

    return Proposal(x=np.clip(result.x, lower, upper), acquisition=-result.fun)


def warmup_design(config: SearchConfig) -> np.ndarray:
    """Deterministic space-filling design of ``n_warmup`` points.

    The box centre comes first, then the rows of a two-level orthogonal
    array placed at the 25% and 75% points of each range. Larger designs are
    topped up with Latin-hypercube points.
    """
    lower, upper = box_arrays(config.bounds)
    k = lower.shape[0]
    span = upper - lower
    points = [lower + 0.5 * span]

    for r in range(4):
        if len(points) >= config.n_warmup:
            break
        levels = np.array([bin(r & (j % 3 + 1)).count("1") % 2 for j in range(k)])
        candidate = lower + (0.25 + 0.5 * levels) * span
        if not any(np.array_equal(candidate, p) for p in points):
            points.append(candidate)

    remaining = config.n_warmup - len(points)
    if remaining > 0:
        sampler = qmc.LatinHypercube(d=k, seed=derive_seed(config.master_seed, "warmup"))
        points.extend(qmc.scale(sampler.random(remaining), lower, upper))
    return np.array(points[: config.n_warmup])


class CurriculumObjective:
    """Trains a policy on the curriculum behind x and scores it on the hard set"""

    def __init__(
        self,
        ladder: PsiLadder,
        train_config: TrainConfig,
        hard_set: EvalSet,
        seed: int,
        eval_config: Optional[EvalConfig] = None,
        env_config: Optional[EnvConfig] = None,
        checkpoint_dir: Optional[Path] = None,
        max_workers: int = 1,
    ):
        self.ladder = ladder
        self.train_config = train_config
        self.hard_set = hard_set
        self.seed = seed
        self.eval_config = eval_config or EvalConfig()
        self.env_config = env_config or EnvConfig()
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.max_workers = max_workers
        self.calls = 0

    def __call__(self, x: np.ndarray, trial_index: Optional[int] = None) -> ObjectiveOutcome:
        curriculum = from_changepoints(x, self.ladder, self.train_config.total_epochs)
        policy, curve = train(curriculum, self.train_config, self.seed, self.hard_set, self.env_config, self.max_workers)
        y = objective_from_training(
            curve,
            policy,
            self.hard_set,
            self.eval_config.objective_n_eval,
            derive_seed(self.seed, "objective"),
            config=self.eval_config,
            env_config=self.env_config,
            max_workers=self.max_workers,
        )

        checkpoint_path = None
        if self.checkpoint_dir is not None:
            index = self.calls if trial_index is None else trial_index
            path = self.checkpoint_dir / f"trial_{index:03d}.pt"
            save_checkpoint(path, policy, self.train_config, config_digest(curriculum))
            checkpoint_path = str(path)
        self.calls += 1
        return ObjectiveOutcome(y=y, training_curve=curve, checkpoint_path=checkpoint_path)


def _unpack(outcome: ObjectiveResult) -> ObjectiveOutcome:
    if isinstance(outcome, ObjectiveOutcome):
        return outcome
    y, curve = outcome
    return ObjectiveOutcome(y=y, training_curve=curve)


def save_search_checkpoint(path, checkpoint: SearchCheckpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(checkpoint.model_dump_json(indent=2), encoding="utf-8")
    os.replace(tmp, path)


def load_search_checkpoint(path) -> SearchCheckpoint:
    return SearchCheckpoint.model_validate_json(Path(path).read_text(encoding="utf-8"))


def _evaluate_trial(config: SearchConfig, objective: Objective, index: int, x: np.ndarray, phase: TrialPhase) -> TrialRecord:
    try:
        curriculum = from_changepoints(x, config.ladder, config.train_config.total_epochs)
    except InvalidCurriculumError as e:
        logger.warning(f"Trial {index}: invalid curriculum at {x.tolist()} ({e}), recording floor value")
        return TrialRecord(index=index, x=x.tolist(), y=config.floor_value, phase=phase)

    # checkpoint names follow the trial index, including across resumes
    if isinstance(objective, CurriculumObjective):
        outcome = _unpack(objective(x, trial_index=index))
    else:
        outcome = _unpack(objective(x))
    y = float(outcome.y)
    if not math.isfinite(y):
        logger.warning(f"Trial {index}: non-finite objective, recording floor value")
        y = config.floor_value
    return TrialRecord(
        index=index,
        x=x.tolist(),
        curriculum=curriculum,
        y=y,
        training_curve=outcome.training_curve,
        phase=phase,
        checkpoint_path=outcome.checkpoint_path,
    )


def run_search(
    config: SearchConfig,
    objective: Objective,
    checkpoint_path=None,
    resume: bool = False,
    max_workers: int = 1,
) -> SearchResult:
    """Warm-up trials followed by ``n_iterations`` UCB-guided trials"""
    digest = config_digest(config)
    trials: List[TrialRecord] = []
    if resume and checkpoint_path is not None and Path(checkpoint_path).is_file():
        saved = load_search_checkpoint(checkpoint_path)
        if saved.config_digest != digest:
            raise ConfigError("checkpoint", f"{checkpoint_path} was written by a different search configuration")
        trials = list(saved.trials)
        logger.info(f"Resuming search from trial {len(trials)}")

    design = warmup_design(config)
    total = config.n_warmup + config.n_iterations

    for index in range(len(trials), total):
        if index < config.n_warmup:
            x, phase = design[index], TrialPhase.WARMUP
        else:
            X = np.array([t.x for t in trials])
            y = np.array([t.y for t in trials])
            try:
                model = gp.fit(X, y, config.kernel, config.prior_mean)
            except NumericalFailureError:
                logger.error(f"GP fit failed before trial {index}; {len(trials)} trials kept", exc_info=True)
                if checkpoint_path is not None:
                    save_search_checkpoint(checkpoint_path, SearchCheckpoint(config_digest=digest, trials=trials, next_index=index))
                raise
            proposal = propose_next(model, config, derive_seed(config.master_seed, "acquisition", index), max_workers)
            if proposal.fallback:
                logger.warning(f"Trial {index}: proposal taken from the acquisition grid")
            x, phase = proposal.x, TrialPhase.BO

        logger.info(f"Trial {index} ({phase.value}) at x={np.round(x, 2).tolist()}")
        record = _evaluate_trial(config, objective, index, np.asarray(x, dtype=float), phase)
        trials.append(record)
        logger.info(f"Trial {index} finished with y={record.y:.3f}")

        if checkpoint_path is not None:
            save_search_checkpoint(checkpoint_path, SearchCheckpoint(config_digest=digest, trials=trials, next_index=index + 1))

    return SearchResult(trials=trials)


def select_best_trial(
    result: SearchResult,
    mode: SelectionMode = SelectionMode.FINAL,
    window: Optional[int] = None,
) -> TrialRecord:
    """Best trial by final objective or by evaluation-curve peak.

    ``window`` restricts the choice to the last ``window`` trials. Ties go to
    the lowest index.
    """
    if not result.trials:
        raise InvalidArgumentError("cannot select from an empty search result")
    if window is not None and window < 1:
        raise InvalidArgumentError("window must be at least 1")
    candidates = SearchResult(trials=result.trials[-window:] if window else result.trials)
    if SelectionMode(mode) is SelectionMode.CURVE:
        return candidates.best_by_curve
    return candidates.best_by_final


def run_lambda_sweep(
    config: SearchConfig,
    objective: Objective,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    checkpoint_dir=None,
) -> Dict[float, SearchResult]:
    """One full search per exploration weight"""
    results = {}
    for lam in lambdas:
        swept = config.model_copy(update={"lambda_ucb": float(lam)})
        path = Path(checkpoint_dir) / f"search_lambda_{lam:g}.json" if checkpoint_dir else None
        swept_objective = objective
        if isinstance(objective, CurriculumObjective) and objective.checkpoint_dir is not None:
            swept_objective = copy.copy(objective)
            swept_objective.checkpoint_dir = objective.checkpoint_dir / f"lambda_{lam:g}"
        logger.info(f"Starting search with lambda={lam:g}")
        results[float(lam)] = run_search(swept, swept_objective, checkpoint_path=path)
    return results


def trials_frame(result: SearchResult) -> pd.DataFrame:
    rows = []
    for trial in result.trials:
        row = {"trial": trial.index, "phase": trial.phase.value}
        row.update({f"x_{i + 1}": v for i, v in enumerate(trial.x)})
        row["changepoints"] = " ".join(str(t) for t in trial.curriculum.changepoints) if trial.curriculum else ""
        row["y"] = trial.y
        row["curve_peak"] = trial.curve_peak
        rows.append(row)
    return pd.DataFrame(rows)


def write_search_report(result: SearchResult, out_dir) -> List[str]:
    """trials.csv plus one curve CSV per trial that has a training curve"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trials_frame(result).to_csv(out_dir / "trials.csv", index=False)
    written = ["trials.csv"]
    for trial in result.trials:
        if trial.training_curve is not None:
            name = f"curves/trial_{trial.index:03d}.csv"
            (out_dir / "curves").mkdir(exist_ok=True)
            write_curve_csv(trial.training_curve, out_dir / name)
            written.append(name)
    (out_dir / "search_result.json").write_text(result.model_dump_json(indent=2), encoding="utf-8")
    written.append("search_result.json")
    logger.info(f"Wrote search report for {len(result.trials)} trials to {out_dir}")
    return written
