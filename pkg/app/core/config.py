import json
import logging
from pathlib import Path
from typing import Any, Dict

from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings

from ..models.schemas import (
    Box,
    EnvConfig,
    EnvMode,
    EvalConfig,
    ExperimentConfig,
    KernelParams,
    Profile,
    RunConfig,
    SearchConfig,
    TrainConfig,
)
from .curriculum import PAPER_BOUNDS, REFERENCE_EPOCHS, ladder_for, scale_bounds
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

PAPER_LENGTH_SCALES = (19.9, 26.5, 21.15)
DESK_EPOCHS = 120


class Settings(BaseSettings):
    # Storage
    output_root: str = "runs"

    # Runs
    default_profile: Profile = Profile.DESK
    log_level: str = "INFO"
    max_workers: int = 1

    # API
    api_v1_str: str = "/api/v1"
    project_name: str = "Curriculum BO"

    class Config:
        env_file = ".env"


settings = Settings()


def _paper_profile(env_mode: EnvMode) -> ExperimentConfig:
    train = TrainConfig()
    search = SearchConfig(
        bounds=Box(lower=list(PAPER_BOUNDS[0]), upper=list(PAPER_BOUNDS[1])),
        kernel=KernelParams(length_scales=list(PAPER_LENGTH_SCALES)),
        ladder=ladder_for(env_mode),
        train_config=train,
    )
    return ExperimentConfig(
        env=EnvConfig(),
        train=train,
        search=search,
        eval=EvalConfig(env_mode=env_mode),
        default_learning_rate=0.0005,
    )


def _desk_profile(env_mode: EnvMode) -> ExperimentConfig:
    ratio = DESK_EPOCHS / REFERENCE_EPOCHS
    train = TrainConfig(
        learning_rate=0.001,
        batch_size=256,
        minibatch_size=64,
        total_epochs=DESK_EPOCHS,
        hidden_width=16,
        eval_every=10,
        eval_n=10,
    )
    lower, upper = scale_bounds(PAPER_BOUNDS[0], PAPER_BOUNDS[1], REFERENCE_EPOCHS, DESK_EPOCHS)
    search = SearchConfig(
        bounds=Box(lower=lower, upper=upper),
        kernel=KernelParams(length_scales=[ls * ratio for ls in PAPER_LENGTH_SCALES]),
        ladder=ladder_for(env_mode),
        train_config=train,
    )
    return ExperimentConfig(
        env=EnvConfig(base_tiles=100, max_steps=250),
        train=train,
        search=search,
        eval=EvalConfig(env_mode=env_mode, n_eval=100),
        default_learning_rate=0.0025,
    )


def resolve_profile(profile: Profile, env_mode: EnvMode = EnvMode.KP) -> ExperimentConfig:
    """Default module configuration for a profile and parameter mode"""
    profile, env_mode = Profile(profile), EnvMode(env_mode)
    if profile is Profile.PAPER:
        return _paper_profile(env_mode)
    return _desk_profile(env_mode)


def _merge(section: str, model: BaseModel, overrides: Dict[str, Any]) -> BaseModel:
    unknown = sorted(set(overrides) - set(type(model).model_fields))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown field")
    try:
        return type(model).model_validate({**model.model_dump(), **overrides})
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(p) for p in err["loc"])
        raise ConfigError(f"{section}.{loc}" if loc else section, err["msg"]) from e


def build_experiment(run: RunConfig) -> ExperimentConfig:
    """Profile defaults, then the file sections, then the flag-level fields of ``run``"""
    base = resolve_profile(run.profile, run.env_mode)
    env = _merge("env", base.env, run.env)
    train = _merge("train", base.train, run.train)

    search_overrides = dict(run.search)
    if run.lambda_ucb is not None:
        search_overrides["lambda_ucb"] = run.lambda_ucb
    search_overrides.setdefault("master_seed", run.seed)
    search = _merge("search", base.search.model_copy(update={"train_config": train}), search_overrides)

    eval_overrides = {"env_mode": run.env_mode, **run.eval}
    if run.n_eval is not None:
        eval_overrides["n_eval"] = run.n_eval
    eval_config = _merge("eval", base.eval, eval_overrides)

    try:
        return ExperimentConfig(
            env=env,
            train=train,
            search=search,
            eval=eval_config,
            default_learning_rate=base.default_learning_rate,
        )
    except ValidationError as e:
        raise ConfigError("config", str(e)) from e


def load_run_config(path) -> Dict[str, Any]:
    """Read a JSON run configuration document; raises FileNotFoundError when absent"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    logger.debug(f"Loaded run configuration from {path}")
    return doc


def parse_run_config(doc: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as e:
        err = e.errors()[0]
        raise ConfigError(".".join(str(p) for p in err["loc"]) or "config", err["msg"]) from e
