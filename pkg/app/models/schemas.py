import math
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class EnvMode(str, Enum):
    """Which environment parameters a curriculum varies"""

    KP = "kp"
    KAPPA = "kappa"
    P = "p"


class Profile(str, Enum):
    PAPER = "paper"
    DESK = "desk"


class RunMode(str, Enum):
    TRAIN_DEFAULT = "train-default"
    TRAIN_MANUAL = "train-manual"
    SEARCH_BO = "search-bo"
    EVALUATE = "evaluate"
    SWEEP = "sweep"


class TrialPhase(str, Enum):
    WARMUP = "warmup"
    BO = "bo"


class ObjectiveMode(str, Enum):
    FINAL = "final"
    LATE_CHECKPOINTS = "late_checkpoints"


class SelectionMode(str, Enum):
    FINAL = "final"
    CURVE = "curve"


# Environment and curriculum models
class EnvParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    kappa: float = Field(..., gt=0, description="Turn rate")
    p: float = Field(..., ge=0, le=1, description="Obstacle probability")

    def as_list(self) -> List[float]:
        return [self.kappa, self.p]


class PsiLadder(BaseModel):
    """Easy-to-hard environment settings, one rung per curriculum segment"""

    model_config = ConfigDict(frozen=True)

    rungs: List[EnvParams] = Field(..., min_length=1)

    @model_validator(mode="after")
    def check_difficulty_order(self) -> "PsiLadder":
        for prev, nxt in zip(self.rungs, self.rungs[1:]):
            if nxt.kappa < prev.kappa or nxt.p < prev.p:
                raise ValueError(
                    f"ladder difficulty decreases between {prev.as_list()} and {nxt.as_list()}"
                )
        return self

    def __len__(self) -> int:
        return len(self.rungs)


class Curriculum(BaseModel):
    """Segment i covers epochs [t_i, t_{i+1}) with t_0 = 0 and t_{k+1} = max_epoch"""

    model_config = ConfigDict(frozen=True)

    changepoints: List[int] = Field(default_factory=list)
    segments: List[EnvParams] = Field(..., min_length=1)
    max_epoch: int = Field(1000, gt=0)

    @model_validator(mode="after")
    def check_changepoints(self) -> "Curriculum":
        if len(self.segments) != len(self.changepoints) + 1:
            raise ValueError(
                f"{len(self.segments)} segments need {len(self.segments) - 1} changepoints, "
                f"got {len(self.changepoints)}"
            )
        bounds = [0] + list(self.changepoints) + [self.max_epoch]
        if any(a >= b for a, b in zip(bounds, bounds[1:])):
            raise ValueError(
                f"changepoints {self.changepoints} must ascend strictly inside (0, {self.max_epoch})"
            )
        return self

    @property
    def starts(self) -> List[int]:
        return [0] + list(self.changepoints)


class ScheduleEntry(BaseModel):
    start_epoch: int = Field(..., ge=0)
    kappa: float
    p: float


class EnvConfig(BaseModel):
    base_tiles: int = Field(300, ge=50, description="Nominal tile count N_t")
    tile_variation: float = Field(0.15, ge=0, lt=1, description="Relative seed-driven spread of N_t")
    max_steps: int = Field(2000, gt=0)
    lookahead: int = Field(5, ge=1, description="Tiles W described by the observation")


# Gaussian process and optimizer models
class KernelParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    length_scales: List[float] = Field(..., min_length=1)
    signal_variance: float = Field(1.0, gt=0)
    noise_variance: float = Field(0.01, ge=0)

    @field_validator("length_scales")
    @classmethod
    def check_length_scales(cls, v: List[float]) -> List[float]:
        if any(not (ls > 0 and math.isfinite(ls)) for ls in v):
            raise ValueError("length scales must be positive and finite")
        return v


class Box(BaseModel):
    model_config = ConfigDict(frozen=True)

    lower: List[float] = Field(..., min_length=1)
    upper: List[float] = Field(..., min_length=1)

    @model_validator(mode="after")
    def check_bounds(self) -> "Box":
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper bounds differ in dimension")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError(f"every lower bound must be below its upper bound: {self.lower} / {self.upper}")
        return self

    @property
    def dim(self) -> int:
        return len(self.lower)


class OptimizerConfig(BaseModel):
    memory: int = Field(10, gt=0, description="Stored curvature pairs")
    max_iters: int = Field(200, gt=0)
    grad_tol: float = Field(1e-6, gt=0, description="Projected gradient infinity-norm tolerance")
    f_tol: float = Field(1e-10, gt=0, description="Relative objective decrease tolerance")


# Learner models
class TrainConfig(BaseModel):
    learning_rate: float = Field(0.0002, gt=0)
    update_epochs: int = Field(10, gt=0, description="Optimization passes over each batch")
    batch_size: int = Field(1000, gt=0, description="Transitions collected per epoch")
    minibatch_size: int = Field(250, gt=0)
    total_epochs: int = Field(1000, gt=0)
    clip_epsilon: float = Field(0.2, gt=0, lt=1)
    gamma: float = Field(0.99, gt=0, le=1)
    gae_lambda: float = Field(0.95, gt=0, le=1)
    entropy_coeff: float = Field(0.01, ge=0)
    value_coeff: float = Field(0.5, ge=0)
    max_grad_norm: float = Field(0.5, gt=0)
    hidden_width: int = Field(32, gt=0)
    init_log_std: float = Field(-0.5, ge=-5, le=2)
    reward_scale: float = Field(0.01, gt=0, description="Multiplier applied to rewards for learning only")
    eval_every: int = Field(50, gt=0)
    eval_n: int = Field(10, gt=0)


class EvalRecord(BaseModel):
    epoch: int
    mean_eval_reward: float
    std_eval_reward: float


class TrainingCurve(BaseModel):
    train_rewards: List[float] = Field(default_factory=list)
    epoch_params: List[EnvParams] = Field(default_factory=list)
    evaluations: List[EvalRecord] = Field(default_factory=list)
    diverged: bool = False
    diverged_at: Optional[int] = None

    @property
    def peak_eval_reward(self) -> Optional[float]:
        if not self.evaluations:
            return None
        return max(e.mean_eval_reward for e in self.evaluations)


# Evaluation models
class EpisodeMetrics(BaseModel):
    total_reward: float
    tiles_visited_count: int
    collisions: int
    grass_fraction: float = Field(..., ge=0, le=1)
    obstacle_count: int
    steps: int
    n_tiles: int
    kappa: float
    p: float


class EvalSet(BaseModel):
    name: str
    candidates: List[EnvParams] = Field(..., min_length=1)


class MetricsReport(BaseModel):
    name: str
    mean_reward: float
    std_reward: float = Field(..., ge=0)
    collision_obstacle_ratio: float = Field(..., ge=0)
    mean_tiles_visited: float
    mean_grass_fraction: float = Field(..., ge=0, le=1)
    mean_collisions: float
    n_eval: int = Field(..., ge=1)
    episodes: List[EpisodeMetrics] = Field(default_factory=list)


class EvalConfig(BaseModel):
    env_mode: EnvMode = EnvMode.KP
    n_eval: int = Field(500, ge=1, description="Episodes for a final robustness report")
    n_per_bucket: int = Field(100, ge=1)
    objective_n_eval: int = Field(10, ge=1, description="Hard-set episodes behind one search objective value")
    objective_mode: ObjectiveMode = ObjectiveMode.FINAL
    n_checkpoints: int = Field(3, ge=1, description="Evaluation records averaged by late_checkpoints")
    floor_value: float = -1000.0


# Search models
class SearchConfig(BaseModel):
    bounds: Box
    lambda_ucb: float = Field(1.9, ge=0)
    n_warmup: int = Field(5, ge=1)
    n_iterations: int = Field(14, ge=0)
    kernel: KernelParams
    prior_mean: Optional[float] = Field(None, description="Raw-unit prior mean; None reverts to the data mean")
    ladder: PsiLadder
    train_config: TrainConfig = Field(default_factory=TrainConfig)
    master_seed: int = 0
    n_starts: int = Field(16, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    floor_value: float = Field(-1000.0, description="Objective recorded for invalid curricula")

    @model_validator(mode="after")
    def check_dimensions(self) -> "SearchConfig":
        k = self.bounds.dim
        if len(self.kernel.length_scales) != k:
            raise ValueError(f"kernel has {len(self.kernel.length_scales)} length scales for a {k}-d box")
        if len(self.ladder) != k + 1:
            raise ValueError(f"a {k}-d search needs a ladder of {k + 1} rungs, got {len(self.ladder)}")
        return self


class TrialRecord(BaseModel):
    index: int = Field(..., ge=0)
    x: List[float]
    curriculum: Optional[Curriculum] = None
    y: float
    training_curve: Optional[TrainingCurve] = None
    phase: TrialPhase
    checkpoint_path: Optional[str] = None

    @field_validator("y")
    @classmethod
    def check_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("objective value must be finite")
        return v

    @property
    def curve_peak(self) -> float:
        """Highest periodic evaluation mean; trials without a curve fall back to y"""
        if self.training_curve is None or self.training_curve.peak_eval_reward is None:
            return self.y
        return self.training_curve.peak_eval_reward


class SearchResult(BaseModel):
    trials: List[TrialRecord] = Field(default_factory=list)

    @property
    def best_by_final(self) -> TrialRecord:
        # max() keeps the first of equal keys, so ties go to the lowest index
        return max(self.trials, key=lambda t: t.y)

    @property
    def best_by_curve(self) -> TrialRecord:
        return max(self.trials, key=lambda t: t.curve_peak)


class SearchCheckpoint(BaseModel):
    config_digest: str
    trials: List[TrialRecord] = Field(default_factory=list)
    next_index: int = 0
    updated_at: datetime = Field(default_factory=datetime.utcnow)


# Run configuration and manifests
class ExperimentConfig(BaseModel):
    """Resolved module configuration for one run"""

    env: EnvConfig
    train: TrainConfig
    search: SearchConfig
    eval: EvalConfig
    default_learning_rate: float = Field(0.0005, gt=0, description="Learning rate of non-curriculum baseline runs")


class RunConfig(BaseModel):
    mode: RunMode
    profile: Profile = Profile.DESK
    seed: int = 0
    out: str = "runs/latest"
    env_mode: EnvMode = EnvMode.KP
    eval_set: str = Field("hard", pattern=r"^(easy|hard)$")
    n_eval: Optional[int] = Field(None, ge=1)
    checkpoint: Optional[str] = None
    lambda_ucb: Optional[float] = Field(None, ge=0)
    env: Dict[str, Any] = Field(default_factory=dict)
    train: Dict[str, Any] = Field(default_factory=dict)
    search: Dict[str, Any] = Field(default_factory=dict)
    eval: Dict[str, Any] = Field(default_factory=dict)


class RunManifest(BaseModel):
    run_id: str
    mode: RunMode
    profile: Profile
    seed: int
    config_digest: str
    config: RunConfig
    versions: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=datetime.utcnow)


# API models
class RunSummary(BaseModel):
    run_id: str
    mode: RunMode
    profile: Profile
    seed: int
    created_at: datetime
    n_outputs: int


class TrialSummary(BaseModel):
    index: int
    x: List[float]
    changepoints: Optional[List[int]] = None
    y: float
    phase: TrialPhase
    curve_peak: float


class CurriculumResolveRequest(BaseModel):
    x: List[float] = Field(..., min_length=1)
    env_mode: EnvMode = EnvMode.KP
    max_epoch: int = Field(1000, gt=0)


class CurriculumScheduleResponse(BaseModel):
    changepoints: List[int]
    max_epoch: int
    schedule: List[ScheduleEntry]


class ReferenceCurriculaResponse(BaseModel):
    env_mode: EnvMode
    manual: CurriculumScheduleResponse
    bo: CurriculumScheduleResponse
