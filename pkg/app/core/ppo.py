"""Clipped-surrogate policy-gradient learner trained under a curriculum schedule.

The actor and critic are small tanh perceptrons kept in float64 on the CPU.
Actions are drawn from a diagonal Gaussian over raw values and clipped into
the action box by the environment wrapper; log-probabilities refer to the
raw draws.
"""

import copy
import logging
import math
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.distributions import Normal

from ..models.schemas import (
    Curriculum,
    EnvConfig,
    EvalConfig,
    EvalRecord,
    EvalSet,
    ObjectiveMode,
    TrainConfig,
    TrainingCurve,
)
from .curriculum import param_at
from .eval_harness import evaluate_policy
from .exceptions import InvalidArgumentError, NumericalFailureError
from .race_env import Action, generate_track, observation_size, observe, reset, step
from .seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

ACTION_DIM = 3
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ADV_EPS = 1e-8
CHECKPOINT_FORMAT_VERSION = 1


class ActorCritic(nn.Module):
    def __init__(self, obs_dim: int, hidden_width: int, init_log_std: float):
        super().__init__()
        self.obs_dim = obs_dim
        self.hidden_width = hidden_width
        self.actor = nn.Sequential(
            nn.Linear(obs_dim, hidden_width),
            nn.Tanh(),
            nn.Linear(hidden_width, hidden_width),
            nn.Tanh(),
            nn.Linear(hidden_width, ACTION_DIM),
        )
        self.critic = nn.Sequential(
            nn.Linear(obs_dim, hidden_width),
            nn.Tanh(),
            nn.Linear(hidden_width, hidden_width),
            nn.Tanh(),
            nn.Linear(hidden_width, 1),
        )
        self.log_std = nn.Parameter(torch.full((ACTION_DIM,), float(init_log_std)))
        self.double()

    def distribution(self, obs: torch.Tensor) -> Normal:
        mean = self.actor(obs)
        std = torch.exp(self.log_std)
        return Normal(mean, std.expand_as(mean))

    def clamp_log_std(self) -> None:
        """Project the log-std parameter back into [LOG_STD_MIN, LOG_STD_MAX]"""
        with torch.no_grad():
            self.log_std.clamp_(LOG_STD_MIN, LOG_STD_MAX)

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(obs).squeeze(-1)


class Batch(NamedTuple):
    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


class LossTerms(NamedTuple):
    total: torch.Tensor
    policy: torch.Tensor
    value: torch.Tensor
    entropy: torch.Tensor


class TrainedPolicy:
    """Deterministic controller around a trained network: acts with the Gaussian mean"""

    def __init__(self, model: ActorCritic):
        self.model = model
        self.model.eval()

    def __call__(self, observation: np.ndarray, rng: Optional[np.random.Generator] = None) -> Action:
        with torch.no_grad():
            mean = self.model.actor(torch.as_tensor(observation))
        return Action.from_raw(mean.numpy())


def build_model(obs_dim: int, config: TrainConfig, seed: int) -> ActorCritic:
    """Network initialization that leaves the global torch RNG untouched"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init"))
        return ActorCritic(obs_dim, config.hidden_width, config.init_log_std)


def _as_tensors(batch: Batch):
    return tuple(torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in batch)


def surrogate_terms(
    batch: Batch,
    model: ActorCritic,
    clip_epsilon: float,
    value_coeff: float = 0.5,
    entropy_coeff: float = 0.01,
) -> LossTerms:
    obs, actions, old_log_probs, advantages, returns = _as_tensors(batch)
    dist = model.distribution(obs)
    log_probs = dist.log_prob(actions).sum(-1)
    ratio = torch.exp(log_probs - old_log_probs)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantages
    policy_loss = -torch.min(unclipped, clipped).mean()
    value_loss = ((model.value(obs) - returns) ** 2).mean()
    entropy = dist.entropy().sum(-1).mean()
    total = policy_loss + value_coeff * value_loss - entropy_coeff * entropy
    return LossTerms(total=total, policy=policy_loss, value=value_loss, entropy=entropy)


def clipped_surrogate_loss(
    batch: Batch,
    model: ActorCritic,
    clip_epsilon: float,
    value_coeff: float = 0.5,
    entropy_coeff: float = 0.01,
) -> Tuple[float, np.ndarray]:
    """Loss value and its gradient flattened in ``model.parameters()`` order"""
    terms = surrogate_terms(batch, model, clip_epsilon, value_coeff, entropy_coeff)
    if not torch.isfinite(terms.total):
        raise NumericalFailureError(
            "non-finite surrogate loss",
            diagnostics={
                "n": int(len(batch.observations)),
                "policy": float(terms.policy),
                "value": float(terms.value),
                "entropy": float(terms.entropy),
            },
        )
    grads = torch.autograd.grad(terms.total, list(model.parameters()))
    flat = torch.cat([g.reshape(-1) for g in grads])
    return float(terms.total), flat.detach().numpy().copy()


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_value: float,
    gamma: float,
    gae_lambda: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets for one batch"""
    n = len(rewards)
    advantages = np.zeros(n)
    gae = 0.0
    for t in reversed(range(n)):
        next_value = last_value if t == n - 1 else values[t + 1]
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        gae = delta + gamma * gae_lambda * live * gae
        advantages[t] = gae
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    return (advantages - advantages.mean()) / (advantages.std() + ADV_EPS)


def params_finite(model: nn.Module) -> bool:
    return all(bool(torch.all(torch.isfinite(p))) for p in model.parameters())


class Rollout(NamedTuple):
    batch: Batch
    train_reward: float
    episodes: int


def collect_rollout(
    model: ActorCritic,
    curriculum: Curriculum,
    epoch: int,
    config: TrainConfig,
    env_config: EnvConfig,
    seed: int,
) -> Rollout:
    """Gather ``batch_size`` transitions on fresh tracks drawn at the epoch's parameters"""
    params = param_at(curriculum, epoch)
    rng = make_rng(seed, "sample", epoch)
    obs_buf, act_buf, logp_buf, rew_buf, val_buf, done_buf = [], [], [], [], [], []
    completed: List[float] = []
    partial = 0.0
    last_value = 0.0
    episode = 0

    while len(obs_buf) < config.batch_size:
        track = generate_track(params, derive_seed(seed, "train", epoch, episode), env_config)
        state = reset(track, env_config.max_steps)
        ep_rewards = []
        while not state.terminated and len(obs_buf) < config.batch_size:
            obs = observe(track, state, env_config.lookahead)
            with torch.no_grad():
                obs_t = torch.as_tensor(obs)
                dist = model.distribution(obs_t)
                raw = dist.mean + dist.stddev * torch.as_tensor(rng.standard_normal(ACTION_DIM))
                logp = float(dist.log_prob(raw).sum())
                value = float(model.value(obs_t))
            state, outcome = step(track, state, Action.from_raw(raw.numpy()))
            obs_buf.append(obs)
            act_buf.append(raw.numpy())
            logp_buf.append(logp)
            val_buf.append(value)
            rew_buf.append(outcome.reward)
            done_buf.append(outcome.done)
            ep_rewards.append(outcome.reward)

        if state.terminated:
            completed.append(math.fsum(ep_rewards))
        else:
            partial = math.fsum(ep_rewards)
            with torch.no_grad():
                last_value = float(model.value(torch.as_tensor(observe(track, state, env_config.lookahead))))
        episode += 1

    rewards = np.asarray(rew_buf) * config.reward_scale
    values = np.asarray(val_buf)
    advantages, returns = compute_gae(rewards, values, np.asarray(done_buf), last_value, config.gamma, config.gae_lambda)
    batch = Batch(
        observations=np.asarray(obs_buf),
        actions=np.asarray(act_buf),
        old_log_probs=np.asarray(logp_buf),
        advantages=advantages,
        returns=returns,
    )
    train_reward = math.fsum(completed) / len(completed) if completed else partial
    return Rollout(batch=batch, train_reward=train_reward, episodes=episode)


def ppo_update(
    model: ActorCritic,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    config: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """Several clipped-surrogate passes over one batch; returns the mean minibatch loss"""
    batch = batch._replace(advantages=normalize_advantages(batch.advantages))
    n = len(batch.observations)
    losses = []
    for _ in range(config.update_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start : start + config.minibatch_size]
            mini = Batch(*(np.asarray(a)[idx] for a in batch))
            terms = surrogate_terms(mini, model, config.clip_epsilon, config.value_coeff, config.entropy_coeff)
            if not torch.isfinite(terms.total):
                raise NumericalFailureError("non-finite surrogate loss during update", diagnostics={"n": len(idx)})
            optimizer.zero_grad()
            terms.total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            optimizer.step()
            model.clamp_log_std()
            losses.append(float(terms.total))
    return math.fsum(losses) / len(losses)


def _record_evaluation(model, eval_set, config, env_config, seed, epoch, max_workers) -> EvalRecord:
    report = evaluate_policy(
        TrainedPolicy(copy.deepcopy(model)),
        eval_set,
        config.eval_n,
        derive_seed(seed, "eval", epoch),
        env_config=env_config,
        max_workers=max_workers,
    )
    logger.info(f"epoch {epoch}: eval reward {report.mean_reward:.1f} +/- {report.std_reward:.1f}")
    return EvalRecord(epoch=epoch, mean_eval_reward=report.mean_reward, std_eval_reward=report.std_reward)


def train(
    curriculum: Curriculum,
    config: TrainConfig,
    seed: int,
    eval_set: EvalSet,
    env_config: Optional[EnvConfig] = None,
    max_workers: int = 1,
) -> Tuple[TrainedPolicy, TrainingCurve]:
    """Train a fresh policy through the curriculum; deterministic in ``seed``.

    A run whose loss or weights go non-finite stops early and is returned with
    ``diverged`` set instead of raising.
    """
    if curriculum.max_epoch != config.total_epochs:
        raise InvalidArgumentError(
            f"curriculum spans {curriculum.max_epoch} epochs, training runs {config.total_epochs}"
        )
    env_config = env_config or EnvConfig()
    model = build_model(observation_size(env_config.lookahead), config, seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    curve = TrainingCurve()

    for epoch in range(config.total_epochs):
        if epoch % config.eval_every == 0:
            curve.evaluations.append(_record_evaluation(model, eval_set, config, env_config, seed, epoch, max_workers))

        rollout = collect_rollout(model, curriculum, epoch, config, env_config, seed)
        curve.train_rewards.append(rollout.train_reward)
        curve.epoch_params.append(param_at(curriculum, epoch))

        try:
            loss = ppo_update(model, optimizer, rollout.batch, config, make_rng(seed, "shuffle", epoch))
        except NumericalFailureError as e:
            logger.warning(f"Training diverged at epoch {epoch}: {e}")
            loss = float("nan")
        if not (math.isfinite(loss) and params_finite(model)):
            curve.diverged = True
            curve.diverged_at = epoch
            logger.warning(f"Training stopped at epoch {epoch} with non-finite parameters")
            break
        logger.debug(f"epoch {epoch}: train reward {rollout.train_reward:.2f}, loss {loss:.4f}, episodes {rollout.episodes}")

    if not curve.diverged and config.total_epochs % config.eval_every == 0:
        curve.evaluations.append(
            _record_evaluation(model, eval_set, config, env_config, seed, config.total_epochs, max_workers)
        )

    return TrainedPolicy(model), curve


def objective_from_training(
    curve: TrainingCurve,
    policy: TrainedPolicy,
    hard_set: EvalSet,
    n_eval: int,
    seed: int,
    config: Optional[EvalConfig] = None,
    env_config: Optional[EnvConfig] = None,
    max_workers: int = 1,
) -> float:
    """Search objective: mean hard-set reward of the final policy, or the floor for diverged runs"""
    config = config or EvalConfig()
    if curve.diverged:
        return config.floor_value

    final = evaluate_policy(policy, hard_set, n_eval, seed, env_config=env_config, max_workers=max_workers).mean_reward
    if config.objective_mode is ObjectiveMode.LATE_CHECKPOINTS:
        values = [e.mean_eval_reward for e in curve.evaluations[-config.n_checkpoints :]] + [final]
        final = math.fsum(values) / len(values)
    if not math.isfinite(final):
        return config.floor_value
    return final


def save_checkpoint(path, policy: TrainedPolicy, config: TrainConfig, config_digest: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config_digest": config_digest,
            "obs_dim": policy.model.obs_dim,
            "train_config": config.model_dump(),
            "state_dict": policy.model.state_dict(),
        },
        path,
    )
    logger.info(f"Saved policy checkpoint to {path}")


def load_checkpoint(path) -> Tuple[TrainedPolicy, TrainConfig, str]:
    """Load a policy; raises FileNotFoundError for a missing file"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint format {blob.get('format_version')} in {path}")
    config = TrainConfig(**blob["train_config"])
    model = ActorCritic(blob["obs_dim"], config.hidden_width, config.init_log_std)
    model.load_state_dict(blob["state_dict"])
    return TrainedPolicy(model), config, blob["config_digest"]


def curve_frame(curve: TrainingCurve) -> pd.DataFrame:
    evals = {e.epoch: e for e in curve.evaluations}
    epochs = sorted(set(range(len(curve.train_rewards))) | set(evals))
    rows = []
    for epoch in epochs:
        params = curve.epoch_params[epoch] if epoch < len(curve.epoch_params) else None
        record = evals.get(epoch)
        rows.append(
            {
                "epoch": epoch,
                "train_reward": curve.train_rewards[epoch] if epoch < len(curve.train_rewards) else None,
                "kappa": params.kappa if params else None,
                "p": params.p if params else None,
                "eval_mean": record.mean_eval_reward if record else None,
                "eval_std": record.std_eval_reward if record else None,
            }
        )
    return pd.DataFrame(rows, columns=["epoch", "train_reward", "kappa", "p", "eval_mean", "eval_std"])


def write_curve_csv(curve: TrainingCurve, path) -> None:
    curve_frame(curve).to_csv(path, index=False)
    logger.info(f"Wrote training curve to {path}")
