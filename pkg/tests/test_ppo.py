import copy
import math

import numpy as np
import pandas as pd
import pytest
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from app.core import ppo
from app.core.curriculum import from_changepoints, ladder_for
from app.core.eval_harness import build_sets
from app.core.exceptions import InvalidArgumentError, NumericalFailureError
from app.core.ppo import (
    Batch,
    LOG_STD_MAX,
    LOG_STD_MIN,
    TrainedPolicy,
    clipped_surrogate_loss,
    compute_gae,
    curve_frame,
    load_checkpoint,
    normalize_advantages,
    objective_from_training,
    ppo_update,
    save_checkpoint,
    surrogate_terms,
    train,
    write_curve_csv,
)
from app.core.race_env import Action, idle_policy, observation_size
from app.models.schemas import EnvMode, EnvParams, EvalConfig, EvalRecord, EvalSet, ObjectiveMode, TrainConfig, TrainingCurve

OBS_DIM = observation_size(5)
FLAT = EvalSet(name="flat", candidates=[EnvParams(kappa=0.31, p=0.0)])


def random_batch(model, rng, n=16, noise=0.05, advantages=None):
    """Batch whose old log-probabilities sit close to the current ones"""
    obs = rng.normal(size=(n, OBS_DIM))
    actions = rng.normal(size=(n, 3))
    with torch.no_grad():
        logp = model.distribution(torch.as_tensor(obs)).log_prob(torch.as_tensor(actions)).sum(-1).numpy()
    if advantages is None:
        advantages = rng.normal(size=n)
    return Batch(
        observations=obs,
        actions=actions,
        old_log_probs=logp + rng.uniform(-noise, noise, size=n),
        advantages=np.asarray(advantages, dtype=float),
        returns=rng.normal(size=n),
    )


def test_unit_ratio_gives_mean_advantage(tiny_model, rng):
    batch = random_batch(tiny_model, rng, noise=0.0)
    terms = surrogate_terms(batch, tiny_model, clip_epsilon=0.2)
    assert float(terms.policy) == pytest.approx(-batch.advantages.mean(), rel=1e-10)


def test_clip_caps_positive_advantages(tiny_model, rng):
    eps = 0.2
    batch = random_batch(tiny_model, rng, noise=0.0, advantages=rng.uniform(0.5, 2.0, size=16))
    batch = batch._replace(old_log_probs=batch.old_log_probs - math.log(1 + 2 * eps))
    terms = surrogate_terms(batch, tiny_model, clip_epsilon=eps)
    assert float(terms.policy) == pytest.approx(-(1 + eps) * batch.advantages.mean(), rel=1e-10)


def test_loss_gradient_matches_finite_differences(tiny_model, rng):
    h = 1e-5
    for _ in range(50):
        batch = random_batch(tiny_model, rng)
        _, grad = clipped_surrogate_loss(batch, tiny_model, clip_epsilon=0.2)

        probe = copy.deepcopy(tiny_model)
        theta = parameters_to_vector(probe.parameters()).detach().clone()
        numeric = np.zeros_like(grad)
        for i in range(len(theta)):
            values = []
            for sign in (1.0, -1.0):
                shifted = theta.clone()
                shifted[i] += sign * h
                vector_to_parameters(shifted, probe.parameters())
                with torch.no_grad():
                    values.append(float(surrogate_terms(batch, probe, 0.2).total))
            numeric[i] = (values[0] - values[1]) / (2 * h)

        assert np.linalg.norm(grad - numeric) / max(np.linalg.norm(numeric), 1e-8) <= 1e-4


def test_non_finite_loss_raises(tiny_model, rng):
    batch = random_batch(tiny_model, rng)
    batch = batch._replace(returns=np.full(16, np.inf))
    with pytest.raises(NumericalFailureError):
        clipped_surrogate_loss(batch, tiny_model, clip_epsilon=0.2)


def test_gae_by_hand():
    advantages, returns = compute_gae(
        rewards=np.array([1.0, 0.0, 2.0]),
        values=np.array([0.5, 0.2, 0.1]),
        dones=np.array([False, True, False]),
        last_value=0.3,
        gamma=0.9,
        gae_lambda=0.8,
    )
    np.testing.assert_allclose(advantages, [0.536, -0.2, 2.17], atol=1e-12)
    np.testing.assert_allclose(returns, [1.036, 0.0, 2.27], atol=1e-12)


def test_normalized_advantages(rng):
    adv = normalize_advantages(rng.normal(3.0, 5.0, size=200))
    assert adv.mean() == pytest.approx(0.0, abs=1e-12)
    assert adv.std() == pytest.approx(1.0, rel=1e-6)


def test_normalizing_standardized_advantages_keeps_the_loss_minimizer(tiny_model, rng):
    adv = rng.normal(size=64)
    adv = (adv - adv.mean()) / adv.std()
    np.testing.assert_allclose(normalize_advantages(adv), adv, rtol=1e-6, atol=1e-12)

    batch = random_batch(tiny_model, rng, n=64, noise=0.0, advantages=adv)
    normalized = batch._replace(advantages=normalize_advantages(adv))
    shifted = copy.deepcopy(tiny_model)
    bias = shifted.actor[-1].bias
    base = bias.detach().clone()

    def policy_losses(b):
        losses = []
        for s in np.linspace(-1.0, 1.0, 41):
            with torch.no_grad():
                bias.copy_(base + s)
                losses.append(float(surrogate_terms(b, shifted, clip_epsilon=0.2).policy))
        return np.array(losses)

    assert np.argmin(policy_losses(batch)) == np.argmin(policy_losses(normalized))


def test_log_std_is_projected_into_bounds(tiny_model, rng):
    config = TrainConfig(hidden_width=8, entropy_coeff=100.0, minibatch_size=16, update_epochs=3)
    with torch.no_grad():
        tiny_model.log_std.fill_(1.9)
    optimizer = torch.optim.Adam(tiny_model.parameters(), lr=0.5)
    ppo_update(tiny_model, optimizer, random_batch(tiny_model, rng), config, rng)
    assert float(tiny_model.log_std.max()) == LOG_STD_MAX
    assert float(tiny_model.log_std.min()) >= LOG_STD_MIN

    # at the bound the entropy term still moves the parameter
    tiny_model.zero_grad()
    surrogate_terms(random_batch(tiny_model, rng), tiny_model, 0.2, entropy_coeff=100.0).total.backward()
    assert torch.all(tiny_model.log_std.grad != 0)


def test_trained_policy_returns_valid_action(tiny_model, rng):
    action = TrainedPolicy(tiny_model)(rng.normal(size=OBS_DIM))
    assert isinstance(action, Action)
    assert -1.0 <= action.steering <= 1.0


def tiny_curriculum():
    return from_changepoints([0.0, 1.0, 2.0], ladder_for(EnvMode.KP), 4)


def test_train_follows_schedule(tiny_train, tiny_env):
    _, curve = train(tiny_curriculum(), tiny_train, seed=5, eval_set=build_sets()["hard"], env_config=tiny_env)
    assert not curve.diverged
    assert len(curve.train_rewards) == 4
    assert curve.epoch_params == list(ladder_for(EnvMode.KP).rungs)
    assert [e.epoch for e in curve.evaluations] == [0, 2, 4]
    assert all(math.isfinite(r) for r in curve.train_rewards)


def test_train_is_deterministic(tiny_train, tiny_env):
    hard = build_sets()["hard"]
    policy_a, a = train(tiny_curriculum(), tiny_train, seed=9, eval_set=hard, env_config=tiny_env)
    policy_b, b = train(tiny_curriculum(), tiny_train, seed=9, eval_set=hard, env_config=tiny_env)
    assert a == b
    for pa, pb in zip(policy_a.model.parameters(), policy_b.model.parameters()):
        assert torch.equal(pa, pb)


def test_train_rejects_mismatched_curriculum(tiny_train, tiny_env):
    curriculum = from_changepoints([0.0, 1.0, 2.0], ladder_for(EnvMode.KP), 5)
    with pytest.raises(InvalidArgumentError):
        train(curriculum, tiny_train, seed=0, eval_set=FLAT, env_config=tiny_env)


def test_divergence_is_reported_and_floored(tiny_train, tiny_env, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericalFailureError("non-finite surrogate loss during update")

    monkeypatch.setattr(ppo, "ppo_update", explode)
    policy, curve = train(tiny_curriculum(), tiny_train, seed=1, eval_set=FLAT, env_config=tiny_env)
    assert curve.diverged
    assert curve.diverged_at == 0
    assert [e.epoch for e in curve.evaluations] == [0]
    assert objective_from_training(curve, policy, FLAT, 2, seed=0, env_config=tiny_env) == -1000.0


def idle_curve():
    return TrainingCurve(
        evaluations=[
            EvalRecord(epoch=e, mean_eval_reward=m, std_eval_reward=0.0)
            for e, m in zip([10, 20, 30, 40], [100.0, 20.0, 30.0, 40.0])
        ]
    )


def test_final_objective_is_hard_set_mean(tiny_env):
    value = objective_from_training(idle_curve(), idle_policy, FLAT, 4, seed=0, env_config=tiny_env)
    assert value == pytest.approx(-0.1 * tiny_env.max_steps, abs=1e-9)


def test_late_checkpoints_objective(tiny_env):
    config = EvalConfig(objective_mode=ObjectiveMode.LATE_CHECKPOINTS, n_checkpoints=3)
    value = objective_from_training(idle_curve(), idle_policy, FLAT, 4, seed=0, config=config, env_config=tiny_env)
    assert value == pytest.approx(21.0, abs=1e-9)


def test_checkpoint_round_trip(tmp_path, tiny_model, rng):
    config = TrainConfig(hidden_width=8)
    path = tmp_path / "ckpt" / "policy.pt"
    save_checkpoint(path, TrainedPolicy(tiny_model), config, "abc123")
    policy, loaded_config, digest = load_checkpoint(path)
    assert digest == "abc123"
    assert loaded_config == config
    obs = rng.normal(size=OBS_DIM)
    assert policy(obs) == TrainedPolicy(tiny_model)(obs)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.pt")


def test_unsupported_checkpoint_version(tmp_path):
    path = tmp_path / "old.pt"
    torch.save({"format_version": 99}, path)
    with pytest.raises(InvalidArgumentError):
        load_checkpoint(path)


def test_curve_csv(tmp_path, tiny_train, tiny_env):
    _, curve = train(tiny_curriculum(), tiny_train, seed=2, eval_set=FLAT, env_config=tiny_env)
    write_curve_csv(curve, tmp_path / "curve.csv")
    frame = pd.read_csv(tmp_path / "curve.csv")
    assert list(frame.columns) == ["epoch", "train_reward", "kappa", "p", "eval_mean", "eval_std"]
    assert frame["epoch"].tolist() == [0, 1, 2, 3, 4]
    assert frame["eval_mean"].notna().tolist() == [True, False, True, False, True]
    assert len(curve_frame(curve)) == 5


@pytest.mark.slow
def test_training_improves_on_flat_tracks(tiny_env):
    from app.core.curriculum import constant_curriculum

    config = TrainConfig(
        learning_rate=0.001,
        batch_size=256,
        minibatch_size=64,
        total_epochs=40,
        hidden_width=16,
        eval_every=10,
        eval_n=6,
    )
    curriculum = constant_curriculum(EnvParams(kappa=0.31, p=0.0), 40)
    _, curve = train(curriculum, config, seed=0, eval_set=FLAT, env_config=tiny_env)
    assert curve.evaluations[-1].mean_eval_reward > curve.evaluations[0].mean_eval_reward


@pytest.mark.slow
def test_training_reward_rises_on_the_default_environment():
    from app.core.curriculum import constant_curriculum
    from app.models.schemas import EnvConfig

    config = TrainConfig(
        learning_rate=0.001,
        batch_size=256,
        minibatch_size=64,
        total_epochs=50,
        hidden_width=16,
        eval_every=25,
        eval_n=2,
    )
    curriculum = constant_curriculum(EnvParams(kappa=0.31, p=0.05), 50)
    _, curve = train(curriculum, config, seed=0, eval_set=FLAT, env_config=EnvConfig(base_tiles=100, max_steps=250))
    assert not curve.diverged
    assert np.mean(curve.train_rewards[-10:]) > np.mean(curve.train_rewards[:10])
