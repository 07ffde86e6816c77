from functools import partial

import numpy as np
import pytest

from errors import ConfigError, NumericalError, UndefinedIndexError
from game_envs import IteratedMatrixEnv, builtin_payoff
from grid_envs import CoinGameEnv
from policy_engine import FixedPolicy, LayeredNet, TabularSoftmax, ValueBaseline
from sq_learner import (LearnerConfig, Trajectory, TrajectoryBatch, discounted_returns, imagined_return,
                        imagined_returns, lemma_q_values, make_agent, reinforce_grad, sample_kappa, sq_correction,
                        sql_update, train)


def ipd_factory(horizon, batch_size):
    return IteratedMatrixEnv(builtin_payoff('ipd'), horizon, batch_size)


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.fixture
def small_batch(rng):
    states = rng.integers(0, 5, size=(4, 6))
    actions = rng.integers(0, 2, size=(4, 6))
    rewards = -rng.integers(0, 4, size=(4, 6)).astype(float)
    return TrajectoryBatch(actions=actions, rewards=rewards, states=states, n_states=5)


def test_discounted_returns():
    np.testing.assert_allclose(discounted_returns([-1.0, -2.0], 0.5), [-2.0, -2.0])
    batch = discounted_returns(np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 2.0]]), 0.5)
    np.testing.assert_allclose(batch, [[1.25, 0.5, 1.0], [0.5, 1.0, 2.0]])


def test_imagined_return_value():
    rewards = np.array([-1.0, -2.0, -3.0])
    # (1 - 0.25) / 0.5 * r_0 + 0.25 * R_1 with R_1 = -2 + 0.5 * -3
    assert imagined_return(rewards, 1, 2, 0.5) == pytest.approx(-2.375)


def test_imagined_return_with_single_repeat():
    # one repeat of the previous reward is just the played return from t - 1
    rng = np.random.default_rng(11)
    for _ in range(1000):
        T = int(rng.integers(2, 30))
        rewards = rng.normal(size=T) * 3
        gamma = float(rng.uniform(0.5, 0.99))
        t = int(rng.integers(1, T))
        R = discounted_returns(rewards, gamma)
        assert imagined_return(rewards, t, 1, gamma) == rewards[t - 1] + gamma * R[t]


def test_imagined_return_undefined_indices():
    traj = Trajectory(np.eye(5)[[0, 1, 1]], np.array([0, 0, 1]), np.array([-1.0, -1.0, -3.0]))
    with pytest.raises(UndefinedIndexError):
        imagined_return(traj, 0, 1, 0.9)
    with pytest.raises(UndefinedIndexError):
        imagined_return(traj, 3, 1, 0.9)
    with pytest.raises(ConfigError):
        imagined_return(traj, 1, 0, 0.9)


def test_vectorised_imagined_returns_match_scalar(rng):
    rewards = -rng.random((3, 7))
    R = discounted_returns(rewards, 0.96)
    kappa = rng.integers(1, 11, size=(3, 7))
    out = imagined_returns(rewards, R, kappa, 0.96)
    assert np.all(out[:, 0] == 0)
    for b in range(3):
        for t in range(1, 7):
            assert out[b, t] == pytest.approx(imagined_return(rewards[b], t, int(kappa[b, t]), 0.96))


def test_sample_kappa_range(rng):
    draws = sample_kappa(rng, 10, size=5000)
    assert draws.min() == 1 and draws.max() == 10
    assert np.all(sample_kappa(rng, 1, size=50) == 1)
    assert isinstance(sample_kappa(rng, 3), int)
    with pytest.raises(ConfigError):
        sample_kappa(rng, 0)


def test_reinforce_grad_matches_manual_sum(small_batch, rng):
    policy = TabularSoftmax(5, 2, rng.normal(size=(5, 2)))
    gamma = 0.9
    grad = reinforce_grad(small_batch, policy, None, gamma)
    R = discounted_returns(small_batch.rewards, gamma)
    features = small_batch.features
    expected = np.zeros(10)
    B, T = small_batch.shape
    for b in range(B):
        for t in range(T):
            expected += gamma ** t * R[b, t] * policy.log_prob_grad(features[b, t], small_batch.actions[b, t])
    np.testing.assert_allclose(grad, expected / B)


def test_sq_correction_matches_manual_sum(small_batch, rng):
    policy = TabularSoftmax(5, 2, rng.normal(size=(5, 2)))
    gamma, kappa = 0.9, 3
    grad = sq_correction(small_batch, policy, None, gamma, z=10, kappa=kappa)
    features = small_batch.features
    expected = np.zeros(10)
    B, T = small_batch.shape
    for b in range(B):
        for t in range(1, T):
            r_hat = imagined_return(small_batch.rewards[b], t, kappa, gamma)
            # previous action, scored at the current state
            expected += gamma ** t * r_hat * policy.log_prob_grad(features[b, t], small_batch.actions[b, t - 1])
    np.testing.assert_allclose(grad, expected / B)


def test_sq_correction_edge_cases(rng):
    policy = TabularSoftmax(5, 2)
    one_step = TrajectoryBatch(actions=np.zeros((2, 1), dtype=int), rewards=np.zeros((2, 1)),
                               states=np.zeros((2, 1), dtype=int), n_states=5)
    np.testing.assert_array_equal(sq_correction(one_step, policy, None, 0.9, 10, rng), np.zeros(10))
    two_steps = TrajectoryBatch(actions=np.zeros((1, 2), dtype=int), rewards=-np.ones((1, 2)),
                                states=np.zeros((1, 2), dtype=int), n_states=5)
    with pytest.raises(ConfigError):
        sq_correction(two_steps, policy, None, 0.9, 10)


def test_baseline_reduces_to_advantage(small_batch, rng):
    policy = TabularSoftmax(5, 2, rng.normal(size=(5, 2)))
    constant = ValueBaseline(5, values=np.full(5, -1.5))
    shifted = TrajectoryBatch(actions=small_batch.actions, rewards=small_batch.rewards.copy(),
                              states=small_batch.states, n_states=5)
    with_baseline = reinforce_grad(small_batch, policy, constant, 0.0)
    shifted.rewards += 1.5
    np.testing.assert_allclose(with_baseline, reinforce_grad(shifted, policy, None, 0.0))


def test_sql_update_step():
    cfg = LearnerConfig(actor_lr=0.1, alpha=1.0, beta=0.5)
    policy = TabularSoftmax(1, 2)
    updated = sql_update(policy, np.array([1.0, -1.0]), np.array([2.0, 2.0]), cfg)
    np.testing.assert_allclose(updated.get_flat(), [0.2, 0.0])


def test_learner_config_validation_and_defaults():
    with pytest.raises(ConfigError):
        LearnerConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        LearnerConfig(z=0)
    with pytest.raises(ConfigError):
        LearnerConfig(beta=-1)
    assert LearnerConfig.for_game('imp').gamma == 0.9
    assert LearnerConfig.for_game('ipd').gamma == 0.96
    assert LearnerConfig.for_game('coin', z=None).horizon == 50


def test_make_agent_kinds(rng):
    cfg = LearnerConfig()
    ipd = IteratedMatrixEnv(builtin_payoff('ipd'))
    selfish = make_agent('sl', ipd, cfg, rng)
    assert selfish.config.beta == 0.0 and cfg.beta == 0.5
    assert isinstance(selfish.policy, TabularSoftmax)
    defector = make_agent('fixed-d', ipd, cfg)
    assert isinstance(defector.policy, FixedPolicy) and defector.policy.action == 1 and not defector.learns
    assert isinstance(make_agent('sql', CoinGameEnv(), cfg, rng).policy, LayeredNet)
    with pytest.raises(ConfigError):
        make_agent('lola', ipd, cfg)


def test_fixed_defectors_score_mutual_defection():
    cfg = LearnerConfig(horizon=10, batch=4, epochs=2)
    env = ipd_factory(10, 4)
    agents = [make_agent('fixed-d', env, cfg), make_agent('fixed-d', env, cfg)]
    history = train(partial(ipd_factory, 10), agents, 2, seed=0, log_every=0)
    _, values = history.series(0, 'ndr')
    np.testing.assert_allclose(values, -2 * (1 - 0.96 ** 10))
    _, coop = history.series(1, 'p_cooperation')
    assert np.all(coop == 0)
    _, visits = history.series(0, 'visit:DD')
    np.testing.assert_allclose(visits, 0.9)


def _history_rows(seed):
    cfg = LearnerConfig(horizon=8, batch=6, epochs=3)
    env = ipd_factory(8, 6)
    agents = [make_agent('sql', env, cfg), make_agent('sl', env, cfg)]
    return train(partial(ipd_factory, 8), agents, 3, seed=seed, log_every=0).to_rows()


def test_training_is_deterministic():
    assert _history_rows(11) == _history_rows(11)
    assert _history_rows(11) != _history_rows(12)


def test_training_rows_layout():
    rows = _history_rows(0)
    assert {'epoch', 'seed', 'agent', 'metric', 'value'} == set(rows[0])
    metrics = {r['metric'] for r in rows}
    assert {'ndr', 'p_cooperation', 'visit:Start', 'pi0:CC'} <= metrics


def test_non_finite_parameters_raise_with_snapshot():
    cfg = LearnerConfig(horizon=4, batch=2, epochs=1, use_baseline=False)
    env = ipd_factory(4, 2)
    agents = [make_agent('sql', env, cfg), make_agent('fixed-c', env, cfg)]
    theta = np.zeros((5, 2))
    theta[0, 0] = np.nan
    agents[0].policy = TabularSoftmax(5, 2, theta)
    with pytest.raises(NumericalError) as excinfo:
        train(partial(ipd_factory, 4), agents, 1, seed=0, log_every=0)
    assert excinfo.value.snapshot['epoch'] == 0
    assert excinfo.value.snapshot['agent'] == 0


def test_lemma_values_ipd():
    values = lemma_q_values('ipd', 0.96)
    np.testing.assert_allclose(values.advantage_of_defection(), 1.0)
    # uniform play makes every state's value identical
    np.testing.assert_allclose(values.v, values.v[0])


def test_lemma_values_stag_hunt_has_no_advantage():
    np.testing.assert_allclose(lemma_q_values('ish', 0.96).advantage_of_defection(), 0.0, atol=1e-12)


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(20))
def test_status_quo_only_learners_follow_imagined_advantages(seed):
    cfg = LearnerConfig(horizon=50, batch=200, epochs=200, alpha=0.0, beta=1.0, actor_lr=0.01)
    env = ipd_factory(50, 200)
    agents = [make_agent('sql', env, cfg), make_agent('sql', env, cfg)]
    history = train(partial(ipd_factory, 50), agents, 200, seed=seed, log_every=0)
    for agent in range(2):
        final = {s: history.series(agent, f'pi0:{s}')[1][-1] for s in ('CC', 'CD', 'DC', 'DD')}
        # imagined repetition favours defecting after CC, CD and DC and cooperating to leave DD
        assert final['CC'] < 0.5, final
        assert final['CD'] < 0.5, final
        assert final['DC'] < 0.5, final
        assert final['DD'] > 0.5, final


@pytest.mark.slow
def test_combined_loss_keeps_mutual_cooperation():
    cfg = LearnerConfig(alpha=1.0, beta=0.5, z=10)
    cooperative = 0
    for seed in range(20):
        env = ipd_factory(cfg.horizon, cfg.batch)
        agents = [make_agent('sql', env, cfg), make_agent('sql', env, cfg)]
        history = train(partial(ipd_factory, cfg.horizon), agents, cfg.epochs, seed=seed, log_every=0)
        cooperative += history.series(0, 'pi0:CC')[1][-1] > 0.5
    assert cooperative >= 18
