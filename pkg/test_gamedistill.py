import logging

import numpy as np
import pytest

from errors import AmbiguousTransitionError, CollectionTimeoutError, ConfigError, DegenerateInputError
from game_envs import PayoffMatrix
from gamedistill import (ClusterModel, DistillConfig, MetaGameAdapter, MetaGameEnv, Oracle, OraclePair,
                         TransitionSample, classify_meta_payoff, cluster, collect_data, deduce_move, defection_truth,
                         embed, estimate_meta_payoff, label_clusters, make_meta_env, meta_step, module_from_weights,
                         module_to_weights, purity, samples_from_arrays, samples_to_arrays, solo_oracle_stats,
                         train_encoder, train_oracle)
from grid_envs import CoinGameEnv, Move, StagHuntEnv, load_layout
from persistence import load_weights, save_weights


def frame(cell, shape=(3, 3), channels=4):
    obs = np.zeros((channels, *shape), dtype=np.float32)
    obs[0][cell] = 1.0
    return obs


def sample_with(reward_tuple, look_back=3):
    return TransitionSample(np.zeros((look_back * 4, 3, 3), dtype=np.float32), reward_tuple, look_back)


@pytest.fixture(scope='module')
def coin_samples():
    env = CoinGameEnv(batch_size=20)
    return collect_data(env, np.random.default_rng(0), agent=0, min_samples=5, look_back=3)


@pytest.fixture
def oracle_pair():
    return OraclePair(Oracle(4, 3, 3, 4), Oracle(4, 3, 3, 4))


def test_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(look_back=1)
    with pytest.raises(ConfigError):
        DistillConfig(cluster_method='dbscan')
    with pytest.raises(ConfigError):
        DistillConfig(oracle_optimizer='rmsprop')


def test_sample_needs_nonzero_reward():
    with pytest.raises(ConfigError):
        sample_with((0.0, 0.0))
    assert sample_with((1.0, 0.0)).frames().shape == (3, 4, 3, 3)


def test_collect_data_balances_classes(coin_samples):
    assert len(coin_samples) == 20
    tuples = [s.reward_tuple for s in coin_samples]
    for expected in [(1.0, 0.0), (1.0, -2.0), (0.0, 1.0), (-2.0, 1.0)]:
        assert tuples.count(expected) == 5
    assert coin_samples[0].window.shape == (12, 3, 3)


def test_collected_windows_hold_one_agent_per_frame(coin_samples):
    for sample in coin_samples:
        frames = sample.frames()
        assert np.all(frames[:, 0].reshape(3, -1).sum(axis=1) == 1)


def test_collect_data_guard():
    with pytest.raises(CollectionTimeoutError) as excinfo:
        collect_data(CoinGameEnv(batch_size=20), np.random.default_rng(0), min_samples=1000, look_back=3,
                     max_steps=10)
    assert excinfo.value.deficient


def test_sample_arrays_round_trip(coin_samples):
    windows, rewards = samples_to_arrays(coin_samples)
    restored = samples_from_arrays(windows, rewards, 3)
    assert [s.reward_tuple for s in restored] == [s.reward_tuple for s in coin_samples]
    with pytest.raises(DegenerateInputError):
        samples_to_arrays([])


def test_deduce_move():
    assert deduce_move(frame((1, 1)), frame((0, 1))) is Move.UP
    assert deduce_move(frame((1, 1)), frame((1, 2))) is Move.RIGHT
    # clamped at the top edge: staying in place is only explained by UP
    assert deduce_move(frame((0, 1)), frame((0, 1))) is Move.UP


def test_deduce_move_ambiguous():
    with pytest.raises(AmbiguousTransitionError):
        deduce_move(frame((0, 0)), frame((0, 0)))
    with pytest.raises(AmbiguousTransitionError):
        deduce_move(frame((1, 1)), frame((1, 1)))
    with pytest.raises(AmbiguousTransitionError):
        deduce_move(frame((0, 0)), frame((2, 2)))


def test_deduce_move_with_walls():
    layout = load_layout()
    walls = layout.walls
    assert deduce_move(frame((1, 2), (7, 7)), frame((1, 3), (7, 7)), walls) is Move.RIGHT
    # (1, 1) has walls above and to the left
    with pytest.raises(AmbiguousTransitionError):
        deduce_move(frame((1, 1), (7, 7)), frame((1, 1), (7, 7)), walls)


def test_cluster_separates_blobs():
    rng = np.random.default_rng(1)
    points = np.vstack([rng.normal(0, 0.1, size=(30, 4)), rng.normal(5, 0.1, size=(30, 4))])
    truth = np.array([0] * 30 + [1] * 30)
    for method in ('ward', 'kmeans'):
        model = cluster(points, 2, method, seed=0)
        assert purity(model.assignments, truth) == 1.0
        assert sorted(model.sizes()) == [30, 30]
        assert model.centroids.shape == (2, 4)


def test_cluster_degenerate_input():
    with pytest.raises(DegenerateInputError):
        cluster(np.ones((10, 3)), 2)
    with pytest.raises(ConfigError):
        cluster(np.eye(3), 2, method='spectral')


def test_purity():
    assert purity(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1])) == 0.75


def test_defection_truth():
    assert defection_truth([sample_with((1.0, -2.0)), sample_with((1.0, 0.0))]).tolist() == [1, 0]
    assert defection_truth([sample_with((4.0, 0.0)), sample_with((25.0, 25.0))]).tolist() == [1, 0]


def test_label_clusters_by_opponent_reward():
    model = ClusterModel(np.array([0, 0, 1, 1]), 'ward', 2, np.zeros((2, 1)))
    samples = [sample_with(t) for t in [(1.0, -2.0), (1.0, -2.0), (1.0, 0.0), (0.0, 1.0)]]
    labels = label_clusters(model, samples)
    assert labels.cooperation == 1 and labels.defection == 0
    assert labels.mean_opponent_reward == [-2.0, 0.5]
    assert not labels.tie


def test_label_clusters_tie(caplog):
    model = ClusterModel(np.array([0, 1]), 'kmeans', 2, np.zeros((2, 1)))
    with caplog.at_level(logging.WARNING):
        labels = label_clusters(model, [sample_with((1.0, 0.0)), sample_with((2.0, 0.0))])
    assert labels.tie and labels.cooperation == 0
    assert 'equal mean opponent reward' in caplog.text


def test_train_encoder_and_embed(coin_samples):
    fit = train_encoder(coin_samples, epochs=2, seed=5, embed_dim=8, batch_size=8)
    assert len(fit.train_losses) == 2
    assert fit.holdout_loss is not None and fit.constant_baseline_loss is not None
    assert embed(fit.encoder, coin_samples).shape == (20, 8)
    assert embed(fit.encoder, coin_samples, mode='concat').shape == (20, 16)
    assert embed(fit.encoder, coin_samples[0]).shape == (8,)
    with pytest.raises(ConfigError):
        embed(fit.encoder, coin_samples, mode='both')


def test_train_encoder_is_deterministic(coin_samples):
    first = train_encoder(coin_samples, epochs=1, seed=9, embed_dim=4)
    second = train_encoder(coin_samples, epochs=1, seed=9, embed_dim=4)
    assert first.train_losses == second.train_losses
    np.testing.assert_array_equal(embed(first.encoder, coin_samples), embed(second.encoder, coin_samples))


def test_train_encoder_needs_two_classes():
    with pytest.raises(DegenerateInputError):
        train_encoder([sample_with((1.0, 0.0)) for _ in range(4)], epochs=1)


def test_train_oracle_and_weights_round_trip(coin_samples, tmp_path):
    fit = train_oracle(coin_samples, n_actions=4, epochs=2, seed=0)
    assert fit.n_pairs > 0
    assert 0.0 <= fit.accuracy <= 1.0
    assert len(fit.losses) == 2
    path = save_weights(tmp_path / 'oracle.json', module_to_weights(fit.oracle, 'oracle', {'role': 'cooperation'}))
    restored = module_from_weights(load_weights(path))
    observations = np.stack([s.frames()[0] for s in coin_samples])
    np.testing.assert_array_equal(restored.greedy(observations), fit.oracle.greedy(observations))


def test_train_oracle_sgd(coin_samples):
    fit = train_oracle(coin_samples, n_actions=4, optimizer='sgd', epochs=1, seed=0)
    assert len(fit.losses) == 1


def test_train_oracle_empty_cluster():
    with pytest.raises(DegenerateInputError):
        train_oracle([], n_actions=4)
    with pytest.raises(ConfigError):
        train_oracle([sample_with((1.0, 0.0))], n_actions=4, optimizer='lbfgs')


def test_unknown_network_kind():
    with pytest.raises(ConfigError):
        module_from_weights({'kind': 'critic', 'architecture': {}, 'params': {}})


def test_meta_step_reveal(oracle_pair):
    rng = np.random.default_rng(0)
    env = CoinGameEnv(horizon=5, batch_size=4)
    env.reset(rng)
    adapter = MetaGameAdapter([oracle_pair, oracle_pair])
    adapter.reset(4)
    seen, rewards, inner = meta_step(adapter, np.array([0, 1]), env, rng)
    assert seen[:, 0].tolist() == [2] * 4
    assert seen[:, 1].tolist() == [3] * 4
    assert rewards.shape == (4, 2)
    assert 'pick_events' in inner.info


def test_meta_step_infer(oracle_pair):
    rng = np.random.default_rng(0)
    env = CoinGameEnv(horizon=5, batch_size=4)
    env.reset(rng)
    adapter = MetaGameAdapter([oracle_pair, oracle_pair], observability='infer')
    adapter.reset(4)
    seen, _, _ = meta_step(adapter, np.array([0, 0]), env, rng)
    # own choice is always known exactly
    assert np.all(np.isin(seen[:, 0], [1, 2]))
    assert np.all(np.isin(seen[:, 1], [1, 2]))


def test_adapter_validation(oracle_pair):
    with pytest.raises(ConfigError):
        MetaGameAdapter([oracle_pair, oracle_pair], observability='telepathy')
    with pytest.raises(ConfigError):
        MetaGameAdapter([oracle_pair])


def test_meta_env_protocol(oracle_pair):
    env = make_meta_env('coin', [oracle_pair, oracle_pair], horizon=3, batch_size=2)
    assert isinstance(env, MetaGameEnv)
    assert env.n_states == 5 and env.cooperate_action == 0
    first = env.reset(np.random.default_rng(0))
    assert first.obs.shape == (2, 2, 5)
    assert np.all(first.states == 0)
    result = env.step(np.array([[0, 0], [1, 1]]), np.random.default_rng(1))
    assert result.states.tolist() == [[1, 1], [4, 4]]


def test_estimate_meta_payoff(oracle_pair):
    env = make_meta_env('coin', [oracle_pair, oracle_pair], horizon=2, batch_size=2)
    payoff = estimate_meta_payoff(env, np.random.default_rng(0), episodes=1)
    assert isinstance(payoff, PayoffMatrix)
    assert payoff.rewards.shape == (2, 2, 2)
    assert set(classify_meta_payoff(payoff)) == {'rule1', 'rule2', 'rule3', 'greed', 'fear', 'is_dilemma'}


def test_solo_oracle_stats(oracle_pair):
    rng = np.random.default_rng(0)
    coin = solo_oracle_stats(CoinGameEnv(horizon=5, batch_size=4), oracle_pair.cooperation, rng)
    assert set(coin) == {'own_pick_rate', 'other_pick_rate', 'picks_per_episode'}
    stag = solo_oracle_stats(StagHuntEnv(horizon=5, batch_size=4), Oracle(4, 7, 7, 4), rng)
    assert stag['joint_target_first'] + stag['solo_target_first'] + stag['no_target'] == pytest.approx(1.0)
