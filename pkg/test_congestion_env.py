import numpy as np
import pytest

from congestion_env import (BraessConfig, BraessEnv, BraessState, braess_rewards, braess_step, n_observation_states,
                            observation_labels, observation_states)
from errors import ConfigError, EpisodeExhaustedError


@pytest.fixture
def cfg():
    return BraessConfig(n_agents=4, horizon=3)


def test_all_defect(cfg):
    assert braess_rewards(np.ones(4), cfg).tolist() == [-8.0, -8.0, -8.0, -8.0]


def test_all_cooperate(cfg):
    assert braess_rewards(np.zeros(4), cfg).tolist() == [-7.0, -7.0, -7.0, -7.0]


def test_single_odd_defector(cfg):
    # agent 0 has ID 1; its route partner (ID 3) keeps Start-A-End
    assert braess_rewards(np.array([1, 0, 0, 0]), cfg).tolist() == [-5.0, -8.0, -7.0, -8.0]


def test_batched_rewards(cfg):
    rewards = braess_rewards(np.array([[1, 1, 1, 1], [0, 0, 0, 0]]), cfg)
    assert rewards.shape == (2, 4)
    assert rewards[:, 0].tolist() == [-8.0, -7.0]


def test_config_validation():
    with pytest.raises(ConfigError):
        BraessConfig(n_agents=3)
    with pytest.raises(ConfigError):
        BraessConfig(observation='pixels')
    with pytest.raises(ConfigError):
        braess_rewards(np.zeros(3), BraessConfig(n_agents=4))


def test_state_space_sizes():
    assert n_observation_states(BraessConfig(4, observation='full')) == 17
    assert n_observation_states(BraessConfig(4, observation='count')) == 9
    for mode in ('full', 'count'):
        c = BraessConfig(4, observation=mode)
        assert len(observation_labels(c)) == n_observation_states(c)


def test_full_observation_index():
    c = BraessConfig(4, observation='full')
    state = BraessState(np.array([[1, 0, 0, 0]]), np.array([False]))
    idx = observation_states(state, c)
    assert idx.tolist() == [[2, 2, 2, 2]]
    assert observation_labels(c)[2] == 'DCCC'


def test_count_observation_index():
    c = BraessConfig(4, observation='count')
    state = BraessState(np.array([[1, 0, 0, 0]]), np.array([False]))
    idx = observation_states(state, c)
    labels = observation_labels(c)
    assert [labels[i] for i in idx[0]] == ['D|0', 'C|1', 'C|1', 'C|1']


def test_env_start_and_exhaustion(cfg):
    env = BraessEnv(cfg, batch_size=2)
    first = env.reset()
    assert first.obs.shape == (2, 4, 17)
    assert np.all(first.states == 0)
    for _ in range(3):
        result = env.step(np.zeros((2, 4), dtype=int))
    assert result.rewards.tolist() == [[-7.0] * 4] * 2
    assert np.all(result.states != 0)
    with pytest.raises(EpisodeExhaustedError):
        env.step(np.zeros((2, 4), dtype=int))


def test_braess_step_records_profile(cfg):
    start = BraessState(np.zeros((2, 4), dtype=int), np.ones(2, dtype=bool))
    state, rewards = braess_step(start, np.array([1, 0, 0, 0]), cfg)
    assert rewards.tolist() == [-5.0, -8.0, -7.0, -8.0]
    assert state.prev_actions.tolist() == [[1, 0, 0, 0]] * 2
    assert not state.is_start.any()
