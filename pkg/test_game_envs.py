import json

import numpy as np
import pytest

from errors import ConfigError, EpisodeExhaustedError
from game_envs import (MATRIX_STATE_LABELS, IteratedMatrixEnv, MatrixState, PayoffMatrix, builtin_payoff,
                       classify_dilemma, ego_states, encode_state, load_payoff, make_nonpositive, matrix_step,
                       normalize_for_training)


def test_ipd_mutual_cooperation():
    env = IteratedMatrixEnv(builtin_payoff('ipd'), horizon=3)
    env.reset()
    states, rewards = matrix_step(env, (0, 0))
    assert states.tolist() == [MatrixState.CC]
    assert rewards.tolist() == [[-1.0, -1.0]]


def test_ipd_sucker_and_temptation():
    env = IteratedMatrixEnv(builtin_payoff('ipd'), horizon=3)
    env.reset()
    states, rewards = matrix_step(env, (0, 1))
    assert states.tolist() == [MatrixState.CD]
    assert rewards.tolist() == [[-3.0, 0.0]]


def test_state_labels():
    assert MATRIX_STATE_LABELS == ['Start', 'CC', 'CD', 'DC', 'DD']
    assert MatrixState.joint(1, 0) is MatrixState.DC


def test_ego_states_swap_mixed_outcomes():
    ego = ego_states(np.array([0, 1, 2, 3, 4]))
    assert ego[:, 0].tolist() == [0, 1, 2, 3, 4]
    assert ego[:, 1].tolist() == [0, 1, 3, 2, 4]


def test_encode_state_perspective():
    assert encode_state(MatrixState.CD).tolist() == [0, 0, 1, 0, 0]
    assert encode_state(MatrixState.CD, perspective=1).tolist() == [0, 0, 0, 1, 0]
    with pytest.raises(ConfigError):
        encode_state(7)


def test_env_batch_shapes():
    env = IteratedMatrixEnv(builtin_payoff('ipd'), horizon=4, batch_size=3)
    first = env.reset()
    assert first.obs.shape == (3, 2, 5)
    assert np.all(first.states == 0)
    result = env.step(np.array([[0, 0], [0, 1], [1, 1]]))
    assert result.rewards.tolist() == [[-1, -1], [-3, 0], [-2, -2]]
    assert result.states.tolist() == [[1, 1], [2, 3], [4, 4]]


def test_episode_exhausted():
    env = IteratedMatrixEnv(builtin_payoff('ipd'), horizon=2)
    env.reset()
    env.step(np.array([[0, 0]]))
    env.step(np.array([[0, 0]]))
    with pytest.raises(EpisodeExhaustedError):
        env.step(np.array([[0, 0]]))


def test_invalid_action():
    env = IteratedMatrixEnv(builtin_payoff('ipd'), horizon=2)
    env.reset()
    with pytest.raises(ConfigError):
        matrix_step(env, (0, 2))


def test_zero_sum_game_has_no_cooperation_action():
    assert IteratedMatrixEnv(builtin_payoff('imp')).cooperate_action is None
    assert IteratedMatrixEnv(builtin_payoff('ipd')).cooperate_action == 0


@pytest.mark.parametrize('game', ['ipd', 'ish', 'icg'])
def test_canonical_games_are_dilemmas(game):
    assert classify_dilemma(*builtin_payoff(game).dilemma_entries()).is_dilemma


def test_dilemma_flags():
    ish = classify_dilemma(*builtin_payoff('ish').dilemma_entries())
    assert not ish.greed and ish.fear
    icg = classify_dilemma(*builtin_payoff('icg').dilemma_entries())
    assert icg.greed and not icg.fear
    assert not classify_dilemma(R=3, S=3, T=0, P=0).is_dilemma


def test_normalize_shifts_matching_pennies():
    payoff, shift = normalize_for_training(builtin_payoff('imp'))
    assert shift == 1.0
    assert payoff.rewards.max() == 0.0
    assert payoff.rewards[0, 0].tolist() == [0.0, -2.0]


def test_normalize_leaves_nonpositive_games():
    payoff, shift = normalize_for_training(builtin_payoff('ipd'))
    assert shift == 0.0
    np.testing.assert_array_equal(payoff.rewards, builtin_payoff('ipd').rewards)


def test_load_payoff_from_file(tmp_path):
    path = tmp_path / 'mine.json'
    path.write_text(json.dumps({'actions': ['C', 'D'], 'rewards': [[[-1, -1], [-5, 0]], [[0, -5], [-3, -3]]]}))
    payoff = load_payoff(path)
    assert payoff.name == 'mine'
    assert payoff.dilemma_entries() == (-1.0, -5.0, 0.0, -3.0)


def test_load_payoff_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_payoff(tmp_path / 'missing.json')
    with pytest.raises(ConfigError):
        PayoffMatrix('bad', (('C', 'D'), ('C', 'D')), np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        builtin_payoff('chess')


def test_payoff_json_round_trip():
    original = builtin_payoff('icg')
    restored = PayoffMatrix.from_json(original.to_json())
    np.testing.assert_array_equal(restored.rewards, original.rewards)
    assert restored.name == 'icg'


def test_shift_keeps_dilemma_class():
    payoff = PayoffMatrix('pos', (('C', 'D'), ('C', 'D')), np.array([[[3, 3], [0, 5]], [[5, 0], [1, 1]]]))
    shifted = make_nonpositive(payoff)
    assert shifted.rewards.max() == 0.0
    assert classify_dilemma(*shifted.dilemma_entries()) == classify_dilemma(*payoff.dilemma_entries())
