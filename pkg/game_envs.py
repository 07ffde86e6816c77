import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, EpisodeExhaustedError

"""
Iterated two-player matrix games
================================

Payoff tables for the four canonical dilemmas, the five-state iterated
environment built on top of them, the social-dilemma
classification and the non-positive reward transform applied before training.

Action ordering: 0 = Cooperate, 1 = Defect (PD, SH, Chicken); 0 = Heads,
1 = Tails (Matching Pennies). `rewards[row][col]` holds the pair
(row-player reward, column-player reward).

Every environment in this lab is vectorised over a leading batch axis and
speaks the small protocol defined by `VecEnv`; B = 1 is a single episode.
"""

COOPERATE = 0
DEFECT = 1

DEFAULT_HORIZON = 200


class MatrixState(IntEnum):
    START = 0
    CC = 1
    CD = 2
    DC = 3
    DD = 4

    @classmethod
    def joint(cls, u1: int, u2: int) -> 'MatrixState':
        return cls(1 + 2 * int(u1) + int(u2))


N_MATRIX_STATES = len(MatrixState)
MATRIX_STATE_LABELS = [s.name.capitalize() if s is MatrixState.START else s.name for s in MatrixState]

# Relabels a joint state so the observing agent's own action comes first.
_EGO_SWAP = np.array([0, 1, 3, 2, 4])


@dataclass
class StepResult:
    obs: np.ndarray
    rewards: np.ndarray
    states: Optional[np.ndarray] = None
    info: Dict[str, Any] = field(default_factory=dict)


class VecEnv:
    """
    Batch of independent episodes shared by `n_agents` learners.

    `reset` and `step` return per-agent feature arrays of shape
    (B, n_agents, feature_dim). Environments with a finite ego-centric state
    space also return integer state indices (B, n_agents) and set `n_states`.
    """

    n_agents: int = 2
    n_actions: int = 2
    horizon: int = DEFAULT_HORIZON
    batch_size: int = 1
    n_states: Optional[int] = None
    feature_dim: int = 0
    state_labels: Optional[List[str]] = None
    cooperate_action: Optional[int] = COOPERATE

    def reset(self, rng: Optional[np.random.Generator] = None) -> StepResult:
        raise NotImplementedError

    def step(self, actions: np.ndarray, rng: Optional[np.random.Generator] = None) -> StepResult:
        raise NotImplementedError


def one_hot(indices: np.ndarray, size: int) -> np.ndarray:
    return np.eye(size)[np.asarray(indices, dtype=int)]


@dataclass(frozen=True, eq=False)
class PayoffMatrix:
    name: str
    action_labels: Tuple[Tuple[str, str], Tuple[str, str]]
    rewards: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.rewards, dtype=float)
        if table.shape != (2, 2, 2):
            raise ConfigError(f'Payoff table for {self.name} must be 2x2x2, got shape {table.shape}')
        if not np.all(np.isfinite(table)):
            raise ConfigError(f'Payoff table for {self.name} contains non-finite rewards')
        table.setflags(write=False)
        object.__setattr__(self, 'rewards', table)

    def dilemma_entries(self) -> Tuple[float, float, float, float]:
        """Row-player (R, S, T, P) of a symmetric C/D game."""
        r = self.rewards[:, :, 0]
        return float(r[0, 0]), float(r[0, 1]), float(r[1, 0]), float(r[1, 1])

    def to_json(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'actions': [list(labels) for labels in self.action_labels],
            'rewards': self.rewards.tolist(),
        }

    @classmethod
    def from_json(cls, document: Dict[str, Any], name: str = 'custom') -> 'PayoffMatrix':
        try:
            actions = document['actions']
            rewards = document['rewards']
        except KeyError as e:
            raise ConfigError(f'Payoff document is missing {e}') from e
        if len(actions) == 2 and all(isinstance(a, str) for a in actions):
            labels = (tuple(actions), tuple(actions))
        else:
            labels = tuple(tuple(a) for a in actions)
        return cls(document.get('name', name), labels, np.asarray(rewards, dtype=float))


_CANONICAL = {
    'ipd': (('C', 'D'), [[(-1, -1), (-3, 0)], [(0, -3), (-2, -2)]]),
    'imp': (('H', 'T'), [[(1, -1), (-1, 1)], [(-1, 1), (1, -1)]]),
    'ish': (('C', 'D'), [[(0, 0), (-4, -1)], [(-1, -4), (-3, -3)]]),
    'icg': (('C', 'D'), [[(-1, -1), (-3, 0)], [(0, -3), (-4, -4)]]),
}

MATRIX_GAMES = tuple(_CANONICAL)
ZERO_SUM_GAMES = ('imp',)


def builtin_payoff(name: str) -> PayoffMatrix:
    if name not in _CANONICAL:
        raise ConfigError(f'Unknown matrix game "{name}", expected one of {sorted(_CANONICAL)}')
    labels, table = _CANONICAL[name]
    return PayoffMatrix(name, (labels, labels), np.asarray(table, dtype=float))


def load_payoff(source: Union[str, Path]) -> PayoffMatrix:
    """Built-in game name or a path to a JSON payoff document."""
    if str(source) in _CANONICAL:
        return builtin_payoff(str(source))
    path = Path(source)
    if not path.exists():
        raise ConfigError(f'Payoff file not found: {path}')
    with open(path, 'r') as f:
        document = json.load(f)
    return PayoffMatrix.from_json(document, name=path.stem)


@dataclass(frozen=True)
class DilemmaClass:
    rule1: bool
    rule2: bool
    rule3: bool
    greed: bool
    fear: bool
    is_dilemma: bool


def classify_dilemma(R: float, S: float, T: float, P: float) -> DilemmaClass:
    rule1 = R > P
    rule2 = R > S
    rule3 = 2 * R > T + S
    greed = T > R
    fear = P > S
    return DilemmaClass(rule1, rule2, rule3, greed, fear, rule1 and rule2 and rule3 and (greed or fear))


def make_nonpositive(m: PayoffMatrix) -> PayoffMatrix:
    return PayoffMatrix(m.name, m.action_labels, m.rewards - m.rewards.max())


def normalize_for_training(m: PayoffMatrix) -> Tuple[PayoffMatrix, float]:
    """Shifted matrix plus the shift that was subtracted (recorded in run manifests)."""
    shift = float(m.rewards.max())
    if shift != 0.0:
        logging.info(f'⚖️ Shifting {m.name} payoffs by {-shift:+g} to make them non-positive')
    return make_nonpositive(m), shift


def encode_state(s: Union[MatrixState, int], perspective: int = 0) -> np.ndarray:
    """One-hot over (Start, CC, CD, DC, DD); perspective 1 sees its own action first."""
    index = int(s)
    if not 0 <= index < N_MATRIX_STATES:
        raise ConfigError(f'Invalid matrix state {s}')
    if perspective == 1:
        index = int(_EGO_SWAP[index])
    return one_hot(index, N_MATRIX_STATES)


def ego_states(states: np.ndarray) -> np.ndarray:
    """(B,) joint states -> (B, 2) per-agent ego-centric indices."""
    states = np.asarray(states, dtype=int)
    return np.stack([states, _EGO_SWAP[states]], axis=-1)


class IteratedMatrixEnv(VecEnv):
    def __init__(self, payoff: PayoffMatrix, horizon: int = DEFAULT_HORIZON, batch_size: int = 1):
        if horizon < 1:
            raise ConfigError(f'Horizon must be positive, got {horizon}')
        self.payoff = payoff
        self.horizon = int(horizon)
        self.batch_size = int(batch_size)
        self.n_agents = 2
        self.n_actions = 2
        self.n_states = N_MATRIX_STATES
        self.feature_dim = N_MATRIX_STATES
        self.state_labels = list(MATRIX_STATE_LABELS)
        self.cooperate_action = None if payoff.name in ZERO_SUM_GAMES else COOPERATE
        self.current = np.full(self.batch_size, MatrixState.START, dtype=int)
        self.t = 0

    def reset(self, rng: Optional[np.random.Generator] = None) -> StepResult:
        self.current = np.full(self.batch_size, MatrixState.START, dtype=int)
        self.t = 0
        return self._result(np.zeros((self.batch_size, 2)))

    def step(self, actions: np.ndarray, rng: Optional[np.random.Generator] = None) -> StepResult:
        _, rewards = matrix_step(self, actions)
        return self._result(rewards)

    def _result(self, rewards: np.ndarray) -> StepResult:
        states = ego_states(self.current)
        return StepResult(obs=one_hot(states, N_MATRIX_STATES), rewards=rewards, states=states)


def matrix_step(env: IteratedMatrixEnv, joint: Union[Sequence[int], np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Play one iteration in every episode of the batch.

    `joint` is a (row action, column action) pair or an array of shape (B, 2).
    Returns the next joint states (B,) and the rewards (B, 2).
    """
    if env.t >= env.horizon:
        raise EpisodeExhaustedError(f'Episode of {env.payoff.name} exhausted after {env.horizon} iterations')
    joint = np.broadcast_to(np.asarray(joint, dtype=int), (env.batch_size, 2))
    if np.any((joint < 0) | (joint > 1)):
        raise ConfigError(f'Matrix-game actions must be 0 or 1, got {np.unique(joint).tolist()}')
    u1, u2 = joint[:, 0], joint[:, 1]
    rewards = env.payoff.rewards[u1, u2]
    env.current = 1 + 2 * u1 + u2
    env.t += 1
    return env.current.copy(), rewards.copy()
