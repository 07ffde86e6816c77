import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from errors import ConfigError, EpisodeExhaustedError
from game_envs import COOPERATE, DEFAULT_HORIZON, StepResult, VecEnv, one_hot

"""
Braess-paradox congestion game for N0 agents.

Agent index i has ID i + 1. Cooperation for odd IDs is the Start-A-End route,
for even IDs the Start-B-End route; every defector takes the bridge
Start-A-B-End. Segment costs follow the cost function of the n-player
experiments with base reward R0 = 2.5 * N0 / 2.
"""

OBSERVATION_MODES = ('full', 'count')


@dataclass(frozen=True)
class BraessConfig:
    n_agents: int = 4
    horizon: int = DEFAULT_HORIZON
    observation: str = 'full'

    def __post_init__(self):
        if self.n_agents < 2 or self.n_agents % 2:
            raise ConfigError(f'Braess needs an even number of agents >= 2, got {self.n_agents}')
        if self.horizon < 1:
            raise ConfigError(f'Horizon must be positive, got {self.horizon}')
        if self.observation not in OBSERVATION_MODES:
            raise ConfigError(f'Unknown Braess observation mode "{self.observation}"')

    @property
    def base_reward(self) -> float:
        return 2.5 * self.n_agents / 2

    @property
    def odd_mask(self) -> np.ndarray:
        return (np.arange(self.n_agents) + 1) % 2 == 1


@dataclass
class BraessState:
    """`prev_actions` rows are meaningless where `is_start` is set."""

    prev_actions: np.ndarray
    is_start: np.ndarray

    @classmethod
    def start(cls, batch_size: int, n_agents: int) -> 'BraessState':
        return cls(np.zeros((batch_size, n_agents), dtype=int), np.ones(batch_size, dtype=bool))


def braess_rewards(actions: np.ndarray, cfg: BraessConfig) -> np.ndarray:
    """Per-agent rewards for one profile (N0,) or a batch of profiles (B, N0)."""
    actions = np.asarray(actions, dtype=int)
    if actions.shape[-1] != cfg.n_agents:
        raise ConfigError(f'Expected {cfg.n_agents} actions, got {actions.shape[-1]}')
    defect = actions == 1
    odd = cfg.odd_mask
    n_defect = defect.sum(axis=-1, keepdims=True)
    n_start_a = (~defect & odd).sum(axis=-1, keepdims=True) + n_defect
    n_b_end = (~defect & ~odd).sum(axis=-1, keepdims=True) + n_defect
    r0 = cfg.base_reward
    cooperate_cost = np.where(odd, n_start_a + r0, r0 + n_b_end)
    return -np.where(defect, n_start_a + n_b_end, cooperate_cost).astype(float)


def braess_step(state: BraessState, actions: np.ndarray, cfg: BraessConfig) -> Tuple[BraessState, np.ndarray]:
    actions = np.asarray(actions, dtype=int)
    rewards = braess_rewards(actions, cfg)
    batch_actions = np.broadcast_to(actions, state.prev_actions.shape).copy()
    return BraessState(batch_actions, np.zeros(len(batch_actions), dtype=bool)), rewards


def n_observation_states(cfg: BraessConfig) -> int:
    if cfg.observation == 'full':
        return 1 + 2 ** cfg.n_agents
    return 1 + 2 * cfg.n_agents


def observation_states(state: BraessState, cfg: BraessConfig) -> np.ndarray:
    """(B, N0) tabular state index of each agent; 0 is Start."""
    prev = state.prev_actions
    batch, n = prev.shape
    if cfg.observation == 'full':
        profile = 1 + prev @ (2 ** np.arange(n))
        idx = np.repeat(profile[:, None], n, axis=1)
    else:
        others = prev.sum(axis=1, keepdims=True) - prev
        idx = 1 + prev * n + others
    return np.where(state.is_start[:, None], 0, idx)


def observation_labels(cfg: BraessConfig) -> List[str]:
    n = cfg.n_agents
    if cfg.observation == 'full':
        return ['Start'] + [''.join('D' if (p >> j) & 1 else 'C' for j in range(n)) for p in range(2 ** n)]
    return ['Start'] + [f'{"CD"[own]}|{k}' for own in range(2) for k in range(n)]


class BraessEnv(VecEnv):
    name = 'braess'

    def __init__(self, cfg: BraessConfig, batch_size: int = 1):
        self.cfg = cfg
        self.horizon = cfg.horizon
        self.batch_size = int(batch_size)
        self.n_agents = cfg.n_agents
        self.n_actions = 2
        self.n_states = n_observation_states(cfg)
        self.feature_dim = self.n_states
        self.state_labels = observation_labels(cfg)
        self.cooperate_action = COOPERATE
        self.state = BraessState.start(self.batch_size, self.n_agents)
        self.t = 0
        if cfg.n_agents > 10 and cfg.observation == 'full':
            logging.warning(f'⚠️ Full-profile observation over {cfg.n_agents} agents has {self.n_states} states')

    def reset(self, rng: Optional[np.random.Generator] = None) -> StepResult:
        self.state = BraessState.start(self.batch_size, self.n_agents)
        self.t = 0
        return self._result(np.zeros((self.batch_size, self.n_agents)))

    def step(self, actions: np.ndarray, rng: Optional[np.random.Generator] = None) -> StepResult:
        if self.t >= self.horizon:
            raise EpisodeExhaustedError(f'Braess episode exhausted after {self.horizon} steps')
        self.state, rewards = braess_step(self.state, actions, self.cfg)
        self.t += 1
        return self._result(rewards)

    def _result(self, rewards: np.ndarray) -> StepResult:
        states = observation_states(self.state, self.cfg)
        return StepResult(obs=one_hot(states, self.n_states), rewards=rewards, states=states)
