import logging
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from errors import ConfigError, EpisodeExhaustedError
from game_envs import StepResult, VecEnv

"""
Visual social-dilemma grid games
================================

Coin Game (3x3, two agents, one coin) and the 7x7 visual Stag Hunt. Both are
vectorised over a leading batch axis like the matrix environments.

Coordinates are (row, col). Up = row - 1, Down = row + 1, Left = col - 1,
Right = col + 1. Coin Game moves that leave the grid are clamped to the
boundary; Stag Hunt moves into walls are no-ops.

Stag Hunt naming follows the classic game: the +25 coordinated target is the
stag and the +4 individual target is the hare. Rewards are keyed to the
*joint* target (`S` in the layout file) and the *solo* target (`H`).
"""

GRID_SIZE = 3
COIN_EPISODE_LENGTH = 50
STAGHUNT_EPISODE_LENGTH = 50
STAGHUNT_LAYOUT = Path(__file__).with_name('staghunt_layout.txt')

SOLO_REWARD = 4.0
JOINT_REWARD = 25.0


class Move(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


MOVE_DELTAS = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])
N_MOVES = len(Move)


class Color(IntEnum):
    RED = 0
    BLUE = 1


class PickEvent(IntEnum):
    NONE = 0
    OWN_COIN = 1
    OTHER_COIN = 2


@dataclass
class CoinGameState:
    red_pos: np.ndarray
    blue_pos: np.ndarray
    coin_pos: np.ndarray
    coin_color: np.ndarray
    step_count: np.ndarray

    @property
    def batch_size(self) -> int:
        return len(self.coin_color)

    @classmethod
    def single(cls, red_pos, blue_pos, coin_pos, coin_color, step_count: int = 0) -> 'CoinGameState':
        return cls(
            red_pos=np.array([red_pos], dtype=int),
            blue_pos=np.array([blue_pos], dtype=int),
            coin_pos=np.array([coin_pos], dtype=int),
            coin_color=np.array([int(coin_color)], dtype=int),
            step_count=np.array([step_count], dtype=int),
        )

    def agent_pos(self, agent: int) -> np.ndarray:
        return self.red_pos if agent == Color.RED else self.blue_pos


def swap_colors(s: CoinGameState) -> CoinGameState:
    """Exchange agent identities and coin color."""
    return replace(s, red_pos=s.blue_pos.copy(), blue_pos=s.red_pos.copy(), coin_color=1 - s.coin_color)


def _spawn_cells(occupied: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform empty cell per row of a (B, cells) occupancy mask."""
    u = rng.random(occupied.shape)
    u[occupied] = np.inf
    return np.argmin(u, axis=1)


def _flat(pos: np.ndarray, width: int) -> np.ndarray:
    return pos[:, 0] * width + pos[:, 1]


def _unflat(cells: np.ndarray, width: int) -> np.ndarray:
    return np.stack([cells // width, cells % width], axis=1)


def spawn_coin(red_pos: np.ndarray, blue_pos: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    batch = len(red_pos)
    occupied = np.zeros((batch, GRID_SIZE * GRID_SIZE), dtype=bool)
    rows = np.arange(batch)
    occupied[rows, _flat(red_pos, GRID_SIZE)] = True
    occupied[rows, _flat(blue_pos, GRID_SIZE)] = True
    cells = _spawn_cells(occupied, rng)
    colors = rng.integers(0, 2, size=batch)
    return _unflat(cells, GRID_SIZE), colors


def coin_reset(batch_size: int, rng: np.random.Generator) -> CoinGameState:
    red = _unflat(rng.integers(0, GRID_SIZE * GRID_SIZE, size=batch_size), GRID_SIZE)
    blue = _unflat(rng.integers(0, GRID_SIZE * GRID_SIZE, size=batch_size), GRID_SIZE)
    coin_pos, coin_color = spawn_coin(red, blue, rng)
    return CoinGameState(red, blue, coin_pos, coin_color, np.zeros(batch_size, dtype=int))


def _clamped_move(pos: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return np.clip(pos + MOVE_DELTAS[actions], 0, GRID_SIZE - 1)


def coin_step(s: CoinGameState, actions: np.ndarray, rng: np.random.Generator) -> Tuple[CoinGameState, np.ndarray, np.ndarray]:
    """
    Advance every game in the batch by one move of each agent.

    Returns the new state, rewards (B, 2) in (red, blue) order and pick events
    (B, 2) as `PickEvent` codes. When both agents land on the coin in the same
    step both collect their pick reward. A picked coin respawns with a uniform
    color on a uniform cell not occupied by either agent.
    """
    actions = np.broadcast_to(np.asarray(actions, dtype=int), (s.batch_size, 2))
    red = _clamped_move(s.red_pos, actions[:, 0])
    blue = _clamped_move(s.blue_pos, actions[:, 1])

    red_hit = np.all(red == s.coin_pos, axis=1)
    blue_hit = np.all(blue == s.coin_pos, axis=1)
    coin_is_red = s.coin_color == Color.RED

    rewards = np.zeros((s.batch_size, 2))
    rewards[:, 0] += red_hit
    rewards[:, 1] += blue_hit
    rewards[:, 1] -= 2.0 * (red_hit & ~coin_is_red)
    rewards[:, 0] -= 2.0 * (blue_hit & coin_is_red)

    events = np.zeros((s.batch_size, 2), dtype=int)
    events[red_hit, 0] = np.where(coin_is_red[red_hit], PickEvent.OWN_COIN, PickEvent.OTHER_COIN)
    events[blue_hit, 1] = np.where(coin_is_red[blue_hit], PickEvent.OTHER_COIN, PickEvent.OWN_COIN)

    picked = red_hit | blue_hit
    coin_pos = s.coin_pos.copy()
    coin_color = s.coin_color.copy()
    if np.any(picked):
        new_pos, new_color = spawn_coin(red, blue, rng)
        coin_pos[picked] = new_pos[picked]
        coin_color[picked] = new_color[picked]

    return CoinGameState(red, blue, coin_pos, coin_color, s.step_count + 1), rewards, events


def coin_observe(s: CoinGameState, perspective: Union[Color, int] = Color.RED) -> np.ndarray:
    """
    (B, 4, 3, 3) occupancy planes: own agent, other agent, own-color coin,
    other-color coin. The Red perspective is the canonical
    (red, blue, red coin, blue coin) order.
    """
    if perspective == Color.BLUE:
        s = swap_colors(s)
    batch = s.batch_size
    rows = np.arange(batch)
    obs = np.zeros((batch, 4, GRID_SIZE, GRID_SIZE), dtype=np.float32)
    obs[rows, 0, s.red_pos[:, 0], s.red_pos[:, 1]] = 1.0
    obs[rows, 1, s.blue_pos[:, 0], s.blue_pos[:, 1]] = 1.0
    obs[rows, 2 + s.coin_color, s.coin_pos[:, 0], s.coin_pos[:, 1]] = 1.0
    return obs


def coin_possible_reward_tuples() -> List[Tuple[float, float]]:
    """Single-pick (self, opponent) tuples from one agent's point of view."""
    return [(1.0, 0.0), (1.0, -2.0), (0.0, 1.0), (-2.0, 1.0)]


class CoinGameEnv(VecEnv):
    """Coin Game batch; learners see their own-perspective observation flattened."""

    name = 'coin'

    def __init__(self, horizon: int = COIN_EPISODE_LENGTH, batch_size: int = 1):
        self.horizon = int(horizon)
        self.batch_size = int(batch_size)
        self.n_agents = 2
        self.n_actions = N_MOVES
        self.n_states = None
        self.feature_dim = 4 * GRID_SIZE * GRID_SIZE
        self.state_labels = None
        self.cooperate_action = None
        self.grid_shape = (4, GRID_SIZE, GRID_SIZE)
        self.state: Optional[CoinGameState] = None
        self.t = 0

    def reset(self, rng: Optional[np.random.Generator] = None) -> StepResult:
        rng = rng if rng is not None else np.random.default_rng()
        self.state = coin_reset(self.batch_size, rng)
        self.t = 0
        return StepResult(obs=self._features(), rewards=np.zeros((self.batch_size, 2)))

    def observe(self, agent: int) -> np.ndarray:
        return coin_observe(self.state, agent)

    def _features(self) -> np.ndarray:
        return np.stack([self.observe(a).reshape(self.batch_size, -1) for a in range(2)], axis=1)

    def step(self, actions: np.ndarray, rng: Optional[np.random.Generator] = None) -> StepResult:
        if self.t >= self.horizon:
            raise EpisodeExhaustedError(f'Coin Game episode exhausted after {self.horizon} steps')
        rng = rng if rng is not None else np.random.default_rng()
        self.state, rewards, events = coin_step(self.state, actions, rng)
        self.t += 1
        return StepResult(obs=self._features(), rewards=rewards, info={'pick_events': events})

    def agent_positions(self, agent: int) -> np.ndarray:
        return self.state.agent_pos(agent)

    def possible_reward_tuples(self) -> List[Tuple[float, float]]:
        return coin_possible_reward_tuples()


@dataclass(frozen=True, eq=False)
class StagHuntLayout:
    walls: np.ndarray
    red_start: Tuple[int, int]
    blue_start: Tuple[int, int]
    stag_pos: Tuple[int, int]
    hare_pos: Tuple[int, int]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.walls.shape

    def floor_cells(self) -> List[Tuple[int, int]]:
        return [tuple(c) for c in np.argwhere(~self.walls)]


def load_layout(path: Union[str, Path] = STAGHUNT_LAYOUT) -> StagHuntLayout:
    """
    Parse a character grid: `#` wall, `.` floor, `R`/`B` agent start cells,
    `S` joint target (stag), `H` solo target (hare).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'Stag Hunt layout not found: {path}')
    rows = [line.rstrip('\n') for line in path.read_text().splitlines() if line.strip()]
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ConfigError(f'Stag Hunt layout {path} is not rectangular')
    walls = np.array([[ch == '#' for ch in r] for r in rows])
    marks = {}
    for i, r in enumerate(rows):
        for j, ch in enumerate(r):
            if ch in 'RBSH':
                if ch in marks:
                    raise ConfigError(f'Stag Hunt layout {path} repeats marker {ch}')
                marks[ch] = (i, j)
            elif ch not in '#.':
                raise ConfigError(f'Stag Hunt layout {path} has unknown marker {ch!r}')
    missing = [m for m in 'RBSH' if m not in marks]
    if missing:
        raise ConfigError(f'Stag Hunt layout {path} is missing markers {missing}')
    return StagHuntLayout(walls, marks['R'], marks['B'], marks['S'], marks['H'])


@dataclass
class StagHuntState:
    layout: StagHuntLayout
    red_pos: np.ndarray
    blue_pos: np.ndarray
    step_count: np.ndarray

    @property
    def batch_size(self) -> int:
        return len(self.red_pos)

    @property
    def stag_pos(self) -> Tuple[int, int]:
        return self.layout.stag_pos

    @property
    def hare_pos(self) -> Tuple[int, int]:
        return self.layout.hare_pos

    @classmethod
    def single(cls, layout: StagHuntLayout, red_pos, blue_pos, step_count: int = 0) -> 'StagHuntState':
        return cls(layout, np.array([red_pos], dtype=int), np.array([blue_pos], dtype=int),
                   np.array([step_count], dtype=int))

    def agent_pos(self, agent: int) -> np.ndarray:
        return self.red_pos if agent == Color.RED else self.blue_pos


def staghunt_reset(layout: StagHuntLayout, batch_size: int) -> StagHuntState:
    return StagHuntState(
        layout,
        np.tile(np.array(layout.red_start), (batch_size, 1)),
        np.tile(np.array(layout.blue_start), (batch_size, 1)),
        np.zeros(batch_size, dtype=int),
    )


def _blocked_move(layout: StagHuntLayout, pos: np.ndarray, actions: np.ndarray) -> np.ndarray:
    h, w = layout.shape
    target = pos + MOVE_DELTAS[actions]
    inside = (target[:, 0] >= 0) & (target[:, 0] < h) & (target[:, 1] >= 0) & (target[:, 1] < w)
    target = np.where(inside[:, None], target, pos)
    blocked = layout.walls[target[:, 0], target[:, 1]]
    return np.where(blocked[:, None], pos, target)


def staghunt_step(s: StagHuntState, actions: np.ndarray) -> Tuple[StagHuntState, np.ndarray]:
    """
    Move both agents; blocked moves leave the agent in place.

    An agent arriving on the solo target earns +4. When both agents stand on
    the joint target after a step in which at least one of them arrived there,
    each earns +25. Targets never move, so consumption is equivalent to an
    immediate respawn at the fixed cell.
    """
    actions = np.broadcast_to(np.asarray(actions, dtype=int), (s.batch_size, 2))
    red = _blocked_move(s.layout, s.red_pos, actions[:, 0])
    blue = _blocked_move(s.layout, s.blue_pos, actions[:, 1])
    stag = np.array(s.layout.stag_pos)
    hare = np.array(s.layout.hare_pos)

    red_moved = np.any(red != s.red_pos, axis=1)
    blue_moved = np.any(blue != s.blue_pos, axis=1)
    red_on_stag = np.all(red == stag, axis=1)
    blue_on_stag = np.all(blue == stag, axis=1)

    rewards = np.zeros((s.batch_size, 2))
    rewards[:, 0] += SOLO_REWARD * (red_moved & np.all(red == hare, axis=1))
    rewards[:, 1] += SOLO_REWARD * (blue_moved & np.all(blue == hare, axis=1))
    joint = red_on_stag & blue_on_stag & ((red_moved & red_on_stag) | (blue_moved & blue_on_stag))
    rewards += JOINT_REWARD * joint[:, None]

    return StagHuntState(s.layout, red, blue, s.step_count + 1), rewards


def staghunt_observe(s: StagHuntState, perspective: Union[Color, int] = Color.RED) -> np.ndarray:
    """(B, 4, H, W): own agent, other agent, joint target, solo target."""
    own, other = (s.red_pos, s.blue_pos) if perspective == Color.RED else (s.blue_pos, s.red_pos)
    h, w = s.layout.shape
    rows = np.arange(s.batch_size)
    obs = np.zeros((s.batch_size, 4, h, w), dtype=np.float32)
    obs[rows, 0, own[:, 0], own[:, 1]] = 1.0
    obs[rows, 1, other[:, 0], other[:, 1]] = 1.0
    obs[:, 2, s.layout.stag_pos[0], s.layout.stag_pos[1]] = 1.0
    obs[:, 3, s.layout.hare_pos[0], s.layout.hare_pos[1]] = 1.0
    return obs


class StagHuntEnv(VecEnv):
    name = 'staghunt'

    def __init__(self, horizon: int = STAGHUNT_EPISODE_LENGTH, batch_size: int = 1,
                 layout: Optional[StagHuntLayout] = None):
        self.layout = layout or load_layout()
        self.horizon = int(horizon)
        self.batch_size = int(batch_size)
        self.n_agents = 2
        self.n_actions = N_MOVES
        self.n_states = None
        h, w = self.layout.shape
        self.feature_dim = 4 * h * w
        self.state_labels = None
        self.cooperate_action = None
        self.grid_shape = (4, h, w)
        self.state: Optional[StagHuntState] = None
        self.t = 0

    def reset(self, rng: Optional[np.random.Generator] = None) -> StepResult:
        self.state = staghunt_reset(self.layout, self.batch_size)
        self.t = 0
        return StepResult(obs=self._features(), rewards=np.zeros((self.batch_size, 2)))

    def observe(self, agent: int) -> np.ndarray:
        return staghunt_observe(self.state, agent)

    def _features(self) -> np.ndarray:
        return np.stack([self.observe(a).reshape(self.batch_size, -1) for a in range(2)], axis=1)

    def step(self, actions: np.ndarray, rng: Optional[np.random.Generator] = None) -> StepResult:
        if self.t >= self.horizon:
            raise EpisodeExhaustedError(f'Stag Hunt episode exhausted after {self.horizon} steps')
        self.state, rewards = staghunt_step(self.state, actions)
        self.t += 1
        return StepResult(obs=self._features(), rewards=rewards)

    def agent_positions(self, agent: int) -> np.ndarray:
        return self.state.agent_pos(agent)

    def possible_reward_tuples(self) -> List[Tuple[float, float]]:
        return [(SOLO_REWARD, 0.0), (0.0, SOLO_REWARD), (JOINT_REWARD, JOINT_REWARD)]


GRID_GAMES = ('coin', 'staghunt')


def make_grid_env(name: str, horizon: Optional[int] = None, batch_size: int = 1) -> VecEnv:
    if name == 'coin':
        return CoinGameEnv(horizon or COIN_EPISODE_LENGTH, batch_size)
    if name == 'staghunt':
        return StagHuntEnv(horizon or STAGHUNT_EPISODE_LENGTH, batch_size)
    logging.error(f'❌ Unknown grid game: {name}')
    raise ConfigError(f'Unknown grid game "{name}", expected one of {GRID_GAMES}')
