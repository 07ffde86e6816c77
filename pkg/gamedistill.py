import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.cluster import AgglomerativeClustering, KMeans

from errors import (AmbiguousTransitionError, CollectionTimeoutError, ConfigError, DegenerateInputError,
                    NumericalError)
from game_envs import (MATRIX_STATE_LABELS, N_MATRIX_STATES, PayoffMatrix, StepResult, VecEnv, classify_dilemma,
                       ego_states, one_hot)
from grid_envs import MOVE_DELTAS, Move, make_grid_env
from seeding import derive_int, derive_rng, torch_generator

"""
GameDistill: reducing a grid game to a two-action matrix game
==============================================================

Pipeline, run independently for each agent:

1. collect_data    - random play; keep the last `look_back` own-perspective
                     observations whenever a non-zero reward tuple occurs
2. train_encoder   - conv net predicting (own reward, opponent reward) from a window
3. embed / cluster - branch activations grouped into two clusters
4. label_clusters  - higher mean opponent reward = cooperation
5. train_oracle    - behaviour cloning of the agent's deduced moves per cluster

The resulting oracle pairs drive `MetaGameEnv`, a five-state iterated game
whose two actions are "consult the cooperation oracle" and "consult the
defection oracle".
"""

DEFAULT_LOOK_BACK = 5
DEFAULT_MIN_SAMPLES = 2000
DEFAULT_COLLECT_BATCH = 100
DEFAULT_MAX_STEPS = 5_000_000

EMBED_MODES = ('self', 'opponent', 'concat')
CLUSTER_METHODS = ('ward', 'kmeans')
OBSERVABILITY_MODES = ('reveal', 'infer')
ORACLE_OPTIMIZERS = ('adam', 'sgd')

CONSULT_COOPERATION = 0
CONSULT_DEFECTION = 1


@dataclass
class DistillConfig:
    look_back: int = DEFAULT_LOOK_BACK
    min_samples: int = DEFAULT_MIN_SAMPLES
    collect_batch: int = DEFAULT_COLLECT_BATCH
    max_steps: int = DEFAULT_MAX_STEPS
    encoder_epochs: int = 20
    encoder_lr: float = 3e-3
    weight_self: float = 1.0
    weight_opponent: float = 1.0
    embed_dim: int = 100
    embed_mode: str = 'self'
    cluster_method: str = 'ward'
    oracle_epochs: int = 30
    oracle_optimizer: str = 'adam'
    oracle_lr: Optional[float] = None
    oracle_l2: float = 1e-4
    holdout: float = 0.1

    def __post_init__(self):
        if self.look_back < 2:
            raise ConfigError(f'look_back must be >= 2 to deduce moves, got {self.look_back}')
        if self.min_samples < 1 or self.collect_batch < 1 or self.max_steps < 1:
            raise ConfigError('min_samples, collect_batch and max_steps must be positive')
        if self.embed_mode not in EMBED_MODES:
            raise ConfigError(f'Unknown embedding mode "{self.embed_mode}", expected one of {EMBED_MODES}')
        if self.cluster_method not in CLUSTER_METHODS:
            raise ConfigError(f'Unknown cluster method "{self.cluster_method}", expected one of {CLUSTER_METHODS}')
        if self.oracle_optimizer not in ORACLE_OPTIMIZERS:
            raise ConfigError(f'Unknown oracle optimizer "{self.oracle_optimizer}", expected one of {ORACLE_OPTIMIZERS}')
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigError(f'holdout fraction must lie in [0, 1), got {self.holdout}')


# ---------------------------------------------------------------------------
# Data collection
# ---------------------------------------------------------------------------

@dataclass
class TransitionSample:
    """`window` is (look_back * C, H, W): frames stacked oldest first, channels within a frame contiguous."""

    window: np.ndarray
    reward_tuple: Tuple[float, float]
    look_back: int = DEFAULT_LOOK_BACK

    def __post_init__(self):
        if self.reward_tuple[0] == 0 and self.reward_tuple[1] == 0:
            raise ConfigError('TransitionSample needs a non-zero reward tuple')
        if self.window.shape[0] % self.look_back != 0:
            raise ConfigError(f'Window with {self.window.shape[0]} channels does not split into {self.look_back} frames')

    def frames(self) -> np.ndarray:
        c = self.window.shape[0] // self.look_back
        return self.window.reshape(self.look_back, c, *self.window.shape[1:])


def samples_to_arrays(samples: Sequence[TransitionSample]) -> Tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise DegenerateInputError('No samples')
    windows = np.stack([s.window for s in samples]).astype(np.float32)
    rewards = np.array([s.reward_tuple for s in samples], dtype=float)
    return windows, rewards


def samples_from_arrays(windows: np.ndarray, rewards: np.ndarray, look_back: int) -> List[TransitionSample]:
    return [TransitionSample(w, (float(r[0]), float(r[1])), look_back) for w, r in zip(windows, rewards)]


def collect_data(env: VecEnv, rng: np.random.Generator, agent: int = 0, min_samples: int = DEFAULT_MIN_SAMPLES,
                 look_back: int = DEFAULT_LOOK_BACK, max_steps: int = DEFAULT_MAX_STEPS) -> List[TransitionSample]:
    """
    Both agents act uniformly at random over `env.batch_size` parallel
    episodes. Reward tuples are taken from `agent`'s point of view
    (own, opponent); tuples outside `env.possible_reward_tuples()` are
    counted and dropped. Returns exactly `min_samples` per class, shuffled.
    """
    classes = [tuple(float(v) for v in t) for t in env.possible_reward_tuples()]
    buckets: Dict[Tuple[float, float], List[np.ndarray]] = {c: [] for c in classes}
    B = env.batch_size
    c, h, w = env.grid_shape
    dropped = 0
    steps = 0

    logging.info(f'🚀 Collecting {min_samples} samples per class {classes} for agent {agent}')
    while True:
        env.reset(rng)
        history = np.zeros((B, look_back, c, h, w), dtype=np.float32)
        history[:, -1] = env.observe(agent)
        filled = 1
        for _ in range(env.horizon):
            actions = rng.integers(0, env.n_actions, size=(B, env.n_agents))
            result = env.step(actions, rng)
            history = np.roll(history, -1, axis=1)
            history[:, -1] = env.observe(agent)
            filled += 1
            steps += B
            if filled >= look_back:
                tuples = result.rewards[:, [agent, 1 - agent]]
                for b in np.flatnonzero(np.any(tuples != 0, axis=1)):
                    key = (float(tuples[b, 0]), float(tuples[b, 1]))
                    if key not in buckets:
                        dropped += 1
                    elif len(buckets[key]) < min_samples:
                        buckets[key].append(history[b].reshape(look_back * c, h, w).copy())
            if all(len(v) >= min_samples for v in buckets.values()):
                samples = [TransitionSample(win, key, look_back) for key, wins in buckets.items() for win in wins]
                order = rng.permutation(len(samples))
                logging.info(f'✅ Collected {len(samples)} samples in {steps} steps ({dropped} off-class tuples dropped)')
                return [samples[i] for i in order]
            if steps >= max_steps:
                deficient = [k for k, v in buckets.items() if len(v) < min_samples]
                counts = {str(k): len(v) for k, v in buckets.items()}
                logging.error(f'❌ Collection guard of {max_steps} steps hit; counts {counts}')
                raise CollectionTimeoutError(f'Classes {deficient} below quota {min_samples} after {steps} steps',
                                             deficient=deficient)


# ---------------------------------------------------------------------------
# Trajectory encoder
# ---------------------------------------------------------------------------

class TrajectoryEncoder(nn.Module):
    """
    Three 3x3 conv layers (padding 1) with ReLU over the stacked window,
    then two linear branches (own reward, opponent reward) each feeding a
    scalar predictor. Branch activations are the embeddings.
    """

    def __init__(self, in_channels: int, height: int, width: int, embed_dim: int = 100, feature_maps: int = 64):
        super().__init__()
        self.architecture = {'in_channels': in_channels, 'height': height, 'width': width,
                             'embed_dim': embed_dim, 'feature_maps': feature_maps}
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, feature_maps, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(feature_maps, feature_maps, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(feature_maps, feature_maps, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Flatten(),
        )
        flat = feature_maps * height * width
        self.self_branch = nn.Linear(flat, embed_dim)
        self.opponent_branch = nn.Linear(flat, embed_dim)
        self.self_head = nn.Linear(embed_dim, 1)
        self.opponent_head = nn.Linear(embed_dim, 1)

    def branches(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.conv(x)
        return self.self_branch(h), self.opponent_branch(h)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        e_self, e_opp = self.branches(x)
        return self.self_head(e_self).squeeze(-1), self.opponent_head(e_opp).squeeze(-1)


@dataclass
class EncoderFit:
    encoder: TrajectoryEncoder
    train_losses: List[float]
    holdout_loss: Optional[float] = None
    holdout_mae_self: Optional[float] = None
    constant_baseline_loss: Optional[float] = None


def _build_module(factory, seed: int, component: str) -> nn.Module:
    # Parameter init draws from torch's global generator; fork it so runs stay isolated.
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_int(seed, component))
        return factory()


def _weighted_loss(pred: Tuple[torch.Tensor, torch.Tensor], target: torch.Tensor, a: float, b: float) -> torch.Tensor:
    return a * F.mse_loss(pred[0], target[:, 0]) + b * F.mse_loss(pred[1], target[:, 1])


def train_encoder(samples: Sequence[TransitionSample], weight_self: float = 1.0, weight_opponent: float = 1.0,
                  lr: float = 3e-3, epochs: int = 20, seed: int = 0, embed_dim: int = 100,
                  batch_size: int = 128, holdout: float = 0.1) -> EncoderFit:
    windows, rewards = samples_to_arrays(samples)
    if len({tuple(r) for r in rewards}) < 2:
        raise DegenerateInputError('Encoder training needs at least two reward classes')

    order = derive_rng(seed, 'encoder-split').permutation(len(windows))
    n_hold = int(round(len(windows) * holdout))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    x = torch.from_numpy(windows)
    y = torch.from_numpy(rewards.astype(np.float32))
    x_train, y_train = x[train_idx], y[train_idx]

    _, c, h, w = windows.shape
    encoder = _build_module(lambda: TrajectoryEncoder(c, h, w, embed_dim), seed, 'encoder-init')
    optimizer = torch.optim.Adam(encoder.parameters(), lr=lr)
    generator = torch_generator(seed, 'encoder-batches')

    losses: List[float] = []
    last_good = {k: v.detach().clone() for k, v in encoder.state_dict().items()}
    logging.info(f'🚀 Training encoder on {len(train_idx)} samples ({n_hold} held out)')
    for epoch in range(epochs):
        encoder.train()
        perm = torch.randperm(len(x_train), generator=generator)
        total = 0.0
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            optimizer.zero_grad()
            loss = _weighted_loss(encoder(x_train[idx]), y_train[idx], weight_self, weight_opponent)
            if not torch.isfinite(loss):
                encoder.load_state_dict(last_good)
                logging.error(f'❌ Encoder loss diverged at epoch {epoch}')
                raise NumericalError(f'Encoder loss became non-finite at epoch {epoch}',
                                     snapshot={'epoch': epoch, 'losses': losses,
                                               'last_good_weights': module_to_weights(encoder, 'encoder')})
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
        losses.append(total / len(x_train))
        last_good = {k: v.detach().clone() for k, v in encoder.state_dict().items()}
        logging.debug(f'🔍 Encoder epoch {epoch + 1}/{epochs}: loss {losses[-1]:.4f}')

    fit = EncoderFit(encoder, losses)
    if n_hold:
        encoder.eval()
        with torch.no_grad():
            pred = encoder(x[hold_idx])
            y_hold = y[hold_idx]
            fit.holdout_loss = float(_weighted_loss(pred, y_hold, weight_self, weight_opponent))
            fit.holdout_mae_self = float(torch.mean(torch.abs(pred[0] - y_hold[:, 0])))
            mean = y_train.mean(dim=0)
            constant = (mean[0].expand(n_hold), mean[1].expand(n_hold))
            fit.constant_baseline_loss = float(_weighted_loss(constant, y_hold, weight_self, weight_opponent))
    logging.info(f'✅ Encoder trained: final loss {losses[-1] if losses else float("nan"):.4f}, '
                 f'holdout {fit.holdout_loss}, constant baseline {fit.constant_baseline_loss}')
    return fit


def embed(encoder: TrajectoryEncoder, samples, mode: str = 'self', batch_size: int = 1024) -> np.ndarray:
    """
    Branch activations for one sample (1-D result) or a sequence of samples
    / window array (2-D result). `concat` joins both branches.
    """
    if mode not in EMBED_MODES:
        raise ConfigError(f'Unknown embedding mode "{mode}", expected one of {EMBED_MODES}')
    single = isinstance(samples, TransitionSample)
    if single:
        windows = samples.window[None].astype(np.float32)
    elif isinstance(samples, np.ndarray):
        windows = samples.astype(np.float32)
    else:
        windows, _ = samples_to_arrays(samples)
    encoder.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            e_self, e_opp = encoder.branches(torch.from_numpy(windows[start:start + batch_size]))
            if mode == 'self':
                chunks.append(e_self)
            elif mode == 'opponent':
                chunks.append(e_opp)
            else:
                chunks.append(torch.cat([e_self, e_opp], dim=1))
    out = torch.cat(chunks).numpy().astype(float)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

@dataclass
class ClusterModel:
    assignments: np.ndarray
    method: str
    k: int
    centroids: np.ndarray
    linkage: Optional[np.ndarray] = None

    def sizes(self) -> List[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()


def cluster(embeddings: np.ndarray, k: int = 2, method: str = 'ward', seed: int = 0) -> ClusterModel:
    """Ward-linkage agglomerative clustering by default; K-Means as the alternative."""
    x = np.asarray(embeddings, dtype=float)
    if method not in CLUSTER_METHODS:
        raise ConfigError(f'Unknown cluster method "{method}", expected one of {CLUSTER_METHODS}')
    if x.ndim != 2 or len(np.unique(x, axis=0)) < k:
        raise DegenerateInputError(f'Need at least {k} distinct points to form {k} clusters')
    if not np.all(np.isfinite(x)):
        raise NumericalError('Non-finite embedding passed to clustering')

    linkage = None
    if method == 'ward':
        model = AgglomerativeClustering(n_clusters=k, linkage='ward')
        labels = model.fit_predict(x)
        linkage = model.children_
    else:
        model = KMeans(n_clusters=k, n_init=10, random_state=derive_int(seed, 'kmeans') % (2 ** 31))
        labels = model.fit_predict(x)
    labels = np.asarray(labels, dtype=int)
    centroids = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
    logging.info(f'📊 {method} clustering: sizes {np.bincount(labels, minlength=k).tolist()}')
    return ClusterModel(labels, method, k, centroids, linkage)


def purity(assignments: np.ndarray, truth: np.ndarray) -> float:
    """Share of points whose cluster's majority truth label matches their own."""
    assignments = np.asarray(assignments)
    truth = np.asarray(truth)
    if len(assignments) == 0:
        raise DegenerateInputError('purity of an empty partition')
    agree = 0
    for j in np.unique(assignments):
        agree += Counter(truth[assignments == j].tolist()).most_common(1)[0][1]
    return agree / len(assignments)


def defection_truth(samples: Sequence[TransitionSample]) -> np.ndarray:
    """
    Ground-truth split by opponent reward: negative where any sample is
    negative (Coin Game), otherwise below the best opponent outcome (Stag Hunt).
    """
    opponent = np.array([s.reward_tuple[1] for s in samples], dtype=float)
    threshold = 0.0 if np.any(opponent < 0) else opponent.max()
    return (opponent < threshold).astype(int)


@dataclass
class ClusterLabels:
    cooperation: int
    defection: int
    mean_opponent_reward: List[float]
    tie: bool = False


def label_clusters(model: ClusterModel, samples: Sequence[TransitionSample]) -> ClusterLabels:
    if model.k != 2:
        raise ConfigError(f'label_clusters expects 2 clusters, got {model.k}')
    opponent = np.array([s.reward_tuple[1] for s in samples], dtype=float)
    means = [float(opponent[model.assignments == j].mean()) if np.any(model.assignments == j) else float('nan')
             for j in range(2)]
    tie = means[0] == means[1]
    if tie:
        logging.warning(f'⚠️ Clusters have equal mean opponent reward {means[0]:.3f}; labelling cluster 0 cooperation')
    cooperation = 0 if tie or means[0] > means[1] else 1
    return ClusterLabels(cooperation, 1 - cooperation, means, tie)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def agent_cell(observation: np.ndarray, channel: int = 0) -> Tuple[int, int]:
    cells = np.argwhere(observation[channel] > 0.5)
    if len(cells) != 1:
        raise AmbiguousTransitionError(f'Expected one agent in channel {channel}, found {len(cells)}')
    return int(cells[0][0]), int(cells[0][1])


def deduce_move(s_prev: np.ndarray, s_next: np.ndarray, walls: Optional[np.ndarray] = None) -> Move:
    """
    The own-agent move explaining s_prev -> s_next (channel 0 of both
    observations). Moves off the grid or into a wall leave the agent in
    place, so a stationary agent in a corner is ambiguous.
    """
    (r, c), target = agent_cell(s_prev), agent_cell(s_next)
    h, w = s_prev.shape[-2:]
    candidates = []
    for move in Move:
        nr, nc = r + MOVE_DELTAS[move][0], c + MOVE_DELTAS[move][1]
        if not (0 <= nr < h and 0 <= nc < w) or (walls is not None and walls[nr, nc]):
            nr, nc = r, c
        if (nr, nc) == target:
            candidates.append(move)
    if len(candidates) != 1:
        raise AmbiguousTransitionError(f'{len(candidates)} moves explain {(r, c)} -> {target}')
    return candidates[0]


class Oracle(nn.Module):
    """2x2 convs (128, 128, 64 maps, right/bottom zero padding keeps the grid size), dense 128, action logits."""

    def __init__(self, in_channels: int, height: int, width: int, n_actions: int,
                 feature_maps: Sequence[int] = (128, 128, 64), hidden: int = 128):
        super().__init__()
        self.architecture = {'in_channels': in_channels, 'height': height, 'width': width,
                             'n_actions': n_actions, 'feature_maps': list(feature_maps), 'hidden': hidden}
        layers: List[nn.Module] = []
        channels = in_channels
        for maps in feature_maps:
            layers += [nn.ZeroPad2d((0, 1, 0, 1)), nn.Conv2d(channels, maps, kernel_size=2), nn.ReLU()]
            channels = maps
        self.features = nn.Sequential(*layers, nn.Flatten())
        self.dense = nn.Sequential(nn.Linear(channels * height * width, hidden), nn.ReLU())
        self.head = nn.Linear(hidden, n_actions)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.dense(self.features(x)))

    def action_probs(self, observations: np.ndarray) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            logits = self(torch.from_numpy(np.asarray(observations, dtype=np.float32)))
        return torch.softmax(logits, dim=-1).numpy().astype(float)

    def greedy(self, observations: np.ndarray) -> np.ndarray:
        """argmax over logits per observation; ties go to the lowest action index."""
        self.eval()
        with torch.no_grad():
            logits = self(torch.from_numpy(np.asarray(observations, dtype=np.float32))).numpy()
        return np.argmax(logits, axis=-1)


@dataclass
class OracleFit:
    oracle: Oracle
    losses: List[float]
    n_pairs: int
    n_ambiguous: int
    accuracy: float


def move_pairs(samples: Sequence[TransitionSample], walls: Optional[np.ndarray] = None
               ) -> Tuple[np.ndarray, np.ndarray, int]:
    """(observation, deduced move) pairs from consecutive frames of every window, plus the skipped count."""
    states, actions, skipped = [], [], 0
    for sample in samples:
        frames = sample.frames()
        for prev, nxt in zip(frames[:-1], frames[1:]):
            try:
                actions.append(int(deduce_move(prev, nxt, walls)))
            except AmbiguousTransitionError:
                skipped += 1
                continue
            states.append(prev)
    if not states:
        return np.zeros((0,)), np.zeros((0,), dtype=int), skipped
    return np.stack(states).astype(np.float32), np.array(actions, dtype=int), skipped


def train_oracle(samples: Sequence[TransitionSample], n_actions: int, walls: Optional[np.ndarray] = None,
                 optimizer: str = 'adam', lr: Optional[float] = None, l2: float = 1e-4, epochs: int = 30,
                 seed: int = 0, batch_size: int = 64) -> OracleFit:
    """
    Cross-entropy behaviour cloning plus an L2 penalty. Adam defaults to
    lr 1e-3, SGD to lr 0.01.
    """
    if optimizer not in ORACLE_OPTIMIZERS:
        raise ConfigError(f'Unknown oracle optimizer "{optimizer}", expected one of {ORACLE_OPTIMIZERS}')
    if not samples:
        raise DegenerateInputError('Cannot train an oracle on an empty cluster')
    states, actions, skipped = move_pairs(samples, walls)
    if len(states) == 0:
        raise DegenerateInputError(f'No deducible moves in cluster ({skipped} ambiguous transitions)')
    if skipped:
        logging.info(f'⚠️ Skipped {skipped} ambiguous transitions while building oracle data')

    _, c, h, w = states.shape
    oracle = _build_module(lambda: Oracle(c, h, w, n_actions), seed, 'oracle-init')
    if optimizer == 'adam':
        opt = torch.optim.Adam(oracle.parameters(), lr=lr or 1e-3)
    else:
        opt = torch.optim.SGD(oracle.parameters(), lr=lr or 0.01)
    generator = torch_generator(seed, 'oracle-batches')
    x = torch.from_numpy(states)
    y = torch.from_numpy(actions)

    losses: List[float] = []
    for epoch in range(epochs):
        oracle.train()
        perm = torch.randperm(len(x), generator=generator)
        total = 0.0
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(oracle(x[idx]), y[idx])
            if l2:
                loss = loss + l2 * sum(torch.sum(p ** 2) for p in oracle.parameters())
            if not torch.isfinite(loss):
                raise NumericalError(f'Oracle loss became non-finite at epoch {epoch}', snapshot={'losses': losses})
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        losses.append(total / len(x))

    accuracy = float(np.mean(oracle.greedy(states) == actions))
    logging.info(f'✅ Oracle trained on {len(states)} moves: loss {losses[-1] if losses else float("nan"):.4f}, '
                 f'train accuracy {accuracy:.3f}')
    return OracleFit(oracle, losses, len(states), skipped, accuracy)


def module_to_weights(module: nn.Module, kind: str, metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    params = {name: tensor.detach().cpu().numpy().astype(float) for name, tensor in module.state_dict().items()}
    return {'kind': kind, 'architecture': dict(module.architecture), 'metadata': metadata or {}, 'params': params}


def module_from_weights(document: Dict[str, Any]) -> nn.Module:
    kind = document.get('kind')
    arch = document['architecture']
    if kind == 'encoder':
        module: nn.Module = TrajectoryEncoder(arch['in_channels'], arch['height'], arch['width'],
                                              arch['embed_dim'], arch['feature_maps'])
    elif kind == 'oracle':
        module = Oracle(arch['in_channels'], arch['height'], arch['width'], arch['n_actions'],
                        arch['feature_maps'], arch['hidden'])
    else:
        raise ConfigError(f'Unknown network kind "{kind}" in weight document')
    state = {name: torch.from_numpy(np.asarray(value, dtype=np.float32)) for name, value in document['params'].items()}
    module.load_state_dict(state)
    module.eval()
    return module


# ---------------------------------------------------------------------------
# Meta-game
# ---------------------------------------------------------------------------

@dataclass
class OraclePair:
    cooperation: Oracle
    defection: Oracle

    def moves(self, observations: np.ndarray) -> np.ndarray:
        """(B, 2) greedy moves: column 0 cooperation, column 1 defection."""
        return np.stack([self.cooperation.greedy(observations), self.defection.greedy(observations)], axis=1)


@dataclass
class MetaGameAdapter:
    """
    Per-agent oracle pairs plus the current meta-state of every episode in
    the batch. With `observability='reveal'` both meta-policies see the true
    joint oracle choice; with 'infer' each agent reconstructs the opponent's
    choice by comparing its move with what its own oracles would do in the
    opponent's position.
    """

    oracles: List[OraclePair]
    observability: str = 'reveal'
    meta_states: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.observability not in OBSERVABILITY_MODES:
            raise ConfigError(f'Unknown observability "{self.observability}", expected one of {OBSERVABILITY_MODES}')
        if len(self.oracles) != 2:
            raise ConfigError(f'MetaGameAdapter needs one oracle pair per agent, got {len(self.oracles)}')

    def reset(self, batch_size: int) -> np.ndarray:
        self.meta_states = np.zeros((batch_size, 2), dtype=int)
        return self.meta_states


def _ego_joint(own: np.ndarray, other: np.ndarray) -> np.ndarray:
    return 1 + 2 * own + other


def meta_step(adapter: MetaGameAdapter, meta_actions: np.ndarray, env: VecEnv,
              rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray, StepResult]:
    """
    Every agent plays the greedy move of the oracle it consults for one
    environment step. Returns the per-agent ego-centric meta-states (B, 2),
    raw environment rewards (B, 2) and the underlying step result.
    """
    meta_actions = np.broadcast_to(np.asarray(meta_actions, dtype=int), (env.batch_size, 2))
    rows = np.arange(env.batch_size)
    candidates = [adapter.oracles[i].moves(env.observe(i)) for i in range(2)]
    moves = np.stack([candidates[i][rows, meta_actions[:, i]] for i in range(2)], axis=1)

    if adapter.observability == 'reveal':
        seen = ego_states(_ego_joint(meta_actions[:, 0], meta_actions[:, 1]))
    else:
        inferred = np.zeros_like(meta_actions)
        for i in range(2):
            # agent i replays its own oracles from the opponent's viewpoint
            mirror = adapter.oracles[i].moves(env.observe(1 - i))
            opp_move = moves[:, 1 - i]
            inferred[:, i] = np.where(mirror[:, 0] == opp_move, CONSULT_COOPERATION, CONSULT_DEFECTION)
        seen = np.stack([_ego_joint(meta_actions[:, 0], inferred[:, 0]),
                         _ego_joint(meta_actions[:, 1], inferred[:, 1])], axis=1)

    result = env.step(moves, rng)
    adapter.meta_states = seen
    return seen.copy(), result.rewards, result


class MetaGameEnv(VecEnv):
    """
    Learner-facing wrapper: five ego-centric meta-states (Start + previous
    joint oracle choices) and two meta-actions, with raw grid rewards.
    """

    def __init__(self, grid_env: VecEnv, adapter: MetaGameAdapter):
        self.grid = grid_env
        self.adapter = adapter
        self.n_agents = 2
        self.n_actions = 2
        self.horizon = grid_env.horizon
        self.batch_size = grid_env.batch_size
        self.n_states = N_MATRIX_STATES
        self.feature_dim = N_MATRIX_STATES
        self.state_labels = list(MATRIX_STATE_LABELS)
        self.cooperate_action = CONSULT_COOPERATION

    def reset(self, rng: Optional[np.random.Generator] = None) -> StepResult:
        self.grid.reset(rng)
        states = self.adapter.reset(self.batch_size)
        return StepResult(obs=one_hot(states, N_MATRIX_STATES), rewards=np.zeros((self.batch_size, 2)), states=states)

    def step(self, actions: np.ndarray, rng: Optional[np.random.Generator] = None) -> StepResult:
        states, rewards, inner = meta_step(self.adapter, actions, self.grid, rng)
        return StepResult(obs=one_hot(states, N_MATRIX_STATES), rewards=rewards, states=states, info=inner.info)


def make_meta_env(game: str, oracles: List[OraclePair], horizon: Optional[int] = None, batch_size: int = 1,
                  observability: str = 'reveal') -> MetaGameEnv:
    return MetaGameEnv(make_grid_env(game, horizon, batch_size), MetaGameAdapter(oracles, observability))


def estimate_meta_payoff(env: MetaGameEnv, rng: np.random.Generator, episodes: int = 1) -> PayoffMatrix:
    """
    Monte-Carlo payoff table of the reduced game: mean per-step rewards when
    both agents hold a fixed pair of meta-actions for whole episodes.
    """
    table = np.zeros((2, 2, 2))
    for a1 in range(2):
        for a2 in range(2):
            total = np.zeros(2)
            for _ in range(episodes):
                env.reset(rng)
                for _ in range(env.horizon):
                    total += env.step(np.array([a1, a2]), rng).rewards.mean(axis=0)
            table[a1, a2] = total / (episodes * env.horizon)
    labels = (('coop-oracle', 'defect-oracle'), ('coop-oracle', 'defect-oracle'))
    return PayoffMatrix(f'meta-{getattr(env.grid, "name", "grid")}', labels, table)


def classify_meta_payoff(payoff: PayoffMatrix) -> Dict[str, Any]:
    """Dilemma flags of the reduced game, row player, cooperation oracle as C."""
    return asdict(classify_dilemma(*payoff.dilemma_entries()))


def solo_oracle_stats(env: VecEnv, oracle: Oracle, rng: np.random.Generator, episodes: int = 1,
                      agent: int = 0) -> Dict[str, float]:
    """
    `agent` follows the oracle greedily while the other agent moves
    uniformly at random. Coin Game: own/other-color pick rates. Stag Hunt:
    share of episodes where the agent reaches each target first.
    """
    name = getattr(env, 'name', None)
    own = other = 0
    first = np.zeros(3)
    for _ in range(episodes):
        env.reset(rng)
        reached = np.full(env.batch_size, -1)
        for _ in range(env.horizon):
            actions = rng.integers(0, env.n_actions, size=(env.batch_size, 2))
            actions[:, agent] = oracle.greedy(env.observe(agent))
            result = env.step(actions, rng)
            if name == 'coin':
                events = result.info['pick_events'][:, agent]
                own += int(np.sum(events == 1))
                other += int(np.sum(events == 2))
            elif name == 'staghunt':
                pos = env.agent_positions(agent)
                on_joint = np.all(pos == np.array(env.layout.stag_pos), axis=1)
                on_solo = np.all(pos == np.array(env.layout.hare_pos), axis=1)
                reached = np.where((reached < 0) & on_joint, 0, reached)
                reached = np.where((reached < 0) & on_solo, 1, reached)
        if name == 'staghunt':
            first += [np.sum(reached == 0), np.sum(reached == 1), np.sum(reached < 0)]
    if name == 'coin':
        picks = own + other
        return {'own_pick_rate': own / picks if picks else float('nan'),
                'other_pick_rate': other / picks if picks else float('nan'),
                'picks_per_episode': picks / (episodes * env.batch_size)}
    if name == 'staghunt':
        n = episodes * env.batch_size
        return {'joint_target_first': first[0] / n, 'solo_target_first': first[1] / n, 'no_target': first[2] / n}
    raise ConfigError(f'solo_oracle_stats supports coin and staghunt, got {name}')


# ---------------------------------------------------------------------------
# Per-agent pipeline
# ---------------------------------------------------------------------------

@dataclass
class DistillResult:
    agent: int
    samples: List[TransitionSample]
    encoder_fit: EncoderFit
    embeddings: np.ndarray
    clusters: ClusterModel
    labels: ClusterLabels
    cooperation_fit: OracleFit
    defection_fit: OracleFit
    purity: float
    class_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def oracles(self) -> OraclePair:
        return OraclePair(self.cooperation_fit.oracle, self.defection_fit.oracle)

    def report(self) -> Dict[str, Any]:
        return {
            'agent': self.agent,
            'n_samples': len(self.samples),
            'class_counts': self.class_counts,
            'cluster_sizes': self.clusters.sizes(),
            'cluster_method': self.clusters.method,
            'mean_opponent_reward': self.labels.mean_opponent_reward,
            'cooperation_cluster': self.labels.cooperation,
            'label_tie': self.labels.tie,
            'purity': self.purity,
            'encoder_final_loss': self.encoder_fit.train_losses[-1] if self.encoder_fit.train_losses else None,
            'encoder_holdout_loss': self.encoder_fit.holdout_loss,
            'encoder_holdout_mae_self': self.encoder_fit.holdout_mae_self,
            'constant_baseline_loss': self.encoder_fit.constant_baseline_loss,
            'oracle_pairs': {'cooperation': self.cooperation_fit.n_pairs, 'defection': self.defection_fit.n_pairs},
            'oracle_skipped': {'cooperation': self.cooperation_fit.n_ambiguous,
                               'defection': self.defection_fit.n_ambiguous},
            'oracle_accuracy': {'cooperation': self.cooperation_fit.accuracy,
                                'defection': self.defection_fit.accuracy},
        }


def distill_agent(game: str, agent: int, cfg: DistillConfig, seed: int,
                  samples: Optional[List[TransitionSample]] = None) -> DistillResult:
    env = make_grid_env(game, batch_size=cfg.collect_batch)
    if samples is None:
        samples = collect_data(env, derive_rng(seed, f'collect-{agent}'), agent, cfg.min_samples,
                               cfg.look_back, cfg.max_steps)
    fit = train_encoder(samples, cfg.weight_self, cfg.weight_opponent, cfg.encoder_lr, cfg.encoder_epochs,
                        derive_int(seed, f'encoder-{agent}'), cfg.embed_dim, holdout=cfg.holdout)
    embeddings = embed(fit.encoder, samples, cfg.embed_mode)
    clusters = cluster(embeddings, 2, cfg.cluster_method, seed)
    labels = label_clusters(clusters, samples)
    score = purity(clusters.assignments, defection_truth(samples))

    walls = getattr(env, 'layout', None)
    walls = None if walls is None else walls.walls
    fits = {}
    for role, index in (('cooperation', labels.cooperation), ('defection', labels.defection)):
        members = [s for s, j in zip(samples, clusters.assignments) if j == index]
        logging.info(f'🚀 Distilling {role} oracle for agent {agent} from {len(members)} samples')
        fits[role] = train_oracle(members, env.n_actions, walls, cfg.oracle_optimizer, cfg.oracle_lr, cfg.oracle_l2,
                                  cfg.oracle_epochs, derive_int(seed, f'oracle-{role}-{agent}'))

    counts = Counter(str(s.reward_tuple) for s in samples)
    return DistillResult(agent, samples, fit, embeddings, clusters, labels, fits['cooperation'], fits['defection'],
                         score, dict(sorted(counts.items())))


def distill_config_dict(cfg: DistillConfig) -> Dict[str, Any]:
    return asdict(cfg)
