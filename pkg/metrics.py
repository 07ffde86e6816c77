from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from errors import AlignmentError, ConfigError, EmptyLogError
from grid_envs import PickEvent

"""
Quantitative measures: normalised discounted reward, cooperation and
coin-pick rates, cross-seed aggregation and convergence detection.
"""

# Lola-PG figures quoted from the literature for comparison rows in reports.
# They are not produced by this code base.
LOLA_PG_CITED = {
    'ipd_ndr': -1.2,
    'coin_own_coin_rate': 0.8,
}


@dataclass
class MetricSeries:
    name: str
    epochs: np.ndarray
    values: np.ndarray
    seed: int
    agent: int

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.epochs.shape != self.values.shape:
            raise AlignmentError(f'{self.name}: {len(self.epochs)} epochs for {len(self.values)} values')
        if len(self.epochs) > 1 and np.any(np.diff(self.epochs) <= 0):
            raise AlignmentError(f'{self.name}: epochs must be strictly increasing')
        if not np.all(np.isfinite(self.values)):
            raise ConfigError(f'{self.name}: series contains non-finite values')


@dataclass
class AggregateBand:
    name: str
    epochs: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_seeds: int


def discount_weights(length: int, gamma: float) -> np.ndarray:
    return gamma ** np.arange(length)


def ndr(rewards: Sequence[float], gamma: float) -> Union[float, np.ndarray]:
    """(1 - gamma) * sum_t gamma^t r_t; a (B, T) array gives one value per episode."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f'gamma must lie in [0, 1), got {gamma}')
    r = np.asarray(rewards, dtype=float)
    value = (1.0 - gamma) * (r * discount_weights(r.shape[-1], gamma)).sum(axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def batch_ndr(rewards: np.ndarray, gamma: float) -> float:
    """Mean NDR over a batch of episodes."""
    return float(np.mean(ndr(np.atleast_2d(rewards), gamma)))


def p_cooperation(actions: Union[np.ndarray, Sequence[np.ndarray]], cooperate_action: int = 0,
                  window: Optional[int] = None) -> float:
    """
    Fraction of cooperative actions. A list of per-epoch action arrays may be
    restricted to the last `window` epochs.
    """
    if isinstance(actions, (list, tuple)):
        chunks = list(actions)[-window:] if window else list(actions)
        flat = np.concatenate([np.ravel(a) for a in chunks]) if chunks else np.zeros(0)
    else:
        flat = np.ravel(actions)
    if flat.size == 0:
        raise EmptyLogError('Cannot compute P(cooperation) from an empty action log')
    return float(np.mean(flat == cooperate_action))


def p_own_coin(pick_events: Iterable[int]) -> Optional[float]:
    """Own-color share of an agent's picks; None when the agent picked nothing."""
    events = np.asarray(list(pick_events) if not isinstance(pick_events, np.ndarray) else pick_events).ravel()
    own = int(np.sum(events == PickEvent.OWN_COIN))
    other = int(np.sum(events == PickEvent.OTHER_COIN))
    if own + other == 0:
        return None
    return own / (own + other)


def state_visit_frequencies(states: np.ndarray, n_states: int) -> np.ndarray:
    counts = np.bincount(np.ravel(states).astype(int), minlength=n_states).astype(float)
    return counts / max(counts.sum(), 1.0)


def aggregate(series: List[MetricSeries]) -> AggregateBand:
    """Per-epoch mean and population standard deviation across seeds."""
    if not series:
        raise ConfigError('aggregate needs at least one series')
    epochs = series[0].epochs
    for s in series[1:]:
        if not np.array_equal(s.epochs, epochs):
            raise AlignmentError(f'{s.name}: seed {s.seed} epoch grid differs from seed {series[0].seed}')
    stacked = np.stack([s.values for s in series])
    return AggregateBand(series[0].name, epochs.copy(), stacked.mean(axis=0), stacked.std(axis=0), len(series))


def convergence_epoch(epochs: Sequence[int], values: Sequence[float], threshold: float,
                      sustain: int = 10, above: bool = True) -> Optional[int]:
    """First epoch from which `values` stays on the target side of `threshold` for `sustain` epochs."""
    values = np.asarray(values, dtype=float)
    epochs = np.asarray(epochs)
    hit = values >= threshold if above else values <= threshold
    run = 0
    for i, ok in enumerate(hit):
        run = run + 1 if ok else 0
        if run >= sustain:
            return int(epochs[i - sustain + 1])
    return None


def late_mean(values: Sequence[float], fraction: float = 0.1) -> float:
    """Mean over the final `fraction` of a series (at least one point)."""
    values = np.asarray(values, dtype=float)
    k = max(1, int(round(len(values) * fraction)))
    return float(values[-k:].mean())


def summarize_band(band: AggregateBand, fraction: float = 0.1) -> Dict[str, float]:
    return {
        'final_mean': late_mean(band.mean, fraction),
        'final_std': late_mean(band.std, fraction),
        'n_seeds': band.n_seeds,
    }
