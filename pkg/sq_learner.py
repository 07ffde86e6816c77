import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, NumericalError, UndefinedIndexError
from game_envs import VecEnv, builtin_payoff, PayoffMatrix, N_MATRIX_STATES, MatrixState, one_hot
from metrics import batch_ndr, p_cooperation, p_own_coin, state_visit_frequencies
from policy_engine import FixedPolicy, GradientVector, LayeredNet, Policy, TabularSoftmax, ValueBaseline
from seeding import derive_rng

"""
Selfish and status-quo policy-gradient learners
===============================================

Time is 0-indexed: an episode of horizon T has steps t = 0..T-1 and s_0 is the
Start state. The standard REINFORCE term sums every step; the status-quo
correction starts at t = 1 because it needs the previous action u_{t-1}.

Update (per agent, per epoch):

    theta <- theta + delta_actor * (alpha * g_std + beta * g_sq)

with

    g_std = mean_b sum_t   grad log pi(u_t     | s_t) * gamma^t * (R_t     - b(s_t))
    g_sq  = mean_b sum_t>0 grad log pi(u_{t-1} | s_t) * gamma^t * (Rhat_t  - b(s_t))
    Rhat_t = (1 - gamma^k) / (1 - gamma) * r_{t-1} + gamma^k * R_t,  k ~ U{1..z}

beta = 0 is the Selfish Learner. Gradient estimates are batch means.
"""

LEARNER_KINDS = ('sl', 'sql', 'fixed-c', 'fixed-d')


@dataclass
class LearnerConfig:
    gamma: float = 0.96
    actor_lr: float = 0.005
    critic_lr: float = 1.0
    alpha: float = 1.0
    beta: float = 0.5
    z: int = 10
    horizon: int = 200
    batch: int = 200
    epochs: int = 1000
    use_baseline: bool = True
    init: str = 'zeros'
    hidden: Tuple[int, ...] = (64,)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f'gamma must lie in [0, 1), got {self.gamma}')
        if int(self.z) != self.z or self.z < 1:
            raise ConfigError(f'z must be an integer >= 1, got {self.z}')
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f'alpha and beta must be non-negative, got {self.alpha}, {self.beta}')
        for name in ('horizon', 'batch', 'epochs'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be >= 1, got {getattr(self, name)}')
        self.z = int(self.z)
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def for_game(cls, game: str, **overrides) -> 'LearnerConfig':
        """Published defaults: gamma 0.9 for Matching Pennies, 0.96 elsewhere."""
        defaults = {'gamma': 0.9} if game == 'imp' else {}
        if game in ('coin', 'staghunt'):
            defaults['horizon'] = 50
        defaults.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**defaults)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['hidden'] = list(self.hidden)
        return d


@dataclass
class Trajectory:
    """One episode: per-step features/states, own actions and own rewards."""

    features: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    states: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (len(self.features) == len(self.actions) == len(self.rewards)):
            raise ConfigError('Trajectory arrays must have aligned lengths')
        if not np.all(np.isfinite(self.rewards)):
            raise NumericalError('Trajectory holds non-finite rewards')


@dataclass
class TrajectoryBatch:
    """
    B episodes of one agent. Tabular environments keep only state indices and
    expand them to one-hot features on demand.
    """

    actions: np.ndarray
    rewards: np.ndarray
    states: Optional[np.ndarray] = None
    n_states: Optional[int] = None
    obs: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.actions.shape

    @property
    def features(self) -> np.ndarray:
        if self.obs is not None:
            return self.obs
        return one_hot(self.states, self.n_states)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> 'TrajectoryBatch':
        obs = np.stack([np.asarray(tr.features, dtype=float) for tr in trajectories])
        states = None
        if all(tr.states is not None for tr in trajectories):
            states = np.stack([np.asarray(tr.states, dtype=int) for tr in trajectories])
        return cls(
            actions=np.stack([np.asarray(tr.actions, dtype=int) for tr in trajectories]),
            rewards=np.stack([np.asarray(tr.rewards, dtype=float) for tr in trajectories]),
            states=states,
            obs=obs,
        )


def _as_batch(batch: Union[TrajectoryBatch, Trajectory, Sequence[Trajectory]]) -> TrajectoryBatch:
    if isinstance(batch, TrajectoryBatch):
        return batch
    if isinstance(batch, Trajectory):
        return TrajectoryBatch.from_trajectories([batch])
    return TrajectoryBatch.from_trajectories(list(batch))


def discounted_returns(rewards: Union[Trajectory, np.ndarray, Sequence[float]], gamma: float) -> np.ndarray:
    """R_t = r_t + gamma * R_{t+1} along the last axis."""
    r = np.asarray(rewards.rewards if isinstance(rewards, Trajectory) else rewards, dtype=float)
    returns = np.zeros_like(r)
    running = np.zeros(r.shape[:-1])
    for t in range(r.shape[-1] - 1, -1, -1):
        running = r[..., t] + gamma * running
        returns[..., t] = running
    return returns


def sample_kappa(rng: np.random.Generator, z: int, size=None) -> Union[int, np.ndarray]:
    """kappa ~ U{1, ..., z}."""
    if z < 1:
        raise ConfigError(f'z must be >= 1, got {z}')
    draw = rng.integers(1, int(z) + 1, size=size)
    return int(draw) if size is None else draw


def status_quo_factor(kappa: Union[int, np.ndarray], gamma: float) -> np.ndarray:
    """(1 - gamma^k) / (1 - gamma): discounted sum of k repetitions of a unit reward."""
    return (1.0 - np.power(gamma, kappa)) / (1.0 - gamma)


def imagined_return(traj: Union[Trajectory, np.ndarray], t: int, kappa: int, gamma: float,
                    returns: Optional[np.ndarray] = None) -> float:
    """Return of holding the previous joint action for kappa steps before continuing as played."""
    rewards = np.asarray(traj.rewards if isinstance(traj, Trajectory) else traj, dtype=float)
    if t < 1:
        raise UndefinedIndexError('imagined_return is undefined at t = 0 (no previous action)')
    if t >= rewards.shape[-1]:
        raise UndefinedIndexError(f'imagined_return index {t} outside episode of length {rewards.shape[-1]}')
    if kappa < 1:
        raise ConfigError(f'kappa must be >= 1, got {kappa}')
    R = discounted_returns(rewards, gamma) if returns is None else returns
    return float(status_quo_factor(kappa, gamma) * rewards[t - 1] + gamma ** kappa * R[t])


def imagined_returns(rewards: np.ndarray, returns: np.ndarray, kappa: np.ndarray, gamma: float) -> np.ndarray:
    """Vectorised imagined returns for t >= 1; column 0 is left at zero."""
    out = np.zeros_like(returns)
    out[:, 1:] = status_quo_factor(kappa[:, 1:], gamma) * rewards[:, :-1] + np.power(gamma, kappa[:, 1:]) * returns[:, 1:]
    return out


def _baseline_values(baseline: Optional[ValueBaseline], features: np.ndarray) -> np.ndarray:
    if baseline is None:
        return np.zeros(features.shape[:-1])
    return baseline.value(features)


def _check_finite(vector: np.ndarray, what: str, context: Optional[Dict[str, Any]] = None) -> np.ndarray:
    if not np.all(np.isfinite(vector)):
        raise NumericalError(f'Non-finite {what}', snapshot=dict(context or {}))
    return vector


def reinforce_grad(batch, policy: Policy, baseline: Optional[ValueBaseline], gamma: float,
                   context: Optional[Dict[str, Any]] = None) -> GradientVector:
    batch = _as_batch(batch)
    B, T = batch.shape
    features = batch.features
    R = discounted_returns(batch.rewards, gamma)
    advantage = R - _baseline_values(baseline, features)
    weights = (gamma ** np.arange(T))[None, :] * advantage / B
    _check_finite(weights, 'advantage in standard policy gradient', context)
    grad = policy.weighted_log_prob_grad(features.reshape(B * T, -1), batch.actions.ravel(), weights.ravel())
    return _check_finite(grad, 'standard policy gradient', context)


def sq_correction(batch, policy: Policy, baseline: Optional[ValueBaseline], gamma: float, z: int,
                  rng: Optional[np.random.Generator] = None, kappa: Optional[Union[int, np.ndarray]] = None,
                  context: Optional[Dict[str, Any]] = None) -> GradientVector:
    """
    Status-quo correction. kappa is drawn independently for every
    (trajectory, step) unless a fixed value or array is supplied.
    """
    batch = _as_batch(batch)
    B, T = batch.shape
    if T < 2:
        return np.zeros_like(policy.get_flat())
    if kappa is None:
        if rng is None:
            raise ConfigError('sq_correction needs an rng when kappa is not fixed')
        kappa = sample_kappa(rng, z, size=(B, T))
    kappa = np.broadcast_to(np.asarray(kappa, dtype=int), (B, T))
    features = batch.features
    R = discounted_returns(batch.rewards, gamma)
    R_hat = imagined_returns(batch.rewards, R, kappa, gamma)
    advantage = R_hat - _baseline_values(baseline, features)
    weights = ((gamma ** np.arange(T))[None, :] * advantage)[:, 1:] / B
    _check_finite(weights, 'imagined advantage in status-quo correction', context)
    prev_actions = batch.actions[:, :-1]
    grad = policy.weighted_log_prob_grad(
        features[:, 1:].reshape(B * (T - 1), -1), prev_actions.ravel(), weights.ravel())
    return _check_finite(grad, 'status-quo correction', context)


def sql_update(policy: Policy, g_std: GradientVector, g_sq: GradientVector, cfg: LearnerConfig) -> Policy:
    theta = policy.get_flat()
    return policy.with_flat(theta + (cfg.alpha * g_std + cfg.beta * g_sq) * cfg.actor_lr)


@dataclass
class Agent:
    kind: str
    policy: Policy
    config: LearnerConfig
    baseline: Optional[ValueBaseline] = None

    @property
    def learns(self) -> bool:
        return self.kind in ('sl', 'sql')


def make_agent(kind: str, env: VecEnv, cfg: LearnerConfig, rng: Optional[np.random.Generator] = None) -> Agent:
    """
    `sl` is `cfg` with beta forced to 0; `fixed-c` / `fixed-d` always play
    action 0 / 1. Tabular policies when the environment has a finite state
    space, `LayeredNet` on raw features otherwise.
    """
    if kind not in LEARNER_KINDS:
        raise ConfigError(f'Unknown learner "{kind}", expected one of {LEARNER_KINDS}')
    if kind in ('fixed-c', 'fixed-d'):
        action = 0 if kind == 'fixed-c' else 1
        return Agent(kind, FixedPolicy(action, env.n_actions, env.feature_dim), cfg)
    if kind == 'sl':
        cfg = replace(cfg, beta=0.0)
    if env.n_states is not None:
        policy: Policy = TabularSoftmax.initialise(env.n_states, env.n_actions, cfg.init, rng)
    else:
        policy = LayeredNet.initialise([env.feature_dim, *cfg.hidden, env.n_actions], rng or np.random.default_rng())
    baseline = ValueBaseline(env.feature_dim, cfg.critic_lr) if cfg.use_baseline else None
    return Agent(kind, policy, cfg, baseline)


@dataclass
class Rollout:
    batches: List[TrajectoryBatch]
    pick_events: Optional[np.ndarray] = None


def rollout(env: VecEnv, agents: Sequence[Agent], rng: np.random.Generator) -> Rollout:
    """Play one batch of full episodes under the agents' current policies."""
    B, T, n = env.batch_size, env.horizon, env.n_agents
    actions = np.zeros((n, B, T), dtype=int)
    rewards = np.zeros((n, B, T))
    tabular = env.n_states is not None
    states = np.zeros((n, B, T), dtype=int) if tabular else None
    obs = None if tabular else np.zeros((n, B, T, env.feature_dim))
    events = []

    result = env.reset(rng)
    for t in range(T):
        joint = np.zeros((B, n), dtype=int)
        for i, agent in enumerate(agents):
            joint[:, i] = agent.policy.sample_action(result.obs[:, i], rng)
            if tabular:
                states[i, :, t] = result.states[:, i]
            else:
                obs[i, :, t] = result.obs[:, i]
        actions[:, :, t] = joint.T
        result = env.step(joint, rng)
        rewards[:, :, t] = result.rewards.T
        if 'pick_events' in result.info:
            events.append(result.info['pick_events'])

    batches = [
        TrajectoryBatch(actions=actions[i], rewards=rewards[i],
                        states=None if states is None else states[i],
                        n_states=env.n_states, obs=None if obs is None else obs[i])
        for i in range(n)
    ]
    return Rollout(batches, np.stack(events, axis=-1) if events else None)


@dataclass
class EpochRecord:
    epoch: int
    agent: int
    metrics: Dict[str, float]


@dataclass
class TrainingHistory:
    seed: int
    config: Dict[str, Any]
    records: List[EpochRecord] = field(default_factory=list)
    agents: List[Agent] = field(default_factory=list)

    def to_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for rec in self.records:
            for metric, value in rec.metrics.items():
                rows.append({'epoch': rec.epoch, 'seed': self.seed, 'agent': rec.agent, 'metric': metric, 'value': value})
        return rows

    def series(self, agent: int, metric: str) -> Tuple[np.ndarray, np.ndarray]:
        pairs = [(r.epoch, r.metrics[metric]) for r in self.records if r.agent == agent and metric in r.metrics]
        if not pairs:
            return np.zeros(0, dtype=int), np.zeros(0)
        epochs, values = zip(*pairs)
        return np.asarray(epochs), np.asarray(values, dtype=float)

    def metric_names(self) -> List[str]:
        names = []
        for rec in self.records:
            for m in rec.metrics:
                if m not in names:
                    names.append(m)
        return names


def epoch_metrics(env: VecEnv, agent: Agent, index: int, batch: TrajectoryBatch,
                  pick_events: Optional[np.ndarray]) -> Dict[str, float]:
    metrics = {'ndr': batch_ndr(batch.rewards, agent.config.gamma)}
    if env.cooperate_action is not None:
        metrics['p_cooperation'] = p_cooperation(batch.actions, env.cooperate_action)
    if env.n_states is not None:
        labels = env.state_labels or [str(s) for s in range(env.n_states)]
        visits = state_visit_frequencies(batch.states, env.n_states)
        probs = agent.policy.action_probs(np.eye(env.n_states))[:, 0]
        for label, freq, p0 in zip(labels, visits, probs):
            metrics[f'visit:{label}'] = float(freq)
            metrics[f'pi0:{label}'] = float(p0)
    if pick_events is not None:
        own = p_own_coin(pick_events[:, index])
        if own is not None:
            metrics['p_own_coin'] = own
    return metrics


def train(env_factory: Callable[[int], VecEnv], agents: List[Agent], epochs: int, seed: int,
          log_every: int = 50, on_epoch: Optional[Callable[[int, List[Agent]], None]] = None) -> TrainingHistory:
    """
    Independent learning: every epoch rolls out one batch, then each learning
    agent updates its baseline and its policy from its own rewards only.
    Deterministic given `seed`.
    """
    if not agents:
        raise ConfigError('train needs at least one agent')
    batch_size = agents[0].config.batch
    env = env_factory(batch_size)
    if len(agents) != env.n_agents:
        raise ConfigError(f'Environment expects {env.n_agents} agents, got {len(agents)}')
    for agent in agents:
        if agent.learns and agent.config.horizon != env.horizon:
            logging.warning(f'⚠️ Learner horizon {agent.config.horizon} differs from environment horizon {env.horizon}')

    history = TrainingHistory(seed=seed, config={
        'agents': [a.kind for a in agents],
        'learner': [a.config.to_dict() for a in agents],
        'epochs': epochs,
    })
    logging.info(f'🚀 Training {[a.kind for a in agents]} for {epochs} epochs (seed {seed})')

    for epoch in range(epochs):
        played = rollout(env, agents, derive_rng(seed, 'rollout', epoch))
        for i, agent in enumerate(agents):
            batch = played.batches[i]
            if agent.learns:
                _update_agent(agent, batch, derive_rng(seed, f'kappa-{i}', epoch), epoch, i)
            history.records.append(EpochRecord(epoch, i, epoch_metrics(env, agent, i, batch, played.pick_events)))
        if on_epoch is not None:
            on_epoch(epoch, agents)
        if log_every and (epoch + 1) % log_every == 0:
            summary = ', '.join(f'a{r.agent} ndr={r.metrics["ndr"]:.3f}' for r in history.records[-len(agents):])
            logging.info(f'📈 Epoch {epoch + 1}/{epochs}: {summary}')

    history.agents = agents
    logging.info(f'✅ Training finished (seed {seed})')
    return history


def _update_agent(agent: Agent, batch: TrajectoryBatch, kappa_rng: np.random.Generator, epoch: int, index: int):
    cfg = agent.config
    B, T = batch.shape
    context = {'epoch': epoch, 'agent': index, 'last_good_params': agent.policy.get_flat().tolist()}
    features = batch.features
    if agent.baseline is not None:
        R = discounted_returns(batch.rewards, cfg.gamma)
        time_weights = np.broadcast_to(cfg.gamma ** np.arange(T), (B, T))
        agent.baseline.update(features.reshape(B * T, -1), R.ravel(), time_weights.ravel())
        _check_finite(agent.baseline.values, 'baseline values', context)

    zeros = np.zeros_like(agent.policy.get_flat())
    g_std = reinforce_grad(batch, agent.policy, agent.baseline, cfg.gamma, context) if cfg.alpha > 0 else zeros
    g_sq = sq_correction(batch, agent.policy, agent.baseline, cfg.gamma, cfg.z, kappa_rng,
                         context=context) if cfg.beta > 0 else zeros
    updated = sql_update(agent.policy, g_std, g_sq, cfg)
    if not np.all(np.isfinite(updated.get_flat())):
        logging.error(f'❌ Non-finite parameters for agent {index} at epoch {epoch}')
        raise NumericalError(f'Agent {index} parameters became non-finite at epoch {epoch}', snapshot=context)
    agent.policy = updated


@dataclass
class LemmaValues:
    q: np.ndarray
    v: np.ndarray

    def advantage_of_defection(self) -> np.ndarray:
        return self.q[:, 1] - self.q[:, 0]


def lemma_q_values(payoff: Union[PayoffMatrix, str], gamma: float) -> LemmaValues:
    """
    Exact row-player Q(a|s) and V(s) over the five matrix states when both
    agents play uniformly at random, from the linear system V = r + gamma * P V.
    """
    if isinstance(payoff, str):
        payoff = builtin_payoff(payoff)
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f'gamma must lie in [0, 1), got {gamma}')
    r = payoff.rewards[:, :, 0]
    n = N_MATRIX_STATES
    P = np.zeros((n, n))
    for u1 in range(2):
        for u2 in range(2):
            P[:, MatrixState.joint(u1, u2)] += 0.25
    v = np.linalg.solve(np.eye(n) - gamma * P, np.full(n, r.mean()))
    q = np.zeros((n, 2))
    for u1 in range(2):
        q[:, u1] = np.mean([r[u1, u2] + gamma * v[MatrixState.joint(u1, u2)] for u2 in range(2)])
    return LemmaValues(q, v)
