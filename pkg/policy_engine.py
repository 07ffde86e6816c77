import logging
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from errors import ConfigError, DimensionError, NumericalError

"""
Policies, value baselines and gradient machinery
================================================

All policies map feature rows to a softmax distribution over actions and
expose the same small interface:

- action_probs(features)                      -> probabilities
- sample_action(features, rng)                -> action indices
- log_prob_grad(features, action)             -> flat gradient of log pi(a|s)
- weighted_log_prob_grad(X, actions, weights) -> sum_i w_i * grad log pi(a_i|x_i)
- get_flat() / with_flat(theta)               -> parameter vector round trip

`TabularSoftmax` reads one-hot state features, so `logits = x @ theta` is the
state's logit row. `LayeredNet` is a ReLU multilayer perceptron with manual
backpropagation, used for learners that see raw grid observations.
"""

GradientVector = np.ndarray

FD_STEP = 1e-5


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_rows(features: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.shape[-1] != dim:
        raise DimensionError(f'Expected feature dimension {dim}, got {x.shape[-1]}')
    return x


class Policy:
    n_actions: int
    feature_dim: int
    kind: str = 'policy'

    def logits(self, features: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def action_probs(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.logits(features))

    def sample_action(self, features: np.ndarray, rng: np.random.Generator) -> Union[int, np.ndarray]:
        probs = self.action_probs(features)
        if probs.ndim == 1:
            return int(np.searchsorted(np.cumsum(probs), rng.random(), side='right').clip(0, self.n_actions - 1))
        u = rng.random(probs.shape[0])
        actions = (np.cumsum(probs, axis=1) <= u[:, None]).sum(axis=1)
        return np.minimum(actions, self.n_actions - 1)

    def weighted_log_prob_grad(self, features: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> GradientVector:
        raise NotImplementedError

    def log_prob_grad(self, features: np.ndarray, action: int) -> GradientVector:
        x = np.atleast_2d(_as_rows(features, self.feature_dim))
        if not 0 <= int(action) < self.n_actions:
            raise DimensionError(f'Action {action} outside 0..{self.n_actions - 1}')
        return self.weighted_log_prob_grad(x, np.array([int(action)]), np.ones(1))

    def get_flat(self) -> np.ndarray:
        raise NotImplementedError

    def with_flat(self, theta: np.ndarray) -> 'Policy':
        raise NotImplementedError

    @property
    def learnable(self) -> bool:
        return self.get_flat().size > 0

    def to_weights(self) -> Dict[str, Any]:
        raise NotImplementedError


class TabularSoftmax(Policy):
    kind = 'tabular'

    def __init__(self, n_states: int, n_actions: int, theta: Optional[np.ndarray] = None):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.feature_dim = self.n_states
        if theta is None:
            theta = np.zeros((self.n_states, self.n_actions))
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_states, self.n_actions):
            raise DimensionError(f'Logit table must be {self.n_states}x{self.n_actions}, got {theta.shape}')
        self.theta = theta

    @classmethod
    def initialise(cls, n_states: int, n_actions: int, init: str = 'zeros',
                   rng: Optional[np.random.Generator] = None) -> 'TabularSoftmax':
        if init == 'zeros':
            return cls(n_states, n_actions)
        if init == 'gaussian':
            rng = rng if rng is not None else np.random.default_rng()
            return cls(n_states, n_actions, rng.normal(0.0, 0.1, size=(n_states, n_actions)))
        raise ConfigError(f'Unknown policy initialisation "{init}"')

    def logits(self, features: np.ndarray) -> np.ndarray:
        return _as_rows(features, self.feature_dim) @ self.theta

    def weighted_log_prob_grad(self, features, actions, weights) -> GradientVector:
        x = np.atleast_2d(_as_rows(features, self.feature_dim))
        actions = np.asarray(actions, dtype=int)
        score = np.eye(self.n_actions)[actions] - softmax(x @ self.theta)
        return (x.T @ (np.asarray(weights, dtype=float)[:, None] * score)).ravel()

    def table(self) -> np.ndarray:
        """pi(a|s) for every state, shape (n_states, n_actions)."""
        return softmax(self.theta)

    def get_flat(self) -> np.ndarray:
        return self.theta.ravel().copy()

    def with_flat(self, theta: np.ndarray) -> 'TabularSoftmax':
        return TabularSoftmax(self.n_states, self.n_actions, np.asarray(theta, dtype=float).reshape(self.theta.shape))

    def to_weights(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'architecture': {'n_states': self.n_states, 'n_actions': self.n_actions},
            'params': {'logits': self.theta},
        }


class LayeredNet(Policy):
    """ReLU hidden layers, softmax output; parameters flatten as [W0, b0, W1, b1, ...]."""

    kind = 'layered'

    def __init__(self, dims: Sequence[int], weights: Optional[List[np.ndarray]] = None,
                 biases: Optional[List[np.ndarray]] = None):
        if len(dims) < 2:
            raise ConfigError('LayeredNet needs at least input and output dimensions')
        self.dims = [int(d) for d in dims]
        self.feature_dim = self.dims[0]
        self.n_actions = self.dims[-1]
        if weights is None:
            weights = [np.zeros((i, o)) for i, o in zip(self.dims[:-1], self.dims[1:])]
        if biases is None:
            biases = [np.zeros(o) for o in self.dims[1:]]
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]

    @classmethod
    def initialise(cls, dims: Sequence[int], rng: np.random.Generator) -> 'LayeredNet':
        # He initialisation for the ReLU layers; the output layer starts at zero (uniform policy).
        weights, biases = [], []
        pairs = list(zip(dims[:-1], dims[1:]))
        for k, (i, o) in enumerate(pairs):
            if k == len(pairs) - 1:
                weights.append(np.zeros((i, o)))
            else:
                weights.append(rng.normal(0.0, np.sqrt(2.0 / i), size=(i, o)))
            biases.append(np.zeros(o))
        return cls(dims, weights, biases)

    def _forward(self, x: np.ndarray):
        activations = [x]
        h = x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            activations.append(h)
        return activations

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self._forward(_as_rows(features, self.feature_dim))[-1]

    def weighted_log_prob_grad(self, features, actions, weights) -> GradientVector:
        x = np.atleast_2d(_as_rows(features, self.feature_dim))
        activations = self._forward(x)
        probs = softmax(activations[-1])
        delta = np.asarray(weights, dtype=float)[:, None] * (np.eye(self.n_actions)[np.asarray(actions, dtype=int)] - probs)
        grads_w, grads_b = [], []
        for k in range(len(self.weights) - 1, -1, -1):
            grads_w.append(activations[k].T @ delta)
            grads_b.append(delta.sum(axis=0))
            if k > 0:
                delta = (delta @ self.weights[k].T) * (activations[k] > 0)
        grads_w.reverse()
        grads_b.reverse()
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)])

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_flat(self, theta: np.ndarray) -> 'LayeredNet':
        theta = np.asarray(theta, dtype=float)
        weights, biases, offset = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(theta[offset:offset + w.size].reshape(w.shape))
            offset += w.size
            biases.append(theta[offset:offset + b.size].copy())
            offset += b.size
        if offset != theta.size:
            raise DimensionError(f'Parameter vector has {theta.size} entries, network needs {offset}')
        return LayeredNet(self.dims, weights, biases)

    def to_weights(self) -> Dict[str, Any]:
        params = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f'W{k}'] = w
            params[f'b{k}'] = b
        return {'kind': self.kind, 'architecture': {'dims': self.dims}, 'params': params}


class FixedPolicy(Policy):
    """Always plays one action; has no parameters."""

    kind = 'fixed'

    def __init__(self, action: int, n_actions: int, feature_dim: int):
        self.action = int(action)
        self.n_actions = int(n_actions)
        self.feature_dim = int(feature_dim)

    def logits(self, features: np.ndarray) -> np.ndarray:
        x = _as_rows(features, self.feature_dim)
        out = np.full(x.shape[:-1] + (self.n_actions,), -np.inf)
        out[..., self.action] = 0.0
        return out

    def action_probs(self, features: np.ndarray) -> np.ndarray:
        x = _as_rows(features, self.feature_dim)
        probs = np.zeros(x.shape[:-1] + (self.n_actions,))
        probs[..., self.action] = 1.0
        return probs

    def weighted_log_prob_grad(self, features, actions, weights) -> GradientVector:
        return np.zeros(0)

    def get_flat(self) -> np.ndarray:
        return np.zeros(0)

    def with_flat(self, theta: np.ndarray) -> 'FixedPolicy':
        return self

    def to_weights(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'architecture': {'action': self.action, 'n_actions': self.n_actions,
                                                    'feature_dim': self.feature_dim}, 'params': {}}


def policy_from_weights(document: Dict[str, Any]) -> Policy:
    kind = document.get('kind')
    arch = document.get('architecture', {})
    params = {k: np.asarray(v) for k, v in document.get('params', {}).items()}
    if kind == 'tabular':
        return TabularSoftmax(arch['n_states'], arch['n_actions'], params['logits'])
    if kind == 'layered':
        n = len(arch['dims']) - 1
        return LayeredNet(arch['dims'], [params[f'W{k}'] for k in range(n)], [params[f'b{k}'] for k in range(n)])
    if kind == 'fixed':
        return FixedPolicy(arch['action'], arch['n_actions'], arch['feature_dim'])
    raise ConfigError(f'Unknown policy kind "{kind}" in weight document')


def action_probs(p: Policy, state_features: np.ndarray) -> np.ndarray:
    return p.action_probs(state_features)


def sample_action(p: Policy, state_features: np.ndarray, rng: np.random.Generator):
    return p.sample_action(state_features, rng)


def log_prob_grad(p: Policy, state_features: np.ndarray, action: int) -> GradientVector:
    return p.log_prob_grad(state_features, action)


class ValueBaseline:
    """
    Linear state-value estimate v(x) = x @ values.

    With one-hot state features this is a per-state table and `update` moves
    each visited state's value toward the weighted mean of its targets by a
    step of size `lr` (lr = 1 lands exactly on that mean). For dense features
    the same normalised least-mean-squares step is applied per feature.
    """

    def __init__(self, feature_dim: int, lr: float = 1.0, values: Optional[np.ndarray] = None):
        self.feature_dim = int(feature_dim)
        self.lr = float(lr)
        self.values = np.zeros(self.feature_dim) if values is None else np.asarray(values, dtype=float)

    def value(self, features: np.ndarray) -> np.ndarray:
        return _as_rows(features, self.feature_dim) @ self.values

    def update(self, features: np.ndarray, targets: np.ndarray, weights: Optional[np.ndarray] = None) -> 'ValueBaseline':
        x = np.atleast_2d(_as_rows(features, self.feature_dim))
        targets = np.atleast_1d(np.asarray(targets, dtype=float))
        if not np.all(np.isfinite(targets)):
            raise NumericalError('Non-finite baseline target')
        w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=float)
        error = targets - x @ self.values
        mass = x.T @ w
        active = np.maximum((x.sum(axis=1) * w).sum() / max(w.sum(), 1e-300), 1.0)
        step = np.where(mass > 0, (x.T @ (w * error)) / np.where(mass > 0, mass, 1.0), 0.0) / active
        self.values = self.values + self.lr * step
        return self

    def to_weights(self) -> Dict[str, Any]:
        return {'kind': 'baseline', 'architecture': {'feature_dim': self.feature_dim, 'lr': self.lr},
                'params': {'values': self.values}}

    @classmethod
    def from_weights(cls, document: Dict[str, Any]) -> 'ValueBaseline':
        arch = document['architecture']
        return cls(arch['feature_dim'], arch.get('lr', 1.0), np.asarray(document['params']['values']))


def baseline_update(b: ValueBaseline, state_features: np.ndarray, target_return: float) -> ValueBaseline:
    return b.update(state_features, np.array([target_return]))


def finite_diff_objective_grad(objective: Callable[[Any], float], p: Union[Policy, np.ndarray],
                               step: float = FD_STEP) -> GradientVector:
    """
    Central differences, one coordinate at a time. `p` is a policy (the
    objective receives perturbed copies) or a plain parameter vector.
    """
    is_policy = isinstance(p, Policy)
    theta = p.get_flat() if is_policy else np.asarray(p, dtype=float).ravel()
    grad = np.zeros_like(theta)

    def evaluate(vector: np.ndarray) -> float:
        value = float(objective(p.with_flat(vector) if is_policy else vector))
        if not np.isfinite(value):
            raise NumericalError('Objective is not finite at a perturbed parameter vector')
        return value

    for i in range(theta.size):
        plus = theta.copy()
        minus = theta.copy()
        plus[i] += step
        minus[i] -= step
        grad[i] = (evaluate(plus) - evaluate(minus)) / (2 * step)
    logging.debug(f'🔍 Finite-difference gradient over {theta.size} coordinates')
    return grad
