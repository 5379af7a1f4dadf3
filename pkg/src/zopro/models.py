"""Small tanh MLPs used as policy and reward networks.

Both networks keep their weights in one flat float64 vector so the
optimisers can treat them as points in R^d. Layout is layer-major: for each
layer the ``(in, out)`` weight matrix in row-major order, then its bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import Checkpoint, DimensionError, as_param_vector

ACTIVATION = "tanh"


def mlp_param_count(dims) -> int:
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


def layer_slices(dims) -> list[tuple[slice, slice]]:
    """(weight slice, bias slice) into the flat vector for every layer."""
    out = []
    pos = 0
    for i, o in zip(dims[:-1], dims[1:]):
        out.append((slice(pos, pos + i * o), slice(pos + i * o, pos + i * o + o)))
        pos += i * o + o
    return out


def layer_blocks(dims) -> list[np.ndarray]:
    """Index arrays partitioning the flat vector by layer (weights+bias)."""
    blocks = []
    for w, b in layer_slices(dims):
        blocks.append(np.arange(w.start, b.stop))
    return blocks


def init_mlp_params(dims, seed: int) -> np.ndarray:
    """Gaussian weights with variance 1/fan_in, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    parts = []
    for i, o in zip(dims[:-1], dims[1:]):
        parts.append(rng.standard_normal(i * o) / np.sqrt(i))
        parts.append(np.zeros(o))
    return np.concatenate(parts)


def _unpack(params: np.ndarray, dims):
    for (ws, bs), (i, o) in zip(layer_slices(dims), zip(dims[:-1], dims[1:])):
        yield params[ws].reshape(i, o), params[bs]


def mlp_forward(params: np.ndarray, dims, X: np.ndarray, keep: bool = False):
    """Forward pass on a batch ``X`` of shape (n, dims[0]).

    Returns the output matrix, plus the list of layer inputs when ``keep``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != dims[0]:
        raise DimensionError(f"expected inputs with {dims[0]} features, got shape {X.shape}")
    acts = [X]
    h = X
    layers = list(_unpack(params, dims))
    for idx, (W, b) in enumerate(layers):
        h = h @ W + b
        if idx < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    return (h, acts) if keep else h


def mlp_backward(params: np.ndarray, dims, acts, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(grad_out * output)`` w.r.t. the flat parameters."""
    grad = np.zeros_like(params)
    layers = list(_unpack(params, dims))
    slices = layer_slices(dims)
    g = grad_out
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        ws, bs = slices[idx]
        grad[ws] = (acts[idx].T @ g).ravel()
        grad[bs] = g.sum(axis=0)
        if idx > 0:
            # acts[idx] = tanh(pre-activation) for hidden layers
            g = (g @ W.T) * (1.0 - acts[idx] ** 2)
    return grad


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def inverse_cdf_sample(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Categorical draws by inverting the CDF row-wise.

    ``probs`` is (n, A); ``uniforms`` is (n,) or (n, k) in [0, 1).
    """
    cdf = np.cumsum(probs, axis=-1)
    u = np.asarray(uniforms)
    if u.ndim == 1:
        idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=-1)
    else:
        idx = (cdf[:, None, :] < u[:, :, None] * cdf[:, None, -1:]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass
class MlpPolicy:
    layer_dims: tuple[int, ...]
    params: np.ndarray
    activation: str = ACTIVATION

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise DimensionError(f"invalid layer dims {self.layer_dims}")
        self.params = as_param_vector(self.params, mlp_param_count(self.layer_dims))

    @classmethod
    def init(cls, layer_dims, seed: int) -> "MlpPolicy":
        return cls(tuple(layer_dims), init_mlp_params(layer_dims, seed))

    @property
    def dim(self) -> int:
        return self.params.size

    @property
    def n_actions(self) -> int:
        return self.layer_dims[-1]

    def with_params(self, params: np.ndarray) -> "MlpPolicy":
        return MlpPolicy(self.layer_dims, params, self.activation)

    def logits(self, X: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        p = self.params if params is None else params
        return mlp_forward(p, self.layer_dims, np.atleast_2d(X))

    def log_probs(self, X: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        return log_softmax(self.logits(X, params))

    def grad_log_prob(self, X: np.ndarray, actions, weights=None) -> np.ndarray:
        """Gradient of ``sum_i w_i log pi(a_i | x_i)`` for a batch."""
        X = np.atleast_2d(X)
        actions = np.atleast_1d(np.asarray(actions))
        if actions.shape[0] != X.shape[0]:
            raise DimensionError("one action per input row required")
        if np.any(actions < 0) or np.any(actions >= self.n_actions):
            raise ValueError("action index out of range")
        w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
        logits, acts = mlp_forward(self.params, self.layer_dims, X, keep=True)
        probs = softmax(logits)
        g_out = -probs * w[:, None]
        g_out[np.arange(X.shape[0]), actions] += w
        return mlp_backward(self.params, self.layer_dims, acts, g_out)

    def checkpoint(self, iteration: int = 0, seed: int = 0) -> Checkpoint:
        return Checkpoint(self.params, iteration, seed, (self.layer_dims, self.activation))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "MlpPolicy":
        if ckpt.arch is None:
            raise ValueError("checkpoint carries no architecture descriptor")
        dims, activation = ckpt.arch
        return cls(dims, ckpt.values.copy(), activation)


def policy_forward(policy: MlpPolicy, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("policy_forward takes a single feature vector")
    return policy.logits(x[None, :])[0]


def policy_sample(policy: MlpPolicy, features, rng_seed: int) -> int:
    u = np.random.Generator(np.random.PCG64(rng_seed)).random()
    probs = softmax(policy_forward(policy, features))
    return int(inverse_cdf_sample(probs[None, :], np.array([u]))[0])


def policy_grad(policy: MlpPolicy, features, response_index: int) -> np.ndarray:
    """Analytic gradient of log pi(response | features) w.r.t. the flat params."""
    x = np.asarray(features, dtype=np.float64)
    return policy.grad_log_prob(x[None, :], [int(response_index)])


@dataclass
class RewardModel:
    """Scalar scorer sharing the policy architecture as its trunk.

    The trunk maps prompt features to one value per response; the head keeps
    a readout weight per response and a shared bias, so
    ``score(x, a) = head[a] * trunk(x)[a] + head[-1]``. Masking the trunk output
    with the one-hot response is how the (prompt, response) pair enters.
    """

    trunk_dims: tuple[int, ...]
    trunk_params: np.ndarray
    head_params: np.ndarray = field(default=None)

    def __post_init__(self):
        self.trunk_dims = tuple(int(d) for d in self.trunk_dims)
        self.trunk_params = as_param_vector(self.trunk_params, mlp_param_count(self.trunk_dims))
        if self.head_params is None:
            self.head_params = np.concatenate([np.ones(self.n_actions), [0.0]])
        self.head_params = as_param_vector(self.head_params, self.n_actions + 1)

    @property
    def n_actions(self) -> int:
        return self.trunk_dims[-1]

    @property
    def trunk_dim(self) -> int:
        return self.trunk_params.size

    @property
    def head_dim(self) -> int:
        return self.head_params.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.trunk_params, self.head_params])

    def with_flat(self, phi: np.ndarray) -> "RewardModel":
        d = self.trunk_dim
        return RewardModel(self.trunk_dims, phi[:d].copy(), phi[d:].copy())

    def copy(self) -> "RewardModel":
        return RewardModel(self.trunk_dims, self.trunk_params.copy(), self.head_params.copy())

    def _check_actions(self, actions: np.ndarray) -> None:
        if np.any(actions < 0) or np.any(actions >= self.n_actions):
            raise ValueError(f"response index out of range [0, {self.n_actions})")

    def all_scores(self, X: np.ndarray) -> np.ndarray:
        """Scores of every response for every prompt, shape (n, A)."""
        out = mlp_forward(self.trunk_params, self.trunk_dims, np.atleast_2d(X))
        return out * self.head_params[:-1] + self.head_params[-1]

    def scores(self, X: np.ndarray, actions) -> np.ndarray:
        X = np.atleast_2d(X)
        actions = np.asarray(actions)
        self._check_actions(actions)
        return self.all_scores(X)[np.arange(X.shape[0]), actions]

    def grad_scores(self, X: np.ndarray, actions, weights) -> np.ndarray:
        """Gradient of ``sum_i w_i score(x_i, a_i)`` w.r.t. trunk+head."""
        X = np.atleast_2d(X)
        actions = np.asarray(actions)
        self._check_actions(actions)
        w = np.asarray(weights, dtype=np.float64)
        out, acts = mlp_forward(self.trunk_params, self.trunk_dims, X, keep=True)
        rows = np.arange(X.shape[0])
        g_out = np.zeros_like(out)
        g_out[rows, actions] = w * self.head_params[actions]
        g_trunk = mlp_backward(self.trunk_params, self.trunk_dims, acts, g_out)
        g_head = np.zeros_like(self.head_params)
        np.add.at(g_head, actions, w * out[rows, actions])
        g_head[-1] = w.sum()
        return np.concatenate([g_trunk, g_head])

    def checkpoint(self, iteration: int = 0, seed: int = 0) -> Checkpoint:
        return Checkpoint(self.flat(), iteration, seed, (self.trunk_dims, ACTIVATION),
                          {"trunk_dim": str(self.trunk_dim)})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "RewardModel":
        if ckpt.arch is None:
            raise ValueError("checkpoint carries no architecture descriptor")
        dims, _ = ckpt.arch
        d = mlp_param_count(dims)
        return cls(dims, ckpt.values[:d].copy(), ckpt.values[d:].copy())


def reward_score(rm: RewardModel, features, response_index: int) -> float:
    x = np.asarray(features, dtype=np.float64)
    return float(rm.scores(x[None, :], np.array([int(response_index)]))[0])
