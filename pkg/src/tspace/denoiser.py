"""MLP noise predictor with hand-written backpropagation and Adam.

All parameters live in one flat float64 vector laid out layer by layer as
``W`` (row-major, shape ``(fan_in, fan_out)``) followed by ``b``. The
per-layer ``weights``/``biases`` lists are views into that vector, so the
optimizer and the serializer both work on the flat array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidRangeError, ShapeError

ACTIVATIONS = ("relu", "silu")
DEFAULT_HIDDEN = (128, 128, 128)


def time_embed(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding interleaving ``sin(t/w_j), cos(t/w_j)``.

    The ``dim // 2`` frequencies ``w_j`` are geometrically spaced from 1 to
    ``T``. ``t`` may be a scalar (returns shape ``(dim,)``) or an array of
    shape ``(n,)`` (returns ``(n, dim)``).
    """
    if dim % 2 or dim < 0:
        raise InvalidRangeError(f"embedding dimension must be even and >= 0, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > T - 1):
        raise InvalidRangeError(f"timestep outside [0, {T - 1}]")
    half = dim // 2
    if half == 0:
        return np.zeros(t_arr.shape + (0,))
    if half == 1:
        omegas = np.ones(1)
    else:
        omegas = float(T) ** (np.arange(half) / (half - 1))
    phase = t_arr[..., None] / omegas
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def _layer_shapes(layer_sizes: Sequence[int]):
    return list(zip(layer_sizes[:-1], layer_sizes[1:]))


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum(i * o + o for i, o in _layer_shapes(layer_sizes))


class DenoiserModel:
    """Fully connected epsilon-predictor.

    Input features are ``[x_t, time_embed(t), one_hot(label)]``. With
    ``time_embed_dim = 0`` the model ignores ``t`` entirely, which is the
    single-state configuration used for disentangled training.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        *,
        activation: str = "silu",
        time_embed_dim: int = 64,
        label_dim: int = 0,
        T: int = 1000,
        init_seed: int = 0,
        data_dim: int = 2,
        params: np.ndarray | None = None,
        trained_taus: Sequence[int] | None = None,
    ):
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if activation not in ACTIVATIONS:
            raise InvalidRangeError(f"unknown activation {activation!r}")
        if time_embed_dim % 2 or time_embed_dim < 0:
            raise InvalidRangeError("time_embed_dim must be even and >= 0")
        if len(layer_sizes) < 2:
            raise ShapeError("need at least an input and an output layer")
        if layer_sizes[0] != data_dim + time_embed_dim + label_dim:
            raise ShapeError(
                f"input width {layer_sizes[0]} != data_dim + time_embed_dim + label_dim "
                f"= {data_dim + time_embed_dim + label_dim}"
            )
        if layer_sizes[-1] != data_dim:
            raise ShapeError(f"output width {layer_sizes[-1]} != data_dim {data_dim}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.time_embed_dim = int(time_embed_dim)
        self.label_dim = int(label_dim)
        self.T = int(T)
        self.init_seed = int(init_seed)
        self.data_dim = int(data_dim)
        self.trained_taus = None if trained_taus is None else tuple(int(t) for t in trained_taus)
        n = param_count(layer_sizes)
        if params is None:
            params = self._glorot_init(np.random.default_rng(self.init_seed))
        else:
            params = np.array(params, dtype=np.float64)
            if params.shape != (n,):
                raise ShapeError(f"expected {n} parameters, got shape {params.shape}")
        self._bind(params)

    def _glorot_init(self, rng: np.random.Generator) -> np.ndarray:
        chunks = []
        for fan_in, fan_out in _layer_shapes(self.layer_sizes):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def _bind(self, params: np.ndarray) -> None:
        self.params = params
        self.weights, self.biases = split_params(self.layer_sizes, params)

    @property
    def n_params(self) -> int:
        return self.params.size

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(
            self.layer_sizes,
            activation=self.activation,
            time_embed_dim=self.time_embed_dim,
            label_dim=self.label_dim,
            T=self.T,
            init_seed=self.init_seed,
            data_dim=self.data_dim,
            params=self.params.copy(),
            trained_taus=self.trained_taus,
        )

    def freeze(self) -> "DenoiserModel":
        """Make the parameters read-only in place and return ``self``."""
        params = self.params
        params.setflags(write=False)
        self._bind(params)
        return self

    @property
    def frozen(self) -> bool:
        return not self.params.flags.writeable

    def __call__(self, x_t, t, labels=None) -> np.ndarray:
        return forward(self, x_t, t, labels)


def split_params(layer_sizes: Sequence[int], flat: np.ndarray):
    """Per-layer ``(weights, biases)`` views into a flat parameter vector."""
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in _layer_shapes(layer_sizes):
        weights.append(flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out))
        offset += fan_in * fan_out
        biases.append(flat[offset : offset + fan_out])
        offset += fan_out
    return weights, biases


def create_model(
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    *,
    time_embed_dim: int = 64,
    label_dim: int = 0,
    activation: str = "silu",
    T: int = 1000,
    init_seed: int = 0,
    data_dim: int = 2,
) -> DenoiserModel:
    sizes = (data_dim + time_embed_dim + label_dim, *hidden, data_dim)
    return DenoiserModel(
        sizes,
        activation=activation,
        time_embed_dim=time_embed_dim,
        label_dim=label_dim,
        T=T,
        init_seed=init_seed,
        data_dim=data_dim,
    )


def one_hot(labels, label_dim: int, n: int) -> np.ndarray:
    """Accept integer labels (scalar or ``(n,)``) or an ``(n, label_dim)`` one-hot array."""
    if label_dim == 0:
        return np.zeros((n, 0))
    if labels is None:
        raise ShapeError("model is label-conditioned but no label was given")
    arr = np.asarray(labels)
    if arr.ndim == 2:
        if arr.shape != (n, label_dim):
            raise ShapeError(f"one-hot labels must have shape ({n}, {label_dim})")
        return arr.astype(np.float64)
    arr = np.broadcast_to(arr.astype(np.int64), (n,))
    if np.any(arr < 0) or np.any(arr >= label_dim):
        raise InvalidRangeError(f"label outside [0, {label_dim - 1}]")
    out = np.zeros((n, label_dim))
    out[np.arange(n), arr] = 1.0
    return out


def _features(model: DenoiserModel, x_t, t, labels) -> np.ndarray:
    x = np.asarray(x_t, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.data_dim:
        raise ShapeError(f"x_t must have shape (n, {model.data_dim}), got {x.shape}")
    n = x.shape[0]
    parts = [x]
    if model.time_embed_dim:
        t_arr = np.broadcast_to(np.asarray(t), (n,))
        parts.append(time_embed(t_arr, model.T, model.time_embed_dim))
    if model.label_dim:
        parts.append(one_hot(labels, model.label_dim, n))
    return np.concatenate(parts, axis=1) if len(parts) > 1 else x


def _act(model: DenoiserModel, z: np.ndarray):
    if model.activation == "relu":
        return np.maximum(z, 0.0), None
    s = np.tanh(0.5 * z)
    s += 1.0
    s *= 0.5
    return z * s, s


def _act_grad(model: DenoiserModel, z: np.ndarray, s) -> np.ndarray:
    if model.activation == "relu":
        return (z > 0).astype(np.float64)
    return s * (1.0 + z * (1.0 - s))


def forward(model: DenoiserModel, x_t, t, labels=None) -> np.ndarray:
    """Predicted noise for a batch ``x_t`` of shape ``(n, data_dim)`` or a single vector."""
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        if labels is not None and np.ndim(labels) == 1 and model.label_dim:
            labels = np.asarray(labels)[None, :]
    h = _features(model, x, t, labels)
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        h = z if i == last else _act(model, z)[0]
    return h[0] if single else h


def loss_and_grad(model: DenoiserModel, x_t, t, eps, labels=None):
    """Mean squared error between ``eps`` and the prediction, and its exact gradient.

    Returns ``(loss, grad)`` where ``grad`` is flat and laid out like
    ``model.params``; use :func:`split_params` for per-layer views.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 2 or eps.shape[0] == 0:
        raise ShapeError("loss needs a non-empty (n, data_dim) batch")
    h = _features(model, x_t, t, labels)
    if h.shape[0] != eps.shape[0]:
        raise ShapeError("x_t and eps batch sizes differ")
    cache = []
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        cache.append((h, z))
        if i == last:
            h = z
        else:
            h, s = _act(model, z)
            cache[-1] = (cache[-1][0], z, s)
    resid = h - eps
    loss = float(np.mean(resid * resid))

    grad = np.empty_like(model.params)
    g_w, g_b = split_params(model.layer_sizes, grad)
    delta = resid * (2.0 / resid.size)
    for i in range(last, -1, -1):
        entry = cache[i]
        h_in = entry[0]
        if i != last:
            delta = delta * _act_grad(model, entry[1], entry[2])
        np.matmul(h_in.T, delta, out=g_w[i])
        g_b[i][:] = delta.sum(axis=0)
        if i:
            delta = delta @ model.weights[i].T
    return loss, grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def for_model(cls, model: DenoiserModel, **hyper) -> "AdamState":
        n = model.n_params
        return cls(m=np.zeros(n), v=np.zeros(n), **hyper)


def adam_step(model: DenoiserModel, state: AdamState, grads: np.ndarray):
    """One bias-corrected Adam update, applied in place. Returns ``(model, state)``."""
    grads = np.asarray(grads, dtype=np.float64)
    if state.m is None:
        state.m = np.zeros_like(model.params)
        state.v = np.zeros_like(model.params)
    if grads.shape != model.params.shape or state.m.shape != model.params.shape:
        raise ShapeError(
            f"gradient shape {grads.shape} does not match parameters {model.params.shape}"
        )
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    model.params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return model, state
