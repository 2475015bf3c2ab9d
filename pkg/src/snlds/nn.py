"""Dense building blocks with reverse-mode gradients.

Arrays are ``jax.Array`` in float64; parameters are plain pytrees (nested dicts
and lists of arrays).  Gradients are taken with ``jax.grad``, which records the
forward computation on a tape and replays it in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from snlds.errors import ConfigurationError, NumericError, UsageError

Tensor = jax.Array

LOG_2PI = math.log(2.0 * math.pi)

# loop unrolling for recurrences; trades compile time for per-iteration overhead
SCAN_UNROLL = 1


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": jax.nn.relu,
    "tanh": jnp.tanh,
    "identity": lambda a: a,
}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first) and one activation per affine layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigurationError("an MLP needs at least one layer")
        if any(int(w) < 1 for w in self.widths):
            raise ConfigurationError(f"layer widths must be positive, got {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ConfigurationError("need exactly one activation per layer")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")

    @classmethod
    def make(cls, n_in: int, hidden: Sequence[int], n_out: int,
             activation: str = "relu", output_activation: str = "identity") -> "MlpSpec":
        widths = (n_in, *hidden, n_out)
        acts = (activation,) * len(hidden) + (output_activation,)
        return cls(tuple(int(w) for w in widths), acts)

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]


def glorot_uniform(key, n_in: int, n_out: int, shape=None) -> Tensor:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return jax.random.uniform(key, shape or (n_in, n_out), jnp.float64, -limit, limit)


def init_linear(key, n_in: int, n_out: int) -> dict:
    return {"w": glorot_uniform(key, n_in, n_out), "b": jnp.zeros(n_out)}


def linear(params: dict, x: Tensor) -> Tensor:
    return x @ params["w"] + params["b"]


def init_mlp(key, spec: MlpSpec) -> list[dict]:
    keys = jax.random.split(key, len(spec.activations))
    return [init_linear(k, a, b) for k, a, b in zip(keys, spec.widths[:-1], spec.widths[1:])]


def mlp_forward(spec: MlpSpec, params: list[dict], x: Tensor) -> Tensor:
    """Apply the MLP to the last axis of ``x``; leading axes are batch axes."""
    if x.shape[-1] != spec.n_in:
        raise ConfigurationError(f"MLP expects input width {spec.n_in}, got {x.shape[-1]}")
    if len(params) != len(spec.activations):
        raise ConfigurationError("parameter list does not match the MLP spec")
    h = x
    for layer, act in zip(params, spec.activations):
        h = _ACTIVATIONS[act](linear(layer, h))
    return h


def init_gru(key, n_in: int, n_hidden: int) -> dict:
    """Weights are stored gate-stacked as [reset | update | candidate]."""
    kx, kh = jax.random.split(key)
    w_x = jnp.concatenate(
        [glorot_uniform(k, n_in, n_hidden) for k in jax.random.split(kx, 3)], axis=1)
    w_h = jnp.concatenate(
        [glorot_uniform(k, n_hidden, n_hidden) for k in jax.random.split(kh, 3)], axis=1)
    return {"w_x": w_x, "w_h": w_h, "b_x": jnp.zeros(3 * n_hidden), "b_h": jnp.zeros(3 * n_hidden)}


def gru_hidden_size(params: dict) -> int:
    return params["w_h"].shape[0]


def gru_step(params: dict, h: Tensor, x: Tensor) -> Tensor:
    """One GRU update.

    r = sigmoid(x Wxr + bxr + h Whr + bhr)
    u = sigmoid(x Wxu + bxu + h Whu + bhu)
    n = tanh(x Wxn + bxn + r * (h Whn + bhn))
    h' = (1 - u) * h + u * n
    """
    n_hidden = gru_hidden_size(params)
    if h.shape[-1] != n_hidden or x.shape[-1] != params["w_x"].shape[0]:
        raise ConfigurationError(
            f"GRU expects state {n_hidden} and input {params['w_x'].shape[0]}, "
            f"got {h.shape[-1]} and {x.shape[-1]}")
    gx = x @ params["w_x"] + params["b_x"]
    gh = h @ params["w_h"] + params["b_h"]
    xr, xu, xn = jnp.split(gx, 3, axis=-1)
    hr, hu, hn = jnp.split(gh, 3, axis=-1)
    r = jax.nn.sigmoid(xr + hr)
    u = jax.nn.sigmoid(xu + hu)
    n = jnp.tanh(xn + r * hn)
    return (1.0 - u) * h + u * n


def gru_scan(params: dict, xs: Tensor, h0: Tensor, reverse: bool = False) -> Tensor:
    """Run a GRU over a time-major sequence ``xs`` (T, ..., n_in); returns all states."""
    # input projection does not depend on the carry, hoist it out of the loop
    gxs = xs @ params["w_x"] + params["b_x"]

    def step(h, gx):
        gh = h @ params["w_h"] + params["b_h"]
        xr, xu, xn = jnp.split(gx, 3, axis=-1)
        hr, hu, hn = jnp.split(gh, 3, axis=-1)
        r = jax.nn.sigmoid(xr + hr)
        u = jax.nn.sigmoid(xu + hu)
        h_new = (1.0 - u) * h + u * jnp.tanh(xn + r * hn)
        return h_new, h_new

    _, hs = jax.lax.scan(step, h0, gxs, reverse=reverse, unroll=SCAN_UNROLL)
    return hs


def _reject_non_finite(*arrays):
    for arr in arrays:
        if not isinstance(arr, jax.core.Tracer) and not np.all(np.isfinite(np.asarray(arr))):
            raise NumericError("non-finite input to a Gaussian density")


def gaussian_log_prob(x: Tensor, mean: Tensor, log_scale: Tensor) -> Tensor:
    """Diagonal Gaussian log density, summed over the last axis."""
    _reject_non_finite(x, mean, log_scale)
    z = (x - mean) * jnp.exp(-log_scale)
    return jnp.sum(-0.5 * LOG_2PI - log_scale - 0.5 * z * z, axis=-1)


def gaussian_entropy(log_scale: Tensor) -> Tensor:
    _reject_non_finite(log_scale)
    return jnp.sum(0.5 * (1.0 + LOG_2PI) + log_scale, axis=-1)


def check_finite(value, what: str = "value"):
    arr = np.asarray(value)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite entries")
    return value


def backward(fn: Callable, params, *args, **kwargs):
    """Evaluate ``fn(params, *args)`` and its gradient with respect to ``params``.

    Returns ``(value, grads)`` where ``grads`` mirrors the structure of ``params``.
    """
    value = fn(params, *args, **kwargs)
    if jnp.ndim(value) != 0:
        raise UsageError(f"backward needs a scalar root, got shape {jnp.shape(value)}")
    return jax.value_and_grad(fn)(params, *args, **kwargs)


def global_norm(tree) -> Tensor:
    leaves = jax.tree_util.tree_leaves(tree)
    return jnp.sqrt(sum(jnp.sum(jnp.square(g)) for g in leaves))


def count_parameters(tree) -> int:
    return int(sum(np.size(leaf) for leaf in jax.tree_util.tree_leaves(tree)))
