"""Exact marginalization of the discrete switching states.

Everything here works on a single sequence; batch with ``jax.vmap``.

Index conventions: ``log_A[t, j, k]`` is the log probability of moving from
state ``j`` at step ``t-1`` to state ``k`` at step ``t``.  ``log_A[0]`` has no
predecessor and is ignored by the recursions.  ``gamma2[t-1, j, k]`` is the
pairwise posterior of ``(s_{t-1}=j, s_t=k)``.
"""

from __future__ import annotations

from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from snlds import nn
from snlds.errors import NumericError, UsageError

CLAMP = 1e-12


class LogPotentials(NamedTuple):
    log_A: jax.Array   # (T, K, K)
    log_B: jax.Array   # (T, K)
    log_pi: jax.Array  # (K,)


class DiscretePosterior(NamedTuple):
    gamma1: jax.Array  # (T, K)
    gamma2: jax.Array  # (T-1, K, K)
    log_Z: jax.Array   # ()


def _is_concrete(x) -> bool:
    return not isinstance(x, jax.core.Tracer)


def _check_potentials(pot: LogPotentials) -> tuple[int, int]:
    T, K = pot.log_B.shape[-2:]
    if pot.log_A.shape[-3:] != (T, K, K) or pot.log_pi.shape[-1] != K:
        raise UsageError(
            f"inconsistent potential shapes: log_A {pot.log_A.shape}, "
            f"log_B {pot.log_B.shape}, log_pi {pot.log_pi.shape}")
    if T < 1 or K < 1:
        raise UsageError("need T >= 1 and K >= 1")
    for name, arr in zip(pot._fields, pot):
        if _is_concrete(arr) and np.isnan(np.asarray(arr)).any():
            raise NumericError(f"{name} contains NaN")
    return T, K


def forward_backward(pot: LogPotentials) -> DiscretePosterior:
    """Smoothed unary/pairwise marginals and the log normalizer, in log space."""
    _check_potentials(pot)
    log_A, log_B, log_pi = pot

    alpha0 = log_pi + log_B[0]

    def fwd(alpha, inputs):
        a_t, b_t = inputs
        alpha = logsumexp(alpha[:, None] + a_t, axis=0) + b_t
        return alpha, alpha

    _, alphas = jax.lax.scan(fwd, alpha0, (log_A[1:], log_B[1:]), unroll=nn.SCAN_UNROLL)
    alphas = jnp.concatenate([alpha0[None], alphas], axis=0)
    log_Z = logsumexp(alphas[-1])

    def bwd(beta, inputs):
        a_t, b_t = inputs
        beta = logsumexp(a_t + (b_t + beta)[None, :], axis=1)
        return beta, beta

    beta_last = jnp.zeros_like(alpha0)
    _, betas = jax.lax.scan(bwd, beta_last, (log_A[1:], log_B[1:]), reverse=True,
                            unroll=nn.SCAN_UNROLL)
    betas = jnp.concatenate([betas, beta_last[None]], axis=0)

    gamma1 = jnp.exp(alphas + betas - log_Z)
    log_pair = (alphas[:-1, :, None] + log_A[1:]
                + (log_B[1:] + betas[1:])[:, None, :] - log_Z)
    gamma2 = jnp.exp(log_pair)
    return DiscretePosterior(gamma1, gamma2, log_Z)


def surrogate_loss(pot: LogPotentials, post: DiscretePosterior) -> jax.Array:
    """Scalar whose value is ``log_Z`` and whose gradient flows through the
    posterior-weighted complete-data log likelihood.

    The marginals are held constant, so the gradient equals the gradient of
    ``log_Z`` with respect to anything the potentials depend on, without
    differentiating through the forward-backward recursions.
    """
    T, K = _check_potentials(pot)
    if post.gamma1.shape[-2:] != (T, K) or post.gamma2.shape[-3:] != (T - 1, K, K):
        raise UsageError(
            f"posterior shapes {post.gamma1.shape}/{post.gamma2.shape} "
            f"do not match potentials with T={T}, K={K}")
    gamma1 = jax.lax.stop_gradient(post.gamma1)
    gamma2 = jax.lax.stop_gradient(post.gamma2)
    first = jnp.sum(gamma1[0] * (pot.log_B[0] + pot.log_pi))
    rest = jnp.sum(gamma2 * (pot.log_B[1:, None, :] + pot.log_A[1:]))
    expected = first + rest
    return jax.lax.stop_gradient(post.log_Z - expected) + expected


def _check_tau(tau):
    if _is_concrete(tau) and not float(tau) > 0.0:
        raise UsageError(f"temperature must be positive, got {tau}")


def log_apply_temperature(logits, tau) -> jax.Array:
    _check_tau(tau)
    return jax.nn.log_softmax(logits / tau, axis=-1)


def apply_temperature(logits, tau) -> jax.Array:
    """Row-wise ``softmax(logits / tau)``."""
    _check_tau(tau)
    return jax.nn.softmax(logits / tau, axis=-1)


def posterior_uniform_kl(gamma1) -> jax.Array:
    """Sum over steps of KL(uniform || gamma1[t]), posterior clamped at 1e-12."""
    K = gamma1.shape[-1]
    log_post = jnp.log(jnp.maximum(gamma1, CLAMP))
    return jnp.sum((-jnp.log(K) - log_post) / K, axis=(-2, -1))
