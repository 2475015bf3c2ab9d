"""Inference network q(z_{1:T} | x_{1:T}).

A bidirectional GRU summarizes the observations into h^x_t.  A causal GRU
then walks forward, consuming [h^x_t, z_{t-1}], and emits the mean and log
standard deviation of a diagonal Gaussian over z_t.  Samples are drawn with
the reparameterization z_t = mean_t + exp(log_scale_t) * noise_t.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from snlds import nn
from snlds.errors import ConfigurationError, UsageError
from snlds.model import ModelConfig


class PosteriorSample(NamedTuple):
    z: jax.Array          # (T, H)
    log_q: jax.Array      # ()
    entropy: jax.Array    # ()
    mean: jax.Array       # (T, H)
    log_scale: jax.Array  # (T, H)


@dataclass(frozen=True)
class InferenceNetwork:
    config: ModelConfig

    @property
    def encoding_size(self) -> int:
        return 2 * self.config.encoder_units

    def init(self, key) -> dict:
        c = self.config
        k_f, k_b, k_c, k_h = jax.random.split(key, 4)
        return {
            "enc_fwd": nn.init_gru(k_f, c.D, c.encoder_units),
            "enc_bwd": nn.init_gru(k_b, c.D, c.encoder_units),
            "causal": nn.init_gru(k_c, self.encoding_size + c.H, c.causal_units),
            "head": nn.init_linear(k_h, c.causal_units, 2 * c.H),
        }

    def encode(self, params, x):
        """Bidirectional encoding of one sequence, shape (T, 2 * encoder_units)."""
        if x.ndim != 2 or x.shape[-1] != self.config.D:
            raise ConfigurationError(f"expected observations of shape (T, {self.config.D}), got {x.shape}")
        h0 = jnp.zeros(self.config.encoder_units, x.dtype)
        fwd = nn.gru_scan(params["enc_fwd"], x, h0)
        bwd = nn.gru_scan(params["enc_bwd"], x, h0, reverse=True)
        return jnp.concatenate([fwd, bwd], axis=-1)

    def sample_posterior(self, params, h_x, noise) -> PosteriorSample:
        H = self.config.H
        if noise.shape != (h_x.shape[0], H):
            raise ConfigurationError(f"noise shape {noise.shape} != ({h_x.shape[0]}, {H})")
        if not isinstance(noise, jax.core.Tracer) and not np.all(np.isfinite(np.asarray(noise))):
            raise UsageError("noise contains non-finite draws")

        def step(carry, inputs):
            h, z_prev = carry
            hx_t, eps_t = inputs
            h = nn.gru_step(params["causal"], h, jnp.concatenate([hx_t, z_prev]))
            mean, log_scale = jnp.split(nn.linear(params["head"], h), 2)
            z = mean + jnp.exp(log_scale) * eps_t
            return (h, z), (z, mean, log_scale)

        carry0 = (jnp.zeros(self.config.causal_units, h_x.dtype), jnp.zeros(H, h_x.dtype))
        _, (z, mean, log_scale) = jax.lax.scan(step, carry0, (h_x, noise), unroll=nn.SCAN_UNROLL)
        log_q = jnp.sum(nn.gaussian_log_prob(z, mean, log_scale))
        entropy = jnp.sum(nn.gaussian_entropy(log_scale))
        return PosteriorSample(z, log_q, entropy, mean, log_scale)

    def __call__(self, params, x, noise) -> PosteriorSample:
        return self.sample_posterior(params, self.encode(params, x), noise)
