"""Gumbel-Softmax baseline: the discrete states are sampled, not marginalized.

q(s_t | s_{t-1}, x) is a relaxed categorical whose logits come from a
feed-forward net over [h^x_t, s_{t-1}].  The relaxed one-hot samples y_t
weight the discrete terms of the complete-data log likelihood:

    log p(x, z, s) ~ sum_t log p(x_t|z_t)
                     + sum_k y_1k [log p(z_1|k) + log pi_k]
                     + sum_{t>1} [sum_k y_tk log p(z_t|z_{t-1},k)
                                  + sum_jk y_{t-1,j} y_tk log A_t(j,k)]
    log q(s) ~ sum_t sum_k y_tk log q(s_t=k | ...)
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp

from snlds import nn
from snlds.hmm import posterior_uniform_kl
from snlds.model import ModelConfig
from snlds.training import ElboTerms, SwitchingModel, TrainConfig, TrainResult, fit


def sample_gumbel(key, shape, dtype=jnp.float64):
    return jax.random.gumbel(key, shape, dtype)


def gumbel_softmax(logits, gumbel_noise, tau):
    """Relaxed one-hot sample softmax((logits + g) / tau)."""
    return jax.nn.softmax((logits + gumbel_noise) / tau, axis=-1)


@dataclass(frozen=True)
class GumbelSwitchingModel(SwitchingModel):
    discrete_posterior_hidden: tuple[int, ...] = (32,)

    @property
    def posterior_spec(self) -> nn.MlpSpec:
        n_in = 2 * self.config.encoder_units + self.config.K
        return nn.MlpSpec.make(n_in, self.discrete_posterior_hidden, self.config.K)

    def init(self, key) -> dict:
        k_base, k_s = jax.random.split(key)
        params = super().init(k_base)
        params["s_net"] = nn.init_mlp(k_s, self.posterior_spec)
        return params

    def sample_noise(self, key, x):
        kz, kg = jax.random.split(key)
        return {"z": jax.random.normal(kz, x.shape[:-1] + (self.config.H,), x.dtype),
                "g": sample_gumbel(kg, x.shape[:-1] + (self.config.K,), x.dtype)}

    def temperature_schedule(self, cfg: TrainConfig):
        return cfg.gumbel_tau

    def sequence_terms(self, params, x, noise, tau) -> ElboTerms:
        """ELBO pieces for one sequence; ``tau`` is the relaxation temperature."""
        gen, inf = self.generative, self.inference
        h_x = inf.encode(params["inf"], x)
        sample = inf.sample_posterior(params["inf"], h_x, noise["z"])
        z = sample.z

        def step(y_prev, inputs):
            hx_t, g_t = inputs
            logits = nn.mlp_forward(self.posterior_spec, params["s_net"],
                                    jnp.concatenate([hx_t, y_prev]))
            y = gumbel_softmax(logits, g_t, tau)
            return y, (y, jax.nn.log_softmax(logits))

        _, (y, log_q_s) = jax.lax.scan(step, jnp.zeros(self.config.K, x.dtype), (h_x, noise["g"]),
                                      unroll=nn.SCAN_UNROLL)

        p = params["gen"]
        emit = gen.emission_logprob(p, x, z)
        log_pi = gen.log_initial_discrete(p)
        log_joint = jnp.sum(emit) + jnp.sum(y[0] * (gen.initial_logprob(p, z[0]) + log_pi))
        if x.shape[0] > 1:
            means = gen.transition_means(p, z)
            trans = nn.gaussian_log_prob(z[1:, None, :], means, p["log_q"])
            log_A = gen.log_discrete_transition(p, x[:-1], 1.0)
            log_joint = (log_joint + jnp.sum(y[1:] * trans)
                         + jnp.sum(y[:-1, :, None] * y[1:, None, :] * log_A))
        log_q_discrete = jnp.sum(y * log_q_s)
        q_probs = jnp.exp(log_q_s)
        return ElboTerms(
            surrogate=log_joint - log_q_discrete,
            entropy=sample.entropy,
            ce=posterior_uniform_kl(q_probs),
            log_Z=log_joint,
            log_q=sample.log_q,
            gamma1=q_probs,
        )

    def objective_terms(self, params, x, noise, tau, beta):
        terms = jax.vmap(lambda xi, ni: self.sequence_terms(params, xi, ni, tau))(x, noise)
        return terms, {}

    def posterior_marginals(self, params, x, tau=1.0):
        """q(s_t) along the noise-free path (zero Gaussian and Gumbel noise)."""
        def one(xi):
            T = xi.shape[0]
            noise = {"z": jnp.zeros((T, self.config.H), xi.dtype),
                     "g": jnp.zeros((T, self.config.K), xi.dtype)}
            return self.sequence_terms(params, xi, noise, tau).gamma1
        return jax.vmap(one)(x)


def gumbel_softmax_train(model_config: ModelConfig, x_train, cfg: TrainConfig,
                         **kwargs) -> TrainResult:
    return fit(GumbelSwitchingModel(model_config), x_train, cfg, **kwargs)
