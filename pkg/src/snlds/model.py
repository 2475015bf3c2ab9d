"""Generative side of the switching dynamical system.

    p(x_t | z_t)              = N(x_t; f_x(z_t), diag R)
    p(z_t | z_{t-1}, s_t=k)   = N(z_t; f_z[k](z_{t-1}), diag Q)
    p(z_1 | s_1=k)            = N(z_1; mean_z1[k], diag S_k)
    p(s_t | s_{t-1}=j, x_{t-1}) = softmax(f_s(x_{t-1}, j) / tau)

R, Q and S_k are diagonal and stored as log standard deviations.  The
initial scale S_k is separate from Q: first states are spread over the whole
data range, and tying the two would keep Q from shrinking below that spread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp

from snlds import nn
from snlds.errors import ConfigurationError, UsageError
from snlds.hmm import LogPotentials, log_apply_temperature

TRANSITION_FAMILIES = ("linear", "mlp", "gru")
DISCRETE_INPUTS = ("prev_observation", "none")


@dataclass(frozen=True)
class ModelConfig:
    K: int = 3
    H: int = 4
    D: int = 1
    transition_family: str = "mlp"
    discrete_input: str = "prev_observation"
    # f_z[k](z) = z + g_k(z) when set; keeps the linear family linear
    transition_residual: bool = True
    transition_hidden: tuple[int, ...] = (32, 32)
    gru_units: int = 4
    # empty tuple gives a linear emission
    emission_hidden: tuple[int, ...] = (32,)
    discrete_hidden: tuple[int, ...] = (16,)
    encoder_units: int = 16
    causal_units: int = 16
    init_log_scale: float = 0.0

    def __post_init__(self):
        for name in ("K", "H", "D", "gru_units", "encoder_units", "causal_units"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.transition_family not in TRANSITION_FAMILIES:
            raise ConfigurationError(
                f"transition_family must be one of {TRANSITION_FAMILIES}, "
                f"got {self.transition_family!r}")
        if self.discrete_input not in DISCRETE_INPUTS:
            raise ConfigurationError(
                f"discrete_input must be one of {DISCRETE_INPUTS}, got {self.discrete_input!r}")
        for name in ("transition_hidden", "emission_hidden", "discrete_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))

    @classmethod
    def slds(cls, **kwargs) -> "ModelConfig":
        """Linear transitions and linear emission."""
        kwargs.setdefault("transition_family", "linear")
        kwargs.setdefault("emission_hidden", ())
        return cls(**kwargs)


@dataclass(frozen=True)
class GenerativeModel:
    config: ModelConfig
    emission_spec: nn.MlpSpec = field(init=False)
    transition_spec: nn.MlpSpec = field(init=False)
    discrete_spec: nn.MlpSpec | None = field(init=False)

    def __post_init__(self):
        c = self.config
        object.__setattr__(self, "emission_spec", nn.MlpSpec.make(c.H, c.emission_hidden, c.D))
        if c.transition_family == "mlp":
            spec = nn.MlpSpec.make(c.H, c.transition_hidden, c.H)
        elif c.transition_family == "linear":
            spec = nn.MlpSpec.make(c.H, (), c.H)
        else:
            spec = nn.MlpSpec.make(c.gru_units, (), c.H)
        object.__setattr__(self, "transition_spec", spec)
        discrete = None
        if c.discrete_input == "prev_observation":
            discrete = nn.MlpSpec.make(c.D, c.discrete_hidden, c.K * c.K)
        object.__setattr__(self, "discrete_spec", discrete)

    def init(self, key) -> dict:
        c = self.config
        k_emit, k_trans, k_gru, k_disc, k_z1 = jax.random.split(key, 5)
        state_keys = jax.random.split(k_trans, c.K)
        params = {
            "emission": nn.init_mlp(k_emit, self.emission_spec),
            "log_r": jnp.full(c.D, c.init_log_scale),
            "transition": jax.vmap(lambda k: nn.init_mlp(k, self.transition_spec))(state_keys),
            "log_q": jnp.full(c.H, c.init_log_scale),
            "discrete_base": jnp.zeros((c.K, c.K)),
            "z1_mean": 0.1 * jax.random.normal(k_z1, (c.K, c.H)),
            "z1_log_scale": jnp.full((c.K, c.H), c.init_log_scale),
            "log_pi": jnp.zeros(c.K),
        }
        if c.transition_family == "gru":
            gru_keys = jax.random.split(k_gru, c.K)
            params["transition_gru"] = jax.vmap(
                lambda k: nn.init_gru(k, c.H, c.gru_units))(gru_keys)
        if self.discrete_spec is not None:
            params["discrete_net"] = nn.init_mlp(k_disc, self.discrete_spec)
        return params

    # -- conditional densities -------------------------------------------------

    def emission_mean(self, params, z):
        return nn.mlp_forward(self.emission_spec, params["emission"], z)

    def emission_logprob(self, params, x, z):
        if x.shape[-1] != self.config.D:
            raise ConfigurationError(f"observation width {x.shape[-1]} != D={self.config.D}")
        return nn.gaussian_log_prob(x, self.emission_mean(params, z), params["log_r"])

    def _apply_transition(self, layers, features, z_prev):
        out = nn.mlp_forward(self.transition_spec, layers, features)
        if self.config.transition_residual:
            out = out + z_prev
        return out

    def transition_means(self, params, z):
        """Means of every f_z[k] applied along a trajectory, shape (T-1, K, H).

        For the ``gru`` family each state runs its own recurrent cell over the
        preceding trajectory, so the mean at step t sees all of z_{1:t-1}.
        """
        if z.shape[-1] != self.config.H:
            raise ConfigurationError(f"latent width {z.shape[-1]} != H={self.config.H}")
        z_prev = z[:-1]
        if self.config.transition_family == "gru":
            def per_state(gru, layers):
                h0 = jnp.zeros(z_prev.shape[:-2] + (self.config.gru_units,), z.dtype)
                hs = nn.gru_scan(gru, z_prev, h0)
                return self._apply_transition(layers, hs, z_prev)

            return jax.vmap(per_state, out_axes=-2)(
                params["transition_gru"], params["transition"])
        return jax.vmap(lambda layers: self._apply_transition(layers, z_prev, z_prev),
                        out_axes=-2)(params["transition"])

    def transition_logprob(self, params, z_t, z_prev, k: int, hidden=None):
        """log N(z_t; f_z[k](z_prev), diag Q).

        ``hidden`` is the state of the k-th recurrent cell for the ``gru``
        family (zeros if omitted); other families ignore it.
        """
        K = self.config.K
        if not 0 <= int(k) < K:
            raise UsageError(f"state index {k} outside [0, {K})")
        layers = jax.tree_util.tree_map(lambda a: a[k], params["transition"])
        if self.config.transition_family == "gru":
            gru = jax.tree_util.tree_map(lambda a: a[k], params["transition_gru"])
            if hidden is None:
                hidden = jnp.zeros(z_prev.shape[:-1] + (self.config.gru_units,), z_prev.dtype)
            features = nn.gru_step(gru, hidden, z_prev)
        else:
            features = z_prev
        mean = self._apply_transition(layers, features, z_prev)
        return nn.gaussian_log_prob(z_t, mean, params["log_q"])

    def initial_logprob(self, params, z1):
        """log p(z_1 | s_1=k) for every k, shape (..., K)."""
        return nn.gaussian_log_prob(z1[..., None, :], params["z1_mean"], params["z1_log_scale"])

    def discrete_logits(self, params, x_prev):
        """Transition logits f_s(x_prev, j) for all rows j, shape (..., K, K)."""
        K = self.config.K
        base = params["discrete_base"]
        if self.discrete_spec is None:
            return jnp.broadcast_to(base, x_prev.shape[:-1] + (K, K))
        if x_prev.shape[-1] != self.config.D:
            raise ConfigurationError(f"observation width {x_prev.shape[-1]} != D={self.config.D}")
        out = nn.mlp_forward(self.discrete_spec, params["discrete_net"], x_prev)
        return base + out.reshape(x_prev.shape[:-1] + (K, K))

    def log_discrete_transition(self, params, x_prev, tau):
        return log_apply_temperature(self.discrete_logits(params, x_prev), tau)

    def discrete_transition_matrix(self, params, x_prev, tau):
        return jnp.exp(self.log_discrete_transition(params, x_prev, tau))

    def log_initial_discrete(self, params):
        return jax.nn.log_softmax(params["log_pi"])

    def build_potentials(self, params, x, z, tau) -> LogPotentials:
        """HMM potentials for one sequence given observations and a latent path."""
        T = x.shape[0]
        if z.shape[0] != T:
            raise ConfigurationError(f"x has {T} steps but z has {z.shape[0]}")
        log_pi = self.log_initial_discrete(params)
        emit = self.emission_logprob(params, x, z)                     # (T,)
        first = emit[0] + self.initial_logprob(params, z[0])          # (K,)
        if T > 1:
            means = self.transition_means(params, z)                   # (T-1, K, H)
            trans = nn.gaussian_log_prob(z[1:, None, :], means, params["log_q"])
            rest = emit[1:, None] + trans                              # (T-1, K)
            log_B = jnp.concatenate([first[None], rest], axis=0)
            log_A = self.log_discrete_transition(params, x[:-1], tau)  # (T-1, K, K)
        else:
            log_B = first[None]
            log_A = jnp.zeros((0, self.config.K, self.config.K), log_B.dtype)
        # step 0 has no predecessor; fill its rows with the initial distribution
        row0 = jnp.broadcast_to(log_pi, (1, self.config.K, self.config.K))
        log_A = jnp.concatenate([row0, log_A], axis=0)
        return LogPotentials(log_A, log_B, log_pi)
