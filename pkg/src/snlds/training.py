"""Stochastic variational training of the collapsed model.

One step: encode x, draw z from the inference network, build HMM potentials
from (x, z), run forward-backward, and ascend

    surrogate(gamma, potentials) + H(q(z|x)) - beta * sum_t KL(uniform || gamma1_t)

where the surrogate carries the exact gradient of log p(x, z) and beta, tau
follow exponential annealing schedules.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from snlds import checkpoint, nn
from snlds.errors import ConfigurationError, DivergenceError
from snlds.hmm import forward_backward, posterior_uniform_kl, surrogate_loss
from snlds.inference import InferenceNetwork
from snlds.model import GenerativeModel, ModelConfig

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "nll", "elbo", "ce", "beta", "tau", "f1_frame", "f1_switch")


# -- schedules -----------------------------------------------------------------

@dataclass(frozen=True)
class AnnealSchedule:
    """Constant until ``start_step``, then exponential decay clipped at ``floor``."""

    initial_value: float
    decay_rate: float = 1.0
    decay_steps: int = 1
    start_step: int = 0
    floor: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.decay_rate <= 1.0:
            raise ConfigurationError(f"decay_rate must lie in (0, 1], got {self.decay_rate}")
        if self.decay_steps < 1:
            raise ConfigurationError(f"decay_steps must be positive, got {self.decay_steps}")

    @classmethod
    def constant(cls, value: float) -> "AnnealSchedule":
        return cls(initial_value=value, floor=value)

    def __call__(self, step: int) -> float:
        if step <= self.start_step:
            return float(self.initial_value)
        exponent = (step - self.start_step) / self.decay_steps
        return float(max(self.floor, self.initial_value * self.decay_rate ** exponent))


def schedule_value(schedule: AnnealSchedule, step: int) -> float:
    return schedule(step)


@dataclass(frozen=True)
class LearningRate:
    """Linear warm-up from ``warmup_init`` to ``peak``, then constant or cosine decay."""

    peak: float = 1e-3
    warmup_steps: int = 0
    warmup_init: float = 1e-5
    decay: str = "constant"
    decay_steps: int = 0
    minimum: float = 1e-5

    def __post_init__(self):
        if self.decay not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown learning-rate decay {self.decay!r}")

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            frac = step / self.warmup_steps
            return self.warmup_init + frac * (self.peak - self.warmup_init)
        if self.decay == "constant" or self.decay_steps <= 0:
            return self.peak
        frac = min(1.0, (step - self.warmup_steps) / self.decay_steps)
        return self.minimum + 0.5 * (self.peak - self.minimum) * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10000
    batch_size: int = 32
    learning_rate: LearningRate = field(default_factory=LearningRate)
    beta: AnnealSchedule = field(default_factory=lambda: AnnealSchedule.constant(0.0))
    tau: AnnealSchedule = field(default_factory=lambda: AnnealSchedule.constant(1.0))
    # relaxation temperature of the Gumbel-Softmax baseline only
    gumbel_tau: AnnealSchedule = field(
        default_factory=lambda: AnnealSchedule(1.0, 0.9, 500, 0, 0.5))
    clip_norm: float = 5.0
    seed: int = 0
    num_samples: int = 1
    entropy: str = "analytic"
    log_every: int = 500
    checkpoint_every: int = 0
    switch_tolerance: int = 0
    align_mode: str = "permutation"
    # float32 trades the oracle-grade accuracy of float64 for ~3x faster steps
    precision: str = "float64"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.num_samples < 1:
            raise ConfigurationError("steps >= 0, batch_size >= 1 and num_samples >= 1 required")
        if self.tau.floor < 1.0 or self.tau.initial_value < 1.0:
            raise ConfigurationError("the transition temperature may not go below 1")
        if self.beta.floor < 0.0:
            raise ConfigurationError("beta floor must be non-negative")
        if self.entropy not in ("analytic", "sample"):
            raise ConfigurationError(f"entropy must be 'analytic' or 'sample', got {self.entropy!r}")
        if self.log_every < 1:
            raise ConfigurationError("log_every must be positive")
        if self.precision not in ("float64", "float32"):
            raise ConfigurationError(f"precision must be float64 or float32, got {self.precision!r}")


def annealed_recipe(steps: int, beta0: float = 1000.0, tau0: float = 10.0,
                    beta_start: float = 1 / 3, tau_start: float = 2 / 3,
                    decay_rate: float = 0.975, decay_steps: int | None = None,
                    **kwargs) -> TrainConfig:
    """Regularized schedule: beta decays first, then tau, as fractions of ``steps``.

    ``decay_steps`` defaults to the value that takes beta from ``beta0`` to
    below 1e-3 over a sixth of the run.
    """
    if decay_steps is None:
        n_decays = math.log(1e-3 / beta0) / math.log(decay_rate) if beta0 > 0 else 1.0
        decay_steps = max(1, int(steps / 6 / max(n_decays, 1.0)))
    beta = AnnealSchedule(beta0, decay_rate, decay_steps, int(beta_start * steps), 0.0)
    tau = AnnealSchedule(tau0, decay_rate, decay_steps, int(tau_start * steps), 1.0)
    return TrainConfig(steps=steps, beta=beta, tau=tau, **kwargs)


# -- optimizer -----------------------------------------------------------------

class AdamState(NamedTuple):
    count: jax.Array
    m: dict
    v: dict


def adam_init(params) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(jnp.zeros((), jnp.int64), zeros, jax.tree_util.tree_map(jnp.zeros_like, params))


def adam_step(params, grads, state: AdamState, lr, clip_norm=None,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
    """Adam with bias correction after global-norm clipping.

    Non-finite gradients leave parameters and moments untouched; the returned
    info dict reports ``skipped`` and the pre-clip ``grad_norm``.
    """
    norm = nn.global_norm(grads)
    finite = jnp.isfinite(norm)
    if clip_norm is not None:
        scale = jnp.minimum(1.0, clip_norm / jnp.maximum(norm, 1e-30))
        grads = jax.tree_util.tree_map(lambda g: g * scale, grads)
    count = state.count + 1
    m = jax.tree_util.tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.m, grads)
    v = jax.tree_util.tree_map(lambda v, g: b2 * v + (1 - b2) * g * g, state.v, grads)
    c1 = 1 - b1 ** count
    c2 = 1 - b2 ** count
    new = jax.tree_util.tree_map(
        lambda p, m, v: (p - lr * (m / c1) / (jnp.sqrt(v / c2) + eps)).astype(p.dtype),
        params, m, v)

    def pick(a, b):
        return jax.tree_util.tree_map(lambda x, y: jnp.where(finite, x, y), a, b)

    params = pick(new, params)
    state = AdamState(jnp.where(finite, count, state.count), pick(m, state.m), pick(v, state.v))
    return params, state, {"grad_norm": norm, "skipped": ~finite}


# -- the collapsed model -------------------------------------------------------

class ElboTerms(NamedTuple):
    surrogate: jax.Array
    entropy: jax.Array
    ce: jax.Array
    log_Z: jax.Array
    log_q: jax.Array
    gamma1: jax.Array


@dataclass(frozen=True)
class SwitchingModel:
    """Generative model plus inference network, trained with collapsed inference."""

    config: ModelConfig

    @property
    def generative(self) -> GenerativeModel:
        return GenerativeModel(self.config)

    @property
    def inference(self) -> InferenceNetwork:
        return InferenceNetwork(self.config)

    def init(self, key) -> dict:
        k_gen, k_inf = jax.random.split(key)
        return {"gen": self.generative.init(k_gen), "inf": self.inference.init(k_inf)}

    def sample_noise(self, key, x):
        return jax.random.normal(key, x.shape[:-1] + (self.config.H,), x.dtype)

    def temperature_schedule(self, cfg: "TrainConfig") -> AnnealSchedule:
        return cfg.tau

    def objective_terms(self, params, x, noise, tau, beta):
        terms = jax.vmap(lambda xi, ni: elbo_terms(self, params, xi, ni, tau))(x, noise)
        return terms, {}

    def posterior_marginals(self, params, x, tau=1.0):
        """gamma1 for a batch of sequences along the zero-noise (mean) latent path."""
        def one(xi):
            noise = jnp.zeros((xi.shape[0], self.config.H), xi.dtype)
            return elbo_terms(self, params, xi, noise, tau).gamma1
        return jax.vmap(one)(x)


def elbo_terms(model: SwitchingModel, params, x, noise, tau) -> ElboTerms:
    """Per-sequence objective pieces for one latent sample.

    The cross-entropy regularizer differentiates through forward-backward;
    the surrogate holds the marginals constant.
    """
    sample = model.inference(params["inf"], x, noise)
    pot = model.generative.build_potentials(params["gen"], x, sample.z, tau)
    post = forward_backward(pot)
    return ElboTerms(
        surrogate=surrogate_loss(pot, post),
        entropy=sample.entropy,
        ce=posterior_uniform_kl(post.gamma1),
        log_Z=post.log_Z,
        log_q=sample.log_q,
        gamma1=post.gamma1,
    )


def batch_loss(model, params, x, noise, beta, tau, entropy: str = "analytic"):
    """Negative regularized objective, averaged over the batch and divided by T."""
    terms, extra = model.objective_terms(params, x, noise, tau, beta)
    ent = terms.entropy if entropy == "analytic" else -terms.log_q
    objective = terms.surrogate + ent - beta * terms.ce
    T = x.shape[1]
    loss = -jnp.mean(objective) / T
    aux = {
        "nll": -jnp.mean(terms.log_Z),
        "elbo": jnp.mean(terms.log_Z + ent),
        "ce": jnp.mean(terms.ce),
    }
    aux.update(extra)
    return loss, aux


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    opt_state: AdamState
    step: int
    metrics: list[dict]
    checkpoints: list[Path]
    snapshots: dict[int, dict]
    skipped_steps: int = 0


def _make_step(model, cfg: TrainConfig):
    S = cfg.num_samples

    def loss_fn(params, x, noise, beta, tau):
        return batch_loss(model, params, x, noise, beta, tau, cfg.entropy)

    @jax.jit
    def step(params, opt_state, x, key, beta, tau, lr):
        if S > 1:
            x = jnp.repeat(x, S, axis=0)
        noise = model.sample_noise(key, x)
        (loss, aux), grads = jax.value_and_grad(loss_fn, has_aux=True)(params, x, noise, beta, tau)
        params, opt_state, info = adam_step(params, grads, opt_state, lr, cfg.clip_norm)
        return params, opt_state, loss, aux, info

    @jax.jit
    def monitor(params, x, key, beta, tau):
        return loss_fn(params, x, model.sample_noise(key, x), beta, tau)

    return step, monitor


def cast_tree(tree, dtype):
    """Cast every floating leaf of a pytree; integer leaves are left alone."""
    def cast(a):
        a = jnp.asarray(a)
        return a.astype(dtype) if jnp.issubdtype(a.dtype, jnp.floating) else a
    return jax.tree_util.tree_map(cast, tree)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Minibatch for a given step; independent of every other step, so runs resume exactly."""
    rng = np.random.default_rng([seed, step])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def _checkpoint_tree(params, opt_state, step):
    return {"params": params, "opt": opt_state, "step": jnp.asarray(float(step))}


def save_training_checkpoint(path, params, opt_state, step):
    checkpoint.save(path, _checkpoint_tree(params, opt_state, step))


def load_training_checkpoint(path, model, seed: int = 0):
    params = model.init(jax.random.PRNGKey(seed))
    template = _checkpoint_tree(params, adam_init(params), 0)
    tree = checkpoint.load(path, template)
    return tree["params"], tree["opt"], int(tree["step"])


def evaluate_segmentation(model, params, x, labels, tau: float, align_mode: str,
                          tolerances: Sequence[int]) -> dict:
    from snlds.evaluation import decode, evaluate_dataset

    dtype = jax.tree_util.tree_leaves(params)[0].dtype
    gamma1 = np.asarray(jax.jit(model.posterior_marginals)(params, jnp.asarray(x, dtype), tau))
    preds = [decode(g) for g in gamma1]
    return evaluate_dataset(preds, list(labels), mode=align_mode, tolerances=tolerances,
                            n_pred=model.config.K)


def fit(model, x_train, cfg: TrainConfig, *, eval_x=None, eval_labels=None,
        out_dir=None, resume_from=None, snapshot_steps: Sequence[int] = (),
        init_params=None, max_bad_steps: int = 10,
        progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps of ``model`` on ``x_train`` (N, T, D).

    Metrics are recorded at step 0 and every ``cfg.log_every`` steps (and at the
    final step).  With ``out_dir`` set, metrics are appended to ``metrics.csv``
    and checkpoints are written there.
    """
    dtype = jnp.dtype(cfg.precision)
    x_train = jnp.asarray(x_train, dtype=dtype)
    n = x_train.shape[0]
    if n == 0:
        raise ConfigurationError("training data is empty")
    key = jax.random.PRNGKey(cfg.seed)
    init_key, step_key, monitor_key = jax.random.split(key, 3)

    start = 0
    if resume_from is not None:
        params, opt_state, start = load_training_checkpoint(resume_from, model, cfg.seed)
    else:
        params = model.init(init_key) if init_params is None else init_params
        opt_state = adam_init(params)
    params, opt_state = cast_tree(params, dtype), cast_tree(opt_state, dtype)

    step_fn, monitor_fn = _make_step(model, cfg)
    monitor_x = x_train[: min(n, cfg.batch_size)]
    has_eval = eval_x is not None and eval_labels is not None
    ckpt_every = cfg.checkpoint_every or cfg.log_every

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        new_file = not metrics_path.exists() or resume_from is None
        fh = open(metrics_path, "w" if resume_from is None else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new_file:
            writer.writeheader()

    tau_schedule = model.temperature_schedule(cfg)
    result = TrainResult(params, opt_state, start, [], [], {})
    snapshot_steps = set(snapshot_steps)

    def record(step):
        beta, tau = cfg.beta(step), tau_schedule(step)
        _, aux = monitor_fn(params, monitor_x, monitor_key, beta, tau)
        row = {"step": step, "nll": float(aux["nll"]), "elbo": float(aux["elbo"]),
               "ce": float(aux["ce"]), "beta": beta, "tau": tau,
               "f1_frame": float("nan"), "f1_switch": float("nan")}
        if has_eval:
            ev = evaluate_segmentation(model, params, eval_x, eval_labels, tau,
                                       cfg.align_mode, (cfg.switch_tolerance,))
            row["f1_frame"] = ev["f1_frame"]
            row["f1_switch"] = ev["f1_switch"][cfg.switch_tolerance]
        result.metrics.append(row)
        if writer is not None:
            writer.writerow(row)
            fh.flush()
        if progress is not None:
            progress(row)
        log.info("step %d nll %.4g ce %.4g beta %.4g tau %.4g f1 %.3f",
                 step, row["nll"], row["ce"], beta, tau, row["f1_frame"])

    def save_ckpt(step):
        if out is None:
            return
        path = out / f"ckpt_{step:08d}.bin"
        save_training_checkpoint(path, params, opt_state, step)
        result.checkpoints.append(path)

    try:
        if resume_from is None:
            record(start)
            save_ckpt(start)
        if start in snapshot_steps:
            result.snapshots[start] = cast_tree(params, jnp.float64)
        bad = 0
        for step in range(start + 1, cfg.steps + 1):
            idx = batch_indices(cfg.seed, step, n, cfg.batch_size)
            beta, tau, lr = cfg.beta(step - 1), tau_schedule(step - 1), cfg.learning_rate(step - 1)
            params, opt_state, loss, _, info = step_fn(
                params, opt_state, x_train[idx], jax.random.fold_in(step_key, step), beta, tau, lr)
            if bool(info["skipped"]) or not np.isfinite(float(loss)):
                bad += 1
                result.skipped_steps += 1
                log.warning("step %d: non-finite objective, update skipped", step)
                if bad >= max_bad_steps:
                    if out is not None:
                        save_training_checkpoint(out / "ckpt_last_good.bin", params, opt_state, step)
                    raise DivergenceError(f"objective diverged at step {step}", step=step)
            else:
                bad = 0
            if step in snapshot_steps:
                result.snapshots[step] = cast_tree(params, jnp.float64)
            if step % cfg.log_every == 0 or step == cfg.steps:
                record(step)
            if step % ckpt_every == 0 or step == cfg.steps:
                save_ckpt(step)
            result.params, result.opt_state, result.step = params, opt_state, step
    finally:
        if writer is not None:
            fh.close()
    result.params = cast_tree(params, jnp.float64)
    result.opt_state = cast_tree(opt_state, jnp.float64)
    result.step = max(result.step, start)
    return result


def train(model_config: ModelConfig, x_train, cfg: TrainConfig, **kwargs) -> TrainResult:
    """Collapsed SNLDS/SLDS training."""
    return fit(SwitchingModel(model_config), x_train, cfg, **kwargs)


def log_relative_nll(nll: Sequence[float]) -> np.ndarray:
    """ln(nll - min(nll) + 1) over a completed training log."""
    nll = np.asarray(nll, dtype=np.float64)
    finite = nll[np.isfinite(nll)]
    if finite.size == 0:
        return np.full_like(nll, np.nan)
    return np.log(nll - finite.min() + 1.0)


def with_steps(cfg: TrainConfig, steps: int) -> TrainConfig:
    return replace(cfg, steps=steps)
