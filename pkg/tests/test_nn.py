import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from conftest import central_difference, max_relative_error
from snlds import nn
from snlds.errors import ConfigurationError, NumericError, UsageError


def numpy_mlp(params, x, acts):
    h = np.asarray(x, dtype=np.float64)
    for layer, act in zip(params, acts):
        w, b = np.asarray(layer["w"]), np.asarray(layer["b"])
        out = np.zeros(w.shape[1])
        for j in range(w.shape[1]):
            out[j] = b[j] + sum(h[i] * w[i, j] for i in range(w.shape[0]))
        h = {"relu": np.maximum(out, 0.0), "tanh": np.tanh(out), "identity": out}[act]
    return h


def scalar_gru(params, h, x):
    """Element-by-element GRU, independent of the vectorized implementation."""
    n = len(h)
    w_x, w_h = np.asarray(params["w_x"]), np.asarray(params["w_h"])
    b_x, b_h = np.asarray(params["b_x"]), np.asarray(params["b_h"])

    def pre(gate, j, with_h=True):
        col = gate * n + j
        gx = b_x[col] + sum(x[i] * w_x[i, col] for i in range(len(x)))
        gh = b_h[col] + sum(h[i] * w_h[i, col] for i in range(n))
        return gx, gh

    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    out = []
    for j in range(n):
        rx, rh = pre(0, j)
        ux, uh = pre(1, j)
        nx, nh = pre(2, j)
        r = sig(rx + rh)
        u = sig(ux + uh)
        cand = math.tanh(nx + r * nh)
        out.append((1 - u) * h[j] + u * cand)
    return np.array(out)


# -- MlpSpec / mlp_forward -------------------------------------------------------

def test_mlp_spec_defaults_to_identity_output():
    spec = nn.MlpSpec.make(3, (5, 4), 2)
    assert spec.widths == (3, 5, 4, 2)
    assert spec.activations == ("relu", "relu", "identity")


@pytest.mark.parametrize("widths,acts", [((3,), ()), ((3, 0), ("identity",)),
                                         ((3, 2), ("relu", "relu")), ((3, 2), ("gelu",))])
def test_mlp_spec_rejects_bad_layouts(widths, acts):
    with pytest.raises(ConfigurationError):
        nn.MlpSpec(widths, acts)


def test_mlp_identity_layer():
    spec = nn.MlpSpec.make(2, (), 2)
    params = [{"w": jnp.eye(2), "b": jnp.zeros(2)}]
    np.testing.assert_allclose(nn.mlp_forward(spec, params, jnp.array([1.0, 2.0])), [1.0, 2.0])


def test_mlp_zero_weights_annihilate():
    spec = nn.MlpSpec.make(3, (4,), 2)
    params = jax.tree_util.tree_map(jnp.zeros_like, nn.init_mlp(jax.random.PRNGKey(0), spec))
    np.testing.assert_array_equal(nn.mlp_forward(spec, params, jnp.array([1.0, -2.0, 3.0])), 0.0)


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_mlp_matches_matrix_oracle(rng, act):
    spec = nn.MlpSpec.make(3, (5,), 2, activation=act)
    for seed in range(5):
        params = nn.init_mlp(jax.random.PRNGKey(seed), spec)
        params = jax.tree_util.tree_map(lambda a: a + 0.1 * rng.standard_normal(a.shape), params)
        x = rng.standard_normal(3)
        expected = numpy_mlp(params, x, spec.activations)
        np.testing.assert_allclose(nn.mlp_forward(spec, params, jnp.asarray(x)), expected,
                                   rtol=1e-12, atol=1e-12)


def test_mlp_batches_over_leading_axes(rng):
    spec = nn.MlpSpec.make(3, (4,), 2)
    params = nn.init_mlp(jax.random.PRNGKey(1), spec)
    x = rng.standard_normal((2, 5, 3))
    out = nn.mlp_forward(spec, params, jnp.asarray(x))
    assert out.shape == (2, 5, 2)
    np.testing.assert_allclose(out[1, 3], numpy_mlp(params, x[1, 3], spec.activations), atol=1e-12)


def test_mlp_dimension_mismatch():
    spec = nn.MlpSpec.make(3, (), 2)
    params = nn.init_mlp(jax.random.PRNGKey(0), spec)
    with pytest.raises(ConfigurationError):
        nn.mlp_forward(spec, params, jnp.ones(4))


def test_initializer_bounds_and_zero_bias():
    layer = nn.init_linear(jax.random.PRNGKey(3), 30, 20)
    limit = math.sqrt(6.0 / 50)
    assert layer["w"].dtype == jnp.float64
    assert float(jnp.max(jnp.abs(layer["w"]))) <= limit
    np.testing.assert_array_equal(layer["b"], 0.0)


# -- GRU -------------------------------------------------------------------------

def test_gru_zero_parameters_keep_zero_state():
    params = jax.tree_util.tree_map(jnp.zeros_like, nn.init_gru(jax.random.PRNGKey(0), 3, 4))
    np.testing.assert_array_equal(nn.gru_step(params, jnp.zeros(4), jnp.zeros(3)), 0.0)


def test_gru_saturated_update_gate_returns_candidate(rng):
    params = nn.init_gru(jax.random.PRNGKey(2), 3, 4)
    params["b_x"] = params["b_x"].at[4:8].set(50.0)  # update gate pre-activation
    h, x = rng.standard_normal(4) * 0.5, rng.standard_normal(3)
    w_x, w_h = np.asarray(params["w_x"]), np.asarray(params["w_h"])
    r = 1 / (1 + np.exp(-(x @ w_x[:, :4] + h @ w_h[:, :4])))
    candidate = np.tanh(x @ w_x[:, 8:] + r * (h @ w_h[:, 8:]))
    np.testing.assert_allclose(nn.gru_step(params, jnp.asarray(h), jnp.asarray(x)), candidate,
                               atol=1e-12)


def test_gru_matches_scalar_oracle(rng):
    for seed in range(5):
        params = nn.init_gru(jax.random.PRNGKey(seed), 3, 4)
        params = jax.tree_util.tree_map(lambda a: a + 0.2 * rng.standard_normal(a.shape), params)
        h, x = np.tanh(rng.standard_normal(4)), rng.standard_normal(3)
        np.testing.assert_allclose(nn.gru_step(params, jnp.asarray(h), jnp.asarray(x)),
                                   scalar_gru(params, h, x), rtol=1e-12, atol=1e-12)


def test_gru_state_stays_in_open_unit_interval(rng):
    params = nn.init_gru(jax.random.PRNGKey(7), 2, 5)
    h = jnp.zeros(5)
    for _ in range(50):
        h = nn.gru_step(params, h, jnp.asarray(rng.standard_normal(2)))
        assert np.all(np.abs(np.asarray(h)) < 1.0)
    # saturated gates can round to the boundary but never cross it
    params = jax.tree_util.tree_map(lambda a: 10.0 * a, params)
    for _ in range(50):
        h = nn.gru_step(params, h, jnp.asarray(10.0 * rng.standard_normal(2)))
        assert np.all(np.abs(np.asarray(h)) <= 1.0)


def test_gru_scan_equals_repeated_steps(rng):
    params = nn.init_gru(jax.random.PRNGKey(4), 2, 3)
    xs = jnp.asarray(rng.standard_normal((6, 2)))
    h = jnp.zeros(3)
    manual = []
    for x in xs:
        h = nn.gru_step(params, h, x)
        manual.append(h)
    np.testing.assert_allclose(nn.gru_scan(params, xs, jnp.zeros(3)), np.stack(manual), atol=1e-13)
    h = jnp.zeros(3)
    manual = []
    for x in xs[::-1]:
        h = nn.gru_step(params, h, x)
        manual.append(h)
    np.testing.assert_allclose(nn.gru_scan(params, xs, jnp.zeros(3), reverse=True),
                               np.stack(manual[::-1]), atol=1e-13)


def test_gru_dimension_mismatch():
    params = nn.init_gru(jax.random.PRNGKey(0), 3, 4)
    with pytest.raises(ConfigurationError):
        nn.gru_step(params, jnp.zeros(5), jnp.zeros(3))
    with pytest.raises(ConfigurationError):
        nn.gru_step(params, jnp.zeros(4), jnp.zeros(2))


# -- backward --------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    value, grads = nn.backward(lambda p: jnp.sum(p["v"]), {"v": jnp.arange(4.0)})
    assert float(value) == 6.0
    np.testing.assert_array_equal(grads["v"], 1.0)


def test_backward_of_square():
    _, grads = nn.backward(lambda x: x * x, jnp.asarray(3.0))
    assert float(grads) == 6.0


def test_backward_requires_scalar_root():
    with pytest.raises(UsageError):
        nn.backward(lambda x: 2 * x, jnp.ones(3))


def composite(params, x):
    """A small graph touching every differentiable building block."""
    spec = nn.MlpSpec.make(2, (3,), 2, activation="tanh")
    h = nn.gru_scan(params["gru"], x, jnp.zeros(2))
    y = nn.mlp_forward(spec, params["mlp"], h)
    lp = nn.gaussian_log_prob(x, y, params["log_scale"])
    return jnp.sum(lp) + jnp.sum(nn.gaussian_entropy(params["log_scale"]) * jnp.sum(h ** 2))


def test_backward_matches_finite_differences_on_random_graphs(rng):
    f = jax.jit(composite)
    spec = nn.MlpSpec.make(2, (3,), 2, activation="tanh")
    worst = 0.0
    for trial in range(100):
        key = jax.random.PRNGKey(trial)
        k1, k2 = jax.random.split(key)
        params = {"gru": nn.init_gru(k1, 2, 2), "mlp": nn.init_mlp(k2, spec),
                  "log_scale": jnp.asarray(0.3 * rng.standard_normal(2))}
        params = jax.tree_util.tree_map(lambda a: a + 0.1 * rng.standard_normal(a.shape), params)
        x = jnp.asarray(rng.standard_normal((3, 2)))
        _, grads = nn.backward(f, params, x)
        fd = central_difference(lambda p: f(p, x), params)
        worst = max(worst, max_relative_error(grads, fd))
    assert worst <= 1e-4


def test_forward_is_deterministic(rng):
    spec = nn.MlpSpec.make(2, (3,), 2, activation="tanh")
    params = {"gru": nn.init_gru(jax.random.PRNGKey(0), 2, 2),
              "mlp": nn.init_mlp(jax.random.PRNGKey(1), spec), "log_scale": jnp.zeros(2)}
    x = jnp.asarray(rng.standard_normal((4, 2)))
    assert float(composite(params, x)) == float(composite(params, x))


def test_global_norm_and_parameter_count():
    tree = {"a": jnp.array([3.0]), "b": [jnp.array([[4.0, 0.0]])]}
    assert float(nn.global_norm(tree)) == 5.0
    assert nn.count_parameters(tree) == 3


# -- Gaussian helpers --------------------------------------------------------------

def test_gaussian_log_prob_examples():
    np.testing.assert_allclose(nn.gaussian_log_prob(jnp.zeros(1), jnp.zeros(1), jnp.zeros(1)),
                               -0.918939, atol=1e-6)
    np.testing.assert_allclose(nn.gaussian_log_prob(jnp.ones(1), jnp.zeros(1), jnp.zeros(1)),
                               -1.418939, atol=1e-6)


def test_gaussian_log_prob_term_by_term(rng):
    x, mu, ls = rng.standard_normal((3, 4))
    expected = 0.0
    for d in range(4):
        sigma = math.exp(ls[d])
        expected += -0.5 * math.log(2 * math.pi) - math.log(sigma) - 0.5 * ((x[d] - mu[d]) / sigma) ** 2
    np.testing.assert_allclose(nn.gaussian_log_prob(*map(jnp.asarray, (x, mu, ls))), expected,
                               rtol=1e-13)


@pytest.mark.parametrize("mu,log_sigma", [(0.0, 0.0), (1.5, -0.7), (-3.0, 1.2)])
def test_gaussian_density_integrates_to_one(mu, log_sigma):
    sigma = math.exp(log_sigma)
    grid = np.linspace(mu - 8 * sigma, mu + 8 * sigma, 20001)
    logp = nn.gaussian_log_prob(jnp.asarray(grid)[:, None], jnp.full((1,), mu),
                                jnp.full((1,), log_sigma))
    assert abs(np.trapezoid(np.exp(np.asarray(logp)), grid) - 1.0) < 1e-6


def test_gaussian_log_prob_rejects_non_finite():
    with pytest.raises(NumericError):
        nn.gaussian_log_prob(jnp.array([np.nan]), jnp.zeros(1), jnp.zeros(1))
    with pytest.raises(NumericError):
        nn.gaussian_entropy(jnp.array([np.inf]))


def test_gaussian_entropy_examples():
    np.testing.assert_allclose(nn.gaussian_entropy(jnp.zeros(1)), 1.418939, atol=1e-6)
    np.testing.assert_allclose(nn.gaussian_entropy(jnp.zeros(2)), 2.837877, atol=1e-6)
    ls = jnp.array([0.1, -0.4, 0.3])
    np.testing.assert_allclose(nn.gaussian_entropy(ls + math.log(2.0)) - nn.gaussian_entropy(ls),
                               3 * math.log(2.0), atol=1e-12)
