"""Shared oracles and helpers for the test suite.

The oracles here are deliberately naive: plain numpy loops and exhaustive
enumeration, sharing no code with the package under test.
"""

import itertools

import jax
import numpy as np
import pytest

import snlds  # noqa: F401  (enables 64-bit floats)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_log_potentials(rng, T, K, scale=2.0):
    """Row-normalized log transitions and initial distribution, arbitrary log evidence."""
    def log_normalize(a):
        a = a - a.max(axis=-1, keepdims=True)
        return a - np.log(np.exp(a).sum(axis=-1, keepdims=True))

    log_A = log_normalize(scale * rng.standard_normal((T, K, K)))
    log_B = scale * rng.standard_normal((T, K))
    log_pi = log_normalize(scale * rng.standard_normal(K))
    return log_A, log_B, log_pi


def enumerate_posterior(log_A, log_B, log_pi):
    """log Z, unary and pairwise marginals by summing over all K**T paths."""
    log_A, log_B, log_pi = map(np.asarray, (log_A, log_B, log_pi))
    T, K = log_B.shape
    weights = {}
    for path in itertools.product(range(K), repeat=T):
        w = log_pi[path[0]] + log_B[0, path[0]]
        for t in range(1, T):
            w += log_A[t, path[t - 1], path[t]] + log_B[t, path[t]]
        weights[path] = w
    values = np.array(list(weights.values()))
    top = values.max()
    log_Z = top + np.log(np.exp(values - top).sum())
    gamma1 = np.zeros((T, K))
    gamma2 = np.zeros((max(T - 1, 0), K, K))
    for path, w in weights.items():
        p = np.exp(w - log_Z)
        for t in range(T):
            gamma1[t, path[t]] += p
        for t in range(1, T):
            gamma2[t - 1, path[t - 1], path[t]] += p
    return log_Z, gamma1, gamma2


def central_difference(fn, tree, h=1e-5):
    """Gradient of the scalar ``fn(tree)`` by central differences, leaf by leaf."""
    leaves, treedef = jax.tree_util.tree_flatten(tree)
    leaves = [np.array(leaf, dtype=np.float64) for leaf in leaves]
    grads = []
    for i, leaf in enumerate(leaves):
        g = np.zeros_like(leaf)
        for idx in np.ndindex(leaf.shape):
            orig = leaf[idx]
            leaf[idx] = orig + h
            up = float(fn(jax.tree_util.tree_unflatten(treedef, leaves)))
            leaf[idx] = orig - h
            down = float(fn(jax.tree_util.tree_unflatten(treedef, leaves)))
            leaf[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return jax.tree_util.tree_unflatten(treedef, grads)


def max_relative_error(a_tree, b_tree, floor=1e-3):
    """max |a - b| / max(|a|, |b|, floor) over all leaves."""
    worst = 0.0
    for a, b in zip(jax.tree_util.tree_leaves(a_tree), jax.tree_util.tree_leaves(b_tree)):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
