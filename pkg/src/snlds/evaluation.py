"""Segmentation scoring.

Predicted state labels are arbitrary, so they are first aligned to the ground
truth labels, then scored frame by frame and at change points.  Frame-wise F1
macro-averages precision and recall over the ground-truth classes.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import jax
import numpy as np

from snlds.errors import UsageError

log = logging.getLogger(__name__)

ALIGN_MODES = ("permutation", "greedy", "merging")
MAX_PERMUTATION_STATES = 8


@dataclass
class SegmentationResult:
    s_hat: np.ndarray
    gamma1: np.ndarray
    alignment: dict[int, int]
    f1_frame: float
    f1_switch: dict[int, float] = field(default_factory=dict)


def decode(gamma1) -> np.ndarray:
    """Per-step argmax; ``np.argmax`` returns the first maximum, so ties go to the lower index."""
    return np.argmax(np.asarray(gamma1), axis=-1)


def _as_labels(seq) -> np.ndarray:
    arr = np.asarray(seq)
    if arr.ndim != 1:
        raise UsageError(f"label sequences must be 1-d, got shape {arr.shape}")
    return arr.astype(np.int64)


def confusion(pred, truth, n_pred: int, n_true: int) -> np.ndarray:
    counts = np.zeros((n_pred, n_true), dtype=np.int64)
    np.add.at(counts, (pred, truth), 1)
    return counts


def _macro_f1_from_counts(tp, pred_count, true_count) -> np.ndarray:
    """Macro F1 over truth classes; arrays have the class axis last."""
    present = true_count > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_count > 0, tp / np.maximum(pred_count, 1), 0.0)
        recall = tp / np.maximum(true_count, 1)
    n_cls = present.sum()
    p = (precision * present).sum(axis=-1) / n_cls
    r = (recall * present).sum(axis=-1) / n_cls
    with np.errstate(divide="ignore", invalid="ignore"):
        f1 = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1.0), 0.0)
    return f1


def f1_frame(pred_aligned, truth) -> float:
    pred, truth = _as_labels(pred_aligned), _as_labels(truth)
    if pred.shape != truth.shape:
        raise UsageError(f"length mismatch: {pred.shape[0]} vs {truth.shape[0]}")
    if truth.size == 0:
        raise UsageError("frame-wise F1 is undefined for empty sequences")
    classes = np.unique(truth)
    tp = np.array([np.sum((pred == c) & (truth == c)) for c in classes], dtype=float)
    pred_count = np.array([np.sum(pred == c) for c in classes], dtype=float)
    true_count = np.array([np.sum(truth == c) for c in classes], dtype=float)
    return float(_macro_f1_from_counts(tp, pred_count, true_count))


def _apply(mapping: dict[int, int], pred: np.ndarray) -> np.ndarray:
    lut = np.array([mapping[p] for p in range(len(mapping))], dtype=np.int64)
    return lut[pred]


def align_labels(pred, truth, mode: str = "permutation", n_pred: int | None = None,
                 n_true: int | None = None) -> tuple[np.ndarray, dict[int, int]]:
    """Relabel ``pred`` to best agree with ``truth``.

    Returns the relabeled sequence and the mapping from predicted to truth
    labels.  Predicted labels left without a partner are mapped to fresh labels
    ``>= n_true`` that never match.
    """
    if mode not in ALIGN_MODES:
        raise UsageError(f"unknown alignment mode {mode!r}")
    pred, truth = _as_labels(pred), _as_labels(truth)
    if pred.shape != truth.shape:
        raise UsageError(f"length mismatch: {pred.shape[0]} vs {truth.shape[0]}")
    n_pred = max(n_pred or 0, int(pred.max(initial=-1)) + 1)
    n_true = max(n_true or 0, int(truth.max(initial=-1)) + 1)
    counts = confusion(pred, truth, n_pred, n_true)

    if mode == "merging":
        mapping = {p: int(np.argmax(counts[p])) for p in range(n_pred)}
    elif mode == "greedy":
        mapping = _greedy_mapping(counts)
    else:
        if n_pred > MAX_PERMUTATION_STATES:
            raise UsageError(
                f"permutation alignment supports at most {MAX_PERMUTATION_STATES} "
                f"predicted states, got {n_pred}")
        mapping = _best_permutation(counts)
    return _apply(mapping, pred), mapping


def _greedy_mapping(counts: np.ndarray) -> dict[int, int]:
    n_pred, n_true = counts.shape
    order = sorted(((-counts[p, c], c, p) for p in range(n_pred) for c in range(n_true)))
    mapping: dict[int, int] = {}
    used: set[int] = set()
    for _, c, p in order:
        if p in mapping or c in used:
            continue
        mapping[p] = c
        used.add(c)
    spare = itertools.count(n_true)
    for p in range(n_pred):
        if p not in mapping:
            mapping[p] = next(spare)
    return mapping


def _best_permutation(counts: np.ndarray) -> dict[int, int]:
    n_pred, n_true = counts.shape
    size = max(n_pred, n_true)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[:n_pred, :n_true] = counts
    true_count = padded.sum(axis=0).astype(float)[:n_true]
    perms = np.array(list(itertools.permutations(range(size))), dtype=np.int64)
    # perms[i, c] = predicted label assigned to truth label c
    tp = padded[perms[:, :n_true], np.arange(n_true)].astype(float)
    pred_count = padded.sum(axis=1)[perms[:, :n_true]].astype(float)
    scores = _macro_f1_from_counts(tp, pred_count, true_count)
    best = perms[int(np.argmax(scores))]
    mapping = {int(best[c]): c for c in range(size)}
    return {p: mapping[p] for p in range(n_pred)}


def change_points(seq) -> list[tuple[int, int]]:
    """(time, new label) for every t >= 1 where the label differs from t-1."""
    seq = _as_labels(seq)
    idx = np.flatnonzero(seq[1:] != seq[:-1]) + 1
    return [(int(t), int(seq[t])) for t in idx]


def switch_counts(pred_aligned, truth, tolerance: int,
                  require_label: bool = True) -> tuple[int, int, int]:
    """(matched, n_predicted, n_true) change points under greedy nearest-first matching."""
    if tolerance < 0:
        raise UsageError("tolerance must be non-negative")
    pred, truth = _as_labels(pred_aligned), _as_labels(truth)
    if pred.shape != truth.shape:
        raise UsageError(f"length mismatch: {pred.shape[0]} vs {truth.shape[0]}")
    p_cp, t_cp = change_points(pred), change_points(truth)
    candidates = []
    for i, (tp, lp) in enumerate(p_cp):
        for j, (tt, lt) in enumerate(t_cp):
            gap = abs(tp - tt)
            if gap <= tolerance and (lp == lt or not require_label):
                candidates.append((gap, tt, tp, i, j))
    candidates.sort()
    used_p, used_t = set(), set()
    for _, _, _, i, j in candidates:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
    return len(used_p), len(p_cp), len(t_cp)


def _switch_f1(matched: int, n_pred: int, n_true: int) -> float:
    if n_true == 0:
        if n_pred == 0:
            log.debug("no change points in truth or prediction; switching F1 reported as 1.0")
            return 1.0
        return 0.0
    if n_pred == 0 or matched == 0:
        return 0.0
    precision, recall = matched / n_pred, matched / n_true
    return 2 * precision * recall / (precision + recall)


def f1_switch(pred_aligned, truth, tolerance: int = 0, require_label: bool = True) -> float:
    return _switch_f1(*switch_counts(pred_aligned, truth, tolerance, require_label))


def evaluate_dataset(preds: Sequence, truths: Sequence, mode: str = "permutation",
                     tolerances: Sequence[int] = (0, 5), n_pred: int | None = None,
                     require_label: bool = True) -> dict:
    """Score a set of sequences with one alignment shared by all of them.

    The alignment is fitted on the concatenated frames; switching-point counts
    are pooled across sequences before forming F1.
    """
    if len(preds) != len(truths):
        raise UsageError("need one prediction per ground-truth sequence")
    lengths = [len(p) for p in preds]
    flat_pred = np.concatenate([_as_labels(p) for p in preds])
    flat_true = np.concatenate([_as_labels(t) for t in truths])
    aligned, mapping = align_labels(flat_pred, flat_true, mode, n_pred=n_pred)
    pieces = np.split(aligned, np.cumsum(lengths)[:-1])
    out = {"alignment": mapping, "f1_frame": f1_frame(aligned, flat_true), "f1_switch": {}}
    for tol in tolerances:
        totals = np.zeros(3, dtype=np.int64)
        for p, t in zip(pieces, truths):
            totals += switch_counts(p, t, tol, require_label)
        out["f1_switch"][tol] = _switch_f1(*map(int, totals))
    return out


def segment(gamma1, truth=None, mode: str = "permutation",
            tolerances: Sequence[int] = (0, 5)) -> SegmentationResult:
    gamma1 = np.asarray(gamma1)
    s_hat = decode(gamma1)
    if truth is None:
        return SegmentationResult(s_hat, gamma1, {}, float("nan"))
    aligned, mapping = align_labels(s_hat, truth, mode, n_pred=gamma1.shape[-1])
    return SegmentationResult(
        s_hat, gamma1, mapping, f1_frame(aligned, truth),
        {tol: f1_switch(aligned, truth, tol) for tol in tolerances})


def state_usage(preds: Sequence, n_states: int) -> np.ndarray:
    """Fraction of decoded frames assigned to each state."""
    flat = np.concatenate([_as_labels(p) for p in preds])
    return np.bincount(flat, minlength=n_states)[:n_states] / max(flat.size, 1)


def pairwise_weight_correlations(state_vectors: np.ndarray) -> tuple[np.ndarray, list]:
    """Pearson matrix over rows; rows with zero variance give NaN entries."""
    vecs = np.asarray(state_vectors, dtype=np.float64)
    K = vecs.shape[0]
    centered = vecs - vecs.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    corr = np.full((K, K), np.nan)
    skipped = []
    for i in range(K):
        for j in range(K):
            if norms[i] == 0.0 or norms[j] == 0.0:
                if i < j:
                    skipped.append((i, j))
                continue
            corr[i, j] = centered[i] @ centered[j] / (norms[i] * norms[j])
    return corr, skipped


def transition_weight_vectors(gen_params) -> np.ndarray:
    """Flatten each state's continuous-transition parameters into one row."""
    trees = [gen_params["transition"]]
    if "transition_gru" in gen_params:
        trees.append(gen_params["transition_gru"])
    leaves = [np.asarray(leaf) for tree in trees for leaf in jax.tree_util.tree_leaves(tree)]
    K = leaves[0].shape[0]
    return np.concatenate([leaf.reshape(K, -1) for leaf in leaves], axis=1)


def weight_correlation(gen_params) -> float:
    """Mean Pearson correlation of per-state transition weights over unordered state pairs."""
    vecs = transition_weight_vectors(gen_params)
    K = vecs.shape[0]
    if K < 2:
        raise UsageError("weight correlation needs at least two states")
    corr, skipped = pairwise_weight_correlations(vecs)
    if skipped:
        log.warning("skipped zero-variance state pairs %s", skipped)
    vals = [corr[i, j] for i in range(K) for j in range(i + 1, K) if np.isfinite(corr[i, j])]
    return float(np.mean(vals)) if vals else float("nan")
