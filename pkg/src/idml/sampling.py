"""Pair and triplet mining: semi-hard negatives and distance-weighted sampling.

Both strategies operate on a precomputed pairwise distance table (whatever
metric the caller trains with) plus per-sample label sets, so mixed samples
with two labels participate correctly: they are "positive" with either
source class and never get mined as negatives for them.
"""

from __future__ import annotations

import numpy as np

from idml.core import MiningExhausted, ParameterError, Rng, ShapeError, labels_match

__all__ = [
    "semi_hard_negative",
    "mine_triplets",
    "dw_log_weight",
    "dw_log_weights",
    "sample_negatives_dw",
    "sample_negatives_for_pairs",
]

# Distances between unit-norm embeddings live in (0, 2); the density edge
# values are clamped away from the poles before log evaluation.
D_CLAMP = 1e-4


def _check_dists(dists: np.ndarray, n_labels: int) -> np.ndarray:
    dists = np.asarray(dists, dtype=np.float64)
    if dists.ndim != 2 or dists.shape[0] != dists.shape[1]:
        raise ShapeError(f"distance table must be square, got {dists.shape}")
    if dists.shape[0] != n_labels:
        raise ShapeError(
            f"distance table is {dists.shape[0]}x{dists.shape[0]} for {n_labels} labels"
        )
    return dists


def semi_hard_negative(anchor: int, positive: int, dists, labels):
    """Closest negative still farther from the anchor than the positive.

    Returns the index minimizing D(a, n) subject to D(a, n) > D(a, p) and
    labels not matching, or None when no negative qualifies.
    """
    dists = _check_dists(dists, len(labels))
    d_ap = dists[anchor, positive]
    best, best_d = None, np.inf
    for n in range(len(labels)):
        if n == anchor or labels_match(labels[anchor], labels[n]):
            continue
        d_an = dists[anchor, n]
        if d_an > d_ap and d_an < best_d:
            best, best_d = n, d_an
    return best


def mine_triplets(dists, labels):
    """Semi-hard triplets for every ordered (anchor, positive) pair.

    Returns (triplets, n_skipped): an (T, 3) int array of (a, p, n) rows and
    the count of anchor-positive pairs whose qualifying negative set was
    empty (those contribute no loss term).
    """
    dists = _check_dists(dists, len(labels))
    n = len(labels)
    triplets, skipped = [], 0
    for a in range(n):
        for p in range(n):
            if p == a or not labels_match(labels[a], labels[p]):
                continue
            neg = semi_hard_negative(a, p, dists, labels)
            if neg is None:
                skipped += 1
            else:
                triplets.append((a, p, neg))
    out = np.array(triplets, dtype=np.intp).reshape(-1, 3)
    return out, skipped


def dw_log_weight(d: float, n_dim: int, phi: float) -> float:
    """Log of the inverse-density sampling weight at distance d.

    The pairwise-distance density on the unit (n-1)-sphere is proportional
    to d^(n-2) * (1 - d^2/4)^((n-3)/2); sampling proportionally to its
    clamped inverse min(phi, 1/density) flattens the otherwise very peaked
    distance distribution. Evaluated fully in the log domain because
    d^(2-n) overflows for large n.
    """
    return float(dw_log_weights(np.array([d]), n_dim, phi)[0])


def dw_log_weights(d, n_dim: int, phi: float) -> np.ndarray:
    """Vectorized dw_log_weight; clamps d into [D_CLAMP, 2 - D_CLAMP]."""
    if n_dim < 1:
        raise ParameterError(f"n_dim must be positive, got {n_dim}")
    if phi <= 0:
        raise ParameterError(f"phi must be positive, got {phi}")
    d = np.clip(np.asarray(d, dtype=np.float64), D_CLAMP, 2.0 - D_CLAMP)
    lw = (2.0 - n_dim) * np.log(d) + ((3.0 - n_dim) / 2.0) * np.log1p(-0.25 * d * d)
    return np.minimum(np.log(phi), lw)


def sample_negatives_dw(anchor: int, dists, labels, n_dim: int, phi: float, rng: Rng) -> int:
    """Draw one negative for the anchor, distance-weighted.

    Selection probability is proportional to exp(dw_log_weight(D(a, n)))
    over the anchor's in-batch negatives, normalized after subtracting the
    max log weight for stability.
    """
    dists = _check_dists(dists, len(labels))
    neg = np.array(
        [n for n in range(len(labels)) if n != anchor and not labels_match(labels[anchor], labels[n])],
        dtype=np.intp,
    )
    if neg.size == 0:
        raise MiningExhausted(f"anchor {anchor} has no negatives in this batch")
    lw = dw_log_weights(dists[anchor, neg], n_dim, phi)
    w = np.exp(lw - lw.max())
    p = w / w.sum()
    return int(rng.choice(neg, p=p))


def sample_negatives_for_pairs(pos_pairs, dists, labels, n_dim: int, phi: float, rng: Rng):
    """One distance-weighted negative per positive pair, anchored at its first index.

    Pairs whose anchor has no in-batch negative are skipped. Returns an
    (M, 2) int array of (anchor, negative) rows.
    """
    out = []
    for i, _ in np.asarray(pos_pairs, dtype=np.intp).reshape(-1, 2):
        try:
            out.append((int(i), sample_negatives_dw(int(i), dists, labels, n_dim, phi, rng)))
        except MiningExhausted:
            continue
    return np.array(out, dtype=np.intp).reshape(-1, 2)
