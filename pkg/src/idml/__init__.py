"""Introspective deep metric learning at desk scale.

An uncertainty-aware similarity metric (a semantic embedding s plus an
uncertainty embedding u per sample), its integration into seven metric
learning losses, mixup with set-valued labels, a small two-headed encoder
with hand-verified analytic gradients, and a retrieval/clustering
evaluation suite, all driven by the ``idml`` command-line harness.
"""

__version__ = "0.1.0"

from idml.core import (
    Batch,
    EmbeddingPair,
    MetricParams,
    Rng,
    l2_norm,
    labels_match,
)
from idml.metric import (
    PairGeometry,
    cosine_similarity,
    euclidean_distance,
    gradient_weight,
    ism_dissim,
    ism_distance,
    ism_similarity,
    ism_strict,
    kl_gaussian,
    pair_geometry,
    pair_uncertainty_sumnorm,
)

__all__ = [
    "Batch",
    "EmbeddingPair",
    "MetricParams",
    "PairGeometry",
    "Rng",
    "cosine_similarity",
    "euclidean_distance",
    "gradient_weight",
    "ism_dissim",
    "ism_distance",
    "ism_similarity",
    "ism_strict",
    "kl_gaussian",
    "l2_norm",
    "labels_match",
    "pair_geometry",
    "pair_uncertainty_sumnorm",
]
