"""The introspective similarity metric family and its reference baselines.

Each sample is embedded twice: a semantic vector s and an uncertainty
vector u. For a pair, alpha = ||s1 - s2|| is the semantic distance and
beta = ||u1 + u2|| the pair uncertainty (vectors are summed before the
norm, so opposed uncertainties can cancel). Relative uncertainty
beta_rel = (beta + gamma) / alpha then attenuates the metric:

    distance form    D = alpha * exp(-beta_rel / tau)
    similarity form  C' = 1 - (1 - C) * exp(-beta_rel / tau)

An uncertain pair looks closer / more similar, so it pulls on the model
more gently. The module also provides the strict (indicator) variant, the
"treat uncertain as dissimilar" ablation, the sum-of-norms uncertainty
ablation, and the gradient attenuation factor H = dD/dalpha.

Scalar functions operate on single pairs; the *_table helpers evaluate a
whole pairwise matrix together with its partial derivatives and are the
entry points the losses use.

Note D is not a metric in the strict sense: it can violate the triangle
inequality (tests construct an explicit counterexample).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from idml.core import (
    DegenerateInputError,
    EmbeddingPair,
    MetricParams,
    ParameterError,
    ShapeError,
    as_vector,
)

__all__ = [
    "METRIC_NAMES",
    "PairGeometry",
    "euclidean_distance",
    "kl_gaussian",
    "pair_geometry",
    "pair_uncertainty_sumnorm",
    "ism_strict",
    "ism_distance",
    "ism_similarity",
    "ism_dissim",
    "gradient_weight",
    "cosine_similarity",
    "pairwise_semantic_distance",
    "pairwise_pair_uncertainty",
    "distance_table",
    "similarity_table",
]

# Selector values accepted by the losses and the harness. "euclidean" is the
# uncertainty-blind baseline (plain distance / plain cosine); "uncert_sumnorm"
# is the ISM with beta = ||u1|| + ||u2|| instead of ||u1 + u2||.
METRIC_NAMES = ("euclidean", "ism", "ism_strict", "ism_dis", "uncert_sumnorm")


@dataclass(frozen=True)
class PairGeometry:
    """Semantic distance, pair uncertainty, and their ratio for one pair."""

    alpha: float
    beta: float
    beta_rel: float


def _check_same_dim(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what} dims differ: {a.shape[0]} vs {b.shape[0]}")


def euclidean_distance(s1, s2) -> float:
    """Plain Euclidean distance between two semantic vectors."""
    s1, s2 = as_vector(s1, "s1"), as_vector(s2, "s2")
    _check_same_dim(s1, s2, "semantic")
    return float(np.linalg.norm(s1 - s2))


def kl_gaussian(mu1, sigma1, mu2, sigma2) -> float:
    """KL divergence of two diagonal Gaussians, reference baseline only.

    Evaluates, per dimension k (sigmas are standard deviations):

        -1/2 * sum_k [ log(s1k^2/s2k^2) - s1k^2/s2k^2 - (mu1k-mu2k)^2/s2k^2 + 1 ]

    which is the standard closed-form KL(N1 || N2). Kept as the
    distributional-embedding baseline the introspective metric is
    contrasted against in tests; not used in training.
    """
    mu1, mu2 = as_vector(mu1, "mu1"), as_vector(mu2, "mu2")
    sigma1, sigma2 = as_vector(sigma1, "sigma1"), as_vector(sigma2, "sigma2")
    for v, w in ((mu1, mu2), (mu1, sigma1), (mu1, sigma2)):
        _check_same_dim(v, w, "gaussian")
    if np.any(sigma1 <= 0) or np.any(sigma2 <= 0):
        raise ParameterError("sigma entries must be strictly positive")
    ratio = sigma1**2 / sigma2**2
    sq = (mu1 - mu2) ** 2 / sigma2**2
    return float(-0.5 * np.sum(np.log(ratio) - ratio - sq + 1.0))


def pair_geometry(p1: EmbeddingPair, p2: EmbeddingPair, mp: MetricParams) -> PairGeometry:
    """alpha, beta, and beta_rel = (beta + gamma) / max(alpha, alpha_min)."""
    _check_same_dim(p1.semantic, p2.semantic, "semantic")
    _check_same_dim(p1.uncertainty, p2.uncertainty, "uncertainty")
    alpha = float(np.linalg.norm(p1.semantic - p2.semantic))
    beta = float(np.linalg.norm(p1.uncertainty + p2.uncertainty))
    beta_rel = (beta + mp.gamma) / max(alpha, mp.alpha_min)
    return PairGeometry(alpha=alpha, beta=beta, beta_rel=beta_rel)


def pair_uncertainty_sumnorm(p1: EmbeddingPair, p2: EmbeddingPair) -> float:
    """Ablation uncertainty ||u1|| + ||u2|| (cannot cancel, unlike ||u1 + u2||)."""
    _check_same_dim(p1.uncertainty, p2.uncertainty, "uncertainty")
    return float(np.linalg.norm(p1.uncertainty) + np.linalg.norm(p2.uncertainty))


def ism_strict(p1: EmbeddingPair, p2: EmbeddingPair, mp: MetricParams) -> float:
    """Strict variant: alpha if alpha - beta - gamma > 0, else 0.

    A pair whose uncertainty (plus bias) covers its semantic distance is
    treated as indistinguishable.
    """
    g = pair_geometry(p1, p2, mp)
    return g.alpha if g.alpha - g.beta - mp.gamma > 0 else 0.0


def ism_distance(p1: EmbeddingPair, p2: EmbeddingPair, mp: MetricParams) -> float:
    """Introspective distance alpha * exp(-beta_rel / tau).

    Always <= alpha, symmetric, and equal to alpha exactly when beta_rel = 0.
    Identical semantic embeddings give 0 regardless of uncertainty.
    """
    g = pair_geometry(p1, p2, mp)
    if g.alpha == 0.0:
        return 0.0
    return g.alpha * float(np.exp(-g.beta_rel / mp.tau))


def ism_similarity(c: float, beta_rel: float, tau: float) -> float:
    """Similarity form 1 - (1 - c) * exp(-beta_rel / tau); in [c, 1]."""
    if not -1.0 <= c <= 1.0:
        raise ParameterError(f"cosine similarity must lie in [-1, 1], got {c}")
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    return 1.0 - (1.0 - c) * float(np.exp(-beta_rel / tau))


def ism_dissim(c: float, beta_rel: float, tau: float) -> float:
    """Ablation c * exp(-beta_rel / tau): shrinks similarity toward 0.

    Treats an uncertain pair as dissimilar instead of similar; kept for the
    ablation comparison (it trains worse).
    """
    if not -1.0 <= c <= 1.0:
        raise ParameterError(f"cosine similarity must lie in [-1, 1], got {c}")
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    return c * float(np.exp(-beta_rel / tau))


def gradient_weight(alpha: float, beta: float, mp: MetricParams) -> float:
    """Gradient attenuation H = exp(-bt/tau) * (1 + bt/tau), bt = (beta+gamma)/alpha.

    Equals dD/dalpha of the introspective distance; maximal value 1 at
    bt = 0, strictly decreasing in bt. This is the factor by which the
    introspective loss scales the baseline loss's semantic gradient.
    """
    if alpha < mp.alpha_min:
        raise ParameterError(f"alpha must be >= alpha_min={mp.alpha_min}, got {alpha}")
    x = (beta + mp.gamma) / alpha / mp.tau
    return float(np.exp(-x) * (1.0 + x))


def cosine_similarity(a, b, alpha_min: float = 1e-12) -> float:
    """Cosine of the angle between two nonzero vectors, clamped to [-1, 1]."""
    a, b = as_vector(a, "a"), as_vector(b, "b")
    _check_same_dim(a, b, "vector")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    c = float(np.dot(a, b)) / (max(na, alpha_min) * max(nb, alpha_min))
    return min(1.0, max(-1.0, c))


# ---------------------------------------------------------------------------
# Vectorized tables (the losses' entry points)
# ---------------------------------------------------------------------------


def pairwise_semantic_distance(S: np.ndarray, T: np.ndarray = None) -> np.ndarray:
    """All alpha values between rows of S and rows of T (default T = S).

    Computed via explicit differences (not the expanded dot-product form)
    so tiny distances keep full precision for the derivative checks.
    """
    S = np.asarray(S, dtype=np.float64)
    T = S if T is None else np.asarray(T, dtype=np.float64)
    diff = S[:, None, :] - T[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def pairwise_pair_uncertainty(U: np.ndarray, V: np.ndarray = None, sumnorm: bool = False) -> np.ndarray:
    """All beta values between rows of U and rows of V (default V = U).

    beta[i, j] = ||u_i + v_j||, or ||u_i|| + ||v_j|| when sumnorm is set
    (the ablation representation).
    """
    U = np.asarray(U, dtype=np.float64)
    V = U if V is None else np.asarray(V, dtype=np.float64)
    if sumnorm:
        nu = np.linalg.norm(U, axis=1)
        nv = np.linalg.norm(V, axis=1)
        return nu[:, None] + nv[None, :]
    summ = U[:, None, :] + V[None, :, :]
    return np.sqrt(np.sum(summ * summ, axis=2))


def _beta_rel_parts(A: np.ndarray, B: np.ndarray, mp: MetricParams):
    """Common pieces: clamped denominator, beta_rel, exp(-beta_rel/tau)."""
    denom = np.maximum(A, mp.alpha_min)
    bt = (B + mp.gamma) / denom
    E = np.exp(-bt / mp.tau)
    return denom, bt, E


def distance_table(metric: str, A: np.ndarray, B: np.ndarray, mp: MetricParams):
    """Distance matrix for the selected metric plus partials dD/dA and dD/dB.

    A holds pairwise semantic distances, B pairwise uncertainties (already in
    the representation the metric expects). For "ism_strict" the indicator is
    evaluated here and treated as locally constant by the partials.
    """
    if metric == "euclidean":
        return A.copy(), np.ones_like(A), np.zeros_like(A)
    denom, bt, E = _beta_rel_parts(A, B, mp)
    # dD/dA of alpha * E: E everywhere, plus the beta_rel/alpha response where
    # the clamp is inactive. dD/dB = -A * E / (tau * denom).
    live = A > mp.alpha_min
    dAE_dA = E * (1.0 + np.where(live, bt / mp.tau, 0.0))
    dAE_dB = -A * E / (mp.tau * denom)
    if metric in ("ism", "uncert_sumnorm"):
        return A * E, dAE_dA, dAE_dB
    if metric == "ism_dis":
        # Uncertain pairs pushed apart: D = alpha * (2 - E), in [alpha, 2*alpha].
        return A * (2.0 - E), 2.0 - dAE_dA, -dAE_dB
    if metric == "ism_strict":
        ind = (A - B - mp.gamma > 0).astype(np.float64)
        return A * ind, ind, np.zeros_like(A)
    raise ParameterError(f"unknown metric {metric!r}")


def similarity_table(metric: str, C: np.ndarray, B: np.ndarray, mp: MetricParams):
    """Similarity matrix for the selected metric plus partials dC'/dC, dC'/dB.

    C holds plain cosine similarities of L2-normalized semantic embeddings;
    the pair's alpha is their chord distance sqrt(2 - 2C), so beta_rel lives
    on the same sphere as C. Partials are total derivatives (the alpha(C)
    path included).
    """
    if metric == "euclidean":
        return C.copy(), np.ones_like(C), np.zeros_like(C)
    A = np.sqrt(np.maximum(2.0 - 2.0 * C, 0.0))
    denom, bt, E = _beta_rel_parts(A, B, mp)
    live = A > mp.alpha_min
    # dE/dC through alpha: dalpha/dC = -1/alpha, so dbt/dC = (B+gamma)/(denom^2 * alpha).
    dbt_dC = np.where(live, (B + mp.gamma) / (denom * denom * np.maximum(A, mp.alpha_min)), 0.0)
    dE_dC = -E / mp.tau * dbt_dC
    dE_dB = -E / (mp.tau * denom)
    if metric in ("ism", "uncert_sumnorm"):
        return 1.0 - (1.0 - C) * E, E - (1.0 - C) * dE_dC, -(1.0 - C) * dE_dB
    if metric == "ism_dis":
        return C * E, E + C * dE_dC, C * dE_dB
    if metric == "ism_strict":
        ind = A - B - mp.gamma <= 0  # uncertainty covers the distance: fully similar
        Cs = np.where(ind, 1.0, C)
        return Cs, np.where(ind, 0.0, 1.0), np.zeros_like(C)
    raise ParameterError(f"unknown metric {metric!r}")
