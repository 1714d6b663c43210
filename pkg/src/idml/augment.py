"""Virtual-sample synthesis and uncertainty-inducing feature augmentations.

Mixup blends two feature vectors and gives the result the *union* of both
label sets, so a mixed sample is a positive partner for either source
class. The image corruptions that raise a model's uncertainty get
feature-space analogues here: blur becomes additive Gaussian noise,
occlusion zeroes a fraction of coordinates, and low resolution becomes
block averaging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from idml.core import Batch, ParameterError, Rng, ShapeError, as_vector, label_set

__all__ = ["AugmentConfig", "mix", "occlude", "blur", "lowres", "augment_batch"]


@dataclass(frozen=True)
class AugmentConfig:
    """Mixing and corruption settings for a training batch.

    mix_lambda_dist is the Beta(a, a) shape for the mixing weight (1.0 is
    uniform); mix_fraction of each batch is synthesized on top of it.
    Corruptions apply per sample with their probabilities; lowres_factor 1
    disables block averaging.
    """

    mix_lambda_dist: float = 1.0
    mix_fraction: float = 0.5
    blur_prob: float = 0.0
    occl_prob: float = 0.0
    occl_fraction: float = 0.25
    lowres_factor: int = 1
    noise_sigma: float = 0.1

    def __post_init__(self):
        for name in ("mix_fraction", "blur_prob", "occl_prob", "occl_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")
        if self.mix_lambda_dist <= 0:
            raise ParameterError(f"mix_lambda_dist must be positive, got {self.mix_lambda_dist}")
        if self.lowres_factor < 1:
            raise ParameterError(f"lowres_factor must be >= 1, got {self.lowres_factor}")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def mix(x1, l1, x2, l2, lam: float):
    """Blend two samples: lam*x1 + (1-lam)*x2 with the union of both label sets."""
    x1, x2 = as_vector(x1, "x1"), as_vector(x2, "x2")
    if x1.shape != x2.shape:
        raise ShapeError(f"mix needs equal dims, got {x1.shape[0]} and {x2.shape[0]}")
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    return lam * x1 + (1.0 - lam) * x2, label_set(l1) | label_set(l2)


def occlude(x, fraction: float, rng: Rng) -> np.ndarray:
    """Zero ceil(fraction * dim) uniformly chosen coordinates."""
    x = as_vector(x).copy()
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"fraction must lie in [0, 1], got {fraction}")
    k = math.ceil(fraction * x.size)
    if k:
        idx = rng.choice(x.size, size=k, replace=False)
        x[idx] = 0.0
    return x


def blur(x, noise_sigma: float, rng: Rng) -> np.ndarray:
    """Add i.i.d. Gaussian noise with the given standard deviation."""
    x = as_vector(x)
    if noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if noise_sigma == 0:
        return x.copy()
    return x + noise_sigma * rng.normal(size=x.size)


def lowres(x, factor: int) -> np.ndarray:
    """Replace contiguous blocks of length `factor` by their mean.

    When factor does not divide the dim, the tail block is padded by edge
    replication before averaging and the result trimmed back.
    """
    x = as_vector(x)
    if factor < 1:
        raise ParameterError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    pad = (-x.size) % factor
    padded = np.concatenate([x, np.full(pad, x[-1])]) if pad else x
    means = padded.reshape(-1, factor).mean(axis=1)
    return np.repeat(means, factor)[: x.size]


def augment_batch(batch: Batch, cfg: AugmentConfig, rng: Rng) -> Batch:
    """Append mixed samples to a batch and apply the configured corruptions.

    round(len(batch) * mix_fraction) synthetic samples are mixed from random
    in-batch pairs (preferring pairs with non-matching labels, so the label
    union genuinely has two members); the clean samples are kept as-is, so a
    run with mixing and one without see the same originals.
    """
    n = len(batch)
    feats = [batch.features[i] for i in range(n)]
    labels = list(batch.labels)
    mixed = list(batch.is_mixed)

    n_mix = round(n * cfg.mix_fraction)
    for _ in range(n_mix):
        i = int(rng.integers(0, n))
        j = int(rng.integers(0, n))
        for _ in range(8):  # prefer a cross-class partner when one exists
            if j != i and batch.labels[i] != batch.labels[j]:
                break
            j = int(rng.integers(0, n))
        if j == i:
            j = (i + 1) % n
        lam = rng.beta(cfg.mix_lambda_dist, cfg.mix_lambda_dist)
        xm, lm = mix(batch.features[i], batch.labels[i], batch.features[j], batch.labels[j], lam)
        feats.append(xm)
        labels.append(lm)
        mixed.append(True)

    out = []
    for f in feats:
        if cfg.lowres_factor > 1:
            f = lowres(f, cfg.lowres_factor)
        if cfg.blur_prob > 0 and rng.uniform() < cfg.blur_prob:
            f = blur(f, cfg.noise_sigma, rng)
        if cfg.occl_prob > 0 and rng.uniform() < cfg.occl_prob:
            f = occlude(f, cfg.occl_fraction, rng)
        out.append(f)
    return Batch(features=np.stack(out), labels=tuple(labels), is_mixed=np.array(mixed, dtype=bool))
