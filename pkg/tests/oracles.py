"""Reference implementations used to cross-check the library.

Everything here is written independently of src/idml: scalar formulas go
through mpmath at high precision, rankings and clustering scores go through
plain-Python loops. Tests compare library output against these values, so
none of these helpers may import library internals beyond plain data.
"""

import math

import numpy as np
from mpmath import mp, mpf

mp.dps = 40


# ---------------------------------------------------------------------------
# Scalar formulas (mpmath route)
# ---------------------------------------------------------------------------


def pair_geometry_ref(s1, s2, u1, u2, gamma=0.0, alpha_min=1e-12):
    alpha = mp.sqrt(mp.fsum((mpf(a) - mpf(b)) ** 2 for a, b in zip(s1, s2)))
    beta = mp.sqrt(mp.fsum((mpf(a) + mpf(b)) ** 2 for a, b in zip(u1, u2)))
    beta_rel = (beta + mpf(gamma)) / max(alpha, mpf(alpha_min))
    return float(alpha), float(beta), float(beta_rel)


def ism_distance_ref(alpha, beta, gamma, tau, alpha_min=1e-12):
    a = mpf(alpha)
    beta_rel = (mpf(beta) + mpf(gamma)) / max(a, mpf(alpha_min))
    return float(a * mp.exp(-beta_rel / mpf(tau)))


def ism_similarity_ref(c, beta_rel, tau):
    return float(1 - (1 - mpf(c)) * mp.exp(-mpf(beta_rel) / mpf(tau)))


def ism_dissim_ref(c, beta_rel, tau):
    return float(mpf(c) * mp.exp(-mpf(beta_rel) / mpf(tau)))


def ism_dis_distance_ref(alpha, beta, gamma, tau, alpha_min=1e-12):
    a = mpf(alpha)
    beta_rel = (mpf(beta) + mpf(gamma)) / max(a, mpf(alpha_min))
    return float(a * (2 - mp.exp(-beta_rel / mpf(tau))))


def gradient_weight_ref(alpha, beta, gamma, tau, alpha_min=1e-12):
    a = mpf(alpha)
    beta_rel = (mpf(beta) + mpf(gamma)) / max(a, mpf(alpha_min))
    x = beta_rel / mpf(tau)
    return float(mp.exp(-x) * (1 + x))


def kl_gaussian_ref(mu1, sigma1, mu2, sigma2):
    """Closed-form KL between diagonal Gaussians, term by term in mpmath."""
    total = mpf(0)
    for m1, s1, m2, s2 in zip(mu1, sigma1, mu2, sigma2):
        r = (mpf(s1) / mpf(s2)) ** 2
        total += -mpf("0.5") * (mp.log(r) - r - ((mpf(m1) - mpf(m2)) / mpf(s2)) ** 2 + 1)
    return float(total)


def dw_log_weight_ref(d, n_dim, phi):
    dd = min(max(mpf(d), mpf("1e-4")), mpf(2) - mpf("1e-4"))
    raw = (2 - n_dim) * mp.log(dd) + ((3 - n_dim) / mpf(2)) * mp.log(1 - dd**2 / 4)
    return float(min(mp.log(mpf(phi)), raw))


# ---------------------------------------------------------------------------
# Ranking / clustering scores (plain-Python route)
# ---------------------------------------------------------------------------


def _match(a, b):
    return bool(frozenset(a) & frozenset(b))


def _neighbor_order(X, i):
    """Indices sorted by distance to row i, ties by index, query excluded."""
    d = [(math.dist(X[i], X[j]), j) for j in range(len(X)) if j != i]
    d.sort()
    return [j for _, j in d]


def recall_at_k_ref(X, labels, k):
    X = np.asarray(X, dtype=float)
    hits = 0
    for i in range(len(X)):
        order = _neighbor_order(X, i)[:k]
        if any(_match(labels[i], labels[j]) for j in order):
            hits += 1
    return hits / len(X)


def nmi_ref(labels, clusters):
    """Arithmetic-mean normalized mutual information from the contingency table."""
    labels = [int(x) for x in labels]
    clusters = [int(x) for x in clusters]
    n = len(labels)
    ls, cs = sorted(set(labels)), sorted(set(clusters))
    if len(ls) == 1 and len(cs) == 1:
        return 1.0
    counts = {}
    for a, b in zip(labels, clusters):
        counts[(a, b)] = counts.get((a, b), 0) + 1
    pl = {a: labels.count(a) / n for a in ls}
    pc = {b: clusters.count(b) / n for b in cs}
    mi = mpf(0)
    for (a, b), c in counts.items():
        p = mpf(c) / n
        mi += p * mp.log(p / (mpf(pl[a]) * mpf(pc[b])))
    hl = -mp.fsum(mpf(p) * mp.log(mpf(p)) for p in pl.values())
    hc = -mp.fsum(mpf(p) * mp.log(mpf(p)) for p in pc.values())
    if hl + hc == 0:
        return 1.0
    return float(2 * mi / (hl + hc))


def rp_map_ref(X, labels):
    """R-precision and MAP@R averaged over queries; single-sample classes skipped."""
    X = np.asarray(X, dtype=float)
    rps, maps = [], []
    for i in range(len(X)):
        r = sum(1 for j in range(len(X)) if j != i and _match(labels[i], labels[j]))
        if r == 0:
            continue
        order = _neighbor_order(X, i)[:r]
        rel = [1 if _match(labels[i], labels[j]) else 0 for j in order]
        rps.append(sum(rel) / r)
        ap = mpf(0)
        seen = 0
        for rank, flag in enumerate(rel, start=1):
            if flag:
                seen += 1
                ap += mpf(seen) / rank
        maps.append(float(ap / r))
    if not rps:
        return None
    return sum(rps) / len(rps), sum(maps) / len(maps)


def semi_hard_ref(d_pos, neg_dists):
    """Smallest negative distance strictly above d_pos; None when none qualifies."""
    qualifying = [(d, j) for j, d in neg_dists if d > d_pos]
    if not qualifying:
        return None
    return min(qualifying)[1]


def ms_masks_ref(sims, labels, eps):
    """Pair-keep masks for the mining step, one anchor at a time.

    Keep a negative pair iff its similarity beats the anchor's weakest kept
    positive minus eps; keep a positive iff it falls below the strongest
    negative plus eps. Anchors missing one side keep the other untouched.
    """
    n = len(labels)
    pos_keep = [[False] * n for _ in range(n)]
    neg_keep = [[False] * n for _ in range(n)]
    for i in range(n):
        pos = [j for j in range(n) if j != i and _match(labels[i], labels[j])]
        neg = [j for j in range(n) if j != i and not _match(labels[i], labels[j])]
        for j in neg:
            if not pos or sims[i][j] > min(sims[i][p] for p in pos) - eps:
                neg_keep[i][j] = True
        for j in pos:
            if not neg or sims[i][j] < max(sims[i][p] for p in neg) + eps:
                pos_keep[i][j] = True
    return pos_keep, neg_keep


def dw_weights_ref(dists, n_dim, phi):
    """Normalized sampling weights over one anchor's negatives."""
    logs = [mpf(dw_log_weight_ref(d, n_dim, phi)) for d in dists]
    m = max(logs)
    ws = [mp.exp(x - m) for x in logs]
    z = mp.fsum(ws)
    return [float(w / z) for w in ws]
