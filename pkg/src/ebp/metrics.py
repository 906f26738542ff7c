"""Point-set distances and generation metrics.

Sums over points use ``math.fsum``, which is correctly rounded and therefore
independent of point order.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

LN2 = math.log(2.0)


def _points(x, name="point set"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty (n, d) array")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite coordinates")
    return x


def _pair(x, y):
    x, y = _points(x), _points(y)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    return x, y


def chamfer(x, y, squared=False):
    """Sum of nearest-neighbour distances in both directions (unsquared L2 by default)."""
    x, y = _pair(x, y)
    d = cdist(x, y, "sqeuclidean" if squared else "euclidean")
    return math.fsum(d.min(axis=1)) + math.fsum(d.min(axis=0))


def emd(x, y, approx=False, eps=None):
    """Minimum total L2 cost over bijections between equal-size sets.

    Exact by default (Hungarian-type assignment).  ``approx=True`` runs an
    epsilon-scaling auction, whose result is within ``n * eps`` of optimal.
    """
    x, y = _pair(x, y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"EMD needs equal cardinalities, got {x.shape[0]} and {y.shape[0]}")
    c = cdist(x, y)
    if approx:
        col = auction_assignment(c, eps)
        return math.fsum(c[np.arange(len(col)), col])
    r, col = linear_sum_assignment(c)
    return math.fsum(c[r, col])


def auction_assignment(cost, eps_final=None):
    """Jacobi auction with epsilon scaling for a square cost matrix.

    Returns ``col`` with row ``i`` assigned to column ``col[i]``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if n == 1:
        return np.zeros(1, dtype=int)
    span = float(cost.max() - cost.min()) or 1.0
    eps_final = span / (4.0 * n * n) if eps_final is None else eps_final
    prices = np.zeros(n)
    eps = span / 4.0
    while True:
        owner = np.full(n, -1)
        col = np.full(n, -1)
        while (free := np.flatnonzero(col < 0)).size:
            vals = -cost[free] - prices
            k = np.arange(free.size)
            top2 = np.argpartition(-vals, 1, axis=1)[:, :2]
            v = vals[k[:, None], top2]
            pick = np.argmax(v, axis=1)
            best = top2[k, pick]
            bids = v[k, pick] - v[k, 1 - pick] + eps
            # highest bid per object wins; ties go to the lowest row
            order = np.lexsort((free, -bids, best))
            b_sorted = best[order]
            for w in order[np.r_[True, b_sorted[1:] != b_sorted[:-1]]]:
                j = best[w]
                if owner[j] >= 0:
                    col[owner[j]] = -1
                owner[j] = free[w]
                col[free[w]] = j
                prices[j] += bids[w]
        if eps <= eps_final:
            return col
        eps = max(eps / 4.0, eps_final)


def jsd_from_counts(count_r, count_g):
    """Jensen-Shannon divergence (natural log) between two histograms of counts."""
    cr = np.asarray(count_r, dtype=np.float64).ravel()
    cg = np.asarray(count_g, dtype=np.float64).ravel()
    nr, ng_ = cr.sum(), cg.sum()
    if nr <= 0 or ng_ <= 0:
        raise ValueError("empty histogram")
    only_r = (cr > 0) & (cg == 0)
    only_g = (cg > 0) & (cr == 0)
    both = (cr > 0) & (cg > 0)
    # cells seen by one side contribute p * ln 2 / 2 exactly
    out = 0.5 * LN2 * (cr[only_r].sum() / nr + cg[only_g].sum() / ng_)
    pr, pg = cr[both] / nr, cg[both] / ng_
    pm = 0.5 * (pr + pg)
    out += 0.5 * math.fsum(pr * np.log(pr / pm)) + 0.5 * math.fsum(pg * np.log(pg / pm))
    return float(min(max(out, 0.0), LN2))


def occupancy(points, lo, side, grid=28):
    h, _ = np.histogramdd(points, bins=grid, range=[(a, a + side) for a in lo])
    return h


def jsd_marginal(gen, ref, grid=28):
    """JSD between the pooled point distributions of two collections.

    Both collections are binned on a ``grid``-per-axis lattice over their
    common bounding cube.
    """
    if len(gen) == 0 or len(ref) == 0:
        raise ValueError("empty collection")
    pg = np.concatenate([_points(x) for x in gen])
    pr = np.concatenate([_points(x) for x in ref])
    both = np.concatenate([pg, pr])
    lo = both.min(axis=0)
    side = float((both.max(axis=0) - lo).max()) or 1.0
    side *= 1.0 + 1e-12   # keep the maximum inside the last bin
    return jsd_from_counts(occupancy(pr, lo, side, grid), occupancy(pg, lo, side, grid))


def pairwise(ref, gen, distance="cd", squared=False, threads=1):
    """Matrix ``D[i, j] = d(ref[i], gen[j])``."""
    if distance == "cd":
        fn = lambda a, b: chamfer(a, b, squared)
    elif distance == "emd":
        fn = emd
    else:
        raise ValueError(f"unknown distance {distance!r}")
    pairs = [(i, j) for i in range(len(ref)) for j in range(len(gen))]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            vals = list(pool.map(lambda p: fn(ref[p[0]], gen[p[1]]), pairs))
    else:
        vals = [fn(ref[i], gen[j]) for i, j in pairs]
    return np.array(vals, dtype=np.float64).reshape(len(ref), len(gen))


def mmd_cov(gen, ref, distance="cd", squared=False, threads=1):
    """Minimum matching distance and coverage of ``ref`` by ``gen``.

    MMD averages, over references, the distance to the closest generated set.
    COV is the fraction of references that are the nearest reference of at
    least one generated set; ties pick the lowest reference index.
    """
    if len(gen) == 0 or len(ref) == 0:
        raise ValueError("empty collection")
    d = pairwise(ref, gen, distance, squared, threads)
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite pairwise distance")
    mmd = math.fsum(d.min(axis=1)) / len(ref)
    cov = len(set(np.argmin(d, axis=0).tolist())) / len(ref)
    return mmd, cov
