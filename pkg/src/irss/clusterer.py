"""k-means (k-means++ seeding, Lloyd iterations, Hartigan transfers) and the two label refreshers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .stylefeat import compute_sdf

logger = logging.getLogger(__name__)

TOL = 1e-6
MAX_ITER = 100
N_INIT = 10


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list = field(default_factory=list)


def _sq_dists(points, centroids):
    # exact pairwise squared distances; the expanded form loses precision near ties
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _assign(points, centroids):
    d2 = _sq_dists(points, centroids)
    labels = np.argmin(d2, axis=1)  # first minimum = lowest index on ties
    return labels, d2[np.arange(len(points)), labels]


def _kmeans_pp(points, k, rng):
    n = len(points)
    centroids = [points[rng.integers(n)]]
    closest = _sq_dists(points, np.array(centroids))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx:idx + 1])[:, 0])
    return np.array(centroids, dtype=np.float64)


def kmeans(points, k, seed=0, max_iter=MAX_ITER, tol=TOL, n_init=N_INIT):
    """Cluster ``points`` (n x dim) into ``k`` groups.

    Each of the ``n_init`` starts seeds with k-means++, runs Lloyd to
    convergence and then applies Hartigan single-point transfers, which only
    move a point when that strictly lowers the inertia and so escape many of
    Lloyd's local optima. The start with the lowest inertia wins (earliest on
    ties). An emptied cluster is re-seeded at the point farthest from its
    current centroid (lowest index on ties). ``inertia_history`` records the
    winning start's inertia after every Lloyd assignment and every transfer
    sweep, and never increases.

    The points are processed in lexicographic order, so permuting the input
    rows permutes the assignments identically for a fixed seed.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ConfigError(f"points must be 2-D, got shape {points.shape}")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got k={k}, n={n}")
    if not np.all(np.isfinite(points)):
        raise ConfigError("points contain non-finite values")
    if n_init < 1:
        raise ConfigError(f"n_init must be >= 1, got {n_init}")
    order = np.lexsort(points.T[::-1])
    ordered = points[order]
    rng = np.random.default_rng(seed)
    res = None
    for _ in range(n_init):
        cand = _hartigan(ordered, _lloyd(ordered, k, rng, max_iter, tol), max_iter)
        if res is None or cand.inertia < res.inertia:
            res = cand
    assignments = np.empty_like(res.assignments)
    assignments[order] = res.assignments
    res.assignments = assignments
    return res


def _lloyd(points, k, rng, max_iter, tol):
    centroids = _kmeans_pp(points, k, rng)
    labels, d2 = _assign(points, centroids)
    history = [float(d2.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        new = np.empty_like(centroids)
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
            else:
                far = int(np.argmax(d2))
                new[j] = points[far]
                d2[far] = 0.0
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        labels, d2 = _assign(points, centroids)
        history.append(float(d2.sum()))
        if shift < tol:
            break
    return KMeansResult(centroids, labels, history[-1], it, history)


def _hartigan(points, res, max_iter):
    # moving x from cluster a to b changes the inertia by
    # n_b/(n_b+1)*|x-c_b|^2 - n_a/(n_a-1)*|x-c_a|^2
    k = len(res.centroids)
    labels = res.assignments.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    if k == 1 or np.any(counts == 0):
        return res
    centroids = np.stack([points[labels == j].mean(axis=0) for j in range(k)])
    history = list(res.inertia_history)
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        moved = False
        for i, x in enumerate(points):
            a = labels[i]
            if counts[a] == 1:
                continue
            d2 = np.einsum("kd,kd->k", centroids - x, centroids - x)
            gain = counts / (counts + 1.0) * d2
            gain[a] = np.inf
            b = int(np.argmin(gain))
            if gain[b] < counts[a] / (counts[a] - 1.0) * d2[a]:
                centroids[a] = (centroids[a] * counts[a] - x) / (counts[a] - 1.0)
                centroids[b] = (centroids[b] * counts[b] + x) / (counts[b] + 1.0)
                counts[a] -= 1.0
                counts[b] += 1.0
                labels[i] = b
                moved = True
        # exact means, so incremental updates cannot drift
        centroids = np.stack([points[labels == j].mean(axis=0) for j in range(k)])
        inertia = float(((points - centroids[labels]) ** 2).sum())
        if inertia > history[-1]:  # rounding only; keep the Lloyd solution
            break
        history.append(inertia)
        if not moved:
            break
    labels, d2 = _assign(points, centroids)
    inertia = float(d2.sum())
    if inertia > history[-1]:
        return res
    history[-1] = inertia
    return KMeansResult(centroids, labels, inertia, res.iterations + sweeps, history)


def assign_style_labels(dataset, params, arch, S, seed=0, tap_layers=None):
    """Cluster style statistics of the whole set into ``S`` pseudo-styles (in place)."""
    if S == 1:
        dataset.pseudo_style[:] = 0
        return None
    sdf = compute_sdf(params, arch, dataset.X, tap_layers)
    res = kmeans(sdf.values, S, seed)
    dataset.pseudo_style[:] = res.assignments
    return res


def assign_env_labels(features, k_env, seed=0, n_init=1):
    """Cluster extracted features into environments.

    Returns ``(labels, result)``. With fewer points than ``k_env`` the number
    of clusters falls back to the number of points. This runs on every
    minibatch, so a single start is the default.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    k = min(k_env, n)
    if k < k_env:
        logger.debug("minibatch of %d < k_env=%d, clustering into %d", n, k_env, k)
    if k == 1:
        centroid = features.mean(axis=0, keepdims=True)
        inertia = float(((features - centroid) ** 2).sum())
        return np.zeros(n, np.int64), KMeansResult(centroid, np.zeros(n, np.int64), inertia, 0, [inertia])
    res = kmeans(features, k, seed, n_init=n_init)
    return res.assignments.astype(np.int64), res
