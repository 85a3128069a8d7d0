"""Pseudo-label clustering: greedy K-means++ seeding and mini-batch K-means."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InsufficientDataError, ShapeError
from .rng import Rng

STREAMS = ("global", "top", "bottom")


def default_candidates(k: int) -> int:
    """2 + floor(ln k) candidates per greedy step."""
    return 2 + int(math.floor(math.log(k))) if k >= 1 else 2


@dataclass(frozen=True)
class ClusterConfig:
    k: int
    candidates: int | None = None
    max_iter: int = 100
    batch_size: int = 512
    early_stop_batches: int = 50
    reassign_ratio: float = 0.05
    seed: int = 0
    init: str = "greedy"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.candidates is not None and self.candidates < 1:
            raise ValueError("candidates must be >= 1")
        if not 0.0 <= self.reassign_ratio <= 1.0:
            raise ValueError("reassign_ratio must lie in [0, 1]")
        if self.max_iter < 1 or self.batch_size < 1 or self.early_stop_batches < 1:
            raise ValueError("max_iter, batch_size and early_stop_batches must be >= 1")
        if self.init not in ("greedy", "random"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def n_candidates(self) -> int:
        return self.candidates if self.candidates is not None else default_candidates(self.k)


@dataclass
class ClusterModel:
    centroids: np.ndarray
    inertia: float
    iterations: int = 0
    n_batches: int = 0


@dataclass
class PseudoLabels:
    stream: str
    labels: np.ndarray

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}")


def _points(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ShapeError(f"points must be (N, D), got {X.shape}")
    return np.ascontiguousarray(X)


def point_cost(x, C) -> float:
    """Squared distance from ``x`` to its nearest centroid."""
    C = _points(C)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(kernels.nearest_centroid(x, C)[1][0])


def total_cost(X, C) -> float:
    X, C = _points(X), _points(C)
    if len(X) == 0:
        return 0.0
    return float(kernels.nearest_centroid(X, C)[1].sum())


def greedy_seed_indices(X, k: int, candidates: int, rng: Rng) -> np.ndarray:
    """Indices of greedy K-means++ seeds.

    Every step draws ``candidates`` points (uniformly for the first centre,
    then proportionally to their current cost) and keeps the one that lowers
    the total cost most. When every point already sits on a centre, draws fall
    back to uniform over the points not chosen yet.
    """
    X = _points(X)
    n = len(X)
    if n < k:
        raise InsufficientDataError(f"need at least k={k} points, got {n}")
    chosen: list[int] = []
    cur = np.full(n, np.inf)
    cand = rng.integers(n, size=candidates)
    for step in range(k):
        if step:
            if cur.sum() > 0:
                cand = rng.choice(cur, candidates)
            else:
                free = np.setdiff1d(np.arange(n), chosen)
                cand = free[rng.integers(len(free), size=candidates)]
        costs = kernels.candidate_costs(X, cur, cand)
        best = int(cand[int(np.argmin(costs))])
        chosen.append(best)
        cur = np.minimum(cur, kernels.nearest_centroid(X, X[best : best + 1])[1])
    return np.array(chosen, dtype=np.int64)


def greedy_seed(X, cfg: ClusterConfig, rng: Rng) -> np.ndarray:
    X = _points(X)
    return X[greedy_seed_indices(X, cfg.k, cfg.n_candidates, rng)].copy()


def random_seed(X, k: int, rng: Rng) -> np.ndarray:
    """``k`` distinct points chosen uniformly."""
    X = _points(X)
    if len(X) < k:
        raise InsufficientDataError(f"need at least k={k} points, got {len(X)}")
    return X[np.sort(rng.sample_without_replacement(len(X), k))].copy()


def seed_centroids(X, cfg: ClusterConfig, rng: Rng) -> np.ndarray:
    if cfg.init == "random":
        return random_seed(X, cfg.k, rng)
    return greedy_seed(X, cfg, rng)


def _reassign(X, C, counts, d2, ratio: float, rng: Rng) -> None:
    """Move starved centroids onto points drawn proportionally to their cost.

    A centroid is starved when its running count is below ``ratio`` times the
    largest count; at most ``ceil(ratio * k)`` of the most starved move.
    """
    k = len(C)
    limit = math.ceil(ratio * k)
    if limit == 0 or k < 2:
        return
    starved = np.flatnonzero(counts < ratio * counts.max())
    if len(starved) == 0 or d2.sum() <= 0:
        return
    starved = starved[np.argsort(counts[starved], kind="stable")][:limit]
    picks = rng.choice(d2, len(starved))
    C[starved] = X[picks]
    keep = np.setdiff1d(np.arange(k), starved)
    counts[starved] = counts[keep].min() if len(keep) else 0


def minibatch_kmeans(X, init, cfg: ClusterConfig, rng: Rng) -> ClusterModel:
    """Mini-batch K-means from the given centroids.

    Each epoch visits a fresh permutation in batches; centroids are streaming
    means with per-centroid rate ``1 / count``. Fitting stops after
    ``max_iter`` epochs or once ``early_stop_batches`` consecutive batches fail
    to improve the per-sample batch inertia. Starved centroids are re-seeded
    after each full epoch. The returned centroids are the best seen on the
    full set (the initial ones included), so inertia never exceeds the
    initial cost.
    """
    X = _points(X)
    C = np.array(_points(init), dtype=np.float64, copy=True)
    if C.shape[0] != cfg.k:
        raise ShapeError(f"init has {C.shape[0]} centroids, config says k={cfg.k}")
    if C.shape[1] != X.shape[1]:
        raise ShapeError("init and points differ in dimension")
    n = len(X)
    counts = np.zeros(cfg.k, dtype=np.int64)
    bs = min(cfg.batch_size, n)

    best_c, best_inertia = C.copy(), total_cost(X, C)
    best_batch, stall, n_batches, epochs = np.inf, 0, 0, 0
    for epoch in range(cfg.max_iter):
        epochs = epoch + 1
        perm = rng.permutation(n)
        stopped = False
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            _, inertia = kernels.minibatch_step(X[idx], C, counts)
            n_batches += 1
            per_sample = inertia / len(idx)
            if per_sample < best_batch:
                best_batch, stall = per_sample, 0
            else:
                stall += 1
                if stall >= cfg.early_stop_batches:
                    stopped = True
                    break
        _, d2 = kernels.nearest_centroid(X, C)
        full = float(d2.sum())
        if full < best_inertia:
            best_c, best_inertia = C.copy(), full
        if stopped:
            break
        _reassign(X, C, counts, d2, cfg.reassign_ratio, rng)
    return ClusterModel(best_c, best_inertia, iterations=epochs, n_batches=n_batches)


def assign_labels(X, model: ClusterModel, stream: str = "global") -> PseudoLabels:
    """Nearest centroid per point; ties go to the lowest centroid index."""
    X = _points(X)
    if X.shape[1] != model.centroids.shape[1]:
        raise ShapeError("points and centroids differ in dimension")
    labels, _ = kernels.nearest_centroid(X, model.centroids)
    return PseudoLabels(stream, labels)


def cluster(X, cfg: ClusterConfig, rng: Rng | None = None, stream: str = "global"):
    """Seed, fit and label in one call. Returns (model, labels)."""
    rng = rng if rng is not None else Rng(cfg.seed)
    X = _points(X)
    init = seed_centroids(X, cfg, rng.derive("seed"))
    model = minibatch_kmeans(X, init, cfg, rng.derive("fit"))
    return model, assign_labels(X, model, stream)
