"""Pure-numpy reference versions of the clustering hot loops.

Same signatures and semantics as the compiled ``_ckernels`` module. Squared
distances are accumulated one coordinate at a time, in the same order the
compiled loops use, so both backends agree bit-for-bit on distances and on
nearest-centroid ties.
"""

import numpy as np

BACKEND = "python"


def _seqsum(a):
    # left-to-right, matching the compiled loops
    return float(np.cumsum(a)[-1]) if len(a) else 0.0


def nearest_centroid(X, C):
    """Index of, and squared distance to, the nearest row of ``C`` for each row of ``X``.

    Ties go to the lowest centroid index.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    n, k = X.shape[0], C.shape[0]
    if k == 0:
        raise ValueError("empty centroid set")
    acc = np.zeros((n, k))
    for d in range(X.shape[1]):
        diff = X[:, d, None] - C[None, :, d]
        acc += diff * diff
    labels = np.argmin(acc, axis=1)
    return labels.astype(np.int64), acc[np.arange(n), labels]


def candidate_costs(X, cur_d2, cand_idx):
    """Total cost of the centroid set extended by each candidate row ``X[c]``.

    ``cur_d2`` holds each point's squared distance to the current set.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    out = np.empty(len(cand_idx))
    for t, c in enumerate(cand_idx):
        acc = np.zeros(X.shape[0])
        for d in range(X.shape[1]):
            diff = X[:, d] - X[c, d]
            acc += diff * diff
        out[t] = _seqsum(np.minimum(acc, cur_d2))
    return out


def minibatch_step(Xb, C, counts):
    """Assign a batch against ``C`` then fold it into streaming centroid means.

    Each centroid moves as if its assigned points arrived one at a time with
    learning rate ``1 / count``. ``C`` and ``counts`` are updated in place.
    Returns (labels, batch inertia measured before the update).
    """
    labels, d2 = nearest_centroid(Xb, C)
    k = C.shape[0]
    n_new = np.bincount(labels, minlength=k)
    sums = np.zeros_like(C)
    np.add.at(sums, labels, Xb)
    hit = n_new > 0
    total = counts[hit] + n_new[hit]
    lr = 1.0 / total.astype(np.float64)
    C[hit] += (sums[hit] - n_new[hit, None] * C[hit]) * lr[:, None]
    counts[hit] = total
    return labels, _seqsum(d2)
