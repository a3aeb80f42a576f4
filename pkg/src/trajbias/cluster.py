"""PCA reduction and k-means clustering of patient embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import derive_seed


@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray          # (n_in, d_out), orthonormal columns
    explained_variance: np.ndarray  # (d_out,), non-increasing
    total_variance: float = 0.0

    @property
    def explained_variance_ratio(self):
        total = self.total_variance
        return self.explained_variance / total if total > 0 else np.zeros_like(self.explained_variance)

    def transform(self, Z):
        return (np.asarray(Z, dtype=np.float64) - self.mean) @ self.components

    def inverse_transform(self, Y):
        return np.asarray(Y, dtype=np.float64) @ self.components.T + self.mean


def pca_fit(Z, d_out=6):
    """Top-``d_out`` eigenvectors of the sample covariance.

    Each component is signed so that its largest-magnitude coordinate is
    positive, making the basis deterministic.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n, d = Z.shape
    if d_out > d:
        raise ValueError(f"d_out={d_out} exceeds input dimension {d}")
    if n < d_out + 1:
        raise ValueError(f"need at least {d_out + 1} samples, got {n}")
    mean = Z.mean(axis=0)
    C = Z - mean
    cov = C.T @ C / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:d_out]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order]
    pivot = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivot, np.arange(d_out)])
    signs[signs == 0] = 1.0
    return PCAModel(mean, comps * signs, evals, total_variance=float(np.clip(np.trace(cov), 0.0, None)))


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list = field(default_factory=list)  # inertia per Lloyd iteration of the best restart
    patient_ids: list = field(default_factory=list)


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(X, centers, max_iter):
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        new = np.argmin(d2, axis=1)  # first minimum = lowest label on ties
        history.append(float(d2[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = centers.copy()
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
            else:
                # reseed at the point farthest from its current centroid
                far = int(np.argmax(((X - centers[labels]) ** 2).sum(axis=1)))
                centers[j] = X[far]
    d2 = _sq_dists(X, centers)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(X)), labels].sum())
    return labels, centers, inertia, history


def kmeans(X, k=6, restarts=10, seed=0, max_iter=300):
    """k-means++ seeded Lloyd iterations; the lowest-inertia restart wins."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) < k:
        raise ValueError(f"need at least k={k} points, got {len(X)}")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(derive_seed(seed, f"kmeans:{r}"))
        labels, centers, inertia, history = _lloyd(X, _kmeanspp(X, k, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = ClusterAssignment(labels, centers, inertia, history)
    return best


def cluster_length_stats(labels, lengths):
    """Rows of (cluster, n, min, q1, median, q3, max) of trajectory length."""
    labels = np.asarray(labels)
    lengths = np.asarray(lengths, dtype=np.float64)
    rows = []
    for c in np.unique(labels):
        L = lengths[labels == c]
        q = np.percentile(L, [0, 25, 50, 75, 100])
        rows.append({"cluster": int(c), "n": int(len(L)), "min": q[0], "q1": q[1], "median": q[2],
                     "q3": q[3], "max": q[4]})
    return rows


def median_length_spread(labels, lengths):
    """Max minus min of the per-cluster median trajectory length."""
    med = [r["median"] for r in cluster_length_stats(labels, lengths)]
    return float(max(med) - min(med))


def embedding_rows(patient_ids, reduced, labels, lengths, Z=None):
    rows = []
    for i, pid in enumerate(patient_ids):
        r = {"patient_id": pid}
        if Z is not None:
            r.update({f"z{j}": float(v) for j, v in enumerate(Z[i])})
        r.update({f"pc{j + 1}": float(v) for j, v in enumerate(reduced[i])})
        r["cluster"] = int(labels[i])
        r["trajectory_length"] = int(lengths[i])
        rows.append(r)
    return rows
