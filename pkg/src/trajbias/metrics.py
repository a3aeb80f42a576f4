"""Trajectory-bias metrics: kNN length error, surrogate precision and ARI."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.metrics import average_precision_score

from .cohort import derive_seed

log = logging.getLogger(__name__)


@dataclass
class KnnErrorConfig:
    n_samples: int = 1000
    k: int = 5
    repeats: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.repeats < 1:
            raise ValueError("k and repeats must be >= 1")
        if self.n_samples < self.k + 1:
            raise ValueError("n_samples must be at least k + 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class SurrogateConfig:
    n_trees: int = 100
    max_depth: int = 8
    train_fraction: float = 0.7
    seeds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# kNN error

def nearest_neighbors(Z, queries, k, chunk=256):
    """Indices (len(queries), k) of the k nearest rows of ``Z`` for each query index.

    Distances are squared Euclidean sums of coordinate differences; the
    query itself is excluded and ties go to the lower index.
    """
    Z = np.asarray(Z, dtype=np.float64)
    queries = np.asarray(queries, dtype=int)
    out = np.empty((len(queries), k), dtype=int)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        d2 = ((Z[q][:, None, :] - Z[None, :, :]) ** 2).sum(axis=2)
        d2[np.arange(len(q)), q] = np.inf
        out[s:s + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def knn_error_once(Z, lengths, sample, k):
    """RMSE between each sampled length and its neighbours' mean length.

    Sums are correctly rounded (``math.fsum``) so the value does not depend
    on summation order.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    nn = nearest_neighbors(Z, sample, k)
    pred = [math.fsum(lengths[row]) / k for row in nn]
    sq = [(p - lengths[i]) ** 2 for p, i in zip(pred, sample)]
    return math.sqrt(math.fsum(sq) / len(sq))


def knn_error(Z, lengths, config=None):
    """Mean and (population) std of the kNN length error over resampled query sets.

    Each repeat draws ``n_samples`` patients without replacement; neighbours
    are searched over the whole cohort in the full embedding space.
    """
    config = config or KnnErrorConfig()
    Z = np.asarray(Z, dtype=np.float64)
    n = len(Z)
    if len(lengths) != n:
        raise ValueError("lengths must align with embeddings")
    if n < config.k + 1:
        raise ValueError(f"cohort of {n} is smaller than k + 1 = {config.k + 1}")
    size = min(config.n_samples, n)
    values = []
    for r in range(config.repeats):
        rng = np.random.default_rng(derive_seed(config.seed, f"knn:{r}"))
        sample = rng.choice(n, size=size, replace=False)
        values.append(knn_error_once(Z, lengths, sample, config.k))
    return float(np.mean(values)), float(np.std(values))


# ---------------------------------------------------------------------------
# surrogate

def stratified_split(labels, train_fraction, rng):
    """Per-class shuffled split; returns sorted (train_idx, test_idx)."""
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(train_fraction * len(idx)))
        train.extend(idx[:n_train])
        test.extend(idx[n_train:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def macro_average_precision(y_true, proba, classes):
    """One-vs-rest AP averaged over classes with positives in ``y_true``."""
    scores = []
    for j, c in enumerate(classes):
        pos = y_true == c
        if not pos.any():
            log.warning("cluster %s absent from the evaluation split; skipped", c)
            continue
        scores.append(average_precision_score(pos, proba[:, j]))
    return float(np.mean(scores)) if scores else float("nan")


def surrogate_precision(presence, labels, config=None):
    """Macro AP of a forest predicting cluster labels from window presence.

    Returns ``(mean, std, per_seed)`` over ``config.seeds`` split/forest seeds.
    """
    config = config or SurrogateConfig()
    X = np.asarray(presence, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(labels):
        raise ValueError("presence must be (n_patients, n_windows) aligned with labels")
    if not np.isin(X, (0.0, 1.0)).all():
        raise ValueError("presence vectors must be binary")
    if len(np.unique(labels)) < 2:
        raise ValueError("at least two clusters are required")
    per_seed = []
    for s in range(config.seeds):
        seed = derive_seed(config.seed, f"surrogate:{s}")
        rng = np.random.default_rng(seed)
        tr, te = stratified_split(labels, config.train_fraction, rng)
        missing = set(np.unique(labels)) - set(np.unique(labels[tr]))
        if missing:
            log.warning("clusters %s absent from the train split; skipped", sorted(missing))
        keep = ~np.isin(labels[te], list(missing))
        te = te[keep]
        forest = RandomForestClassifier(n_estimators=config.n_trees, max_depth=config.max_depth,
                                        max_features="sqrt", criterion="gini", bootstrap=True,
                                        random_state=seed % (2 ** 32), n_jobs=1)
        forest.fit(X[tr], labels[tr])
        proba = forest.predict_proba(X[te])
        per_seed.append(macro_average_precision(labels[te], proba, forest.classes_))
    return float(np.mean(per_seed)), float(np.std(per_seed)), per_seed


# ---------------------------------------------------------------------------
# agreement

def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def adjusted_rand_index(a, b):
    """Chance-corrected pair-counting agreement between two labelings."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("labelings must have equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1))
    np.add.at(table, (ai, bi), 1)
    index = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(len(a))
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))
