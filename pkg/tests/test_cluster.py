import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajbias.cluster import (cluster_length_stats, embedding_rows, kmeans, median_length_spread, pca_fit)
from trajbias.artifacts import write_csv


def brute_force_two_partition(X):
    """Minimum within-cluster sum of squares over every split into two non-empty groups."""
    n = len(X)
    best = np.inf
    for mask in itertools.product([False, True], repeat=n - 1):
        m = np.array((False,) + mask)  # point 0 fixed in group A: each split counted once
        if m.all() or not m.any():
            continue
        cost = sum(((X[g] - X[g].mean(axis=0)) ** 2).sum() for g in (m, ~m))
        best = min(best, cost)
    return best


# -- PCA --------------------------------------------------------------------

def test_line_data_first_component_explains_everything():
    t = np.linspace(-3, 5, 40)[:, None]
    X = t * np.array([[1.0, -2.0, 0.5]]) + np.array([4.0, 1.0, -1.0])
    pca = pca_fit(X, 2)
    assert pca.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)
    assert pca.explained_variance[1] == pytest.approx(0.0, abs=1e-12)


def test_mean_maps_to_origin_and_full_basis_roundtrips():
    X = np.random.default_rng(0).normal(size=(50, 5))
    pca = pca_fit(X, 5)
    assert np.allclose(pca.transform(X.mean(axis=0)[None]), 0.0, atol=1e-12)
    assert np.allclose(pca.inverse_transform(pca.transform(X)), X, atol=1e-8)


def test_components_orthonormal_sorted_and_signed():
    X = np.random.default_rng(1).normal(size=(200, 8)) * np.arange(1, 9)
    pca = pca_fit(X, 6)
    assert np.allclose(pca.components.T @ pca.components, np.eye(6), atol=1e-8)
    assert np.all(np.diff(pca.explained_variance) <= 0)
    pivots = pca.components[np.argmax(np.abs(pca.components), axis=0), np.arange(6)]
    assert np.all(pivots > 0)


def test_zero_variance_data_projects_to_zero():
    X = np.ones((10, 4))
    assert np.array_equal(pca_fit(X, 3).transform(X), np.zeros((10, 3)))


def test_pca_needs_enough_samples():
    with pytest.raises(ValueError):
        pca_fit(np.zeros((6, 10)), 6)


# -- k-means ----------------------------------------------------------------

def test_two_blobs_partitioned_exactly():
    rng = np.random.default_rng(0)
    X = np.r_[rng.normal(0, 0.1, (20, 2)), rng.normal(10, 0.1, (20, 2))]
    labels = kmeans(X, 2, seed=3).labels
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1 and labels[0] != labels[20]


def test_identical_points_one_cluster_zero_inertia():
    res = kmeans(np.full((12, 3), 2.5), 6, seed=1)
    assert res.inertia == 0.0
    assert len(np.unique(res.labels)) == 1


def test_centroids_are_member_means():
    X = np.random.default_rng(4).normal(size=(300, 3))
    res = kmeans(X, 6, seed=0)
    for j in np.unique(res.labels):
        assert np.allclose(res.centroids[j], X[res.labels == j].mean(axis=0), atol=1e-12)


def test_deterministic_given_seed():
    X = np.random.default_rng(5).normal(size=(200, 6))
    a, b = kmeans(X, 6, seed=9), kmeans(X, 6, seed=9)
    assert np.array_equal(a.labels, b.labels) and a.inertia == b.inertia


@pytest.mark.parametrize("seed", range(10))
def test_matches_exhaustive_optimum_on_eight_points(seed):
    X = np.random.default_rng(seed).normal(size=(8, 2))
    assert kmeans(X, 2, seed=seed).inertia == pytest.approx(brute_force_two_partition(X), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_inertia_non_increasing_across_iterations(seed):
    X = np.random.default_rng(seed).normal(size=(60, 3))
    hist = kmeans(X, 4, restarts=1, seed=seed).history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(-50, 50), st.integers(-50, 50))
def test_labels_invariant_under_translation(seed, dx, dy):
    # dyadic coordinates keep the shifted differences exact
    X = np.random.default_rng(seed).integers(-64, 64, size=(40, 2)) / 8.0
    a = kmeans(X, 3, restarts=3, seed=seed).labels
    b = kmeans(X + np.array([dx, dy]), 3, restarts=3, seed=seed).labels
    assert np.array_equal(a, b)


def test_fewer_points_than_clusters_rejected():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 6)


# -- length statistics ------------------------------------------------------

def test_single_cluster_stats_equal_cohort_stats():
    lengths = np.array([3, 1, 8, 22, 5])
    (row,) = cluster_length_stats(np.zeros(5, int), lengths)
    assert (row["min"], row["median"], row["max"]) == (1, 5, 22)
    assert row["q1"] == np.percentile(lengths, 25) and row["n"] == 5


def test_singleton_cluster_all_quantiles_equal():
    rows = cluster_length_stats(np.array([0, 1, 1]), np.array([5, 2, 9]))
    assert all(rows[0][k] == 5 for k in ("min", "q1", "median", "q3", "max"))
    assert median_length_spread(np.array([0, 1, 1]), np.array([5, 2, 9])) == 0.5


def test_embedding_rows_written_with_header(tmp_path):
    rows = embedding_rows(["A", "B"], np.array([[1.0, 2.0], [3.0, 4.0]]), [0, 1], [3, 7])
    write_csv(tmp_path / "e.csv", rows, ["config_digest=abc"])
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "# config_digest=abc"
    assert lines[1] == "patient_id,pc1,pc2,cluster,trajectory_length"
    assert lines[2] == "A,1.0,2.0,0,3"
