"""Weighted pixel distance, k-means behaviour, epoch refresh, mask export."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perturb.clustering import (
    ClusterConfig,
    ClusterError,
    DegenerateInputError,
    PixelPoint,
    cluster_to_masks,
    epoch_update,
    kmeans_fit,
    kmeans_points,
    label_image,
    lloyd_iterate,
    model_from_text,
    model_to_text,
    pixel_distance,
    pixel_features,
)


class TestPixelDistance:
    def test_identity_is_zero(self):
        p = PixelPoint(12, 40, 0.73)
        assert pixel_distance(p, p) == 0.0

    def test_3_4_5_at_unit_weights(self):
        assert pixel_distance((0, 0, 0.0), (3, 4, 0.0), 1.0, 1.0) == 5.0

    def test_intensity_only_term(self):
        assert pixel_distance((5, 5, 0.0), (5, 5, 1.0), 1.5, 1.2) == 1.2

    def test_doubling_weights_doubles_distance_exactly(self, rng):
        for _ in range(200):
            p = PixelPoint(*rng.uniform(0, 48, 2), rng.uniform())
            q = PixelPoint(*rng.uniform(0, 48, 2), rng.uniform())
            gw, iw = rng.uniform(0.1, 4.0, 2)
            assert pixel_distance(p, q, 2 * gw, 2 * iw) == 2 * pixel_distance(p, q, gw, iw)

    def test_symmetry_1000_pairs(self, rng):
        for _ in range(1000):
            p = tuple(rng.uniform(0, 48, 3))
            q = tuple(rng.uniform(0, 48, 3))
            assert pixel_distance(p, q) == pixel_distance(q, p)

    def test_matches_scaled_feature_space(self, rng):
        # distance on raw points == euclidean distance between scaled features
        cfg = ClusterConfig(grid_weight=1.5, intensity_weight=1.2)
        grid = rng.uniform(size=(4, 4))
        X = pixel_features(grid, cfg)
        i1, j1, i2, j2 = 1, 2, 3, 0
        d = pixel_distance((i1, j1, grid[i1, j1]), (i2, j2, grid[i2, j2]), cfg.grid_weight, cfg.intensity_weight)
        euclid = math.sqrt(((X[i1 * 4 + j1] - X[i2 * 4 + j2]) ** 2).sum())
        assert d == pytest.approx(euclid, abs=1e-12)


class TestConfig:
    def test_defaults(self):
        cfg = ClusterConfig()
        assert (cfg.k, cfg.grid_weight, cfg.intensity_weight) == (3, 1.5, 1.2)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(k=0), dict(grid_weight=0.0), dict(intensity_weight=-1.0), dict(tol=0.0), dict(restarts=0), dict(max_iter=0)],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ClusterError):
            ClusterConfig(**kwargs)


class TestKmeans:
    def test_deterministic_per_seed(self, rng):
        grid = rng.uniform(size=(16, 16))
        a = kmeans_fit(grid, ClusterConfig(seed=5))
        b = kmeans_fit(grid, ClusterConfig(seed=5))
        assert np.array_equal(a.centroids, b.centroids)
        assert np.array_equal(a.assignments, b.assignments)
        assert a.inertia == b.inertia

    def test_every_cluster_nonempty(self, rng):
        grid = rng.uniform(size=(12, 12))
        model = kmeans_fit(grid, ClusterConfig(k=5))
        counts = np.bincount(model.assignments.reshape(-1), minlength=5)
        assert (counts > 0).all()

    def test_three_obvious_blobs(self):
        pts = np.concatenate(
            [
                np.random.default_rng(0).normal([0, 0, 0], 0.05, (20, 3)),
                np.random.default_rng(1).normal([10, 0, 0], 0.05, (20, 3)),
                np.random.default_rng(2).normal([0, 10, 0], 0.05, (20, 3)),
            ]
        )
        _, labels, inertia, _ = kmeans_points(pts, 3, restarts=5, seed=0)
        # each blob lands in exactly one cluster
        for blob in (labels[:20], labels[20:40], labels[40:]):
            assert len(set(blob.tolist())) == 1
        assert inertia < 20 * 3 * 0.05**2 * 9 * 3

    def test_tie_breaks_to_lowest_centroid_index(self):
        X = np.array([[0.0, 0, 0], [2.0, 0, 0], [1.0, 0, 0]])  # midpoint ties
        C = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        _, labels, *_ = lloyd_iterate(X, C, max_iter=1, tol=1e9)
        assert labels[2] == 0

    def test_degenerate_when_k_exceeds_distinct_points(self):
        grid = np.zeros((4, 4))
        cfg = ClusterConfig(k=3, grid_weight=1.0, intensity_weight=1.0)
        kmeans_fit(grid, cfg)  # 16 distinct grid positions: fine
        flat = np.zeros((1, 3))
        with pytest.raises(DegenerateInputError):
            kmeans_points(np.repeat(flat, 8, axis=0), 2, restarts=2, seed=0)

    def test_empty_cluster_reseeded_at_far_point(self):
        # initial centroids: two on top of each other far away -> one goes empty
        X = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [50.0, 0, 0]])
        C0 = np.array([[100.0, 0, 0], [100.0, 0, 0]])
        C, labels, inertia, hist, _ = lloyd_iterate(X, C0, max_iter=50, tol=1e-9)
        assert len(set(labels.tolist())) == 2
        assert inertia <= hist[0]

    def test_lloyd_history_non_increasing(self, rng):
        grid = rng.uniform(size=(10, 10))
        cfg = ClusterConfig(k=4)
        X = pixel_features(grid, cfg)
        init = X[rng.choice(len(X), 4, replace=False)]
        *_, hist, _ = lloyd_iterate(X, init, max_iter=100, tol=1e-9)
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_restart_count_honored_tie_goes_to_earlier(self, rng):
        grid = rng.uniform(size=(8, 8))
        one = kmeans_fit(grid, ClusterConfig(k=2, restarts=1, seed=3))
        many = kmeans_fit(grid, ClusterConfig(k=2, restarts=12, seed=3))
        assert many.inertia <= one.inertia + 1e-12


@given(st.integers(0, 10_000), st.integers(1, 5))
@settings(max_examples=30, deadline=None)
def test_assignments_point_to_nearest_centroid(seed, k):
    rng = np.random.default_rng(seed)
    grid = rng.uniform(size=(8, 8))
    model = kmeans_fit(grid, ClusterConfig(k=k, seed=seed, restarts=2))
    X = pixel_features(grid, model.config)
    d2 = ((X[:, None, :] - model.centroids[None]) ** 2).sum(axis=2)
    assert np.array_equal(model.assignments.reshape(-1), d2.argmin(axis=1))
    assert model.inertia == pytest.approx(d2.min(axis=1).sum(), rel=1e-12)


class TestEpochUpdate:
    def test_warm_start_keeps_epoch_counter(self, rng):
        grid = rng.uniform(size=(12, 12))
        m0 = kmeans_fit(grid, ClusterConfig())
        m1 = epoch_update(m0, grid + rng.normal(0, 0.01, grid.shape))
        m2 = epoch_update(m1, grid)
        assert (m0.epoch_stamp, m1.epoch_stamp, m2.epoch_stamp) == (0, 1, 2)

    def test_stable_grid_converges_immediately(self, rng):
        grid = rng.uniform(size=(12, 12))
        m0 = kmeans_fit(grid, ClusterConfig())
        m1 = epoch_update(m0, grid)
        assert np.allclose(m1.centroids, m0.centroids, atol=1e-9)
        assert m1.inertia == pytest.approx(m0.inertia, rel=1e-9)

    def test_big_regression_triggers_fresh_restarts(self, rng):
        grid = rng.uniform(size=(12, 12))
        m0 = kmeans_fit(grid, ClusterConfig(k=3))
        # a completely different grid: warm centroids are likely poor
        other = np.zeros((12, 12))
        other[:, :6] = 1.0
        m1 = epoch_update(m0, other)
        fresh = kmeans_fit(other, m0.config)
        assert m1.inertia <= fresh.inertia * (1 + 1e-9) or m1.inertia <= 1.1 * m0.inertia


class TestMasksAndSerialization:
    def test_masks_partition_grid(self, rng):
        grid = rng.uniform(size=(48, 48))
        model = kmeans_fit(grid, ClusterConfig(k=3))
        masks = cluster_to_masks(model, fill=0.0)
        assert len(masks) == 3
        union = np.zeros((48, 48), dtype=int)
        for m in masks:
            union += m.region.astype(int)
        assert (union == 1).all()

    def test_masks_need_48x48_grid(self, rng):
        model = kmeans_fit(rng.uniform(size=(12, 12)), ClusterConfig())
        with pytest.raises(ClusterError, match="48x48"):
            cluster_to_masks(model)

    def test_label_image_gray_levels(self, rng):
        model = kmeans_fit(rng.uniform(size=(48, 48)), ClusterConfig(k=3))
        img = label_image(model)
        assert img.dtype == np.uint8
        assert set(np.unique(img)) <= {0, 85, 170}

    def test_text_round_trip(self, rng):
        model = kmeans_fit(rng.uniform(size=(10, 10)), ClusterConfig(k=4, seed=2))
        text = model_to_text(model)
        back = model_from_text(text)
        assert back.config == model.config
        assert back.inertia == model.inertia
        assert back.epoch_stamp == model.epoch_stamp
        assert np.array_equal(back.centroids, model.centroids)
        assert np.array_equal(back.assignments, model.assignments)
        assert model_to_text(back) == text

    def test_text_rejects_garbage(self):
        with pytest.raises(ClusterError):
            model_from_text("definitely not a model\n")


def test_matches_scipy_reference():
    scipy = pytest.importorskip("scipy")
    from scipy.cluster.vq import kmeans2

    rng = np.random.default_rng(7)
    grid = rng.uniform(size=(16, 16))
    cfg = ClusterConfig(k=3, restarts=10, seed=1)
    ours = kmeans_fit(grid, cfg)
    X = pixel_features(grid, cfg)
    best = np.inf
    for seed in range(10):
        _, labels = kmeans2(X, 3, minit="++", seed=seed, iter=100)
        centroids = np.stack([X[labels == c].mean(axis=0) for c in range(3) if (labels == c).any()])
        d2 = ((X[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        best = min(best, d2.min(axis=1).sum())
    assert ours.inertia <= best * (1 + 1e-6)
