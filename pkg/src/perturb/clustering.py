"""Pixel clustering in a weighted (row, col, intensity) feature space.

Every pixel of an intensity grid becomes a 3-vector
``(grid_weight * i, grid_weight * j, intensity_weight * a)``; plain
k-means in that scaled space is then exactly k-means under the weighted
distance

    sqrt((gw*(i-k))^2 + (gw*(j-l))^2 + (iw*(a_ij - a_kl))^2)

Lloyd iterations are deterministic per seed: k-means++ seeding per
restart, ties broken toward the lowest centroid index, empty clusters
reseeded at the point farthest from its centroid (which keeps the
inertia sequence non-increasing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .data import IMAGE_SIZE, MaskSpec


class ClusterError(Exception):
    """Invalid clustering configuration or degenerate input."""


class DegenerateInputError(ClusterError):
    """Fewer distinct feature points than requested clusters."""


class PixelPoint(NamedTuple):
    """A pixel as (row, col, intensity)."""

    i: float
    j: float
    a: float


def pixel_distance(p, q, grid_weight: float = 1.5, intensity_weight: float = 1.2) -> float:
    """Weighted Euclidean distance between two (row, col, intensity) points."""
    pi, pj, pa = p
    qi, qj, qa = q
    return math.sqrt(
        (grid_weight * (pi - qi)) ** 2
        + (grid_weight * (pj - qj)) ** 2
        + (intensity_weight * (pa - qa)) ** 2
    )


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 3
    grid_weight: float = 1.5
    intensity_weight: float = 1.2
    max_iter: int = 100
    tol: float = 1e-6
    restarts: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ClusterError(f"k must be >= 1, got {self.k}")
        if self.grid_weight <= 0:
            raise ClusterError(f"grid_weight must be positive, got {self.grid_weight}")
        if self.intensity_weight < 0:
            raise ClusterError(f"intensity_weight must be >= 0, got {self.intensity_weight}")
        if self.max_iter < 1:
            raise ClusterError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.tol <= 0:
            raise ClusterError(f"tol must be positive, got {self.tol}")
        if self.restarts < 1:
            raise ClusterError(f"restarts must be >= 1, got {self.restarts}")


@dataclass(frozen=True)
class ClusterModel:
    """Fitted centroids (in scaled feature space) and a pixel label grid."""

    centroids: np.ndarray  # (k, 3)
    assignments: np.ndarray  # (H, W) int32
    inertia: float
    iterations: int
    epoch_stamp: int
    config: ClusterConfig

    @property
    def k(self) -> int:
        return len(self.centroids)


def pixel_features(grid: np.ndarray, config: ClusterConfig) -> np.ndarray:
    """Scale an (H, W) intensity grid into (H*W, 3) feature points."""
    a = np.asarray(grid, dtype=np.float64)
    if a.ndim != 2:
        raise ClusterError(f"intensity grid must be 2-d, got shape {a.shape}")
    H, W = a.shape
    ii, jj = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    return np.column_stack(
        [
            (config.grid_weight * ii).reshape(-1),
            (config.grid_weight * jj).reshape(-1),
            (config.intensity_weight * a).reshape(-1),
        ]
    )


def _assign(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)  # argmin takes the lowest index on ties
    return labels, d2[np.arange(len(X)), labels]


def _kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(0, n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:  # all remaining mass on existing centroids
            centroids[c] = X[rng.integers(0, n)]
        else:
            centroids[c] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((X - centroids[c]) ** 2).sum(axis=1))
    return centroids


def lloyd_iterate(X: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float):
    """Run Lloyd updates; returns (centroids, labels, inertia, history, iters)."""
    C = np.array(centroids, dtype=np.float64)
    k = len(C)
    history = []
    labels, d = _assign(X, C)
    history.append(float(d.sum()))
    it = 0
    for it in range(1, max_iter + 1):
        newC = C.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                newC[c] = X[members].mean(axis=0)
        # reseed any empty cluster at the globally farthest point
        _, dist_after = _assign(X, newC)
        for c in range(k):
            if not (labels == c).any():
                newC[c] = X[dist_after.argmax()]
                _, dist_after = _assign(X, newC)
        shift = np.sqrt(((newC - C) ** 2).sum(axis=1)).max()
        C = newC
        labels, d = _assign(X, C)
        history.append(float(d.sum()))
        if shift < tol:
            break
    return C, labels, history[-1], history, it


def kmeans_points(
    X: np.ndarray, k: int, restarts: int, seed: int, max_iter: int = 100, tol: float = 1e-6
):
    """Best-of-restarts k-means on raw points; ties go to the earlier restart."""
    X = np.asarray(X, dtype=np.float64)
    if len(np.unique(X, axis=0)) < k:
        raise DegenerateInputError(
            f"need at least k={k} distinct feature points, got {len(np.unique(X, axis=0))}"
        )
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC1, r]))
        init = _kmeans_plus_plus(X, k, rng)
        C, labels, inertia, _, iters = lloyd_iterate(X, init, max_iter, tol)
        if best is None or inertia < best[0]:
            best = (inertia, C, labels, iters)
    inertia, C, labels, iters = best
    return C, labels, inertia, iters


def kmeans_fit(
    grid: np.ndarray, config: ClusterConfig, initial_centroids: np.ndarray | None = None
) -> ClusterModel:
    """Cluster an intensity grid's pixels.

    With ``initial_centroids`` this runs a single warm-started Lloyd pass
    instead of fresh k-means++ restarts.
    """
    X = pixel_features(grid, config)
    H, W = np.asarray(grid).shape
    if initial_centroids is not None:
        C0 = np.asarray(initial_centroids, dtype=np.float64)
        if C0.shape != (config.k, 3):
            raise ClusterError(f"initial centroids must be ({config.k}, 3), got {C0.shape}")
        if len(np.unique(X, axis=0)) < config.k:
            raise DegenerateInputError(f"need at least k={config.k} distinct feature points")
        C, labels, inertia, _, iters = lloyd_iterate(X, C0, config.max_iter, config.tol)
    else:
        C, labels, inertia, iters = kmeans_points(
            X, config.k, config.restarts, config.seed, config.max_iter, config.tol
        )
    return ClusterModel(
        centroids=C,
        assignments=labels.reshape(H, W).astype(np.int32),
        inertia=float(inertia),
        iterations=iters,
        epoch_stamp=0,
        config=config,
    )


def epoch_update(model: ClusterModel, grid: np.ndarray) -> ClusterModel:
    """Refresh a fitted model on a new attention grid.

    Warm-starts from the previous centroids; if the warm solution's
    inertia regresses more than 10% against the previous epoch, fresh
    restarts are run as well and the better solution wins.
    """
    warm = kmeans_fit(grid, model.config, initial_centroids=model.centroids)
    best = warm
    if warm.inertia > 1.1 * model.inertia:
        fresh = kmeans_fit(grid, model.config)
        if fresh.inertia < warm.inertia:
            best = fresh
    return replace(best, epoch_stamp=model.epoch_stamp + 1)


def cluster_to_masks(model: ClusterModel, fill: float | str = "mean") -> list[MaskSpec]:
    """One MaskSpec per cluster; the k regions partition the pixel grid."""
    if model is None or model.assignments.size == 0:
        raise ClusterError("cluster_to_masks needs a fitted cluster model")
    if model.assignments.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ClusterError(
            f"masks are defined on the {IMAGE_SIZE}x{IMAGE_SIZE} grid, model has {model.assignments.shape}"
        )
    return [MaskSpec.from_pixels(model.assignments == c, fill) for c in range(model.k)]


def label_image(model: ClusterModel) -> np.ndarray:
    """Visualize assignments as uint8 gray levels (spread over 0..255)."""
    return (model.assignments * (255 // model.k)).astype(np.uint8)


def model_to_text(model: ClusterModel) -> str:
    """Round-trippable text serialization (floats via repr)."""
    cfg = model.config
    lines = [
        "clustermodel v1",
        f"k {cfg.k}",
        f"grid_weight {cfg.grid_weight!r}",
        f"intensity_weight {cfg.intensity_weight!r}",
        f"max_iter {cfg.max_iter}",
        f"tol {cfg.tol!r}",
        f"restarts {cfg.restarts}",
        f"seed {cfg.seed}",
        f"epoch {model.epoch_stamp}",
        f"iterations {model.iterations}",
        f"inertia {model.inertia!r}",
        f"grid {model.assignments.shape[0]} {model.assignments.shape[1]}",
    ]
    for c, row in enumerate(model.centroids):
        lines.append(f"centroid {c} {row[0]!r} {row[1]!r} {row[2]!r}")
    for row in model.assignments:
        lines.append(" ".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> ClusterModel:
    lines = text.strip().splitlines()
    if not lines or lines[0] != "clustermodel v1":
        raise ClusterError("not a cluster model file (bad first line)")
    fields: dict[str, str] = {}
    centroids = {}
    grid_shape = None
    rows: list[list[int]] = []
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "centroid":
            centroids[int(parts[1])] = [float(parts[2]), float(parts[3]), float(parts[4])]
        elif parts[0] == "grid":
            grid_shape = (int(parts[1]), int(parts[2]))
        elif parts[0] in {
            "k", "grid_weight", "intensity_weight", "max_iter", "tol", "restarts",
            "seed", "epoch", "iterations", "inertia",
        }:
            fields[parts[0]] = parts[1]
        else:
            rows.append([int(v) for v in parts])
    if grid_shape is None or len(rows) != grid_shape[0]:
        raise ClusterError("malformed cluster model: bad assignment grid")
    cfg = ClusterConfig(
        k=int(fields["k"]),
        grid_weight=float(fields["grid_weight"]),
        intensity_weight=float(fields["intensity_weight"]),
        max_iter=int(fields["max_iter"]),
        tol=float(fields["tol"]),
        restarts=int(fields["restarts"]),
        seed=int(fields["seed"]),
    )
    C = np.array([centroids[c] for c in range(cfg.k)])
    return ClusterModel(
        centroids=C,
        assignments=np.array(rows, dtype=np.int32),
        inertia=float(fields["inertia"]),
        iterations=int(fields["iterations"]),
        epoch_stamp=int(fields["epoch"]),
        config=cfg,
    )
