"""Synthetic 3-class glyph benchmark for occlusion-robustness studies.

Each 48x48 image carries the same class glyph (X, ring, or cross) in
three fixed square regions over low background noise.  One region —
the bottom-center one — is drawn at high contrast and is enough to
classify on its own; the two top regions repeat the glyph faintly.  A
model trained naively latches onto the bright region; hiding one region
at eval time (the "occluded" variants) then reveals whether it ever
learned the redundant cues.

Labels use 0..2 of the 7-class label space.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset, IMAGE_SIZE

# (row_start, row_stop, col_start, col_stop), half-open
REGIONS = (
    (8, 20, 6, 18),    # upper left
    (8, 20, 30, 42),   # upper right
    (32, 44, 18, 30),  # bottom center (dominant)
)
DOMINANT_REGION = 2
N_GLYPH_CLASSES = 3
_SIDE = 12


def _stencils() -> np.ndarray:
    """Boolean 12x12 stencils for the three glyphs."""
    idx = np.arange(_SIDE)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    x_glyph = (np.abs(ii - jj) <= 1) | (np.abs(ii + jj - (_SIDE - 1)) <= 1)
    ring_r = np.maximum(np.abs(ii - (_SIDE - 1) / 2), np.abs(jj - (_SIDE - 1) / 2))
    ring = (ring_r >= 3.5) & (ring_r <= 5.5)
    cross = (np.abs(ii - (_SIDE - 1) / 2) <= 1) | (np.abs(jj - (_SIDE - 1) / 2) <= 1)
    return np.stack([x_glyph, ring, cross])


_STENCILS = _stencils()


def _render(label: int, rng: np.random.Generator, noise: float, dominant: float, faint: float) -> np.ndarray:
    img = rng.uniform(0.0, noise, size=(IMAGE_SIZE, IMAGE_SIZE))
    stencil = _STENCILS[label]
    for r, (r0, r1, c0, c1) in enumerate(REGIONS):
        level = dominant if r == DOMINANT_REGION else faint
        patch = img[r0:r1, c0:c1]
        values = level + rng.uniform(-0.05, 0.05, size=stencil.sum())
        patch[stencil] = np.clip(values, 0.0, 1.0)
    return img


def _split(n: int, rng: np.random.Generator, noise: float, dominant: float, faint: float):
    labels = rng.integers(0, N_GLYPH_CLASSES, size=n).astype(np.int64)
    images = np.stack([_render(int(y), rng, noise, dominant, faint) for y in labels])
    return images, labels


def make_glyph_dataset(
    n_train: int = 3000,
    n_val: int = 600,
    n_test: int = 600,
    seed: int = 0,
    noise: float = 0.15,
    dominant: float = 0.95,
    faint: float = 0.35,
) -> Dataset:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5717]))
    train = _split(n_train, rng, noise, dominant, faint)
    val = _split(n_val, rng, noise, dominant, faint)
    test = _split(n_test, rng, noise, dominant, faint)
    return Dataset(train[0], train[1], val[0], val[1], test[0], test[1])


def occlude_regions(images: np.ndarray, seed: int = 0) -> np.ndarray:
    """Hide one uniformly chosen region per image (filled with the image mean)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0CC1]))
    out = np.array(images, dtype=np.float64)
    picks = rng.integers(0, len(REGIONS), size=len(out))
    for img, pick in zip(out, picks):
        r0, r1, c0, c1 = REGIONS[pick]
        img[r0:r1, c0:c1] = img.mean()
    return out


def glyph_benchmark(seed: int = 0, **kwargs):
    """Dataset plus its occluded test images: (dataset, occluded_test_images)."""
    ds = make_glyph_dataset(seed=seed, **kwargs)
    return ds, occlude_regions(ds.test_images, seed=seed)
