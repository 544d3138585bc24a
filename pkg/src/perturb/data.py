"""Dataset handling: FER-format CSV, augmentation, occlusion masks, PGM.

Images are 48x48 float64 grids in [0, 1] (raw byte values divided by
255).  Labels are ints 0..6 with the fixed name table ``EMOTIONS``.
Usage tags map Training -> train, PublicTest -> val, PrivateTest -> test.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IMAGE_SIZE = 48
N_PIXELS = IMAGE_SIZE * IMAGE_SIZE
EMOTIONS = ("Angry", "Disgust", "Fear", "Happy", "Sad", "Surprise", "Neutral")
SPLITS = ("train", "val", "test")
_USAGE_TO_SPLIT = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}
_SPLIT_TO_USAGE = {v: k for k, v in _USAGE_TO_SPLIT.items()}


class DataError(Exception):
    """Malformed dataset input; message carries the offending row/field."""


@dataclass
class Dataset:
    """Three aligned splits of images (N, 48, 48) and labels (N,)."""

    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, f"{name}_images"), getattr(self, f"{name}_labels")

    def sizes(self) -> dict[str, int]:
        return {name: len(self.split(name)[1]) for name in SPLITS}


def _empty_split() -> tuple[np.ndarray, np.ndarray]:
    return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE)), np.zeros(0, dtype=np.int64)


def parse_fer_csv(path) -> Dataset:
    """Parse an emotion,pixels,Usage CSV into normalized float splits.

    Pixels are 2304 space-separated bytes; every malformed field raises
    DataError naming the 1-based row.
    """
    buckets = {s: ([], []) for s in SPLITS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["emotion", "pixels", "Usage"]:
            raise DataError(f"{path}: expected header 'emotion,pixels,Usage', got {header}")
        for rownum, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"{path} row {rownum}: expected 3 fields, got {len(row)}")
            raw_label, raw_pixels, usage = row
            try:
                label = int(raw_label)
            except ValueError:
                raise DataError(f"{path} row {rownum}: bad emotion field {raw_label!r}") from None
            if not 0 <= label < len(EMOTIONS):
                raise DataError(f"{path} row {rownum}: emotion {label} out of range 0..{len(EMOTIONS) - 1}")
            split = _USAGE_TO_SPLIT.get(usage.strip())
            if split is None:
                raise DataError(f"{path} row {rownum}: unknown usage tag {usage!r}")
            try:
                values = np.array(raw_pixels.split(), dtype=np.int64)
            except ValueError:
                raise DataError(f"{path} row {rownum}: non-integer pixel value") from None
            if values.size != N_PIXELS:
                raise DataError(f"{path} row {rownum}: expected {N_PIXELS} pixels, got {values.size}")
            if values.min() < 0 or values.max() > 255:
                raise DataError(f"{path} row {rownum}: pixel value outside 0..255")
            buckets[split][0].append(values.reshape(IMAGE_SIZE, IMAGE_SIZE))
            buckets[split][1].append(label)
    arrays = {}
    for s in SPLITS:
        imgs, labels = buckets[s]
        if imgs:
            arrays[s] = (np.stack(imgs).astype(np.float64) / 255.0, np.array(labels, dtype=np.int64))
        else:
            arrays[s] = _empty_split()
    return Dataset(
        arrays["train"][0], arrays["train"][1],
        arrays["val"][0], arrays["val"][1],
        arrays["test"][0], arrays["test"][1],
    )


def serialize_fer_csv(dataset: Dataset, path) -> None:
    """Write splits back out in the same CSV schema (train, val, test order).

    Pixel bytes are recovered exactly when images came from parse_fer_csv
    (values are n/255 for integer n, and round-tripping is exact).
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["emotion", "pixels", "Usage"])
        for split in SPLITS:
            images, labels = dataset.split(split)
            usage = _SPLIT_TO_USAGE[split]
            for img, label in zip(images, labels):
                bytes_ = np.rint(img * 255.0).astype(np.int64).clip(0, 255)
                writer.writerow([int(label), " ".join(map(str, bytes_.reshape(-1))), usage])


def class_distribution(dataset: Dataset) -> dict[str, list[int]]:
    """Per-split counts of each label, index-aligned with EMOTIONS."""
    out = {}
    for split in SPLITS:
        _, labels = dataset.split(split)
        out[split] = np.bincount(labels, minlength=len(EMOTIONS)).tolist()
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    """Horizontal flip, reflect-pad random crop, random erasing."""

    flip_prob: float = 0.5
    crop_pad: int = 4
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.33)
    erase_aspect: tuple[float, float] = (0.3, 1.0 / 0.3)

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0 or not 0.0 <= self.erase_prob <= 1.0:
            raise DataError("probabilities must lie in [0, 1]")
        if self.crop_pad < 0:
            raise DataError(f"crop_pad must be >= 0, got {self.crop_pad}")
        lo, hi = self.erase_area
        if not 0.0 < lo <= hi < 1.0:
            raise DataError(f"erase_area must satisfy 0 < lo <= hi < 1, got {self.erase_area}")
        alo, ahi = self.erase_aspect
        if not 0.0 < alo <= ahi:
            raise DataError(f"erase_aspect must be positive with lo <= hi, got {self.erase_aspect}")


def augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig) -> np.ndarray:
    """Apply flip -> crop -> erase; pure function of (image, rng state)."""
    img = np.array(image, dtype=np.float64)  # private copy; the input is never written to
    H, W = img.shape
    if rng.random() < config.flip_prob:
        img = img[:, ::-1]
    if config.crop_pad > 0:
        p = config.crop_pad
        padded = np.pad(img, p, mode="reflect")
        i = int(rng.integers(0, 2 * p + 1))
        j = int(rng.integers(0, 2 * p + 1))
        img = padded[i : i + H, j : j + W]
    img = np.ascontiguousarray(img)
    if rng.random() < config.erase_prob:
        area = H * W
        for _ in range(32):  # resample until the patch fits
            target = rng.uniform(*config.erase_area) * area
            aspect = rng.uniform(*config.erase_aspect)
            eh = int(round(np.sqrt(target * aspect)))
            ew = int(round(np.sqrt(target / aspect)))
            if 0 < eh <= H and 0 < ew <= W:
                top = int(rng.integers(0, H - eh + 1))
                left = int(rng.integers(0, W - ew + 1))
                img[top : top + eh, left : left + ew] = rng.uniform(0.0, 1.0, size=(eh, ew))
                break
    return img


# ---------------------------------------------------------------------------
# occlusion masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MaskSpec:
    """A boolean pixel region plus a fill rule (constant in [0,1] or 'mean').

    'mean' fills with the mean of the *unmasked* pixels of the image the
    mask is applied to (0.0 if the mask covers everything).
    """

    region: np.ndarray
    fill: float | str = 0.0

    def __post_init__(self):
        region = np.asarray(self.region, dtype=bool)
        if region.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise DataError(f"mask region must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {region.shape}")
        region.flags.writeable = False
        object.__setattr__(self, "region", region)
        if isinstance(self.fill, str):
            if self.fill != "mean":
                raise DataError(f"fill must be a float in [0,1] or 'mean', got {self.fill!r}")
        else:
            f = float(self.fill)
            if not 0.0 <= f <= 1.0:
                raise DataError(f"constant fill must lie in [0,1], got {f}")
            object.__setattr__(self, "fill", f)

    @staticmethod
    def rect(row_start: int, row_stop: int, col_start: int, col_stop: int, fill: float | str = 0.0) -> "MaskSpec":
        """Half-open rectangle [row_start, row_stop) x [col_start, col_stop)."""
        if not (0 <= row_start < row_stop <= IMAGE_SIZE and 0 <= col_start < col_stop <= IMAGE_SIZE):
            raise DataError(
                f"rectangle [{row_start}:{row_stop}, {col_start}:{col_stop}] falls outside the "
                f"{IMAGE_SIZE}x{IMAGE_SIZE} grid"
            )
        region = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        region[row_start:row_stop, col_start:col_stop] = True
        return MaskSpec(region, fill)

    @staticmethod
    def polygon(vertices, fill: float | str = 0.0) -> "MaskSpec":
        """Filled polygon from (row, col) vertices, scanline even-odd rule."""
        verts = [(float(r), float(c)) for r, c in vertices]
        if len(verts) < 3:
            raise DataError(f"polygon needs at least 3 vertices, got {len(verts)}")
        for r, c in verts:
            if not (0 <= r < IMAGE_SIZE and 0 <= c < IMAGE_SIZE):
                raise DataError(f"polygon vertex ({r}, {c}) falls outside the grid")
        region = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        n = len(verts)
        for row in range(IMAGE_SIZE):
            y = row + 0.5
            crossings = []
            for a in range(n):
                (r1, c1), (r2, c2) = verts[a], verts[(a + 1) % n]
                if (r1 <= y < r2) or (r2 <= y < r1):
                    crossings.append(c1 + (y - r1) * (c2 - c1) / (r2 - r1))
            crossings.sort()
            for a in range(0, len(crossings) - 1, 2):
                lo = int(np.ceil(crossings[a] - 0.5))
                hi = int(np.floor(crossings[a + 1] - 0.5))
                region[row, max(lo, 0) : min(hi, IMAGE_SIZE - 1) + 1] = True
        return MaskSpec(region, fill)

    @staticmethod
    def from_pixels(region: np.ndarray, fill: float | str = 0.0) -> "MaskSpec":
        return MaskSpec(np.asarray(region, dtype=bool), fill)

    def pixel_count(self) -> int:
        return int(self.region.sum())


def lower_half_mask(fill: float | str = "mean") -> MaskSpec:
    """Default occlusion: bottom half of the face."""
    return MaskSpec.rect(IMAGE_SIZE // 2, IMAGE_SIZE, 0, IMAGE_SIZE, fill)


def apply_mask(image: np.ndarray, spec: MaskSpec) -> np.ndarray:
    """Return a masked copy; the input is never written to."""
    img = np.array(image, dtype=np.float64)
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise DataError(f"apply_mask expects a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {img.shape}")
    if spec.fill == "mean":
        keep = ~spec.region
        fill = float(img[keep].mean()) if keep.any() else 0.0
    else:
        fill = spec.fill
    img[spec.region] = fill
    return img


def mask_dataset(dataset: Dataset, spec: MaskSpec) -> Dataset:
    """Apply one mask to every image of every split; labels untouched."""
    def do(images):
        return np.stack([apply_mask(img, spec) for img in images]) if len(images) else images.copy()

    return Dataset(
        do(dataset.train_images), dataset.train_labels.copy(),
        do(dataset.val_images), dataset.val_labels.copy(),
        do(dataset.test_images), dataset.test_labels.copy(),
    )


# ---------------------------------------------------------------------------
# PGM + dataset directories
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Write a grayscale image as binary PGM (P5, maxval 255).

    Float inputs are assumed in [0,1] and scaled; integer inputs are
    written as-is.
    """
    a = np.asarray(image)
    if a.ndim != 2:
        raise DataError(f"PGM needs a 2-d image, got shape {a.shape}")
    if np.issubdtype(a.dtype, np.floating):
        a = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    else:
        a = a.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        fh.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise DataError(f"{path}: expected maxval 255, got {maxval}")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w).copy()


def save_dataset_dir(dataset: Dataset, out_dir, extra_meta: dict | None = None) -> None:
    """Write data.csv plus metadata.json (sizes, per-class counts) to a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    serialize_fer_csv(dataset, out / "data.csv")
    meta = {
        "schema_version": 1,
        "emotions": list(EMOTIONS),
        "sizes": dataset.sizes(),
        "class_counts": class_distribution(dataset),
    }
    if extra_meta:
        meta.update(extra_meta)
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset_dir(path) -> Dataset:
    p = Path(path)
    csv_path = p / "data.csv"
    if not csv_path.exists():
        raise DataError(f"{p}: not a dataset directory (missing data.csv)")
    return parse_fer_csv(csv_path)


def batch_digest(arr: np.ndarray) -> str:
    """sha256 of an array's raw bytes; used to audit eval-input hygiene."""
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()
