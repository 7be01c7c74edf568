"""Dataset generation and ingestion.

Provides the synthetic six-class pip-pattern image generator (single pip,
mirrored pip pair, center line, box outline, box plus center pip, and two
parallel offset lines — rasterized with coverage anti-aliasing on a
32x32 field), a reader for the standard 10-class binary image format, a
generic label-plus-vector CSV reader, the package's own binary dataset
file format, and seeded subset sampling.

The rasterizer draws on a logical [-1, 1]^2 field mapped onto 32x32
pixels, sampling every primitive on a 4x4 subgrid per pixel; the union of
the primitives is taken per subsample, so overlapping shapes never exceed
full ink. Pixel row 0 is the top of the image (y = +1).
"""

import csv
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DataFormatError

IMAGE_SIDE = 32
_SUBSAMPLES = 4
_PIXELS_PER_UNIT = IMAGE_SIDE / 2.0
_PIP_RADIUS_PER_SIZE = 2.5  # pixels of disk radius per unit of pip size
_STROKE_WIDTH_PER_WEIGHT = 1.5  # pixels of stroke width per unit of line weight
_TRAIN_TEST_SPLIT_SEED = 0x5911  # fixed so every experiment sees the same split

END_CAPS = ("round", "butt", "square")

NUM_DICE_CLASSES = 6


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Provenance:
    """Where a dataset came from: source tag, sampling seed, and size."""

    source: str
    seed: int | None
    size: int


@dataclass(frozen=True)
class LabeledDataset:
    """Flat feature matrix with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: Provenance

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise DataError(f"inputs must be a nonempty matrix, got {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise DataError(
                f"labels shape {labels.shape} does not match {inputs.shape[0]} rows"
            )
        if self.num_classes < 2:
            raise DataError("need at least two classes")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DataError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])


@dataclass(frozen=True)
class ParamRange:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ConfigError(f"range [{self.lo}, {self.hi}] has min > max")

    def sample(self, rng) -> float:
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class DiceParams:
    """Per-class sampling ranges for the pip-pattern generator.

    ranges[c] holds the ranges for class c+1 keyed by parameter name;
    classes that draw strokes also get their cap style sampled uniformly
    from END_CAPS.
    """

    ranges: tuple[dict, ...]

    def __post_init__(self):
        if len(self.ranges) != NUM_DICE_CLASSES:
            raise ConfigError(f"need {NUM_DICE_CLASSES} class entries")

    def for_class(self, class_id: int) -> dict:
        if not 1 <= class_id <= NUM_DICE_CLASSES:
            raise ConfigError(f"class_id {class_id} outside 1..{NUM_DICE_CLASSES}")
        return self.ranges[class_id - 1]


def default_dice_params() -> DiceParams:
    """Published sampling ranges for the six pip-pattern classes."""
    span = ParamRange(-1.0, 1.0)
    pip = ParamRange(0.1, 1.0)
    heavy = ParamRange(0.1, 2.5)
    light = ParamRange(0.1, 1.0)
    return DiceParams(
        ranges=(
            {"x_coord": span, "y_coord": span, "p_size": pip},
            {"x_coord": span, "y_coord": span, "p_size": pip},
            {"x_coord": span, "y_coord": span, "l_weight": heavy},
            {"x_coord": span, "y_coord": span, "l_weight": light},
            {
                "x_coord": ParamRange(0.2, 1.0),
                "y_coord": ParamRange(0.2, 1.0),
                "p_size": ParamRange(0.1, 0.7),
                "l_weight": light,
            },
            {
                "x_coord": ParamRange(-0.9, 0.9),
                "y_coord": ParamRange(-0.9, 0.9),
                "x_shift": ParamRange(0.1, 0.8),
                "y_shift": ParamRange(0.1, 0.8),
                "l_weight": heavy,
            },
        )
    )


# ---------------------------------------------------------------------------
# Rasterizer
# ---------------------------------------------------------------------------


def _subsample_grid():
    """Pixel-space coordinates of every subsample, each (S*side,) 1-D."""
    n = IMAGE_SIDE * _SUBSAMPLES
    return (np.arange(n) + 0.5) / _SUBSAMPLES


_GRID_U = _subsample_grid()[None, :]  # horizontal pixel coordinate
_GRID_V = _subsample_grid()[:, None]  # vertical pixel coordinate (row 0 = top)


def _to_pixel(x: float, y: float) -> tuple[float, float]:
    return (x + 1.0) * _PIXELS_PER_UNIT, (1.0 - y) * _PIXELS_PER_UNIT


def _disk_mask(cx, cy, radius):
    return (_GRID_U - cx) ** 2 + (_GRID_V - cy) ** 2 <= radius * radius


def _segment_mask(p, q, width, cap):
    """Boolean subsample coverage of a stroked segment.

    cap is one of END_CAPS; a zero-length segment degenerates to a disk
    for round and square caps and to nothing for butt caps.
    """
    half = width / 2.0
    dx, dy = q[0] - p[0], q[1] - p[1]
    length_sq = dx * dx + dy * dy
    if length_sq < 1e-24:
        if cap == "butt":
            return np.zeros_like(_GRID_U + _GRID_V, dtype=bool)
        return _disk_mask(p[0], p[1], half)
    ru, rv = _GRID_U - p[0], _GRID_V - p[1]
    t = (ru * dx + rv * dy) / length_sq
    perp_sq = (ru - t * dx) ** 2 + (rv - t * dy) ** 2
    if cap == "square":
        overhang = half / np.sqrt(length_sq)
        body = (t >= -overhang) & (t <= 1.0 + overhang)
        return body & (perp_sq <= half * half)
    body = (t >= 0.0) & (t <= 1.0) & (perp_sq <= half * half)
    if cap == "round":
        body |= _disk_mask(p[0], p[1], half)
        body |= _disk_mask(q[0], q[1], half)
    return body


def _box_outline_masks(corner_x, corner_y, width, cap):
    """Stroked axis-aligned rectangle outline through (+-corner_x, +-corner_y)."""
    a = _to_pixel(corner_x, corner_y)
    b = _to_pixel(-corner_x, corner_y)
    c = _to_pixel(-corner_x, -corner_y)
    d = _to_pixel(corner_x, -corner_y)
    return [
        _segment_mask(a, b, width, cap),
        _segment_mask(b, c, width, cap),
        _segment_mask(c, d, width, cap),
        _segment_mask(d, a, width, cap),
    ]


def _sample_class_params(class_id: int, params: DiceParams, rng) -> dict:
    ranges = params.for_class(class_id)
    drawn = {}
    for name in ("x_coord", "y_coord", "p_size", "x_shift", "y_shift", "l_weight"):
        if name in ranges:
            drawn[name] = ranges[name].sample(rng)
    if "l_weight" in drawn:
        drawn["e_type"] = END_CAPS[int(rng.integers(0, len(END_CAPS)))]
    return drawn


def _class_masks(class_id: int, drawn: dict) -> list[np.ndarray]:
    x, y = drawn["x_coord"], drawn["y_coord"]
    if class_id == 1:
        cu, cv = _to_pixel(x, y)
        return [_disk_mask(cu, cv, drawn["p_size"] * _PIP_RADIUS_PER_SIZE)]
    if class_id == 2:
        r = drawn["p_size"] * _PIP_RADIUS_PER_SIZE
        return [
            _disk_mask(*_to_pixel(x, y), r),
            _disk_mask(*_to_pixel(-x, -y), r),
        ]
    width = drawn["l_weight"] * _STROKE_WIDTH_PER_WEIGHT
    cap = drawn["e_type"]
    if class_id == 3:
        return [_segment_mask(_to_pixel(x, y), _to_pixel(-x, -y), width, cap)]
    if class_id == 4:
        return _box_outline_masks(x, y, width, cap)
    if class_id == 5:
        masks = _box_outline_masks(x, y, width, cap)
        cu, cv = _to_pixel(0.0, 0.0)
        masks.append(_disk_mask(cu, cv, drawn["p_size"] * _PIP_RADIUS_PER_SIZE))
        return masks
    xs, ys = drawn["x_shift"], drawn["y_shift"]
    return [
        _segment_mask(
            _to_pixel(x - xs, y - ys), _to_pixel(-x - xs, -y - ys), width, cap
        ),
        _segment_mask(
            _to_pixel(x + xs, y + ys), _to_pixel(-x + xs, -y + ys), width, cap
        ),
    ]


def generate_dice(class_id: int, params: DiceParams | None = None, seed=0) -> np.ndarray:
    """Render one 32x32 pip-pattern image for the given class, in [0, 1].

    Deterministic per (class_id, params, seed). Mirrored pips that land on
    the origin simply coincide: the subsample union renders them as one
    disk.
    """
    if params is None:
        params = default_dice_params()
    if not 1 <= class_id <= NUM_DICE_CLASSES:
        raise ConfigError(f"class_id {class_id} outside 1..{NUM_DICE_CLASSES}")
    rng = np.random.default_rng(seed)
    drawn = _sample_class_params(class_id, params, rng)
    union = np.zeros((IMAGE_SIDE * _SUBSAMPLES,) * 2, dtype=bool)
    for mask in _class_masks(class_id, drawn):
        union |= mask
    coverage = union.reshape(
        IMAGE_SIDE, _SUBSAMPLES, IMAGE_SIDE, _SUBSAMPLES
    ).mean(axis=(1, 3))
    return coverage


def generate_dice_dataset(
    n_per_class: int, params: DiceParams | None = None, seed: int = 0
) -> LabeledDataset:
    """Six-class image dataset, flattened rows, grouped by class.

    Image j of class c uses its own generator seeded by
    (seed, (c-1) * n_per_class + j), so any image can be regenerated in
    isolation and generation order never matters.
    """
    if n_per_class < 1:
        raise ConfigError("n_per_class must be at least 1")
    if params is None:
        params = default_dice_params()
    total = NUM_DICE_CLASSES * n_per_class
    inputs = np.empty((total, IMAGE_SIDE * IMAGE_SIDE))
    labels = np.empty(total, dtype=np.int64)
    for class_id in range(1, NUM_DICE_CLASSES + 1):
        base = (class_id - 1) * n_per_class
        for j in range(n_per_class):
            image = generate_dice(class_id, params, seed=(seed, base + j))
            inputs[base + j] = image.ravel()
            labels[base + j] = class_id - 1
    return LabeledDataset(
        inputs=inputs,
        labels=labels,
        num_classes=NUM_DICE_CLASSES,
        provenance=Provenance(source="dice", seed=seed, size=total),
    )


def split_train_test(
    dataset: LabeledDataset, train_fraction: float = 0.5, seed: int = _TRAIN_TEST_SPLIT_SEED
) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic disjoint split; the default seed is fixed package-wide."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be strictly between 0 and 1")
    n = dataset.n_samples
    n_train = int(round(n * train_fraction))
    if n_train < 1 or n_train >= n:
        raise DataError(f"split leaves an empty side for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    parts = []
    for tag, idx in (("train", perm[:n_train]), ("test", perm[n_train:])):
        parts.append(
            LabeledDataset(
                inputs=dataset.inputs[idx],
                labels=dataset.labels[idx],
                num_classes=dataset.num_classes,
                provenance=Provenance(
                    source=f"{dataset.provenance.source}:{tag}",
                    seed=seed,
                    size=int(idx.size),
                ),
            )
        )
    return parts[0], parts[1]


# ---------------------------------------------------------------------------
# Ink-structure helpers (used by the generator's own integrity checks)
# ---------------------------------------------------------------------------


def ink_components(image: np.ndarray, threshold: float = 0.5):
    """Connected components of thresholded ink, 8-connectivity.

    Returns a list of (row, col) index arrays, largest component first.
    """
    mask = np.asarray(image) > threshold
    seen = np.zeros_like(mask, dtype=bool)
    components = []
    rows, cols = mask.shape
    for r0, c0 in zip(*np.nonzero(mask)):
        if seen[r0, c0]:
            continue
        queue = deque([(int(r0), int(c0))])
        seen[r0, c0] = True
        pixels = []
        while queue:
            r, c = queue.popleft()
            pixels.append((r, c))
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols:
                        if mask[rr, cc] and not seen[rr, cc]:
                            seen[rr, cc] = True
                            queue.append((rr, cc))
        components.append(np.array(pixels))
    components.sort(key=len, reverse=True)
    return components


def component_orientation(pixels: np.ndarray) -> tuple[float, float]:
    """(angle in degrees within [0, 180), elongation) of one component.

    The angle is the principal axis of the pixel coordinates; elongation
    is the ratio of principal standard deviations (1 for a blob, large
    for a stroke). Angle for a single pixel is 0 with elongation 1.
    """
    pts = np.asarray(pixels, dtype=np.float64)
    if pts.shape[0] < 2:
        return 0.0, 1.0
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    values, vectors = np.linalg.eigh(cov)
    major = vectors[:, 1]
    # Pixel coordinates are (row, col); angle measured in image x-y terms.
    angle = np.degrees(np.arctan2(-major[0], major[1])) % 180.0
    minor = np.sqrt(max(values[0], 1e-12))
    return float(angle), float(np.sqrt(values[1]) / minor)


def angle_distance(a: float, b: float) -> float:
    """Distance between undirected angles in degrees, in [0, 90]."""
    d = abs(a - b) % 180.0
    return min(d, 180.0 - d)


# ---------------------------------------------------------------------------
# Binary image-format reader (1 label byte + 3072 pixel bytes per record)
# ---------------------------------------------------------------------------

_RECORD_BYTES = 3073
_RECORD_PIXELS = 3072


def load_cifar10_binary(paths) -> LabeledDataset:
    """Read the standard 10-class binary image batches.

    Each record is one label byte followed by 3072 pixel bytes (row-major
    color planes); pixels are scaled to [0, 1]. Accepts one path or a
    sequence; files concatenate in order.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    all_inputs, all_labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % _RECORD_BYTES != 0:
            complete = len(raw) // _RECORD_BYTES
            raise DataFormatError(
                f"{path}: truncated record at byte {complete * _RECORD_BYTES} "
                f"(file holds {len(raw)} bytes, records are {_RECORD_BYTES})"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _RECORD_BYTES)
        labels = records[:, 0].astype(np.int64)
        if labels.max() > 9:
            bad = int(np.argmax(labels > 9))
            raise DataFormatError(
                f"{path}: label byte {labels[bad]} at record {bad} exceeds class 9"
            )
        all_labels.append(labels)
        all_inputs.append(records[:, 1:].astype(np.float64) / 255.0)
    inputs = np.vstack(all_inputs)
    labels = np.concatenate(all_labels)
    return LabeledDataset(
        inputs=inputs,
        labels=labels,
        num_classes=10,
        provenance=Provenance(source="cifar10", seed=None, size=int(labels.size)),
    )


# ---------------------------------------------------------------------------
# Package dataset file format
# ---------------------------------------------------------------------------

_MAGIC = b"EOSD"
_FORMAT_VERSION = 1


def save_dataset(dataset: LabeledDataset, path) -> None:
    """Write the binary dataset file: magic, version, sizes, labels, inputs."""
    n, d = dataset.inputs.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.asarray([_FORMAT_VERSION], dtype="<u4").tobytes())
        fh.write(np.asarray([n, d, dataset.num_classes], dtype="<u8").tobytes())
        fh.write(dataset.labels.astype("<u4").tobytes())
        fh.write(dataset.inputs.astype("<f8").tobytes())


def load_dataset(path) -> LabeledDataset:
    """Read a file produced by save_dataset; inverse on payload fields."""
    raw = Path(path).read_bytes()
    if len(raw) < 32 or raw[:4] != _MAGIC:
        raise DataFormatError(f"{path}: not a dataset file (bad magic at byte 0)")
    version = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if version != _FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    n, d, num_classes = (
        int(v) for v in np.frombuffer(raw, dtype="<u8", count=3, offset=8)
    )
    labels_end = 32 + 4 * n
    inputs_end = labels_end + 8 * n * d
    if len(raw) != inputs_end:
        raise DataFormatError(
            f"{path}: expected {inputs_end} bytes for {n}x{d}, found {len(raw)} "
            f"(payload truncated at byte {min(len(raw), inputs_end)})"
        )
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=32).astype(np.int64)
    inputs = np.frombuffer(raw, dtype="<f8", count=n * d, offset=labels_end)
    return LabeledDataset(
        inputs=inputs.reshape(n, d).copy(),
        labels=labels,
        num_classes=num_classes,
        provenance=Provenance(source=f"eosd:{Path(path).name}", seed=None, size=n),
    )


# ---------------------------------------------------------------------------
# Vector CSV
# ---------------------------------------------------------------------------


def load_vector_csv(path, num_classes: int | None = None) -> LabeledDataset:
    """Read label-then-features rows: integer class, then decimal floats."""
    rows, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                labels.append(int(row[0]))
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: label {row[0]!r} is not an integer"
                ) from None
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: non-numeric feature value"
                ) from None
            if len(rows[-1]) != len(rows[0]):
                raise DataFormatError(
                    f"{path}:{lineno}: row has {len(rows[-1])} features, "
                    f"expected {len(rows[0])}"
                )
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return LabeledDataset(
        inputs=np.asarray(rows, dtype=np.float64),
        labels=labels,
        num_classes=num_classes,
        provenance=Provenance(source=f"csv:{Path(path).name}", seed=None, size=len(rows)),
    )


# ---------------------------------------------------------------------------
# Subsets
# ---------------------------------------------------------------------------


def subset(dataset: LabeledDataset, size: int, seed: int) -> LabeledDataset:
    """Uniform sample without replacement, deterministic per seed."""
    if size < 1:
        raise DataError("subset size must be at least 1")
    if size > dataset.n_samples:
        raise DataError(
            f"subset size {size} exceeds dataset size {dataset.n_samples}"
        )
    idx = np.random.default_rng(seed).choice(dataset.n_samples, size, replace=False)
    return LabeledDataset(
        inputs=dataset.inputs[idx],
        labels=dataset.labels[idx],
        num_classes=dataset.num_classes,
        provenance=replace(dataset.provenance, seed=seed, size=size),
    )
