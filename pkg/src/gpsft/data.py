"""Dataset loading, synthetic task generation, and balanced batching.

Loaders cover IDX (big-endian digit-style files) and numeric CSV.
Synthetic tasks are deterministic functions of a SynthSpec seed and
come pre-split 60/20/20, stratified by class and standardized with
training-split statistics. balanced_batches builds the class-balanced
batches the contrastive selection loss needs (every class present in
a batch appears at least twice).
"""

import csv
import dataclasses
import struct

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .rng import substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

GENERATORS = ("gaussian-blobs", "two-rings", "xor-grid")


@dataclasses.dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int
    tag: str = ""

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.shape[0] < 1:
            raise InputError("dataset needs at least one sample")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InputError(f"labels shape {y.shape} does not match {x.shape[0]} samples")
        if y.size and (y.min() < 0 or y.max() >= self.classes):
            raise InputError(f"label outside [0, {self.classes})")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self):
        return self.x.shape[0]


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    generator: str
    dim: int
    classes: int
    per_class: int
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.per_class < 1:
            raise ConfigError("need at least 1 sample per class")
        if not 0.0 <= self.noise < 0.5:
            raise ConfigError(f"label noise must be in [0, 0.5), got {self.noise}")
        if self.dim < 2 and self.generator != "gaussian-blobs":
            raise ConfigError(f"{self.generator} needs dim >= 2")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.generator == "xor-grid" and self.classes > 7:
            # cell-coordinate sums over [-2,2) only cover 7 residues
            raise ConfigError("xor-grid supports at most 7 classes")


def _generate(spec):
    n = spec.classes * spec.per_class
    x = np.empty((n, spec.dim))
    y = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.per_class)
    if spec.generator == "gaussian-blobs":
        centers = substream(spec.seed, "centers").normal((spec.classes, spec.dim)) * 4.0
        for c in range(spec.classes):
            rows = slice(c * spec.per_class, (c + 1) * spec.per_class)
            x[rows] = centers[c] + substream(spec.seed, "samples", c).normal(
                (spec.per_class, spec.dim)
            )
    elif spec.generator == "two-rings":
        # concentric rings in the first two dims, pure noise elsewhere
        for c in range(spec.classes):
            rows = slice(c * spec.per_class, (c + 1) * spec.per_class)
            g = substream(spec.seed, "samples", c)
            theta = g.uniform(0.0, 2.0 * np.pi, spec.per_class)
            radius = (2 * c + 1) + 0.25 * g.normal(spec.per_class)
            x[rows, 0] = radius * np.cos(theta)
            x[rows, 1] = radius * np.sin(theta)
            if spec.dim > 2:
                x[rows, 2:] = 0.5 * g.normal((spec.per_class, spec.dim - 2))
    else:
        # xor-grid: class = (sum of unit-cell coordinates) mod classes
        for c in range(spec.classes):
            rows = range(c * spec.per_class, (c + 1) * spec.per_class)
            g = substream(spec.seed, "samples", c)
            for i in rows:
                while True:
                    p = g.uniform(-2.0, 2.0, 2)
                    if (int(np.floor(p[0])) + int(np.floor(p[1]))) % spec.classes == c:
                        break
                x[i, 0], x[i, 1] = p[0], p[1]
                if spec.dim > 2:
                    x[i, 2:] = 0.5 * g.normal(spec.dim - 2)
    if spec.noise > 0.0:
        g = substream(spec.seed, "label-noise")
        for i in range(n):
            if g.next_float() < spec.noise:
                y[i] = (y[i] + 1 + g.randbelow(spec.classes - 1)) % spec.classes
    return x, y


def stratified_split(dataset, seed):
    """Split one dataset 60/20/20 per class into (train, val, test)."""
    parts = {"train": [], "val": [], "test": []}
    for c in range(dataset.classes):
        idx = np.flatnonzero(dataset.y == c)
        perm = list(range(idx.shape[0]))
        substream(seed, "split", c).shuffle(perm)
        idx = idx[perm]
        n_c = idx.shape[0]
        n_tr = int(round(0.6 * n_c))
        n_va = int(round(0.2 * n_c))
        parts["train"].append(idx[:n_tr])
        parts["val"].append(idx[n_tr : n_tr + n_va])
        parts["test"].append(idx[n_tr + n_va :])
    out = []
    for tag in ("train", "val", "test"):
        sel = np.concatenate(parts[tag])
        out.append(Dataset(dataset.x[sel], dataset.y[sel], dataset.classes, tag))
    return tuple(out)


def synth_task(spec):
    """Generate (train, val, test) datasets, 60/20/20 stratified."""
    x, y = _generate(spec)
    whole = Dataset(x, y, spec.classes, "all")
    return standardize(*stratified_split(whole, spec.seed))


def standardize(train, *others):
    """Re-express datasets in units of the training split's feature stats."""
    mean = train.x.mean(axis=0)
    std = train.x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    fixed = [Dataset((d.x - mean) / std, d.y, d.classes, d.tag) for d in (train,) + others]
    return fixed[0] if not others else tuple(fixed)


# ---------------------------------------------------------------- loaders


def _read_exact(fh, count, path, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"{path}: truncated while reading {what}")
    return buf


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        magic, n, h, w = struct.unpack(">llll", _read_exact(fh, 16, images_path, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: bad magic {magic:#010x}")
        pixels = np.frombuffer(_read_exact(fh, n * h * w, images_path, "pixels"), dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">ll", _read_exact(fh, 8, labels_path, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: bad magic {magic:#010x}")
        labels = np.frombuffer(_read_exact(fh, n_labels, labels_path, "labels"), dtype=np.uint8)
    if n != n_labels:
        raise FormatError(f"count mismatch: {n} images vs {n_labels} labels")
    x = pixels.astype(np.float64).reshape(n, h * w) / 255.0
    y = labels.astype(np.int64)
    return Dataset(x, y, int(y.max()) + 1 if y.size else 1, "idx")


def write_idx(images_path, labels_path, x, y, height, width):
    """Write an IDX pair from float pixels in [0, 1] (quantized to bytes)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    pixels = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">llll", IDX_IMAGES_MAGIC, n, height, width))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ll", IDX_LABELS_MAGIC, n))
        fh.write(y.astype(np.uint8).tobytes())


def load_csv(path, label_col=-1, header=False):
    """Load a rectangular numeric CSV; labels densified by first appearance."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row:
                continue
            rows.append((lineno, row))
    if not rows:
        raise FormatError(f"{path}: no data rows")
    width = len(rows[0][1])
    if not -width <= label_col < width:
        raise ConfigError(f"label column {label_col} out of range for {width} columns")
    label_idx = label_col % width
    features = np.empty((len(rows), width - 1))
    label_map = {}
    labels = np.empty(len(rows), dtype=np.int64)
    for i, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise FormatError(f"{path}: line {lineno} has {len(row)} fields, expected {width}")
        col = 0
        for j, cell in enumerate(row):
            if j == label_idx:
                key = cell.strip()
                if key not in label_map:
                    label_map[key] = len(label_map)
                labels[i] = label_map[key]
                continue
            try:
                features[i, col] = float(cell)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-numeric value {cell!r}") from None
            col += 1
    return Dataset(features, labels, len(label_map), "csv")


# ---------------------------------------------------------------- batching


def balanced_batches(dataset, batch_size, seed):
    """Partition indices into batches where included classes come in pairs.

    Same-class pairs are dealt round-robin from whichever class has the
    most pairs left; odd leftovers join a batch that already holds
    their class. Every index appears exactly once.
    """
    if batch_size < 4:
        raise ConfigError(f"batch_size must be >= 4 for balanced batches, got {batch_size}")
    gen = substream(seed, "batches")
    per_class = {}
    singles = []
    for c in range(dataset.classes):
        idx = [int(i) for i in np.flatnonzero(dataset.y == c)]
        if not idx:
            continue
        if len(idx) == 1:
            raise InputError(f"class {c} has a single sample; cannot pair it for a batch")
        gen.shuffle(idx)
        if len(idx) % 2:
            singles.append((c, idx.pop()))
        per_class[c] = [(idx[i], idx[i + 1]) for i in range(0, len(idx), 2)]

    batches = []
    classes_in = []
    remaining = {c: len(p) for c, p in per_class.items()}
    cursor = {c: 0 for c in per_class}
    while any(remaining.values()):
        batch = []
        present = set()
        for _ in range(batch_size // 2):
            live = [c for c in per_class if remaining[c] > 0]
            if not live:
                break
            pick = max(live, key=lambda c: (remaining[c], -c))
            a, b = per_class[pick][cursor[pick]]
            cursor[pick] += 1
            remaining[pick] -= 1
            batch.extend((a, b))
            present.add(pick)
        batches.append(batch)
        classes_in.append(present)

    for c, index in singles:
        candidates = [i for i in range(len(batches)) if c in classes_in[i]]
        if not candidates:
            raise InputError(f"class {c} has a single sample; cannot pair it for a batch")
        target = min(candidates, key=lambda i: (len(batches[i]), i))
        batches[target].append(index)

    return [np.asarray(b, dtype=np.int64) for b in batches]


def shuffled_batches(dataset, batch_size, seed):
    """Plain seeded-order batches covering the dataset once."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = list(range(dataset.n))
    substream(seed, "batches").shuffle(order)
    return [
        np.asarray(order[i : i + batch_size], dtype=np.int64)
        for i in range(0, len(order), batch_size)
    ]
