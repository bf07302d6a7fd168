"""Datasets: synthetic blobs, IDX/CSV ingestion, Dirichlet label-skew
partitioning and per-sample hash embeddings."""
from __future__ import annotations

import csv
import gzip
import io
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ParseError

DEFAULT_HASH_DIM = 32


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise InputError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] == 0:
            raise InputError("dataset is empty")
        if self.features.shape[0] != self.labels.shape[0]:
            raise InputError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise InputError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise InputError("features contain NaN or Inf")
        if self.split not in ("train", "test"):
            raise InputError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def class_centroids(self) -> np.ndarray:
        """Per-class feature means; NaN rows for classes without samples."""
        out = np.full((self.n_classes, self.dim), np.nan)
        for c in range(self.n_classes):
            rows = self.features[self.labels == c]
            if len(rows):
                out[c] = rows.mean(axis=0)
        return out


@dataclass
class Partition:
    assignments: list[np.ndarray]
    alpha: float
    seed: int

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments])

    def class_histograms(self, labels, n_classes: int) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[a], minlength=n_classes) for a in self.assignments])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def class_means(n_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Class centres with pairwise distance ``2 * separation``.

    With unit-variance noise, ``separation`` is then the distance from each
    centre to the midplane between any two classes.  When there are more
    classes than dimensions the directions are random unit vectors and the
    distance holds only on average.
    """
    g = rng.standard_normal((dim, n_classes))
    if n_classes <= dim:
        q, r = np.linalg.qr(g)
        dirs = (q * np.sign(np.diag(r))).T
    else:
        dirs = (g / np.linalg.norm(g, axis=0)).T
    return dirs * separation * np.sqrt(2.0)


def generate_synthetic(n_classes: int = 10, per_class: int = 100, dim: int = 16,
                       separation: float = 3.0, seed: int = 0,
                       test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Gaussian blobs, one isotropic unit-variance cluster per class.

    Each class gets ``per_class`` samples split 80/20 (stratified) into a
    train and a test set.  Sample order within each split is shuffled.
    """
    if n_classes < 1 or per_class < 1 or dim < 1:
        raise ConfigError("n_classes, per_class and dim must all be positive")
    if separation < 0:
        raise ConfigError(f"separation must be >= 0, got {separation}", field="separation")
    rng = np.random.default_rng(seed)
    means = class_means(n_classes, dim, separation, rng)
    n_test = int(round(per_class * test_fraction))
    if per_class > 1:
        n_test = min(max(n_test, 1), per_class - 1)
    else:
        n_test = 0
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(n_classes):
        x = means[c] + rng.standard_normal((per_class, dim))
        tr_x.append(x[n_test:])
        tr_y.append(np.full(per_class - n_test, c))
        te_x.append(x[:n_test])
        te_y.append(np.full(n_test, c))
    tr_x, tr_y = np.concatenate(tr_x), np.concatenate(tr_y)
    order = rng.permutation(len(tr_y))
    train = Dataset(tr_x[order], tr_y[order], n_classes, "train")
    if n_test == 0:
        return train, Dataset(tr_x[order], tr_y[order], n_classes, "test")
    te_x, te_y = np.concatenate(te_x), np.concatenate(te_y)
    order = rng.permutation(len(te_y))
    return train, Dataset(te_x[order], te_y[order], n_classes, "test")


def nearest_centroid_predict(train: Dataset, x) -> np.ndarray:
    cents = train.class_centroids()
    x = np.asarray(x, dtype=np.float64)
    d = ((x[:, None, :] - cents[None, :, :]) ** 2).sum(axis=-1)
    d = np.where(np.isnan(d), np.inf, d)
    return np.argmin(d, axis=1)


def nearest_centroid_pair(dataset: Dataset) -> tuple[int, int]:
    """The two classes whose empirical centroids are closest (lower index first)."""
    cents = dataset.class_centroids()
    best, pair = np.inf, (0, 1)
    for a in range(dataset.n_classes):
        for b in range(a + 1, dataset.n_classes):
            d = float(np.sum((cents[a] - cents[b]) ** 2))
            if d < best:
                best, pair = d, (a, b)
    return pair


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

_IDX_TYPES = {
    0x08: (">u1", 1),
    0x09: (">i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}


def _open_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of its declared shape."""
    buf = _open_bytes(path)
    if len(buf) < 4:
        raise ParseError("file too short for IDX magic", offset=len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise ParseError(f"bad IDX magic {buf[:4].hex()}", offset=0)
    code, ndim = buf[2], buf[3]
    if code not in _IDX_TYPES:
        raise ParseError(f"unknown IDX element type 0x{code:02x}", offset=2)
    if ndim == 0:
        raise ParseError("IDX file declares zero dimensions", offset=3)
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise ParseError("truncated IDX dimension header", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    dtype, width = _IDX_TYPES[code]
    expected = int(np.prod(dims)) * width
    body = len(buf) - header_end
    if body < expected:
        raise ParseError(
            f"IDX payload has {body} bytes, dims {dims} need {expected}", offset=len(buf)
        )
    if body > expected:
        raise ParseError(
            f"IDX payload has {body - expected} trailing bytes", offset=header_end + expected
        )
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)


def write_idx(path, array) -> None:
    """Write an unsigned-byte IDX file (uncompressed)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        if np.any(a < 0) or np.any(a > 255) or np.any(a != np.round(a)):
            raise InputError("write_idx only stores integers in [0, 255]")
        a = a.astype(np.uint8)
    header = struct.pack(">BBBB", 0, 0, 0x08, a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def load_idx(images_path, labels_path, n_classes: int | None = None,
             split: str = "train") -> Dataset:
    """Load an MNIST-style image/label IDX pair.

    Images are flattened to one row per sample and unsigned-byte pixels are
    scaled to [0, 1].  ``n_classes`` defaults to ``max(label) + 1``.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim < 2:
        raise ParseError("image file must have at least 2 dimensions", offset=3)
    if labels.ndim != 1:
        raise ParseError("label file must be 1-dimensional", offset=3)
    if labels.shape[0] != images.shape[0]:
        raise ParseError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    else:
        lo, hi = x.min(), x.max()
        x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    y = labels.astype(np.int64)
    if np.any(y < 0):
        raise ParseError("negative label", offset=8 + int(np.argmax(y < 0)))
    k = int(y.max()) + 1 if n_classes is None else n_classes
    if np.any(y >= k):
        bad = int(np.argmax(y >= k))
        raise ParseError(f"label {y[bad]} >= n_classes {k}", offset=8 + bad)
    return Dataset(x, y, k, split)


def export_idx(dataset: Dataset, images_path, labels_path, image_shape=None) -> None:
    """Inverse of :func:`load_idx` for features on the 1/255 grid."""
    pixels = np.round(dataset.features * 255.0)
    if image_shape is not None:
        pixels = pixels.reshape((len(dataset), *image_shape))
    write_idx(images_path, pixels)
    write_idx(labels_path, dataset.labels)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """How to read a tabular file.

    Feature values are mapped linearly from ``value_range`` onto [0, 1];
    values outside that range are a parse error.
    """

    label_column: str = "label"
    n_classes: int | None = None
    value_range: tuple[float, float] = (0.0, 1.0)


def load_csv(path, schema: CsvSchema | None = None, split: str = "train") -> Dataset:
    schema = schema or CsvSchema()
    lo, hi = schema.value_range
    if not hi > lo:
        raise ConfigError("value_range must be increasing", field="value_range")
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty CSV file", offset=1, unit="line") from None
    header = [h.strip() for h in header]
    if schema.label_column not in header:
        raise ParseError(f"no {schema.label_column!r} column in header", offset=1, unit="line")
    li = header.index(schema.label_column)
    feat_cols = [i for i in range(len(header)) if i != li]
    if not feat_cols:
        raise ParseError("no feature columns", offset=1, unit="line")
    rows, labels = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(
                f"expected {len(header)} fields, got {len(row)}", offset=lineno, unit="line"
            )
        try:
            label = int(row[li])
            vals = [float(row[i]) for i in feat_cols]
        except ValueError as exc:
            raise ParseError(f"non-numeric field: {exc}", offset=lineno, unit="line") from None
        if label < 0 or (schema.n_classes is not None and label >= schema.n_classes):
            raise ParseError(f"label {label} out of range", offset=lineno, unit="line")
        v = np.array(vals)
        if not np.all(np.isfinite(v)) or np.any(v < lo) or np.any(v > hi):
            raise ParseError(f"feature outside {schema.value_range}", offset=lineno, unit="line")
        rows.append((v - lo) / (hi - lo))
        labels.append(label)
    if not rows:
        raise ParseError("CSV has no data rows", offset=2, unit="line")
    y = np.array(labels)
    k = schema.n_classes if schema.n_classes is not None else int(y.max()) + 1
    return Dataset(np.stack(rows), y, k, split)


def export_csv(dataset: Dataset, path, feature_prefix: str = "x") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"{feature_prefix}{j}" for j in range(dataset.dim))])
        for label, row in zip(dataset.labels, dataset.features):
            w.writerow([int(label), *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

def dirichlet_partition(dataset, n_clients: int, alpha: float, seed: int) -> Partition:
    """Label-skewed split: for every class, draw client shares from Dirichlet(alpha).

    ``dataset`` may be a :class:`Dataset` or a bare label array.  Clients left
    empty are repaired by moving one sample at a time from the largest client.
    """
    labels = dataset.labels if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.int64)
    n = labels.shape[0]
    if n_clients < 1:
        raise ConfigError("need at least one client", field="K")
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}", field="alpha")
    if n_clients > n:
        raise ConfigError(f"{n_clients} clients but only {n} samples", field="K")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        shares = rng.dirichlet(np.full(n_clients, float(alpha)))
        cuts = (np.cumsum(shares) * len(idx)).astype(np.int64)[:-1]
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())
    sizes = [len(b) for b in buckets]
    while min(sizes) == 0:
        empty = sizes.index(0)
        donor = int(np.argmax(sizes))
        buckets[empty].append(buckets[donor].pop())
        sizes[empty] += 1
        sizes[donor] -= 1
    return Partition([np.array(b, dtype=np.int64) for b in buckets], float(alpha), seed)


def class_entropy(histogram) -> float:
    """Shannon entropy (nats) of a count histogram."""
    h = np.asarray(histogram, dtype=np.float64)
    p = h[h > 0] / h.sum()
    return float(-(p * np.log(p)).sum())


def mean_client_entropy(partition: Partition, labels, n_classes: int) -> float:
    hists = partition.class_histograms(labels, n_classes)
    return float(np.mean([class_entropy(h) for h in hists]))


# ---------------------------------------------------------------------------
# hashing
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _projection(dim: int, seed: int, hash_dim: int) -> np.ndarray:
    p = np.random.default_rng(seed).standard_normal((dim, hash_dim))
    p.setflags(write=False)
    return p


def compute_hashes(features, projection_seed: int, hash_dim: int = DEFAULT_HASH_DIM) -> np.ndarray:
    """Row-wise unit-norm random projections.

    A row that projects to the zero vector hashes to the first unit basis
    vector.
    """
    if hash_dim < 2:
        raise ConfigError(f"hash_dim must be >= 2, got {hash_dim}", field="hash_dim")
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    h = x @ _projection(x.shape[1], projection_seed, hash_dim)
    norms = np.linalg.norm(h, axis=1)
    out = np.zeros_like(h)
    ok = norms > 0
    out[ok] = h[ok] / norms[ok, None]
    out[~ok, 0] = 1.0
    return out


def compute_hash(sample, projection_seed: int, hash_dim: int = DEFAULT_HASH_DIM) -> np.ndarray:
    return compute_hashes(np.asarray(sample, dtype=np.float64)[None, :], projection_seed, hash_dim)[0]
