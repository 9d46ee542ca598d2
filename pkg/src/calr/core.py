"""Shared types: embedding datasets, cluster assignments, rng streams, numeric helpers."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Label value for samples outside every cluster (and for samples a scoped
# assignment does not cover).
OUTLIER = -1

HEADER_FILE = "header.txt"
FEATURES_FILE = "features.bin"
SAMPLES_FILE = "samples.csv"

_NORM_TOL = 1e-6


def _stream_key(*parts) -> int:
    h = 0
    for part in parts:
        h = zlib.crc32(repr(part).encode("utf-8"), h)
    return h


@dataclass(frozen=True)
class RngState:
    """Seed plus stream id; every consumer derives its own named stream.

    Two RngState values with the same (seed, stream) always yield
    byte-identical random sequences, independent of creation order.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError(f"seed must be a 64-bit non-negative integer, got {self.seed}")
        if not (0 <= int(self.stream) < 2**32):
            raise ValueError(f"stream must fit in 32 bits, got {self.stream}")

    def child(self, *keys) -> "RngState":
        """Derive a sub-stream from hashable keys (strings, ints)."""
        return RngState(self.seed, _stream_key(self.stream, *keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.PCG64(seq))


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for a named stream, e.g. named_rng(7, "stage2.epoch3.batches")."""
    return RngState(seed).child(name).generator()


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngState):
        return rng.generator()
    raise TypeError(f"expected Generator or RngState, got {type(rng).__name__}")


def l2_normalize_rows(matrix) -> np.ndarray:
    """Scale each row to unit L2 norm. Rejects zero rows by index."""
    x = np.asarray(matrix, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected a vector or matrix, got ndim={x.ndim}")
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"cannot normalize zero row at index {bad[0]}")
    out = x / norms[:, None]
    return out[0] if single else out


def pairwise_distance(features) -> np.ndarray:
    """Exact-symmetric Euclidean distance matrix.

    The upper triangle is computed once from row differences and mirrored,
    so D[i, j] == D[j, i] holds bitwise and the diagonal is exactly zero.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d feature matrix, got ndim={x.ndim}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows, got {n}")
    d = np.zeros((n, n), dtype=np.float64)
    for i in range(n - 1):
        diff = x[i + 1 :] - x[i]
        d[i, i + 1 :] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return d + d.T


@dataclass(frozen=True)
class Sample:
    """Metadata for one embedding row; gt_id is None when ground truth is unknown."""

    sample_id: int
    camera_id: int
    gt_id: int | None = None


class EmbeddingDataset:
    """L2-normalized feature rows plus per-sample camera / ground-truth metadata."""

    def __init__(self, features, samples, n_cameras: int):
        feats = np.ascontiguousarray(features, dtype=np.float64)
        samples = list(samples)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-d, got ndim={feats.ndim}")
        if len(samples) != feats.shape[0]:
            raise ValueError(f"{len(samples)} samples for {feats.shape[0]} feature rows")
        n_cameras = int(n_cameras)
        if n_cameras < 1:
            raise ValueError(f"n_cameras must be >= 1, got {n_cameras}")
        norms = np.linalg.norm(feats, axis=1)
        off = np.flatnonzero(np.abs(norms - 1.0) > _NORM_TOL)
        if off.size:
            raise ValueError(
                f"row {off[0]} has norm {norms[off[0]]:.8f}, expected unit norm within {_NORM_TOL}"
            )
        ids = [s.sample_id for s in samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample_id values must be unique")
        cams = np.array([s.camera_id for s in samples], dtype=np.int64)
        if len(cams) and (cams.min() < 0 or cams.max() >= n_cameras):
            raise ValueError(f"camera ids must lie in [0, {n_cameras})")
        self.features = feats
        self.samples = samples
        self.n_cameras = n_cameras
        self._camera_ids = cams
        self._gt_ids = np.array(
            [s.gt_id if s.gt_id is not None else OUTLIER for s in samples], dtype=np.int64
        )
        self._has_gt = all(s.gt_id is not None for s in samples)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def camera_ids(self) -> np.ndarray:
        return self._camera_ids

    @property
    def gt_ids(self) -> np.ndarray:
        """Ground-truth ids with OUTLIER placeholders where unknown."""
        return self._gt_ids

    @property
    def has_ground_truth(self) -> bool:
        return self._has_gt

    def camera_indices(self, camera_id: int) -> np.ndarray:
        return np.flatnonzero(self._camera_ids == camera_id)

    def __len__(self) -> int:
        return self.n_samples


def save_dataset(dataset: EmbeddingDataset, directory) -> None:
    """Write header.txt / features.bin / samples.csv into directory.

    features.bin is little-endian float32, row-major. Round-trips bit-exactly
    through load_dataset.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = (
        f"n_samples: {dataset.n_samples}\n"
        f"dim: {dataset.dim}\n"
        f"n_cameras: {dataset.n_cameras}\n"
    )
    (directory / HEADER_FILE).write_text(header, encoding="utf-8")
    blob = np.ascontiguousarray(dataset.features, dtype="<f4")
    (directory / FEATURES_FILE).write_bytes(blob.tobytes())
    with open(directory / SAMPLES_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "camera_id", "gt_id"])
        for s in dataset.samples:
            writer.writerow([s.sample_id, s.camera_id, "" if s.gt_id is None else s.gt_id])


def _parse_header(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"malformed header line {lineno}: {line!r}")
        key, value = line.split(":", 1)
        out[key.strip()] = value.strip()
    return out


def load_dataset(directory) -> EmbeddingDataset:
    """Inverse of save_dataset. Rejects size mismatches between header and blob."""
    directory = Path(directory)
    header = _parse_header((directory / HEADER_FILE).read_text(encoding="utf-8"))
    try:
        n_samples = int(header["n_samples"])
        dim = int(header["dim"])
        n_cameras = int(header["n_cameras"])
    except KeyError as exc:
        raise ValueError(f"header missing key {exc}") from exc
    raw = (directory / FEATURES_FILE).read_bytes()
    expected = n_samples * dim * 4
    if len(raw) != expected:
        raise ValueError(f"features.bin holds {len(raw)} bytes, header implies {expected}")
    feats = np.frombuffer(raw, dtype="<f4").reshape(n_samples, dim).astype(np.float64)
    samples = []
    with open(directory / SAMPLES_FILE, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            gt = row["gt_id"]
            samples.append(
                Sample(
                    sample_id=int(row["sample_id"]),
                    camera_id=int(row["camera_id"]),
                    gt_id=None if gt in ("", None) else int(gt),
                )
            )
    if len(samples) != n_samples:
        raise ValueError(f"samples.csv holds {len(samples)} rows, header says {n_samples}")
    return EmbeddingDataset(feats, samples, n_cameras)


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Length-N label vector; OUTLIER marks uncovered samples.

    camera is None for global assignments, a camera id for per-camera ones.
    Non-outlier labels always form the contiguous range [0, n_clusters).
    """

    labels: np.ndarray
    n_clusters: int
    camera: int | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 1:
            raise ValueError("labels must be a 1-d vector")
        used = np.unique(labels[labels != OUTLIER])
        if (labels < OUTLIER).any():
            raise ValueError("labels may not go below the OUTLIER sentinel")
        if not np.array_equal(used, np.arange(self.n_clusters)):
            raise ValueError(
                f"non-outlier labels {used.tolist()} do not form the range [0, {self.n_clusters})"
            )

    @classmethod
    def from_labels(cls, raw_labels, camera: int | None = None) -> "ClusterAssignment":
        """Relabel arbitrary non-outlier ids to 0..K-1 by first appearance."""
        raw = np.asarray(raw_labels, dtype=np.int64)
        labels = np.full(raw.shape, OUTLIER, dtype=np.int64)
        remap: dict[int, int] = {}
        for i, value in enumerate(raw):
            if value == OUTLIER:
                continue
            value = int(value)
            if value not in remap:
                remap[value] = len(remap)
            labels[i] = remap[value]
        return cls(labels, len(remap), camera)

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def non_outlier_mask(self) -> np.ndarray:
        return self.labels != OUTLIER

    @property
    def n_outliers(self) -> int:
        return int((self.labels == OUTLIER).sum())

    def members(self, cluster_id: int) -> np.ndarray:
        if not (0 <= cluster_id < self.n_clusters):
            raise ValueError(f"cluster id {cluster_id} out of range [0, {self.n_clusters})")
        return np.flatnonzero(self.labels == cluster_id)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.labels[self.non_outlier_mask], minlength=self.n_clusters)
