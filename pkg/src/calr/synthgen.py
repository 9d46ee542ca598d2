"""Synthetic camera-aware embedding datasets with a planted identity structure.

Each sample is x = l2_normalize(id_spread * u_id + cam_shift * v_cam + eps),
where u_id / v_cam are fixed unit directions per identity / camera and eps is
isotropic Gaussian noise. A cam_shift well above id_spread reproduces the
camera-dominated neighborhoods that make cross-camera re-id hard.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmbeddingDataset, RngState, Sample, as_generator, l2_normalize_rows


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 50
    n_cameras: int = 6
    samples_per_id_per_cam: tuple[int, int] = (4, 8)
    dim: int = 32
    id_spread: float = 1.0
    cam_shift: float = 3.0
    noise: float = 0.1
    missing_rate: float = 0.2
    seed: int = 7

    def __post_init__(self):
        lo, hi = self.samples_per_id_per_cam
        if self.n_identities < 2:
            raise ValueError(f"n_identities must be >= 2, got {self.n_identities}")
        if self.n_cameras < 1:
            raise ValueError(f"n_cameras must be >= 1, got {self.n_cameras}")
        if not (1 <= lo <= hi):
            raise ValueError(f"samples_per_id_per_cam must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        for name in ("id_spread", "cam_shift", "noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.missing_rate < 1.0):
            raise ValueError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")


def standard_benchmark_config(seed: int = 7) -> SynthConfig:
    """The fixed desk-scale benchmark: 50 ids, 6 cameras, strong camera shift."""
    return SynthConfig(
        n_identities=50,
        n_cameras=6,
        samples_per_id_per_cam=(4, 8),
        dim=32,
        id_spread=1.0,
        cam_shift=3.0,
        noise=0.1,
        missing_rate=0.2,
        seed=seed,
    )


def _unit_directions(rng, n, dim):
    return l2_normalize_rows(rng.normal(size=(n, dim)))


def generate(config: SynthConfig) -> EmbeddingDataset:
    """Generate a dataset; byte-identical for identical configs.

    Rejects draws that leave a camera empty or yield fewer than 2 samples.
    """
    root = RngState(config.seed)
    rng_centers = root.child("synth.centers").generator()
    rng_offsets = root.child("synth.offsets").generator()
    rng_struct = root.child("synth.structure").generator()
    rng_noise = root.child("synth.noise").generator()

    centers = config.id_spread * _unit_directions(rng_centers, config.n_identities, config.dim)
    offsets = config.cam_shift * _unit_directions(rng_offsets, config.n_cameras, config.dim)

    lo, hi = config.samples_per_id_per_cam
    rows = []
    meta = []
    for gid in range(config.n_identities):
        for cam in range(config.n_cameras):
            # structural draws happen in a fixed order so layouts reproduce
            missing = rng_struct.random() < config.missing_rate
            count = int(rng_struct.integers(lo, hi + 1))
            if missing:
                continue
            base = centers[gid] + offsets[cam]
            noise = config.noise * rng_noise.normal(size=(count, config.dim))
            rows.append(base[None, :] + noise)
            meta.extend((cam, gid) for _ in range(count))

    if not rows:
        raise ValueError("configuration produced an empty dataset")
    feats = np.concatenate(rows, axis=0)
    cams = np.array([m[0] for m in meta])
    if feats.shape[0] < 2:
        raise ValueError("configuration produced fewer than 2 samples")
    present = set(cams.tolist())
    for cam in range(config.n_cameras):
        if cam not in present:
            raise ValueError(f"configuration produced an empty camera {cam}; rejecting draw")

    feats = l2_normalize_rows(feats)
    samples = [Sample(i, int(cam), int(gid)) for i, (cam, gid) in enumerate(meta)]
    return EmbeddingDataset(feats, samples, config.n_cameras)


def split_query_gallery(dataset: EmbeddingDataset, rng, query_fraction: float = 0.2):
    """Disjoint (query, gallery) index arrays with cross-camera answerability.

    Per identity, the camera holding the most samples anchors the gallery;
    queries are drawn from the remaining cameras, so every query keeps at
    least one gallery sample of its identity in another camera. Identities
    seen by a single camera go entirely to the gallery.
    """
    if not dataset.has_ground_truth:
        raise ValueError("query/gallery split needs ground-truth ids for every sample")
    if not (0.0 < query_fraction < 1.0):
        raise ValueError(f"query_fraction must lie in (0, 1), got {query_fraction}")
    rng = as_generator(rng)
    gt = dataset.gt_ids
    cams = dataset.camera_ids

    query: list[int] = []
    eligible = 0
    for gid in np.unique(gt):
        idx = np.flatnonzero(gt == gid)
        id_cams = cams[idx]
        if len(set(id_cams.tolist())) < 2:
            continue
        eligible += 1
        # anchor camera: most samples, ties to the smallest camera id
        counts = {}
        for c in id_cams.tolist():
            counts[c] = counts.get(c, 0) + 1
        anchor = min(counts, key=lambda c: (-counts[c], c))
        candidates = idx[id_cams != anchor]
        want = int(round(query_fraction * len(idx)))
        want = max(1, min(want, len(candidates)))
        chosen = rng.choice(np.sort(candidates), size=want, replace=False)
        query.extend(int(i) for i in chosen)

    if eligible == 0:
        raise ValueError("no identity appears in two cameras; retrieval split impossible")
    query_idx = np.array(sorted(query), dtype=np.int64)
    mask = np.ones(dataset.n_samples, dtype=bool)
    mask[query_idx] = False
    gallery_idx = np.flatnonzero(mask)
    return query_idx, gallery_idx
