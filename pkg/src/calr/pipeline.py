"""Two-stage training: per-camera contrastive pretraining on agglomerative
pseudo labels, then global Infomap clustering with pivot refinement, memory
contrastive learning, and optional camera-domain alignment.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import OUTLIER, ClusterAssignment, EmbeddingDataset, RngState
from .evaluation import ClusterQuality, RetrievalResult, cluster_quality, retrieval_eval
from .graphcluster import agglomerative_cluster, build_knn_graph, infomap_cluster
from .model import (
    AdamW,
    DomainClassifier,
    EncoderModel,
    MemoryBank,
    contrastive_loss_batch,
    domain_loss,
    save_checkpoint,
    total_loss,
)
from .refine import Schedule, decay_probability, refine_assignment
from .synthgen import split_query_gallery

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    intra_epochs: int = 20
    inter_epochs: int = 50
    batch_labels: int = 4  # P distinct clusters per batch
    batch_instances: int = 4  # K samples per cluster
    lr: float = 3.5e-4
    weight_decay: float = 5e-4
    momentum: float = 0.2
    temperature: float = 0.1
    knn_k: int = 15
    knn_mutual: bool = True
    knn_threshold: float = 0.5
    schedule: Schedule = Schedule.COSINE
    p_start: float = 1.0
    p_end: float = 0.0
    beta: float = 1.0
    grl_lambda: float = 1.0
    use_refinement: bool = True
    use_domain_alignment: bool = True
    encoder_arch: str = "linear"
    encoder_hidden: int = 64
    encoder_out_dim: int = 0  # 0 means: keep the input dimension
    eval_every: int = 5
    query_fraction: float = 0.2
    seed: int = 7

    def __post_init__(self):
        if self.intra_epochs < 0 or self.inter_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_labels < 1 or self.batch_instances < 1:
            raise ValueError("batch shape must be at least 1x1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("need lr > 0 and weight_decay >= 0")
        if not (0 <= self.momentum < 1):
            raise ValueError("momentum must lie in [0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if not (-1.0 <= self.knn_threshold <= 1.0):
            raise ValueError("knn_threshold must lie in [-1, 1]")
        if not (0 <= self.p_end <= self.p_start <= 1):
            raise ValueError("need 0 <= p_end <= p_start <= 1")
        if self.beta < 0 or self.grl_lambda < 0:
            raise ValueError("beta and grl_lambda must be >= 0")
        if self.encoder_arch not in ("linear", "mlp"):
            raise ValueError(f"unknown encoder_arch {self.encoder_arch!r}")
        if self.encoder_arch == "mlp" and self.encoder_hidden < 1:
            raise ValueError("mlp encoder needs encoder_hidden >= 1")
        if self.encoder_out_dim < 0:
            raise ValueError("encoder_out_dim must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not (0 < self.query_fraction < 1):
            raise ValueError("query_fraction must lie in (0, 1)")
        if isinstance(self.schedule, str):
            object.__setattr__(self, "schedule", Schedule.from_name(self.schedule))


STATS_FIELDS = [
    "stage",
    "camera",
    "epoch",
    "p_discard",
    "n_clusters",
    "n_outliers",
    "discard_ratio",
    "loss_inter",
    "loss_domain",
    "loss_total",
    "pair_precision",
    "pair_recall",
    "f_score",
    "expansion",
    "mean_ap",
    "rank1",
]


@dataclass
class EpochStats:
    stage: str
    epoch: int
    camera: int | None = None
    p_discard: float | None = None
    n_clusters: int = 0
    n_outliers: int = 0
    discard_ratio: float | None = None
    loss_inter: float | None = None
    loss_domain: float | None = None
    loss_total: float | None = None
    pair_precision: float | None = None
    pair_recall: float | None = None
    f_score: float | None = None
    expansion: float | None = None
    mean_ap: float | None = None
    rank1: float | None = None

    def to_row(self) -> list[str]:
        def fmt(value):
            if value is None:
                return ""
            if isinstance(value, float):
                return repr(value)
            return str(value)

        return [fmt(getattr(self, name)) for name in STATS_FIELDS]


def local_cluster_count(n_samples: int) -> int:
    """Per-camera target cluster count: one cluster per five images."""
    return max(1, math.ceil(n_samples / 5))


def balanced_batches(labels, cluster_ids, rng, n_labels: int, n_instances: int):
    """P x K batches: P clusters without replacement, K members each (with
    replacement only when a cluster is smaller than K). Outliers never appear.
    """
    cluster_ids = np.asarray(sorted(int(c) for c in cluster_ids), dtype=np.int64)
    if cluster_ids.size == 0:
        return []
    members = {int(c): np.flatnonzero(labels == c) for c in cluster_ids}
    n_trainable = int(sum(len(m) for m in members.values()))
    p_eff = min(n_labels, len(cluster_ids))
    per_batch = p_eff * n_instances
    n_batches = max(1, math.ceil(n_trainable / per_batch))
    batches = []
    for _ in range(n_batches):
        chosen = rng.choice(cluster_ids, size=p_eff, replace=False)
        rows = []
        for c in chosen:
            mem = members[int(c)]
            take = rng.choice(mem, size=n_instances, replace=len(mem) < n_instances)
            rows.extend(int(i) for i in take)
        batches.append(np.array(rows, dtype=np.int64))
    return batches


@dataclass(eq=False)
class Stage1Result:
    encoders: dict[int, EncoderModel]
    assignments: dict[int, tuple[np.ndarray, ClusterAssignment]]  # camera -> (row idx, labels)
    local_label_of: np.ndarray  # globally unique local cluster id per sample
    stats: list[EpochStats] = field(default_factory=list)


def _quality_on_retained(assignment: ClusterAssignment, gt_ids) -> ClusterQuality | None:
    kept = assignment.non_outlier_mask
    if not kept.any():
        return None
    return cluster_quality(assignment.labels[kept], np.asarray(gt_ids)[kept])


def run_stage1(dataset: EmbeddingDataset, config: TrainConfig, init_encoder: EncoderModel) -> Stage1Result:
    """Train one encoder per camera on its own agglomerative pseudo labels.

    Cameras are fully isolated: each derives rng streams from its own id and
    touches only its own rows, so permuting other cameras changes nothing.
    """
    base = RngState(config.seed)
    encoders: dict[int, EncoderModel] = {}
    assignments: dict[int, tuple[np.ndarray, ClusterAssignment]] = {}
    stats: list[EpochStats] = []
    has_gt = dataset.has_ground_truth

    for cam in range(dataset.n_cameras):
        idx = dataset.camera_indices(cam)
        if idx.size == 0:
            raise ValueError(f"camera {cam} holds no samples")
        x = dataset.features[idx]
        k_c = local_cluster_count(idx.size)
        enc = init_encoder.clone()
        opt = AdamW(enc.params, lr=config.lr, weight_decay=config.weight_decay)

        for epoch in range(config.intra_epochs):
            y, _ = enc.encode(x)
            asg = agglomerative_cluster(y, k_c, camera=cam)
            bank = MemoryBank.from_assignment(asg, y, config.momentum, config.temperature)
            mean_loss = 0.0
            if bank.size >= 2:
                rng = base.child("stage1", cam, "epoch", epoch).generator()
                batches = balanced_batches(
                    asg.labels, bank.cluster_ids, rng, config.batch_labels, config.batch_instances
                )
                losses = []
                for batch in batches:
                    yb, cache = enc.encode(x[batch])
                    loss, d_yb = contrastive_loss_batch(bank, yb, asg.labels[batch])
                    grads = enc.backward(cache, d_yb)
                    opt.step(enc.params, grads)
                    for row, emb in zip(batch, yb):
                        bank.update(int(asg.labels[row]), emb)
                    losses.append(loss)
                mean_loss = float(np.mean(losses)) if losses else 0.0
            quality = _quality_on_retained(asg, dataset.gt_ids[idx]) if has_gt else None
            stats.append(
                EpochStats(
                    stage="intra",
                    camera=cam,
                    epoch=epoch,
                    n_clusters=asg.n_clusters,
                    n_outliers=asg.n_outliers,
                    loss_inter=mean_loss,
                    loss_total=mean_loss,
                    pair_precision=quality.pair_precision if quality else None,
                    pair_recall=quality.pair_recall if quality else None,
                    f_score=quality.f_score if quality else None,
                    expansion=quality.expansion if quality else None,
                )
            )

        # labels that stage 2 refines against come from the trained encoder
        y, _ = enc.encode(x)
        final_asg = agglomerative_cluster(y, k_c, camera=cam)
        encoders[cam] = enc
        assignments[cam] = (idx, final_asg)

    local_label_of = np.full(dataset.n_samples, OUTLIER, dtype=np.int64)
    offset = 0
    for cam in range(dataset.n_cameras):
        idx, asg = assignments[cam]
        local_label_of[idx] = asg.labels + offset
        offset += asg.n_clusters
    return Stage1Result(encoders, assignments, local_label_of, stats)


@dataclass(eq=False)
class TrainResult:
    encoder: EncoderModel
    classifier: DomainClassifier | None
    stats: list[EpochStats]
    stage1: Stage1Result
    final_assignment: ClusterAssignment | None
    final_retrieval: RetrievalResult | None
    final_quality: ClusterQuality | None


def run_stage2(
    dataset: EmbeddingDataset,
    config: TrainConfig,
    init_encoder: EncoderModel,
    local_label_of,
    split=None,
    out_dir: Path | None = None,
):
    """Global loop: cluster, refine, rebuild memory, train with Eq. 9."""
    base = RngState(config.seed)
    x = dataset.features
    cams = dataset.camera_ids
    n = dataset.n_samples
    has_gt = dataset.has_ground_truth

    enc = init_encoder.clone()
    use_domain = config.use_domain_alignment and config.beta > 0
    if use_domain and dataset.n_cameras < 2:
        logger.warning("domain alignment disabled: dataset has a single camera")
        use_domain = False
    clf = DomainClassifier.init(enc.dim_out, dataset.n_cameras) if use_domain else None

    params = {f"enc.{k}": v for k, v in enc.params.items()}
    if clf is not None:
        params.update({f"clf.{k}": v for k, v in clf.params.items()})
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    stats: list[EpochStats] = []
    refined: ClusterAssignment | None = None
    prev_refined: ClusterAssignment | None = None
    final_retrieval: RetrievalResult | None = None
    total_epochs = config.inter_epochs
    decay_total = max(total_epochs - 1, 0)

    for epoch in range(total_epochs):
        y, _ = enc.encode(x)
        k_eff = min(config.knn_k, n - 1)
        graph = build_knn_graph(y, k_eff, config.knn_mutual, config.knn_threshold)
        assignment = infomap_cluster(graph, base.child("stage2", epoch, "cluster"))

        p_discard = None
        discard_ratio = None
        if config.use_refinement:
            p_discard = decay_probability(
                config.schedule, epoch, decay_total, config.p_start, config.p_end
            )
            refined, plan = refine_assignment(
                assignment, y, cams, local_label_of, p_discard, base.child("stage2", epoch, "refine")
            )
            discard_ratio = plan.discard_ratio
        else:
            refined = assignment

        if not refined.non_outlier_mask.any():
            logger.warning(
                "epoch %d: refinement discarded every sample; reusing previous labels", epoch
            )
            if prev_refined is None:
                raise ValueError("no trainable sample survived the first epoch")
            refined = prev_refined
        prev_refined = refined

        bank = MemoryBank.from_assignment(refined, y, config.momentum, config.temperature)
        if bank.size != refined.n_clusters:
            logger.warning(
                "epoch %d: memory bank holds %d of %d clusters (degenerate means dropped)",
                epoch,
                bank.size,
                refined.n_clusters,
            )

        mean_inter = 0.0
        mean_domain = 0.0 if use_domain else None
        if bank.size >= 2:
            rng = base.child("stage2", epoch, "batches").generator()
            batches = balanced_batches(
                refined.labels, bank.cluster_ids, rng, config.batch_labels, config.batch_instances
            )
            inter_losses, domain_losses = [], []
            for batch in batches:
                yb, cache = enc.encode(x[batch])
                loss_c, d_yb = contrastive_loss_batch(bank, yb, refined.labels[batch])
                grads = {}
                loss_d = 0.0
                if clf is not None:
                    b = len(batch)
                    loss_sum, clf_grads, d_emb_rev = domain_loss(
                        clf, yb, cams[batch], lam=config.grl_lambda
                    )
                    loss_d = loss_sum / b
                    d_yb = d_yb + (config.beta / b) * d_emb_rev
                    grads.update({f"clf.{k}": config.beta / b * v for k, v in clf_grads.items()})
                total_loss(loss_c, loss_d, config.beta)  # NaN guard
                enc_grads = enc.backward(cache, d_yb)
                grads.update({f"enc.{k}": v for k, v in enc_grads.items()})
                opt.step(params, grads)
                for row, emb in zip(batch, yb):
                    bank.update(int(refined.labels[row]), emb)
                inter_losses.append(loss_c)
                domain_losses.append(loss_d)
            mean_inter = float(np.mean(inter_losses)) if inter_losses else 0.0
            if use_domain:
                mean_domain = float(np.mean(domain_losses)) if domain_losses else 0.0

        quality = _quality_on_retained(refined, dataset.gt_ids) if has_gt else None
        row = EpochStats(
            stage="inter",
            epoch=epoch,
            p_discard=p_discard,
            n_clusters=refined.n_clusters,
            n_outliers=refined.n_outliers,
            discard_ratio=discard_ratio,
            loss_inter=mean_inter,
            loss_domain=mean_domain,
            loss_total=mean_inter + config.beta * mean_domain if mean_domain is not None else mean_inter,
            pair_precision=quality.pair_precision if quality else None,
            pair_recall=quality.pair_recall if quality else None,
            f_score=quality.f_score if quality else None,
            expansion=quality.expansion if quality else None,
        )
        scheduled = (epoch + 1) % config.eval_every == 0 or epoch == total_epochs - 1
        if split is not None and scheduled:
            result = retrieval_eval(enc, dataset, split[0], split[1])
            row.mean_ap = result.mean_ap
            row.rank1 = result.rank(1)
            final_retrieval = result
            if out_dir is not None:
                save_checkpoint(
                    out_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt",
                    enc,
                    clf,
                    dataset.n_cameras,
                )
        stats.append(row)

    return enc, clf, stats, refined, final_retrieval


def write_stats_csv(path, stats: list[EpochStats]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_FIELDS)
        for row in stats:
            writer.writerow(row.to_row())


def train(dataset: EmbeddingDataset, config: TrainConfig, out_dir=None) -> TrainResult:
    """Run both stages; optionally persist labels, stats, checkpoints, report."""
    out_dir = Path(out_dir) if out_dir is not None else None
    if config.encoder_arch == "linear":
        init_enc = EncoderModel.init_linear(
            dataset.dim, config.encoder_out_dim or None
        )
    else:
        init_enc = EncoderModel.init_mlp(
            dataset.dim,
            config.encoder_hidden,
            config.encoder_out_dim or dataset.dim,
            RngState(config.seed).child("init.encoder"),
        )

    stage1 = run_stage1(dataset, config, init_enc)

    split = None
    if dataset.has_ground_truth and dataset.n_cameras >= 2:
        try:
            split = split_query_gallery(
                dataset, RngState(config.seed).child("split"), config.query_fraction
            )
        except ValueError as exc:
            logger.warning("retrieval evaluation disabled: %s", exc)

    # stage 2 starts from the same shared initialization, not any camera encoder
    enc, clf, stats2, final_asg, final_retrieval = run_stage2(
        dataset, config, init_enc, stage1.local_label_of, split=split, out_dir=out_dir
    )

    stats = stage1.stats + stats2
    final_quality = None
    if final_asg is not None and dataset.has_ground_truth:
        final_quality = _quality_on_retained(final_asg, dataset.gt_ids)

    result = TrainResult(enc, clf, stats, stage1, final_asg, final_retrieval, final_quality)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_stats_csv(out_dir / "stats.csv", stats)
        for cam, (idx, asg) in stage1.assignments.items():
            with open(out_dir / f"local_cam{cam}.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["sample_id", "cluster_id"])
                for row_idx, label in zip(idx, asg.labels):
                    writer.writerow([dataset.samples[int(row_idx)].sample_id, int(label)])
        save_checkpoint(out_dir / "final.ckpt", enc, clf, dataset.n_cameras)
        report = {
            "epochs_intra": config.intra_epochs,
            "epochs_inter": config.inter_epochs,
            "n_samples": dataset.n_samples,
            "n_cameras": dataset.n_cameras,
            "final": {
                "mean_ap": final_retrieval.mean_ap if final_retrieval else None,
                "rank1": final_retrieval.rank(1) if final_retrieval else None,
                "quality": final_quality.as_dict() if final_quality else None,
                "n_clusters": final_asg.n_clusters if final_asg else None,
            },
        }
        (out_dir / "report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return result
