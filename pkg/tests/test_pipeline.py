"""Tests for the two-stage training loop and its persistence layer."""

import csv
import math

import numpy as np
import pytest

from calr.core import OUTLIER, EmbeddingDataset, RngState, Sample, l2_normalize_rows
from calr.model import EncoderModel, load_checkpoint
from calr.pipeline import (
    STATS_FIELDS,
    EpochStats,
    TrainConfig,
    balanced_batches,
    local_cluster_count,
    run_stage1,
    run_stage2,
    train,
    write_stats_csv,
)
from calr.refine import Schedule
from calr.synthgen import SynthConfig, generate


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        intra_epochs=2,
        inter_epochs=3,
        batch_labels=3,
        batch_instances=2,
        knn_k=8,
        knn_threshold=0.3,
        eval_every=2,
        seed=11,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_dataset() -> EmbeddingDataset:
    cfg = SynthConfig(
        n_identities=8,
        n_cameras=2,
        samples_per_id_per_cam=(2, 3),
        dim=8,
        id_spread=1.0,
        cam_shift=1.0,
        noise=0.05,
        missing_rate=0.0,
        seed=5,
    )
    return generate(cfg)


class TestTrainConfig:
    def test_defaults_are_valid(self):
        cfg = TrainConfig()
        assert cfg.intra_epochs == 20
        assert cfg.inter_epochs == 50
        assert cfg.schedule is Schedule.COSINE

    def test_schedule_accepts_names(self):
        assert TrainConfig(schedule="linear").schedule is Schedule.LINEAR

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"intra_epochs": -1},
            {"batch_labels": 0},
            {"lr": 0.0},
            {"momentum": 1.0},
            {"temperature": 0.0},
            {"knn_threshold": 1.5},
            {"p_start": 0.2, "p_end": 0.5},
            {"beta": -0.1},
            {"encoder_arch": "transformer"},
            {"eval_every": 0},
            {"query_fraction": 1.0},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestLocalClusterCount:
    @pytest.mark.parametrize(
        "n,expected", [(1, 1), (4, 1), (5, 1), (6, 2), (23, 5), (120, 24)]
    )
    def test_one_cluster_per_five(self, n, expected):
        assert local_cluster_count(n) == expected


class TestBalancedBatches:
    def test_shapes_and_membership(self):
        labels = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2, OUTLIER])
        rng = RngState(3).child("batches").generator()
        batches = balanced_batches(labels, [0, 1, 2], rng, n_labels=2, n_instances=3)
        assert len(batches) == math.ceil(9 / 6)
        for batch in batches:
            assert len(batch) == 6
            picked = labels[batch]
            assert OUTLIER not in picked
            # two distinct clusters, three rows each
            values, counts = np.unique(picked, return_counts=True)
            assert len(values) == 2
            assert all(c == 3 for c in counts)

    def test_small_cluster_sampled_with_replacement(self):
        labels = np.array([0, 1, 1, 1])
        rng = RngState(0).child("x").generator()
        batches = balanced_batches(labels, [0, 1], rng, n_labels=2, n_instances=4)
        merged = np.concatenate(batches)
        assert (labels[merged] == 0).sum() >= 4  # row 0 repeats to fill its slots

    def test_deterministic_given_stream(self):
        labels = np.arange(20) % 4
        a = balanced_batches(labels, range(4), RngState(9).child("b").generator(), 2, 2)
        b = balanced_batches(labels, range(4), RngState(9).child("b").generator(), 2, 2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_no_eligible_clusters(self):
        assert balanced_batches(np.array([OUTLIER]), [], None, 2, 2) == []


class TestStage1:
    def test_local_labels_cover_everything(self, tiny_dataset):
        result = run_stage1(tiny_dataset, tiny_config(), EncoderModel.init_linear(tiny_dataset.dim))
        assert result.local_label_of.shape == (tiny_dataset.n_samples,)
        assert not np.any(result.local_label_of == OUTLIER)

    def test_label_ranges_disjoint_across_cameras(self, tiny_dataset):
        result = run_stage1(tiny_dataset, tiny_config(), EncoderModel.init_linear(tiny_dataset.dim))
        seen: set[int] = set()
        for cam in range(tiny_dataset.n_cameras):
            idx = tiny_dataset.camera_indices(cam)
            cam_labels = set(result.local_label_of[idx].tolist())
            assert not (cam_labels & seen)
            seen |= cam_labels

    def test_cluster_count_follows_camera_size(self, tiny_dataset):
        result = run_stage1(tiny_dataset, tiny_config(), EncoderModel.init_linear(tiny_dataset.dim))
        for cam in range(tiny_dataset.n_cameras):
            idx, asg = result.assignments[cam]
            assert asg.n_clusters == local_cluster_count(idx.size)

    def test_stats_one_row_per_camera_epoch(self, tiny_dataset):
        cfg = tiny_config()
        result = run_stage1(tiny_dataset, cfg, EncoderModel.init_linear(tiny_dataset.dim))
        assert len(result.stats) == tiny_dataset.n_cameras * cfg.intra_epochs
        assert all(row.stage == "intra" for row in result.stats)

    def test_cameras_are_isolated(self):
        """Shuffling one camera's rows must not change another camera's result."""
        rng = np.random.default_rng(42)
        cam0 = l2_normalize_rows(
            np.repeat(rng.normal(size=(3, 8)), 4, axis=0) + 0.05 * rng.normal(size=(12, 8))
        )
        cam1 = l2_normalize_rows(
            np.repeat(rng.normal(size=(3, 8)), 4, axis=0) + 0.05 * rng.normal(size=(12, 8))
        )

        def build(cam1_rows):
            feats = np.concatenate([cam0, cam1_rows], axis=0)
            samples = [Sample(i, 0 if i < 12 else 1, i % 3) for i in range(24)]
            return EmbeddingDataset(feats, samples, 2)

        cfg = tiny_config(intra_epochs=2)
        enc = EncoderModel.init_linear(8)
        res_a = run_stage1(build(cam1), cfg, enc)
        res_b = run_stage1(build(cam1[::-1].copy()), cfg, enc)

        for key in res_a.encoders[0].params:
            assert np.array_equal(res_a.encoders[0].params[key], res_b.encoders[0].params[key])
        assert np.array_equal(res_a.assignments[0][1].labels, res_b.assignments[0][1].labels)


class TestStage2:
    def test_raises_when_first_epoch_has_no_edges(self):
        # nearly orthogonal unit vectors: every similarity sits far below the
        # graph threshold, so the first epoch cannot produce a single cluster
        rng = np.random.default_rng(0)
        feats = l2_normalize_rows(rng.normal(size=(30, 64)))
        samples = [Sample(i, i % 2, None) for i in range(30)]
        ds = EmbeddingDataset(feats, samples, 2)
        cfg = tiny_config(inter_epochs=1, knn_threshold=0.5)
        with pytest.raises(ValueError, match="no trainable sample"):
            run_stage2(ds, cfg, EncoderModel.init_linear(64), np.arange(30))

    def test_refinement_discards_show_up(self, tiny_dataset):
        cfg = tiny_config(schedule="none", p_start=1.0, p_end=0.0)
        stage1 = run_stage1(tiny_dataset, cfg, EncoderModel.init_linear(tiny_dataset.dim))
        _, _, stats, refined, _ = run_stage2(
            tiny_dataset, cfg, EncoderModel.init_linear(tiny_dataset.dim), stage1.local_label_of
        )
        assert all(row.p_discard == 1.0 for row in stats)
        assert refined is not None


class TestTrain:
    def test_end_to_end_outputs(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        out = tmp_path / "run"
        result = train(tiny_dataset, cfg, out_dir=out)

        n_rows = tiny_dataset.n_cameras * cfg.intra_epochs + cfg.inter_epochs
        assert len(result.stats) == n_rows
        assert (out / "stats.csv").exists()
        assert (out / "report.json").exists()
        for cam in range(tiny_dataset.n_cameras):
            assert (out / f"local_cam{cam}.csv").exists()

        with open(out / "stats.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == STATS_FIELDS
        assert len(rows) == n_rows + 1

        enc, clf, n_cameras = load_checkpoint(out / "final.ckpt")
        assert n_cameras == tiny_dataset.n_cameras
        assert clf is not None
        y, _ = enc.encode(tiny_dataset.features)
        assert np.allclose(np.linalg.norm(y, axis=1), 1.0)

    def test_eval_cadence(self, tiny_dataset, tmp_path):
        cfg = tiny_config(inter_epochs=5, eval_every=2)
        result = train(tiny_dataset, cfg, out_dir=tmp_path / "run")
        inter = [row for row in result.stats if row.stage == "inter"]
        evaluated = [row.epoch for row in inter if row.mean_ap is not None]
        assert evaluated == [1, 3, 4]
        for epoch in evaluated:
            assert (tmp_path / "run" / "checkpoints" / f"epoch_{epoch:03d}.ckpt").exists()
        assert result.final_retrieval is not None
        assert 0.0 <= result.final_retrieval.mean_ap <= 1.0

    def test_two_runs_byte_identical(self, tiny_dataset, tmp_path):
        cfg = tiny_config()
        train(tiny_dataset, cfg, out_dir=tmp_path / "a")
        train(tiny_dataset, cfg, out_dir=tmp_path / "b")
        for name in ["stats.csv", "final.ckpt", "report.json", "local_cam0.csv"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_refinement_off_leaves_p_blank(self, tiny_dataset):
        result = train(tiny_dataset, tiny_config(use_refinement=False))
        inter = [row for row in result.stats if row.stage == "inter"]
        assert all(row.p_discard is None for row in inter)
        assert all(row.discard_ratio is None for row in inter)

    def test_domain_alignment_off_means_no_classifier(self, tiny_dataset):
        result = train(tiny_dataset, tiny_config(use_domain_alignment=False))
        assert result.classifier is None
        inter = [row for row in result.stats if row.stage == "inter"]
        assert all(row.loss_domain is None for row in inter)

    def test_single_camera_degrades_gracefully(self):
        cfg = SynthConfig(
            n_identities=6,
            n_cameras=1,
            samples_per_id_per_cam=(3, 4),
            dim=8,
            cam_shift=0.0,
            missing_rate=0.0,
            seed=2,
        )
        ds = generate(cfg)
        result = train(ds, tiny_config())
        assert result.classifier is None  # nothing to discriminate
        assert result.final_retrieval is None  # no cross-camera queries exist
        assert result.final_assignment is not None

    def test_mlp_encoder_trains(self, tiny_dataset):
        cfg = tiny_config(encoder_arch="mlp", encoder_hidden=16, inter_epochs=2)
        result = train(tiny_dataset, cfg)
        assert result.encoder.arch == "mlp"


class TestStatsFormatting:
    def test_none_becomes_empty_field(self):
        row = EpochStats(stage="inter", epoch=3, p_discard=0.5, n_clusters=7)
        values = dict(zip(STATS_FIELDS, row.to_row()))
        assert values["camera"] == ""
        assert values["p_discard"] == "0.5"
        assert values["n_clusters"] == "7"
        assert values["mean_ap"] == ""

    def test_float_repr_roundtrips(self):
        row = EpochStats(stage="inter", epoch=0, loss_inter=1 / 3)
        values = dict(zip(STATS_FIELDS, row.to_row()))
        assert float(values["loss_inter"]) == 1 / 3

    def test_write_stats_csv(self, tmp_path):
        rows = [EpochStats(stage="intra", camera=0, epoch=0, n_clusters=2, loss_inter=0.25)]
        path = tmp_path / "stats.csv"
        write_stats_csv(path, rows)
        with open(path, newline="") as fh:
            parsed = list(csv.DictReader(fh))
        assert parsed[0]["loss_inter"] == "0.25"
        assert parsed[0]["stage"] == "intra"
