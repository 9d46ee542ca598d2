"""Command line entry points: synth, cluster, refine, train, eval, sweep, report.

Every command that writes a run directory leaves exactly one manifest.json
there recording the command, arguments, resolved configuration, effective
seed, sha256 hashes of its inputs, output files, tool version and duration.
Only the manifest carries timing; every other output is deterministic.

Heavy imports happen inside the handlers so --threads can cap the BLAS pool
before the numeric stack loads.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import __version__

_SEED_ENV = "CALR_SEED"


# ---------------------------------------------------------------------------
# shared plumbing


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_inputs(paths) -> dict[str, str]:
    hashes: dict[str, str] = {}
    for item in paths:
        p = Path(item)
        if p.is_dir():
            for child in sorted(p.iterdir()):
                if child.is_file():
                    hashes[str(child)] = _sha256(child)
        elif p.is_file():
            hashes[str(p)] = _sha256(p)
    return hashes


def write_manifest(out_dir, *, command, argv, config, seed, inputs, started) -> None:
    out_dir = Path(out_dir)
    outputs = sorted(
        str(p.relative_to(out_dir))
        for p in out_dir.rglob("*")
        if p.is_file() and p.name != "manifest.json"
    )
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "effective_seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "duration_seconds": round(time.monotonic() - started, 3),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _resolved_config(args) -> dict:
    from .config import apply_overrides, default_config, load_config

    values = load_config(args.config) if getattr(args, "config", None) else default_config()
    return apply_overrides(values, getattr(args, "override", None))


def _apply_seed_env(values: dict, key: str) -> dict:
    """CALR_SEED, when set, overrides the configured seed for this run."""
    from .config import ConfigError

    raw = os.environ.get(_SEED_ENV)
    if raw is None:
        return values
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{_SEED_ENV} must be an integer, got {raw!r}") from None
    values = dict(values)
    values[key] = seed
    return values


def _print_json(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _load_labels_csv(path: Path, id_column: str = "sample_id", value_column: str = "cluster_id"):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or id_column not in reader.fieldnames:
                raise ValueError(f"{path}: expected columns {id_column},{value_column}")
            mapping = {}
            for row in reader:
                sid = int(row[id_column])
                if sid in mapping:
                    raise ValueError(f"{path}: duplicate {id_column} {sid}")
                mapping[sid] = int(row[value_column])
    except OSError as exc:
        raise ValueError(f"cannot read {path}: {exc}") from None
    return mapping


def _labels_for_dataset(dataset, mapping, source: str):
    import numpy as np

    labels = np.empty(dataset.n_samples, dtype=np.int64)
    for row, sample in enumerate(dataset.samples):
        if sample.sample_id not in mapping:
            raise ValueError(f"{source}: no cluster for sample {sample.sample_id}")
        labels[row] = mapping[sample.sample_id]
    return labels


def _local_labels_from_dir(dataset, local_dir: Path):
    """Assemble per-camera label files into one globally unique label vector."""
    import numpy as np

    local = np.empty(dataset.n_samples, dtype=np.int64)
    offset = 0
    for cam in range(dataset.n_cameras):
        path = local_dir / f"local_cam{cam}.csv"
        if not path.exists():
            raise ValueError(f"missing per-camera label file {path}")
        mapping = _load_labels_csv(path)
        idx = dataset.camera_indices(cam)
        largest = -1
        for row in idx:
            sid = dataset.samples[int(row)].sample_id
            if sid not in mapping:
                raise ValueError(f"{path}: no label for sample {sid}")
            value = mapping[sid]
            if value < 0:
                raise ValueError(f"{path}: negative local label for sample {sid}")
            local[row] = value + offset
            largest = max(largest, value)
        offset += largest + 1
    return local


def _write_labels_csv(path: Path, pairs) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "cluster_id"])
        for sid, label in pairs:
            writer.writerow([int(sid), int(label)])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .config import synth_config_from
    from .core import save_dataset
    from .synthgen import generate

    started = time.monotonic()
    values = _apply_seed_env(_resolved_config(args), "synth.seed")
    config = synth_config_from(values)
    dataset = generate(config)
    out = Path(args.out)
    save_dataset(dataset, out)
    write_manifest(
        out,
        command="synth",
        argv=args.raw_argv,
        config=values,
        seed=config.seed,
        inputs=_hash_inputs([args.config] if args.config else []),
        started=started,
    )
    _print_json(
        {
            "out": str(out),
            "n_samples": dataset.n_samples,
            "n_cameras": dataset.n_cameras,
            "dim": dataset.dim,
        }
    )
    return 0


def cmd_cluster(args) -> int:
    from .core import RngState, load_dataset
    from .graphcluster import (
        agglomerative_cluster,
        assignment_from_partition,
        build_knn_graph,
        infomap_cluster,
        infomap_partition,
    )
    from .pipeline import local_cluster_count

    started = time.monotonic()
    values = _apply_seed_env(_resolved_config(args), "train.seed")
    seed = values["train.seed"]
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.mode == "global":
        graph = build_knn_graph(
            dataset.features,
            min(values["graph.k"], dataset.n_samples - 1),
            values["graph.mutual"],
            values["graph.threshold"],
        )
        if dataset.n_samples == 1:
            assignment = infomap_cluster(graph, RngState(seed).child("cluster"))
            codelength = None
        else:
            partition = infomap_partition(graph, RngState(seed).child("cluster"))
            assignment = assignment_from_partition(graph, partition)
            codelength = partition.codelength
        _write_labels_csv(
            out / "clusters.csv",
            ((s.sample_id, assignment.labels[i]) for i, s in enumerate(dataset.samples)),
        )
        summary = {
            "mode": "global",
            "n_clusters": assignment.n_clusters,
            "n_outliers": assignment.n_outliers,
            "codelength_bits": codelength,
        }
    else:
        per_camera = {}
        for cam in range(dataset.n_cameras):
            idx = dataset.camera_indices(cam)
            asg = agglomerative_cluster(
                dataset.features[idx], local_cluster_count(idx.size), camera=cam
            )
            _write_labels_csv(
                out / f"local_cam{cam}.csv",
                ((dataset.samples[int(r)].sample_id, asg.labels[j]) for j, r in enumerate(idx)),
            )
            per_camera[str(cam)] = {"n_samples": int(idx.size), "n_clusters": asg.n_clusters}
        summary = {"mode": "local", "cameras": per_camera}

    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_manifest(
        out,
        command="cluster",
        argv=args.raw_argv,
        config=values,
        seed=seed,
        inputs=_hash_inputs([args.data] + ([args.config] if args.config else [])),
        started=started,
    )
    _print_json(summary)
    return 0


def cmd_refine(args) -> int:
    import numpy as np

    from .core import ClusterAssignment, RngState, load_dataset
    from .refine import refine_assignment

    started = time.monotonic()
    values = _apply_seed_env(_resolved_config(args), "train.seed")
    seed = values["train.seed"]
    p = args.p if args.p is not None else values["refine.p_start"]
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"discard probability must lie in [0, 1], got {p}")

    dataset = load_dataset(args.data)
    global_labels = _labels_for_dataset(
        dataset, _load_labels_csv(Path(args.clusters)), args.clusters
    )
    assignment = ClusterAssignment.from_labels(global_labels)
    local_label_of = _local_labels_from_dir(dataset, Path(args.local_dir))

    refined, plan = refine_assignment(
        assignment,
        dataset.features,
        dataset.camera_ids,
        local_label_of,
        p,
        RngState(seed).child("refine"),
    )

    out = Path(args.out)
    _write_labels_csv(
        out / "refined.csv",
        ((s.sample_id, refined.labels[i]) for i, s in enumerate(dataset.samples)),
    )

    considered_by_cam = {}
    kept_mask = assignment.non_outlier_mask
    for cam in range(dataset.n_cameras):
        considered_by_cam[cam] = int(np.sum(kept_mask & (dataset.camera_ids == cam)))
    pivots_by_cam = {cam: 0 for cam in range(dataset.n_cameras)}
    for pivots in plan.pivots_by_cluster.values():
        for pv in pivots:
            if pv.is_pivot:
                pivots_by_cam[int(dataset.camera_ids[pv.sample_id])] += 1

    per_camera = {}
    for cam in range(dataset.n_cameras):
        discarded = plan.discarded_by_camera.get(cam, 0)
        considered = considered_by_cam[cam]
        per_camera[str(cam)] = {
            "considered": considered,
            "discarded": discarded,
            "discard_ratio": discarded / considered if considered else None,
            "pivots": pivots_by_cam[cam],
        }
    summary = {
        "p": plan.p,
        "n_considered": plan.n_considered,
        "n_discarded": int(len(plan.discarded)),
        "discard_ratio": plan.discard_ratio,
        "n_pivots": plan.n_pivots,
        "n_clusters": refined.n_clusters,
        "n_outliers": refined.n_outliers,
        "per_camera": per_camera,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_manifest(
        out,
        command="refine",
        argv=args.raw_argv,
        config=values,
        seed=seed,
        inputs=_hash_inputs(
            [args.data, args.clusters, args.local_dir]
            + ([args.config] if args.config else [])
        ),
        started=started,
    )
    _print_json(summary)
    return 0


def _train_once(dataset, values, out_dir: Path, argv, command: str, input_paths, started=None):
    """Train into out_dir and leave a manifest; returns the final report dict."""
    from .config import train_config_from
    from .pipeline import train

    if started is None:
        started = time.monotonic()
    config = train_config_from(values)
    train(dataset, config, out_dir=out_dir)
    write_manifest(
        out_dir,
        command=command,
        argv=argv,
        config=values,
        seed=config.seed,
        inputs=_hash_inputs(input_paths),
        started=started,
    )
    report = json.loads((out_dir / "report.json").read_text(encoding="utf-8"))
    return report


def cmd_train(args) -> int:
    from .core import load_dataset

    started = time.monotonic()
    values = _apply_seed_env(_resolved_config(args), "train.seed")
    dataset = load_dataset(args.data)
    inputs = [args.data] + ([args.config] if args.config else [])
    report = _train_once(
        dataset, values, Path(args.out), args.raw_argv, "train", inputs, started=started
    )
    _print_json({"out": str(args.out), "final": report["final"]})
    return 0


def cmd_eval(args) -> int:
    from .core import RngState, load_dataset
    from .evaluation import cluster_quality, retrieval_eval
    from .graphcluster import build_knn_graph, infomap_cluster
    from .model import load_checkpoint
    from .synthgen import split_query_gallery

    started = time.monotonic()
    values = _apply_seed_env(_resolved_config(args), "train.seed")
    seed = values["train.seed"]
    dataset = load_dataset(args.data)
    if not dataset.has_ground_truth:
        raise ValueError("evaluation needs a ground-truth id for every sample")
    encoder, _, _ = load_checkpoint(args.ckpt)
    if encoder.dim_in != dataset.dim:
        raise ValueError(
            f"checkpoint expects {encoder.dim_in}-d features, dataset has {dataset.dim}"
        )

    query_idx, gallery_idx = split_query_gallery(
        dataset, RngState(seed).child("split"), values["train.query_fraction"]
    )
    retrieval = retrieval_eval(
        encoder, dataset, query_idx, gallery_idx, max_rank=values["eval.max_rank"]
    )

    embedded, _ = encoder.encode(dataset.features)
    graph = build_knn_graph(
        embedded,
        min(values["graph.k"], dataset.n_samples - 1),
        values["graph.mutual"],
        values["graph.threshold"],
    )
    assignment = infomap_cluster(graph, RngState(seed).child("eval.cluster"))
    quality = cluster_quality(assignment.labels, dataset.gt_ids)

    payload = {
        "retrieval": retrieval.as_dict(),
        "quality": quality.as_dict(),
        "n_clusters": assignment.n_clusters,
        "n_outliers": assignment.n_outliers,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        write_manifest(
            out,
            command="eval",
            argv=args.raw_argv,
            config=values,
            seed=seed,
            inputs=_hash_inputs(
                [args.data, args.ckpt] + ([args.config] if args.config else [])
            ),
            started=started,
        )
    _print_json(payload)
    return 0


_SWEEP_AXES = ("schedule", "beta", "ablation")
_BETA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.5)
_ABLATION_GRID = (
    ("baseline", False, False),
    ("ca", False, True),
    ("lr", True, False),
    ("full", True, True),
)


def _sweep_points(axis: str):
    """Yield (name, config delta) pairs for one sweep axis."""
    if axis == "schedule":
        for name in ("none", "linear", "polynomial", "exponential", "cosine"):
            yield f"schedule_{name}", {"refine.schedule": name}
    elif axis == "beta":
        for beta in _BETA_GRID:
            yield f"beta_{beta:g}", {"domain.beta": beta, "train.use_domain_alignment": True}
    else:
        for name, use_refine, use_domain in _ABLATION_GRID:
            yield f"ablation_{name}", {
                "train.use_refinement": use_refine,
                "train.use_domain_alignment": use_domain,
            }


def _format_delta(delta: dict) -> str:
    parts = []
    for key in sorted(delta):
        value = delta[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        parts.append(f"{key}={value}")
    return ";".join(parts)


def cmd_sweep(args) -> int:
    from .core import load_dataset

    started = time.monotonic()
    values = _apply_seed_env(_resolved_config(args), "train.seed")
    dataset = load_dataset(args.data)
    if not dataset.has_ground_truth:
        raise ValueError("a sweep compares retrieval scores; the dataset needs ground truth")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    rows: list[list] = []

    def flush() -> None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["point", "config_delta", "mean_ap", "rank1"])
            writer.writerows(rows)

    inputs = [args.data] + ([args.config] if args.config else [])
    for name, delta in _sweep_points(args.axis):
        point_dir = out / name
        report_path = point_dir / "report.json"
        if report_path.exists():
            report = json.loads(report_path.read_text(encoding="utf-8"))
        else:
            point_values = dict(values)
            point_values.update(delta)
            report = _train_once(
                dataset, point_values, point_dir, args.raw_argv, "train", inputs
            )
        final = report.get("final", {})
        mean_ap, rank1 = final.get("mean_ap"), final.get("rank1")
        rows.append(
            [
                name,
                _format_delta(delta),
                repr(mean_ap) if mean_ap is not None else "",
                repr(rank1) if rank1 is not None else "",
            ]
        )
        flush()  # an aborted sweep keeps every completed row

    write_manifest(
        out,
        command="sweep",
        argv=args.raw_argv,
        config=values,
        seed=values["train.seed"],
        inputs=_hash_inputs(inputs),
        started=started,
    )
    _print_json({"out": str(out), "axis": args.axis, "points": [row[0] for row in rows]})
    return 0


def cmd_report(args) -> int:
    started = time.monotonic()
    run_dirs = [Path(p) for p in args.run]
    names = [p.name for p in run_dirs]
    if len(set(names)) != len(names):
        from .config import ConfigError

        raise ConfigError("run directories must have distinct basenames")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = {
        "discard_ratio": [],  # (run, epoch, value)
        "n_clusters": [],
        "mean_ap": [],
    }
    runs_summary = []
    for run_dir in run_dirs:
        stats_path = run_dir / "stats.csv"
        if not stats_path.exists():
            raise ValueError(f"{run_dir} has no stats.csv")
        with open(stats_path, newline="", encoding="utf-8") as fh:
            inter = [row for row in csv.DictReader(fh) if row.get("stage") == "inter"]
        expected = None
        report_path = run_dir / "report.json"
        if report_path.exists():
            expected = json.loads(report_path.read_text(encoding="utf-8")).get("epochs_inter")
        for row in inter:
            epoch = row["epoch"]
            series["discard_ratio"].append((run_dir.name, epoch, row["discard_ratio"]))
            series["n_clusters"].append((run_dir.name, epoch, row["n_clusters"]))
            if row["mean_ap"]:
                series["mean_ap"].append((run_dir.name, epoch, row["mean_ap"]))
        runs_summary.append(
            {
                "run": run_dir.name,
                "epochs_inter_expected": expected,
                "epochs_inter_seen": len(inter),
                "truncated": expected is None or len(inter) < expected,
            }
        )

    for key, column in [
        ("discard_ratio", "discard_ratio"),
        ("n_clusters", "n_clusters"),
        ("mean_ap", "mean_ap"),
    ]:
        with open(out / f"{key}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "epoch", column])
            writer.writerows(series[key])

    (out / "runs.json").write_text(
        json.dumps(runs_summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_manifest(
        out,
        command="report",
        argv=args.raw_argv,
        config={},
        seed=None,
        inputs=_hash_inputs(run_dirs),
        started=started,
    )
    _print_json({"out": str(out), "runs": runs_summary})
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument(
        "-O",
        "--override",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calr",
        description="Camera-aware label refinement lab for re-identification embeddings.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--threads",
        type=int,
        metavar="N",
        help="cap the BLAS thread pool (set before numeric imports)",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log progress details to stderr"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    _add_config_options(p)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cluster", help="cluster stored embeddings")
    _add_config_options(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--mode",
        choices=("global", "local"),
        default="global",
        help="global graph clustering or per-camera agglomerative",
    )
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("refine", help="refine global clusters against local labels")
    _add_config_options(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--clusters", required=True, help="global clusters.csv")
    p.add_argument("--local-dir", required=True, help="directory of local_cam{c}.csv files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--p", type=float, default=None, help="discard probability (default: refine.p_start)")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train", help="run the full two-stage training")
    _add_config_options(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory to create")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_options(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="optional output directory for eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train over a one-axis grid and tabulate scores")
    _add_config_options(p)
    p.add_argument("--axis", choices=_SWEEP_AXES, required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="sweep directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="collect per-epoch series from finished runs")
    p.add_argument("--run", nargs="+", required=True, help="one or more run directories")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.raw_argv = argv

    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ[var] = str(args.threads)
    if args.verbose:
        import logging

        logging.basicConfig(level=logging.INFO, stream=sys.stderr)

    from .config import ConfigError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
