"""Command line entry point with gen-data / cluster / train / evaluate /
ablate subcommands.  Every command that writes artifacts drops a
manifest.json (resolved config, seed, input hashes, output paths) into
the output directory before doing any real work."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import pseudo_label
from .core import (
    ClusteringCollapseError,
    ConfigError,
    FileFormatError,
    FileIOError,
    NumericError,
    TrainConfig,
    cameras,
    features_matrix,
    identities,
    l2_normalize,
    load_features,
    save_features,
    validate_config,
)
from .encoder import load_checkpoint, save_checkpoint
from .evaluation import evaluate_retrieval
from .synthdata import SynthSpec, generate
from .trainer import embed_all, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_COLLAPSE = 5

METRICS_HEADER = ["epoch", "C", "outliers", "loss", "loss_cls", "loss_ins", "seconds"]
ABLATE_HEADER = ["mu", "seed", "mAP", "rank1", "rank5", "rank10"]

_INT_CONFIG_FIELDS = {
    "num_identities_per_batch",
    "instances_per_identity",
    "slots_per_cluster",
    "epochs",
    "lr_decay_every",
    "dbscan_min_pts",
    "kreciprocal_k",
    "seed",
}


def _limit_blas_threads(n: int):
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict,
                   outputs: list) -> Path:
    """Record what a run is about to do; hashing the inputs up front also
    surfaces missing files before any compute happens."""
    manifest = {
        "tool": "hybridreid",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {
            name: {"path": str(path), "sha256": _sha256(path)}
            for name, path in inputs.items()
        },
        # relative to this manifest's directory, so reruns in a different
        # directory still produce an identical manifest
        "outputs": [os.path.basename(str(p)) for p in outputs],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _add_config_flags(sp: argparse.ArgumentParser):
    sp.add_argument("--config", default=None,
                    help="JSON file with training config fields")
    for field in dataclasses.fields(TrainConfig):
        flag = "--" + field.name.replace("_", "-")
        if field.name == "hidden_dims":
            sp.add_argument(flag, type=int, nargs="+", default=None,
                            help="encoder hidden layer widths")
        elif field.name in _INT_CONFIG_FIELDS:
            sp.add_argument(flag, type=int, default=None)
        else:
            sp.add_argument(flag, type=float, default=None)


def _merge_config(args) -> TrainConfig:
    """defaults < config file < explicit CLI flags."""
    merged = TrainConfig().to_dict()
    if args.config is not None:
        merged.update(TrainConfig.from_json(args.config).to_dict())
    for field in dataclasses.fields(TrainConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            merged[field.name] = value
    cfg = TrainConfig.from_dict(merged)
    validate_config(cfg)
    return cfg


def _write_metrics_csv(path, reports, zero_seconds: bool):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for r in reports:
            seconds = 0.0 if zero_seconds else r.seconds
            writer.writerow([
                r.epoch,
                r.num_clusters,
                r.num_outliers,
                f"{r.loss:.10g}",
                f"{r.loss_cls:.10g}",
                f"{r.loss_ins:.10g}",
                f"{seconds:.6f}",
            ])


def _evaluate_sets(query_samples, gallery_samples, model=None, junk_filter=True):
    if model is not None:
        q_emb = embed_all(model, query_samples)
        g_emb = embed_all(model, gallery_samples)
    else:
        q_emb = l2_normalize(features_matrix(query_samples))
        g_emb = l2_normalize(features_matrix(gallery_samples))
    return evaluate_retrieval(
        q_emb,
        g_emb,
        identities(query_samples),
        cameras(query_samples),
        identities(gallery_samples),
        cameras(gallery_samples),
        junk_filter=junk_filter,
    )


def cmd_gen_data(args) -> int:
    spec = SynthSpec(
        num_identities=args.num_identities,
        instances_per_identity=args.instances_per_identity,
        dims=args.dims,
        num_cameras=args.num_cameras,
        sigma_within=args.sigma_within,
        sigma_cam=args.sigma_cam,
        min_angle_deg=args.min_angle_deg,
        seed=args.seed,
    )
    spec.validate()
    out_dir = Path(args.out_dir)
    paths = {name: out_dir / f"{name}.feat" for name in ("train", "query", "gallery")}
    write_manifest(out_dir, "gen-data", dataclasses.asdict(spec), spec.seed,
                   inputs={}, outputs=list(paths.values()))
    train_s, query_s, gallery_s = generate(spec)
    for name, samples in (("train", train_s), ("query", query_s),
                          ("gallery", gallery_s)):
        save_features(samples, paths[name])
    print(f"wrote {len(train_s)} train, {len(query_s)} query, "
          f"{len(gallery_s)} gallery samples to {out_dir}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    out_dir = Path(args.out_dir)
    labels_path = out_dir / "labels.csv"
    params = {
        "kreciprocal_k": args.kreciprocal_k,
        "dbscan_eps": args.dbscan_eps,
        "dbscan_min_pts": args.dbscan_min_pts,
        "jaccard_blend": args.jaccard_blend,
    }
    write_manifest(out_dir, "cluster", params, None,
                   inputs={"features": args.features}, outputs=[labels_path])
    samples = load_features(args.features)
    emb = l2_normalize(features_matrix(samples))
    labels = pseudo_label(
        emb,
        k=args.kreciprocal_k,
        eps=args.dbscan_eps,
        min_pts=args.dbscan_min_pts,
        blend=args.jaccard_blend,
    )
    with open(labels_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "cluster_id"])
        for i, c in enumerate(labels.assignment):
            writer.writerow([i, int(c)])
    print(f"clusters={labels.num_clusters} outliers={labels.num_outliers} "
          f"of {labels.num_samples} samples")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _merge_config(args)
    if args.deterministic:
        _limit_blas_threads(1)
    out_dir = Path(args.out_dir)
    ckpt_path = out_dir / "checkpoint.ckpt"
    metrics_path = out_dir / "metrics.csv"
    inputs = {"features": args.features}
    outputs = [ckpt_path, metrics_path]
    if args.query and args.gallery:
        inputs["query"] = args.query
        inputs["gallery"] = args.gallery
        outputs.append(out_dir / "eval.json")
    write_manifest(out_dir, "train", cfg.to_dict(), cfg.seed, inputs, outputs)
    samples = load_features(args.features)
    model, opt, reports = train(samples, cfg)
    _write_metrics_csv(metrics_path, reports, zero_seconds=args.deterministic)
    save_checkpoint(ckpt_path, model, opt, epoch=cfg.epochs)
    last = reports[-1] if reports else None
    if last is not None:
        print(f"trained {cfg.epochs} epochs: C={last.num_clusters} "
              f"outliers={last.num_outliers} loss={last.loss:.4f}")
    if args.query and args.gallery:
        result = _evaluate_sets(load_features(args.query),
                                load_features(args.gallery), model=model)
        metrics = result.metrics()
        with open(out_dir / "eval.json", "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print("  ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = None
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    query_samples = load_features(args.query)
    gallery_samples = load_features(args.gallery)
    result = _evaluate_sets(query_samples, gallery_samples, model=model,
                            junk_filter=not args.no_junk_filter)
    metrics = result.metrics()
    if args.out_dir:
        out_dir = Path(args.out_dir)
        inputs = {"query": args.query, "gallery": args.gallery}
        if args.checkpoint:
            inputs["checkpoint"] = args.checkpoint
        metrics_path = out_dir / "eval.json"
        write_manifest(out_dir, "evaluate", {"junk_filter": not args.no_junk_filter},
                       None, inputs, [metrics_path])
        with open(metrics_path, "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if args.per_query:
            with open(out_dir / "per_query.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["query_index", "average_precision"])
                for i, ap in enumerate(result.average_precisions):
                    writer.writerow([i, "" if np.isnan(ap) else f"{ap:.10g}"])
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def _ablate_run(payload):
    """One (mu, seed) cell; module-level so process pools can pickle it."""
    (features_path, query_path, gallery_path, cfg_dict, mu, seed,
     deterministic) = payload
    if deterministic:
        _limit_blas_threads(1)
    cfg_dict = dict(cfg_dict, mu=mu, seed=seed)
    cfg = TrainConfig.from_dict(cfg_dict)
    samples = load_features(features_path)
    model, _, _ = train(samples, cfg)
    result = _evaluate_sets(load_features(query_path),
                            load_features(gallery_path), model=model)
    return (mu, seed, result.metrics())


def cmd_ablate(args) -> int:
    cfg = _merge_config(args)
    for mu in args.mu_values:
        if not 0.0 <= mu <= 1.0:
            raise ConfigError(f"mu value {mu} outside [0, 1]")
    if args.deterministic:
        _limit_blas_threads(1)
    out_dir = Path(args.out_dir)
    summary_path = out_dir / "summary.csv"
    manifest_cfg = dict(cfg.to_dict(), mu_values=list(args.mu_values),
                        seeds=list(args.seeds))
    write_manifest(out_dir, "ablate", manifest_cfg, cfg.seed,
                   inputs={"features": args.features, "query": args.query,
                           "gallery": args.gallery},
                   outputs=[summary_path])
    payloads = [
        (args.features, args.query, args.gallery, cfg.to_dict(), mu, seed,
         args.deterministic)
        for mu in args.mu_values
        for seed in args.seeds
    ]
    workers = max(1, int(os.environ.get("HHCL_THREADS", "1")))
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_run, payloads))
    else:
        results = [_ablate_run(p) for p in payloads]
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATE_HEADER)
        for mu, seed, metrics in results:
            writer.writerow([
                f"{mu:.10g}",
                seed,
                f"{metrics['mAP']:.10g}",
                f"{metrics['rank1']:.10g}",
                f"{metrics['rank5']:.10g}",
                f"{metrics['rank10']:.10g}",
            ])
    for mu in args.mu_values:
        cells = [m["mAP"] for m2, _, m in results if m2 == mu]
        print(f"mu={mu:g}: mean mAP={np.mean(cells):.4f} over {len(cells)} seeds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridreid",
        description="Hybrid cluster/instance contrastive embedding trainer "
                    "with pseudo-label clustering and retrieval evaluation.",
    )
    parser.add_argument("--version", action="version",
                        version=f"hybridreid {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--num-identities", type=int, default=50)
    sp.add_argument("--instances-per-identity", type=int, default=20)
    sp.add_argument("--dims", type=int, default=32)
    sp.add_argument("--num-cameras", type=int, default=3)
    sp.add_argument("--sigma-within", type=float, default=0.02)
    sp.add_argument("--sigma-cam", type=float, default=0.08)
    sp.add_argument("--min-angle-deg", type=float, default=45.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("cluster", help="pseudo-label a feature file")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--kreciprocal-k", type=int, default=TrainConfig.kreciprocal_k)
    sp.add_argument("--dbscan-eps", type=float, default=TrainConfig.dbscan_eps)
    sp.add_argument("--dbscan-min-pts", type=int, default=TrainConfig.dbscan_min_pts)
    sp.add_argument("--jaccard-blend", type=float, default=TrainConfig.jaccard_blend)
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("train", help="train an embedding model")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--query", default=None, help="evaluate after training")
    sp.add_argument("--gallery", default=None)
    sp.add_argument("--deterministic", action="store_true",
                    help="single BLAS thread and zeroed timing column")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score query/gallery retrieval")
    sp.add_argument("--query", required=True)
    sp.add_argument("--gallery", required=True)
    sp.add_argument("--checkpoint", default=None,
                    help="embed with this model instead of raw features")
    sp.add_argument("--out-dir", default=None)
    sp.add_argument("--per-query", action="store_true",
                    help="also write per-query AP (needs --out-dir)")
    sp.add_argument("--no-junk-filter", action="store_true",
                    help="keep same-identity same-camera gallery items")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="sweep mu over seeds and summarize")
    sp.add_argument("--features", required=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--gallery", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--mu-values", type=float, nargs="+", required=True)
    sp.add_argument("--seeds", type=int, nargs="+", required=True)
    sp.add_argument("--deterministic", action="store_true")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ClusteringCollapseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileFormatError, FileIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
