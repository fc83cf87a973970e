"""Command-line entry point.

Subcommands: gen-data, ingest, split, pretrain, embed, eval-knn, finetune,
analyze {attn,sim,retrieval}, config {validate,show}.  Exit codes: 0 ok,
1 usage/config, 2 data, 3 numeric failure.  Errors print one
machine-parsable line `error:<kind>:<message>` to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    attention_maps,
    cross_view_retrieval,
    patch_similarity,
    save_attention_maps,
    save_similarity,
)
from .checkpoint import load_checkpoint
from .config import (
    PRESETS,
    config_hash,
    config_to_dict,
    load_config,
    preset,
)
from .embed import (
    EmbeddingMatrix,
    encoder_from_checkpoint,
    extract_embeddings,
    load_embeddings,
    save_embeddings,
)
from .errors import DataError, Error, UsageError
from .finetune import finetune
from .ingest import (
    apply_low_info_filter,
    dedup,
    group_by_study,
    load_manifest,
    read_pgm,
    save_study,
    split_by_study,
    verify_record,
    write_manifest,
    write_report,
)
from .knn import grid_search_k, knn_predict, label_matrix
from .metrics import MetricsReport, f1_precision_recall
from .seeding import rng_from
from .synthetic import generate_study
from .train import pretrain


def _workers_type(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("workers must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mvdistill",
        description="Multi-view self-distillation pretraining, evaluation "
                    "and analysis on synthetic paired projections.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", default="desk",
                            help="JSON config path or preset name "
                                 f"({'/'.join(PRESETS)})")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--force", action="store_true",
                            help="overwrite existing outputs")
        sp.add_argument("--workers", type=_workers_type, default=1,
                        help="data-pipeline parallelism (results identical "
                             "for any value)")

    sp = sub.add_parser("gen-data", help="generate synthetic studies + manifest")
    common(sp)
    sp.add_argument("--studies", type=int, default=100)
    sp.add_argument("--start-seed", type=int, default=None,
                    help="first study seed (default: derived from config seed)")

    sp = sub.add_parser("ingest", help="verify, dedup and low-info-filter a manifest")
    common(sp, config=True)
    sp.add_argument("--manifest", required=True)

    sp = sub.add_parser("split", help="study-level train/val split")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--val-fraction", type=float, default=0.3)

    sp = sub.add_parser("pretrain", help="self-distillation pretraining")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--mode", choices=("multi", "single"), default="multi")
    sp.add_argument("--resume", default=None, help="checkpoint dir to resume from")

    sp = sub.add_parser("embed", help="extract frozen embeddings")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--pooling", choices=("cls", "mean_patch"), default=None)
    sp.add_argument("--which", choices=("student", "teacher"), default="student")

    sp = sub.add_parser("eval-knn", help="k-NN protocol on frozen embeddings")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--train-manifest", required=True)
    sp.add_argument("--val-manifest", required=True)
    sp.add_argument("--k", default="auto",
                    help="'auto' for the 5-fold grid search, or an integer")

    sp = sub.add_parser("finetune", help="supervised fine-tune + AP/AUC report")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--train-manifest", required=True)
    sp.add_argument("--val-manifest", required=True)

    sp = sub.add_parser("analyze", help="attention / similarity / retrieval")
    asub = sp.add_subparsers(dest="analysis", required=True)

    sa = asub.add_parser("attn", help="final-block attention heatmaps")
    common(sa)
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--image", required=True, help="PGM image path")

    sa = asub.add_parser("sim", help="cross-view patch similarity")
    common(sa)
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--image-a", required=True)
    sa.add_argument("--image-b", required=True)
    sa.add_argument("--anchor", required=True, help="row,col patch coordinates")
    sa.add_argument("--top-k", type=int, default=5)

    sa = asub.add_parser("retrieval", help="paired-view retrieval@1")
    common(sa)
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--manifest", required=True)

    sp = sub.add_parser("config", help="validate or show configurations")
    csub = sp.add_subparsers(dest="config_cmd", required=True)
    sc = csub.add_parser("validate", help="validate a config file")
    sc.add_argument("--config", required=True)
    sc = csub.add_parser("show", help="print a preset or normalized config")
    sc.add_argument("--config", default="desk")
    return p


# -- output helpers -------------------------------------------------------------


def _ensure_out(out_dir: Path, force: bool, *names: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if force:
        return
    for name in names:
        target = out_dir / name
        if target.exists():
            raise UsageError(
                f"refusing to overwrite {target} (pass --force)"
            )


def _write_summary(out_dir: Path, cfg, command: str, extra: dict | None = None):
    payload = {
        "command": command,
        "version": __version__,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
    }
    if extra:
        payload.update(extra)
    (out_dir / "summary.json").write_text(
        json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="ascii"
    )


def _load_records(path: str):
    records = load_manifest(path)
    if not records:
        raise DataError(f"manifest {path} is empty")
    return records, Path(path).resolve().parent


# -- command implementations ------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    _ensure_out(out, args.force, "manifest.jsonl", "summary.json")
    start = args.start_seed
    if start is None:
        start = rng_from(cfg.seed, 0x6E0DA7A).integers(0, 2**31)
    seeds = [int(start) + i for i in range(args.studies)]

    def gen(seed):
        return generate_study(seed, cfg.data)

    if args.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            studies = list(pool.map(gen, seeds))
    else:
        studies = [gen(s) for s in seeds]
    records = []
    for study in studies:
        records += save_study(study, out / "images")
    write_manifest(records, out / "manifest.jsonl")
    _write_summary(out, cfg, "gen-data",
                   {"studies": len(studies), "images": len(records)})
    print(f"wrote {len(records)} images across {len(studies)} studies to {out}")
    return 0


def cmd_ingest(args) -> int:
    cfg = load_config(args.config)
    records, manifest_dir = _load_records(args.manifest)
    out = Path(args.out)
    _ensure_out(out, args.force, "manifest.jsonl", "report.csv", "summary.json")
    for rec in records:
        verify_record(rec, manifest_dir)
    kept, dedup_report = dedup(records)
    kept, info_report = apply_low_info_filter(kept, manifest_dir)
    dropped_ids = {r[0] for r in dedup_report if r[1] == "drop"}
    rows = [r for r in dedup_report if r[1] == "drop"] + info_report
    rows += [(r[0], "keep", "") for r in dedup_report
             if r[1] == "keep" and r[0] not in {x[0] for x in info_report}]
    write_report(sorted(set(rows)), out / "report.csv")
    # the cleaned manifest lives in out/, so re-anchor image paths to it
    anchored = []
    for rec in kept:
        rec = type(rec)(**{**rec.__dict__})
        rec.path = os.path.relpath(manifest_dir / rec.path, out)
        anchored.append(rec)
    write_manifest(anchored, out / "manifest.jsonl")
    _write_summary(out, cfg, "ingest", {
        "input_images": len(records),
        "kept_images": len(kept),
        "dropped_duplicates": len(dropped_ids),
        "dropped_low_info": sum(1 for r in info_report if r[1] == "drop"),
        "source_manifest": str(Path(args.manifest).resolve()),
    })
    print(f"kept {len(kept)}/{len(records)} images; report at {out/'report.csv'}")
    return 0


def cmd_split(args) -> int:
    cfg = load_config(args.config)
    records, _ = _load_records(args.manifest)
    out = Path(args.out)
    _ensure_out(out, args.force, "train.jsonl", "val.jsonl", "summary.json")
    train, val = split_by_study(records, args.val_fraction, cfg.seed)
    write_manifest(train, out / "train.jsonl")
    write_manifest(val, out / "val.jsonl")
    _write_summary(out, cfg, "split", {
        "train_images": len(train), "val_images": len(val),
        "train_studies": len(group_by_study(train)),
        "val_studies": len(group_by_study(val)),
        "val_fraction": args.val_fraction,
    })
    print(f"train {len(train)} images / val {len(val)} images -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    records, manifest_dir = _load_records(args.manifest)
    out = Path(args.out)
    _ensure_out(out, args.force, "loss.csv", "summary.json")
    final = pretrain(records, manifest_dir, cfg, args.mode, out,
                     workers=args.workers, resume_from=args.resume)
    _write_summary(out, cfg, "pretrain", {
        "mode": args.mode,
        "final_checkpoint": str(final),
        "loss_log": str(out / "loss.csv"),
    })
    print(f"pretrained ({args.mode}); final checkpoint at {final}")
    return 0


def _pooling(args, cfg) -> str:
    return args.pooling if getattr(args, "pooling", None) else cfg.eval.pooling


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    encoder, _, cfg = encoder_from_checkpoint(ckpt, args.which)
    records, manifest_dir = _load_records(args.manifest)
    out = Path(args.out)
    _ensure_out(out, args.force, "embeddings.bin", "embeddings.json",
                "summary.json")
    emb = extract_embeddings(
        encoder, records, manifest_dir, pooling=_pooling(args, cfg),
        source={"checkpoint_hash": ckpt.meta.get("config_hash", ""),
                "which": args.which},
    )
    save_embeddings(emb, out / "embeddings")
    _write_summary(out, cfg, "embed", {
        "rows": len(emb.ids), "dim": int(emb.rows.shape[1]),
        "pooling": emb.source["pooling"],
    })
    print(f"wrote {len(emb.ids)} embeddings to {out / 'embeddings.bin'}")
    return 0


def cmd_eval_knn(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    encoder, _, cfg = encoder_from_checkpoint(ckpt, "student")
    train_records, train_dir = _load_records(args.train_manifest)
    val_records, val_dir = _load_records(args.val_manifest)
    out = Path(args.out)
    _ensure_out(out, args.force, "metrics.csv", "summary.json")
    pooling = cfg.eval.pooling
    train_emb = extract_embeddings(encoder, train_records, train_dir, pooling)
    val_emb = extract_embeddings(encoder, val_records, val_dir, pooling)
    label_names = sorted({k for r in train_records for k in r.labels})
    if not label_names:
        raise DataError("train manifest has no labels")
    if args.k == "auto":
        k = grid_search_k(train_emb, label_names, cfg.eval.k_grid,
                          folds=cfg.eval.folds, distance=cfg.eval.distance)
    else:
        try:
            k = int(args.k)
        except ValueError as exc:
            raise UsageError(f"--k must be 'auto' or an integer, got {args.k!r}"
                             ) from exc
    train_labels = label_matrix(train_emb, label_names)
    val_labels = label_matrix(val_emb, label_names)
    preds = knn_predict(train_emb, train_labels, val_emb.rows, k,
                        distance=cfg.eval.distance)
    report = MetricsReport(extra={"k": k})
    for j, name in enumerate(label_names):
        f1, precision, recall = f1_precision_recall(preds[:, j], val_labels[:, j])
        support = int(val_labels[:, j].sum())
        report.add(name, "f1", f1, support)
        report.add(name, "precision", precision, support)
        report.add(name, "recall", recall, support)
    report.write_csv(out / "metrics.csv")
    _write_summary(out, cfg, "eval-knn", {
        "k": k, "distance": cfg.eval.distance, "pooling": pooling,
        "macro_f1": report.macro("f1"),
    })
    print(f"k-NN (k={k}) macro-F1 = {report.macro('f1'):.4f}; "
          f"metrics at {out / 'metrics.csv'}")
    return 0


def cmd_finetune(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config)
    train_records, train_dir = _load_records(args.train_manifest)
    val_records, _ = _load_records(args.val_manifest)
    out = Path(args.out)
    _ensure_out(out, args.force, "metrics.csv", "summary.json")
    result = finetune(ckpt, train_records, val_records, train_dir, config=cfg)
    result.report.write_csv(out / "metrics.csv")
    _write_summary(out, cfg, "finetune", {
        "labels": result.label_names,
        "head": result.head_kind,
        "macro_roc_auc": result.report.macro("roc_auc"),
        "macro_average_precision": result.report.macro("average_precision"),
    })
    auc = result.report.macro("roc_auc")
    print(f"finetune macro ROC-AUC = {auc if auc is None else round(auc, 4)}; "
          f"metrics at {out / 'metrics.csv'}")
    return 0


def cmd_analyze_attn(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    encoder, _, cfg = encoder_from_checkpoint(ckpt, "student")
    image = read_pgm(args.image)
    out = Path(args.out)
    _ensure_out(out, args.force, "attn-head0.pgm", "attn-raw.csv", "summary.json")
    maps = attention_maps(encoder, image, image_id=Path(args.image).stem)
    paths = save_attention_maps(maps, out)
    _write_summary(out, cfg, "analyze-attn", {
        "image": str(Path(args.image).resolve()),
        "heads": int(maps.grids.shape[0]),
        "files": [str(p) for p in paths],
    })
    print(f"wrote {maps.grids.shape[0]} attention heatmaps to {out}")
    return 0


def cmd_analyze_sim(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    encoder, _, cfg = encoder_from_checkpoint(ckpt, "student")
    try:
        row, col = (int(v) for v in args.anchor.split(","))
    except ValueError as exc:
        raise UsageError(f"--anchor must be 'row,col', got {args.anchor!r}"
                         ) from exc
    out = Path(args.out)
    _ensure_out(out, args.force, "similarity.json", "summary.json")
    result = patch_similarity(
        encoder, read_pgm(args.image_a), (row, col), read_pgm(args.image_b),
        top_k=args.top_k, image_id_a=Path(args.image_a).stem,
        image_id_b=Path(args.image_b).stem,
    )
    save_similarity(result, out / "similarity.json")
    _write_summary(out, cfg, "analyze-sim", {
        "anchor": [row, col], "top_k": args.top_k,
        "top_k_mean_cosine": result.top_k_mean,
    })
    print(f"top-{args.top_k} mean cosine = {result.top_k_mean:.4f}; "
          f"report at {out / 'similarity.json'}")
    return 0


def cmd_analyze_retrieval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    encoder, _, cfg = encoder_from_checkpoint(ckpt, "student")
    records, manifest_dir = _load_records(args.manifest)
    out = Path(args.out)
    _ensure_out(out, args.force, "retrieval.json", "summary.json")
    studies = group_by_study(records)
    a_recs, b_recs = [], []
    for sid in sorted(studies):
        recs = studies[sid]
        if len(recs) != 2:
            raise DataError(
                f"study {sid} has {len(recs)} views; retrieval needs exactly 2"
            )
        pair = sorted(recs, key=lambda r: r.projection)
        a_recs.append(pair[0])
        b_recs.append(pair[1])
    emb_a = extract_embeddings(encoder, a_recs, manifest_dir, cfg.eval.pooling)
    emb_b = extract_embeddings(encoder, b_recs, manifest_dir, cfg.eval.pooling)
    score = cross_view_retrieval(emb_a.rows, emb_b.rows)
    (out / "retrieval.json").write_text(
        json.dumps({"retrieval_at_1": score, "pairs": len(a_recs)},
                   sort_keys=True) + "\n", encoding="ascii")
    _write_summary(out, cfg, "analyze-retrieval",
                   {"retrieval_at_1": score, "pairs": len(a_recs)})
    print(f"retrieval@1 = {score:.4f} over {len(a_recs)} pairs")
    return 0


def cmd_config(args) -> int:
    if args.config_cmd == "validate":
        cfg = load_config(args.config)
        print(f"ok: {config_hash(cfg)}")
        return 0
    cfg = load_config(args.config)
    print(json.dumps(config_to_dict(cfg), sort_keys=True, indent=1))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "eval-knn": cmd_eval_knn,
    "finetune": cmd_finetune,
    "config": cmd_config,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        if args.command == "analyze":
            handler = {
                "attn": cmd_analyze_attn,
                "sim": cmd_analyze_sim,
                "retrieval": cmd_analyze_retrieval,
            }[args.analysis]
            return handler(args)
        return _COMMANDS[args.command](args)
    except Error as exc:
        print(f"error:{exc.kind}:{exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error:data:{exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
