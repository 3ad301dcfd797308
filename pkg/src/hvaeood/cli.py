"""Command-line entry points: train, score, report, reconstruct, analyze.

Exit codes: 0 success, 1 runtime error, 2 usage or config error. Every
command is deterministic given the config and its root seed; every CSV/JSON
output embeds a format-version line and the seeds involved.
"""

from __future__ import annotations

import argparse
import json
import sys
import zlib
from pathlib import Path

import numpy as np

from . import analysis, metrics, scoring
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, parse_config
from .data_io import balanced_pair, binarize_dynamic, load_idx
from .model import build, reconstruct
from .rng import (
    STREAM_ANALYZE,
    STREAM_BINARIZE_EVAL,
    STREAM_INIT,
    substream,
)
from .training import train

FORMAT_VERSION = "hvaeood/v1"


def _comment_header(**kv) -> list:
    lines = [f"# format={FORMAT_VERSION}"]
    lines += [f"# {key}={value}" for key, value in kv.items()]
    return lines


def _load_dataset(cfg, key_images, key_labels, split):
    images_path = cfg.path(key_images)
    if images_path is None:
        raise ConfigError(f"config key {key_images!r} is required for this command")
    if not images_path.is_file():
        raise FileNotFoundError(f"dataset file not found: {images_path}")
    labels_path = cfg.path(key_labels)
    name = cfg.values.get("dataset_name") or images_path.name.split(".")[0]
    return load_idx(images_path, labels_path, name=name, split=split)


def _binarize_eval(cfg, dataset, cap=None):
    images = dataset.images
    if cap:
        images = images[:cap]
    rng = substream(cfg.seed, STREAM_BINARIZE_EVAL, zlib.crc32(dataset.name.encode()))
    return binarize_dynamic(
        images, rng, seed_state=f"{cfg.seed}/{STREAM_BINARIZE_EVAL}/{dataset.name}"
    )


def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    dataset = _load_dataset(cfg, "train_images", "train_labels", "train")
    hvae_cfg = cfg.hvae_config()
    init_rng = substream(cfg.seed, STREAM_INIT)
    init_batch = binarize_dynamic(
        dataset.images[: min(256, dataset.num_examples)], init_rng,
        seed_state=f"{cfg.seed}/{STREAM_INIT}",
    )
    model = build(hvae_cfg, init_batch, init_rng)
    out_dir = cfg.path("output_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.csv"
    with open(log_path, "w") as fh:
        kl_cols = ",".join(f"kl_z{i + 1}" for i in range(hvae_cfg.num_layers))
        for line in _comment_header(seed=cfg.seed):
            fh.write(line + "\n")
        fh.write(f"epoch,elbo_nats,bpd,{kl_cols},lambda_effective,warmup_beta\n")
        fh.flush()

        def on_epoch(stats):
            kls = ",".join(f"{v:.17g}" for v in stats.kl_per_layer)
            fh.write(
                f"{stats.epoch},{stats.elbo_nats:.17g},{stats.bpd:.17g},{kls},"
                f"{stats.lambda_effective:.17g},{stats.warmup_beta:.17g}\n"
            )
            fh.flush()
            if args.verbose:
                print(
                    f"epoch {stats.epoch}: elbo {stats.elbo_nats:.2f} nats "
                    f"({stats.bpd:.4f} bpd)",
                    flush=True,
                )

        train(model, dataset, hvae_cfg, progress=on_epoch)
    ckpt_path = out_dir / "model.ckpt"
    save_checkpoint(model, ckpt_path)
    print(f"checkpoint written to {ckpt_path}")
    return 0


def cmd_score(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    model = load_checkpoint(args.checkpoint)
    out_dir = cfg.path("output_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    cap = cfg.eval_examples or None
    for dataset_path in args.datasets:
        path = Path(dataset_path)
        if not path.is_file():
            raise FileNotFoundError(f"dataset file not found: {path}")
        name = path.name.split(".")[0]
        dataset = load_idx(path, name=name, split="test")
        batch = _binarize_eval(cfg, dataset, cap)
        table = scoring.score_dataset(
            model,
            batch.data,
            ks=cfg.eval_ks,
            S=cfg.importance_samples,
            seed=cfg.seed,
            dataset_name=name,
            ls=cfg.eval_ls,
            indices=batch.source_indices,
        )
        out_path = out_dir / f"scores_{name}.csv"
        table.to_csv(
            out_path,
            header_lines=_comment_header(
                seed=cfg.seed,
                importance_samples=cfg.importance_samples,
                binarize_eval_stream=batch.seed_state,
            ),
        )
        print(f"scores written to {out_path}")
    return 0


def _oriented(table, column):
    """OOD-positive orientation: bounds are negated, LLR columns kept."""
    if column == "elbo":
        return -table.elbo
    kind, _, index = column.partition("_")
    index = int(index)
    if kind == "gt":
        return -table.gt[index]
    if kind == "lt":
        return -table.lt[index]
    if kind == "llr":
        return table.llr[index]
    raise scoring.EmptyTable(f"unknown score column {column}")


def _score_columns(table):
    cols = ["elbo"]
    cols += [f"gt_{k}" for k in sorted(table.gt)]
    cols += [f"lt_{l}" for l in sorted(table.lt)]
    cols += [f"llr_{k}" for k in sorted(table.llr)]
    return cols


def _histogram(values, bins=50):
    counts, edges = np.histogram(values, bins=bins)
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def cmd_report(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    in_table = scoring.ScoreTable.from_csv(args.in_csv)
    out_table = scoring.ScoreTable.from_csv(args.out_csv)
    in_cols = set(_score_columns(in_table))
    out_cols = set(_score_columns(out_table))
    if in_cols != out_cols:
        raise scoring.LengthMismatch(
            f"score tables disagree on columns: {sorted(in_cols ^ out_cols)}"
        )
    rng = substream(cfg.seed, "report")
    n = min(in_table.num_rows, out_table.num_rows)
    in_rows, out_rows = balanced_pair(
        np.arange(in_table.num_rows), np.arange(out_table.num_rows), rng
    )
    in_bal = _take_rows(in_table, in_rows)
    out_bal = _take_rows(out_table, out_rows)
    k_star, auroc_per_k = scoring.select_k(in_bal, out_bal)
    out_dir = cfg.path("output_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    per_score = {}
    for column in sorted(in_cols):
        pos = _oriented(out_bal, column)
        neg = _oriented(in_bal, column)
        curve = metrics.roc_curve(pos, neg)
        roc_path = out_dir / f"roc_{in_table.dataset}_vs_{out_table.dataset}_{column}.csv"
        curve.to_csv(roc_path, header_lines=_comment_header(seed=cfg.seed, score=column))
        per_score[column] = {
            "auroc": metrics.auroc(pos, neg),
            "auprc": metrics.auprc(pos, neg),
            "fpr80": metrics.fpr_at_tpr(pos, neg, 0.8),
            "histogram_in": _histogram(neg),
            "histogram_out": _histogram(pos),
        }
    report = {
        "format": FORMAT_VERSION,
        "orientation": "positive class is OOD; bounds negated, LLR as-is",
        "in_dataset": in_table.dataset,
        "out_dataset": out_table.dataset,
        "samples_per_side": int(n),
        "seed": cfg.seed,
        "importance_samples": in_table.S,
        "chosen_k": int(k_star),
        "auroc_per_k": {str(k): v for k, v in auroc_per_k.items()},
        "scores": per_score,
    }
    report_path = out_dir / f"report_{in_table.dataset}_vs_{out_table.dataset}.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"report written to {report_path}")
    print(f"orientation: {report['orientation']}")
    print(f"chosen k*: {k_star} (AUROC {auroc_per_k[k_star]:.4f})")
    return 0


def _take_rows(table, rows):
    return scoring.ScoreTable(
        dataset=table.dataset,
        S=table.S,
        seed=table.seed,
        indices=table.indices[rows],
        elbo=table.elbo[rows],
        gt={k: v[rows] for k, v in table.gt.items()},
        lt={l: v[rows] for l, v in table.lt.items()},
        llr={k: v[rows] for k, v in table.llr.items()},
    )


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM: header P5, dimensions, maxval 255, raw pixels."""
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError("write_pgm expects a uint8 [H, W] array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def cmd_reconstruct(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    model = load_checkpoint(args.checkpoint)
    path = Path(args.dataset)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    dataset = load_idx(path, name=path.name.split(".")[0], split="test")
    batch = _binarize_eval(cfg, dataset, cap=args.n)
    rng = substream(cfg.seed, "reconstruct", args.k)
    probs = reconstruct(model, batch.data, args.k, rng, use_mode=args.mode)
    out_dir = cfg.path("output_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    side = int(round(batch.data.shape[1] ** 0.5))
    for i in range(args.n):
        original = (batch.data[i] * 255).astype(np.uint8).reshape(side, side)
        recon = np.round(probs[i] * 255).astype(np.uint8).reshape(side, side)
        write_pgm(out_dir / f"input_{i:03d}.pgm", original)
        write_pgm(out_dir / f"recon_k{args.k}_{i:03d}.pgm", recon)
    manifest = {
        "format": FORMAT_VERSION,
        "seed": cfg.seed,
        "k": args.k,
        "use_mode": bool(args.mode),
        "count": args.n,
        "dataset": dataset.name,
    }
    with open(out_dir / "reconstructions.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {2 * args.n} PGM files to {out_dir}")
    return 0


def cmd_analyze(args) -> int:
    cfg = parse_config(args.config, args.set or ())
    out_dir = cfg.path("output_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.analysis == "jacobian-sweep":
        d_range = range(args.d_min, args.d_max + 1, args.d_step)
        rows = analysis.dimension_sweep(args.gap, d_range, args.sigma)
        out_path = out_dir / "jacobian_sweep.csv"
        analysis.sweep_to_csv(
            rows, out_path, header_lines=_comment_header(seed=cfg.seed, gap=args.gap)
        )
        print(f"{len(rows)} rows written to {out_path}")
        return 0
    if args.analysis == "correlate":
        model_a = load_checkpoint(args.checkpoint_a)
        model_b = load_checkpoint(args.checkpoint_b)
        path = Path(args.dataset)
        dataset = load_idx(path, name=path.name.split(".")[0], split="test")
        cap = min(dataset.num_examples, args.examples)
        batch = _binarize_eval(cfg, dataset, cap=cap)
        maps = analysis.cross_model_correlation(model_a, model_b, batch.data)
        summary = {"format": FORMAT_VERSION, "seed": cfg.seed, "blocks": {}}
        for cmap in maps:
            stem = f"correlation_z{cmap.layer_a}_z{cmap.layer_b}"
            cmap.to_csv(
                out_dir / f"{stem}.csv",
                header_lines=_comment_header(
                    seed=cfg.seed, layer_a=cmap.layer_a, layer_b=cmap.layer_b
                ),
            )
            summary["blocks"][stem] = cmap.block_mean()
        with open(out_dir / "correlation_summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"{len(maps)} correlation blocks written to {out_dir}")
        return 0
    if args.analysis == "variance":
        model = load_checkpoint(args.checkpoint)
        path = Path(args.dataset)
        dataset = load_idx(path, name=path.name.split(".")[0], split="test")
        batch = _binarize_eval(cfg, dataset, cap=max(1, args.index + 1))
        rng = substream(cfg.seed, STREAM_ANALYZE, args.index)
        report = scoring.estimator_variance(
            model,
            batch.data[args.index],
            k=args.k,
            S=cfg.importance_samples,
            repeats=args.repeats,
            noise_mode=args.noise_mode,
            rng=rng,
        )
        payload = {
            "format": FORMAT_VERSION,
            "seed": cfg.seed,
            "example_index": args.index,
            "k": args.k,
            "repeats": args.repeats,
            "noise_mode": args.noise_mode,
            "var_elbo": report.var_elbo,
            "var_gt": report.var_gt,
            "var_llr": report.var_llr,
            "cov": report.cov,
            "identity_gap": report.identity_gap(),
        }
        out_path = out_dir / "variance.json"
        with open(out_path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"variance report written to {out_path}")
        return 0
    raise ConfigError(f"unknown analyze subcommand {args.analysis!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hvaeood",
        description="Train hierarchical VAEs and score out-of-distribution data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")

    p_train = sub.add_parser("train", help="train a model from a config")
    add_common(p_train)
    p_train.add_argument("--verbose", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_score = sub.add_parser("score", help="score datasets with a checkpoint")
    add_common(p_score)
    p_score.add_argument("--checkpoint", required=True)
    p_score.add_argument("datasets", nargs="+", help="IDX image files")
    p_score.set_defaults(func=cmd_score)

    p_report = sub.add_parser("report", help="metrics report from two score CSVs")
    add_common(p_report)
    p_report.add_argument("in_csv", help="in-distribution score table")
    p_report.add_argument("out_csv", help="OOD score table")
    p_report.set_defaults(func=cmd_report)

    p_recon = sub.add_parser("reconstruct", help="write PGM reconstructions")
    add_common(p_recon)
    p_recon.add_argument("--checkpoint", required=True)
    p_recon.add_argument("--dataset", required=True)
    p_recon.add_argument("--k", type=int, default=0)
    p_recon.add_argument("--n", type=int, default=8)
    p_recon.add_argument("--mode", action="store_true", help="use posterior modes")
    p_recon.set_defaults(func=cmd_reconstruct)

    p_analyze = sub.add_parser("analyze", help="analytical diagnostics")
    analyze_sub = p_analyze.add_subparsers(dest="analysis", required=True)

    p_sweep = analyze_sub.add_parser("jacobian-sweep")
    add_common(p_sweep)
    p_sweep.add_argument("--gap", type=int, default=2)
    p_sweep.add_argument("--d-min", type=int, default=4)
    p_sweep.add_argument("--d-max", type=int, default=40)
    p_sweep.add_argument("--d-step", type=int, default=2)
    p_sweep.add_argument("--sigma", type=float, default=1.0)
    p_sweep.set_defaults(func=cmd_analyze)

    p_corr = analyze_sub.add_parser("correlate")
    add_common(p_corr)
    p_corr.add_argument("--checkpoint-a", required=True)
    p_corr.add_argument("--checkpoint-b", required=True)
    p_corr.add_argument("--dataset", required=True)
    p_corr.add_argument("--examples", type=int, default=2000)
    p_corr.set_defaults(func=cmd_analyze)

    p_var = analyze_sub.add_parser("variance")
    add_common(p_var)
    p_var.add_argument("--checkpoint", required=True)
    p_var.add_argument("--dataset", required=True)
    p_var.add_argument("--k", type=int, default=1)
    p_var.add_argument("--repeats", type=int, default=200)
    p_var.add_argument("--index", type=int, default=0)
    p_var.add_argument("--noise-mode", choices=["shared", "independent"], default="shared")
    p_var.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
