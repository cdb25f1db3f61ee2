"""``tagret`` command line: gen-data, train, eval, ablate, grad-check, inspect-routing.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Failures print one JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .ablation import CSV_HEADER, load_variants, run_ablation
from .backbone import load_checkpoint
from .config import RunConfig, resolve, threads_from
from .data import build_dataset, load_manifest
from .errors import ConfigError, DataError, NumericError, TagretError
from .evaluate import dump_embeddings, evaluate_model, routing_stream, view_entanglement
from .gradcheck import check_model
from .losses import LossWeights
from .train import train

log = logging.getLogger("tagret")


def _dataset_root(args, cfg: RunConfig) -> Path:
    return Path(args.data) if getattr(args, "data", None) else cfg.dataset_dir


def _manifests(root: Path):
    if not (root / "train" / "manifest.jsonl").is_file():
        raise DataError(f"no dataset at {root}; run gen-data first")
    return load_manifest(root, "train"), load_manifest(root, "test")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args, cfg: RunConfig) -> int:
    root = _dataset_root(args, cfg)
    train_m, test_m = build_dataset(cfg.data, root)
    cfg.write_resolved(cfg.out)
    _emit({"dataset": str(root), "train": len(train_m), "test": len(test_m)})
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    root = _dataset_root(args, cfg)
    train_m, test_m = _manifests(root)
    cfg.write_resolved(cfg.out)
    result = train(cfg.model, cfg.train, train_m, out_dir=cfg.out, max_steps=args.max_steps)
    first, last = result.log[0], result.log[-1]
    _emit({"checkpoint": str(result.checkpoint), "steps": len(result.log), "L_first": first["L"], "L_last": last["L"]})
    return 0


def _format_table(rows: list[tuple[str, dict]], router: dict) -> str:
    lines = [f"{'split':<10}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'mAP':>8}"]
    for name, m in rows:
        lines.append(f"{name:<10}{m['R1']:>8.2f}{m['R5']:>8.2f}{m['R10']:>8.2f}{m['mAP']:>8.2f}")
    if router:
        lines.append("router accuracy: " + "  ".join(f"{k} {v:.2f}" for k, v in router.items()))
    return "\n".join(lines)


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint.safetensors"
    model, extra = load_checkpoint(ckpt)
    manifest = load_manifest(_dataset_root(args, cfg), args.split)
    metrics = evaluate_model(model, manifest, extra.get("train_ids"))
    rows = [(name, metrics.per_view[name]) for name in ("mixed", "aerial", "ground") if name in metrics.per_view]
    print(_format_table(rows, metrics.router_accuracy))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ra = metrics.router_accuracy
    fmt = lambda x: "" if x is None else f"{x:.4f}"  # noqa: E731
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for name, m in rows:
            w.writerow([name] + [fmt(m[k]) for k in ("R1", "R5", "R10", "mAP")] + [fmt(ra.get("aerial")), fmt(ra.get("ground"))])
    if cfg.eval.dump_embeddings:
        dump_embeddings(model, manifest, out / "embeddings")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    variants = load_variants(args.variants)
    rows = run_ablation(cfg, variants, out_dir=cfg.out, max_steps=args.max_steps)
    cfg.write_resolved(cfg.out)
    with open(Path(cfg.out) / "ablation.csv") as f:
        sys.stdout.write(f.read())
    log.info("%d variants", len(rows))
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    weights = LossWeights(
        lambda_id=cfg.train.lambda_id,
        lambda_ortho=cfg.train.lambda_ortho,
        alpha=cfg.train.alpha,
        epsilon=cfg.train.epsilon,
        view_loss=cfg.train.view_loss,
        ortho_variant=cfg.train.ortho_variant,
    )
    model_cfg = cfg.model
    model_cfg.n_classes = args.batch_size
    report, excluded = check_model(
        model_cfg, weights, batch_size=args.batch_size, seed=cfg.train.seed, n_per_param=args.per_param,
        tolerance=args.tolerance,
    )
    ok = report.passed and excluded
    _emit({
        "passed": ok,
        "max_rel_error": report.max_rel_error,
        "worst_param": report.worst_param,
        "n_checked": report.n_checked,
        "n_skipped": report.n_skipped,
        "routing_exclusion": excluded,
        "tolerance": report.tolerance,
    })
    if not ok:
        raise NumericError(f"gradient check failed: {report.max_rel_error:.3e} at {report.worst_param}")
    return 0


def cmd_inspect_routing(args, cfg: RunConfig) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint.safetensors"
    model, _ = load_checkpoint(ckpt)
    manifest = load_manifest(_dataset_root(args, cfg), args.split)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    totals: dict = {}
    usage = [0] * model.cfg.n_experts
    with open(out / "routing.jsonl", "w") as f:
        for rec in routing_stream(model, manifest, cfg.eval.batch_size):
            f.write(json.dumps(rec, sort_keys=True) + "\n")
            for name, c in rec["router_counts"].items():
                t = totals.setdefault(name, {"correct": 0, "total": 0})
                t["correct"] += c["correct"]
                t["total"] += c["total"]
            usage = [a + b for a, b in zip(usage, rec["expert_usage"].get("all", [0] * len(usage)))]
        accuracy = {k: 100.0 * v["correct"] / v["total"] for k, v in totals.items() if v["total"]}
        summary = {"summary": True, "router_accuracy": accuracy, "expert_usage": usage, "n_samples": len(manifest)}
        f.write(json.dumps(summary, sort_keys=True) + "\n")
    _emit(summary)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "inspect-routing": cmd_inspect_routing,
}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS so a flag given before the subcommand is not reset by the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    common.add_argument("--out", help="output directory (overrides out)")
    common.add_argument("--threads", type=int, help="torch intra-op threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tagret", parents=[common], description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    p.add_argument("--data", help="dataset directory (default <out>/data)")

    p = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    p.add_argument("--data", help="dataset directory (default <out>/data)")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")

    for name, text in (("eval", "retrieval metrics"), ("inspect-routing", "expert usage and router accuracy")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="default <out>/checkpoint.safetensors")
        p.add_argument("--data", help="dataset directory (default <out>/data)")
        p.add_argument("--split", default="test", choices=("train", "test"))

    p = sub.add_parser("ablate", parents=[common], help="train/evaluate a variant grid")
    p.add_argument("--variants", default="component", help="grid name (component, viewpoint, placement, experts) or JSON file")
    p.add_argument("--max-steps", type=int, help="cap training steps per variant")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the total loss")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--per-param", type=int, default=3, help="elements checked per parameter tensor")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _error_record(err: BaseException, code: int) -> None:
    record = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "out", "threads"):
        setattr(args, name, getattr(args, name, None))
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(name)s: %(message)s")
    try:
        torch.set_num_threads(threads_from(args.threads))
        cfg = resolve(args.config, seed=args.seed, out=args.out)
        return COMMANDS[args.command](args, cfg)
    except TagretError as err:
        _error_record(err, err.exit_code)
        return err.exit_code
    except FileNotFoundError as err:
        _error_record(err, DataError.exit_code)
        return DataError.exit_code
    except ValueError as err:  # malformed values reaching stdlib/torch validation
        _error_record(err, ConfigError.exit_code)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
