"""Command-line surface for batch experiments.

Subcommands: gen-synthetic, train, eval, ablate, export-masks, inspect.
Run configuration comes from a declarative JSON file plus flag overrides;
every report embeds the config hash and seed, and report bytes are
deterministic for a given (config, seed).

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataio import (
    FileFormatError,
    SyntheticSpec,
    generate_synthetic,
    read_dataset,
    read_header,
    write_dataset,
)
from .domain import DISTANCE_METRICS, InvariantViolation, RunConfig, validate_dataset
from .filtering import select_deterministic, select_stochastic, class_similarity, similarity_to_probabilities
from .scoring import init_scorer
from .seeding import FILTER_STREAM, stream
from .training import (
    EvalReport,
    config_hash,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

DEFAULT_K_LIST = (32, 49, 64, 98, 128, 164, 196)
DEFAULT_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)

_CONFIG_FLAGS = {
    "k_patches": int,
    "lambda_class": float,
    "selection_mode": str,
    "stochastic_fraction": float,
    "distance_metric": str,
    "learning_rate": float,
    "optimizer": str,
    "train_episodes": int,
    "eval_episodes": int,
    "val_every": int,
    "val_episodes": int,
    "n_way": int,
    "m_shot": int,
    "n_query": int,
    "seed": int,
}


class CliValidationError(ValueError):
    pass


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file values first, then flag overrides, then validation."""
    values: dict = {}
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise CliValidationError(f"config file not found: {cfg_path}")
        loaded = json.loads(cfg_path.read_text())
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise CliValidationError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for name in _CONFIG_FLAGS:
        override = getattr(args, name, None)
        if override is not None:
            values[name] = override
    if "hidden_sizes" in values:
        values["hidden_sizes"] = tuple(values["hidden_sizes"])
    return RunConfig(**values)


def _load_dataset(path: str):
    p = Path(path)
    if not p.exists():
        raise CliValidationError(f"dataset file not found: {p}")
    dataset = read_dataset(p)
    violations = validate_dataset(dataset)
    if violations:
        raise CliValidationError(
            "dataset failed validation:\n  " + "\n  ".join(violations)
        )
    return dataset


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _announce(config: RunConfig) -> str:
    return (
        f"{config.n_way}-way {config.m_shot}-shot, {config.n_query} queries/class, "
        f"K={config.k_patches}, lambda={config.lambda_class}, "
        f"mode={config.selection_mode}, metric={config.distance_metric}, seed={config.seed}"
    )


def _report_payload(config: RunConfig, report: EvalReport, split: str) -> dict:
    return {
        "config": dataclasses.asdict(config),
        "config_hash": config_hash(config),
        "seed": config.seed,
        "split": split,
        "episodes": report.episodes,
        "mean_accuracy": report.mean_accuracy,
        "ci95_halfwidth": report.ci95_halfwidth,
        "per_episode_accuracy": [float(a) for a in report.per_episode],
    }


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        n_classes=args.classes,
        items_per_class=args.items_per_class,
        patch_count=args.patches,
        dim=args.dim,
        prototype_scale=args.prototype_scale,
        foreground_fraction=args.foreground_fraction,
        noise_sigma=args.noise_sigma,
        background_pool_size=args.pool_size,
        seed=args.seed if args.seed is not None else 0,
    )
    dataset = generate_synthetic(spec, split_fractions=tuple(args.split_fractions))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out)
    print(
        f"wrote {len(dataset.items)} items ({spec.n_classes} classes, "
        f"P={spec.patch_count}, D={spec.dim}) to {out}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    dataset = _load_dataset(args.dataset)
    print(f"training config: {_announce(config)}")
    state = train(dataset, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.spffckpt"
    save_checkpoint(ckpt, state, config)
    _write_json(
        out_dir / "train_metrics.json",
        {
            "config": dataclasses.asdict(config),
            "config_hash": config_hash(config),
            "seed": config.seed,
            "episodes": state.step,
            "best_val_accuracy": state.best_val_accuracy,
            "final_ema_loss": state.ema_loss,
            "history": state.history,
        },
    )
    summary = (
        f"trained {state.step} episodes ({_announce(config)})\n"
        f"best val accuracy: {state.best_val_accuracy}\n"
        f"checkpoint: {ckpt}\n"
    )
    (out_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def _params_for_eval(args: argparse.Namespace, config: RunConfig):
    if getattr(args, "checkpoint", None):
        ckpt_path = Path(args.checkpoint)
        if not ckpt_path.exists():
            raise CliValidationError(f"checkpoint file not found: {ckpt_path}")
        state, _ = load_checkpoint(ckpt_path)
        return state.params
    logger.info("no checkpoint given; evaluating a freshly initialized scorer")
    return init_scorer(config.k_patches**2, config.hidden_sizes, seed=config.seed)


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    dataset = _load_dataset(args.dataset)
    params = _params_for_eval(args, config)
    if params.input_width != config.k_patches**2:
        raise CliValidationError(
            f"checkpoint expects k^2={params.input_width}, config k_patches={config.k_patches}"
        )
    print(f"eval config: {_announce(config)}")
    report = evaluate(dataset, config, params, split=args.split, workers=args.workers)
    out_dir = Path(args.out_dir)
    _write_json(out_dir / "eval_report.json", _report_payload(config, report, args.split))
    summary = (
        f"evaluated {report.episodes} episodes on split {args.split!r} ({_announce(config)})\n"
        f"mean accuracy: {report.mean_accuracy:.4f} +- {report.ci95_halfwidth:.4f} (95% CI)\n"
    )
    (out_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def _ablation_cells(config: RunConfig, args: argparse.Namespace) -> list[tuple[str, RunConfig]]:
    cells: list[tuple[str, RunConfig]] = []
    sweeps = args.sweeps
    if "k" in sweeps:
        for k in args.k_list:
            cells.append(("k", replace(config, k_patches=int(k))))
    if "fraction" in sweeps:
        for f in args.fractions:
            cells.append(
                ("fraction", replace(config, selection_mode="mixed", stochastic_fraction=float(f)))
            )
    if "metric" in sweeps:
        for metric in args.metrics:
            cells.append(("metric", replace(config, distance_metric=metric)))
    return cells


def run_ablation_cell(dataset, config: RunConfig, checkpoint_params=None) -> EvalReport:
    """Evaluate one ablation cell, training a fresh scorer when no
    checkpoint parameters are supplied."""
    if checkpoint_params is not None:
        params = checkpoint_params
    else:
        state = train(dataset, config)
        params = state.best_params
    return evaluate(dataset, config, params, split="test")


def cmd_ablate(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    dataset = _load_dataset(args.dataset)
    if not args.train_per_cell and not args.checkpoint:
        raise CliValidationError("ablate needs either --checkpoint or --train-per-cell")
    checkpoint_params = None
    if args.checkpoint:
        state, _ = load_checkpoint(args.checkpoint)
        checkpoint_params = state.params
    cells = _ablation_cells(config, args)
    for _, cell_config in cells:
        if cell_config.k_patches > dataset.patch_count:
            raise CliValidationError(
                f"K={cell_config.k_patches} exceeds dataset patch count P={dataset.patch_count}"
            )
        if checkpoint_params is not None and checkpoint_params.input_width != cell_config.k_patches**2:
            raise CliValidationError(
                f"checkpoint width {checkpoint_params.input_width} cannot score K={cell_config.k_patches}; "
                "use --train-per-cell for K sweeps"
            )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for sweep, cell_config in cells:
        report = run_ablation_cell(dataset, cell_config, checkpoint_params)
        rows.append(
            {
                "sweep": sweep,
                "k": cell_config.k_patches,
                "selection_mode": cell_config.selection_mode,
                "stochastic_fraction": cell_config.stochastic_fraction,
                "distance_metric": cell_config.distance_metric,
                "episodes": report.episodes,
                "mean_accuracy": report.mean_accuracy,
                "ci95_halfwidth": report.ci95_halfwidth,
                "config_hash": config_hash(cell_config),
                "seed": cell_config.seed,
            }
        )
        logger.info(
            "cell %s k=%d mode=%s f=%.2f metric=%s: %.4f +- %.4f",
            sweep, cell_config.k_patches, cell_config.selection_mode,
            cell_config.stochastic_fraction, cell_config.distance_metric,
            report.mean_accuracy, report.ci95_halfwidth,
        )
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} ablation cells to {out}")
    return 0


def cmd_export_masks(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    dataset = _load_dataset(args.dataset)
    by_id = {item.image_id: (pos, item) for pos, item in enumerate(dataset.items)}
    ids = args.ids if args.ids else [item.image_id for item in dataset.items[: args.limit]]
    masks = []
    for image_id in ids:
        if image_id not in by_id:
            raise CliValidationError(f"unknown image id: {image_id}")
        pos, item = by_id[image_id]
        p = item.patch_count
        if config.k_patches > p:
            raise CliValidationError(f"k_patches={config.k_patches} exceeds P={p}")
        probs = similarity_to_probabilities(class_similarity(item.patches, item.class_token))
        rng = stream(config.seed, FILTER_STREAM, pos)
        stochastic = select_stochastic(probs, config.k_patches, rng)
        deterministic = select_deterministic(probs, config.k_patches)
        side = int(np.sqrt(p))
        grid = [side, side] if side * side == p else [1, p]
        masks.append(
            {
                "image_id": image_id,
                "label": item.label,
                "grid": grid,
                "patch_count": p,
                "k": config.k_patches,
                "probabilities": [float(x) for x in probs],
                "stochastic_indices": [int(i) for i in stochastic],
                "deterministic_indices": [int(i) for i in deterministic],
            }
        )
    out = Path(args.out)
    _write_json(
        out,
        {
            "config_hash": config_hash(config),
            "seed": config.seed,
            "masks": masks,
        },
    )
    print(f"wrote {len(masks)} selection masks to {out}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    path = Path(args.dataset)
    if not path.exists():
        raise CliValidationError(f"dataset file not found: {path}")
    header = read_header(path)
    dataset = read_dataset(path)
    violations = validate_dataset(dataset)
    split_counts = {s: len(dataset.split_classes(s)) for s in ("train", "val", "test")}
    print(f"file: {path}")
    print(f"items: {header.item_count}, P={header.patch_count}, D={header.dim}")
    print(f"classes: {len(dataset.classes)} (splits {split_counts})")
    if dataset.provenance:
        print(f"provenance: {json.dumps(dataset.provenance, sort_keys=True)}")
    if violations:
        print(f"validation: {len(violations)} violation(s)")
        for v in violations:
            print(f"  - {v}")
        return 1
    print("validation: ok")
    return 0


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run-config file")
    group = parser.add_argument_group("config overrides")
    for name, typ in _CONFIG_FLAGS.items():
        group.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spff",
        description="Stochastic patch filtering engine for few-shot classification",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic embedding dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--items-per-class", type=int, default=50)
    p.add_argument("--patches", type=int, default=196)
    p.add_argument("--dim", type=int, default=384)
    p.add_argument("--prototype-scale", type=float, default=1.0)
    p.add_argument("--foreground-fraction", type=float, default=0.5)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--pool-size", type=int, default=256)
    p.add_argument("--split-fractions", nargs=3, type=float, default=[0.7, 0.1, 0.2],
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train the scorer on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a scorer over fresh episodes")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--workers", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep K, stochastic fraction, and metric")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--train-per-cell", action="store_true")
    p.add_argument("--sweeps", nargs="+", default=["k", "fraction", "metric"],
                   choices=("k", "fraction", "metric"))
    p.add_argument("--k-list", nargs="+", type=int, default=list(DEFAULT_K_LIST))
    p.add_argument("--fractions", nargs="+", type=float, default=list(DEFAULT_FRACTIONS))
    p.add_argument("--metrics", nargs="+", default=list(DISTANCE_METRICS),
                   choices=DISTANCE_METRICS)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-masks", help="export selection masks for overlay rendering")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", nargs="*", help="image ids (default: first --limit items)")
    p.add_argument("--limit", type=int, default=8)
    _add_config_flags(p)
    p.set_defaults(func=cmd_export_masks)

    p = sub.add_parser("inspect", help="print dataset header and validation report")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (CliValidationError, InvariantViolation, FileFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.exception("runtime failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
