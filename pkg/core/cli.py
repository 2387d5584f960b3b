"""Command-line entry point.

Exit status: 0 success, 1 invalid input (config, world parameters, refused overwrite),
2 runtime failure (non-finite values, I/O, failed gradient check).
"""
import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from marshmallow import ValidationError

from core.ablation import GRIDS, ablation_suite, check_orderings
from core.config import load_experiment_config
from core.dpm import DpmState
from core.errors import (
    ConfigError,
    ConfigurationError,
    FacsLookupError,
    InvalidArgumentError,
    OverwriteRefusedError,
    SpecError,
)
from core.manifest import RunManifest
from core.numerics import frobenius_distance
from core.storage import atomic_write_text
from core.trainer import (
    RunState,
    Trainer,
    build_models,
    evaluate,
    grad_check_run,
    load_checkpoint,
    save_checkpoint,
)
from core.world import SyntheticWorld, generate_synthetic_world, load_world, save_world
from ontology.config import ExperimentConfig
from ontology.output import AblationRowSchema, MetricsReportSchema, OrderingCheckSchema

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

VALIDATION_ERRORS = (ConfigError, ConfigurationError, SpecError, ValidationError, OverwriteRefusedError,
                     FacsLookupError, InvalidArgumentError)

WORLD_FILE = "world.ssmdata"
CHECKPOINT_FILE = "checkpoint.ssmckpt"
AU_TO_EXP_FILE = "au_to_exp.csv"
EXP_TO_AU_FILE = "exp_to_au.csv"


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


# ----------------------------------------------------------------------
# Heatmaps
# ----------------------------------------------------------------------
def _matrix_csv(corner: str, columns: Sequence[str], rows: Sequence[str], values: torch.Tensor) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([corner] + list(columns))
    for name, row in zip(rows, values.tolist()):
        writer.writerow([name] + [f"{v:.9g}" for v in row])
    return buffer.getvalue()


def export_mapping_heatmap(state: DpmState, out_dir, expr_set: Sequence[str], au_set: Sequence[int],
    raw: bool = False) -> Tuple[Path, Path, float]:
    """Write au_to_exp.csv (K x M) and exp_to_au.csv (M x K).

    Values are the row-softmax mixing weights unless ``raw`` is set. Returns
    both paths and the Frobenius distance between W_ea and W_ae transposed.
    """
    with torch.no_grad():
        W_ae, W_ea = state.raw_matrices() if raw else state.mixing_weights()
        raw_ae, raw_ea = state.raw_matrices()
        distance = frobenius_distance(raw_ea, raw_ae.t())
    au_names = [f"AU{a}" for a in au_set]
    out_dir = Path(out_dir)
    ae_path = atomic_write_text(out_dir / AU_TO_EXP_FILE, _matrix_csv("expression", au_names, expr_set, W_ae))
    ea_path = atomic_write_text(out_dir / EXP_TO_AU_FILE, _matrix_csv("au", expr_set, au_names, W_ea))
    return ae_path, ea_path, distance


def read_mapping_csv(path) -> Tuple[List[str], List[str], torch.Tensor]:
    """Row names, column names and values of an exported heatmap."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    columns = rows[0][1:]
    names = [r[0] for r in rows[1:]]
    values = torch.tensor([[float(v) for v in r[1:]] for r in rows[1:]], dtype=torch.float64)
    return names, columns, values


# ----------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------
def _config(args) -> ExperimentConfig:
    config = load_experiment_config(args.config, seed=args.seed)
    torch.set_num_threads(config.num_threads)
    return config


def _world(args, config: ExperimentConfig) -> SyntheticWorld:
    if getattr(args, "data", None):
        logging.info(f"Loading synthetic world from {args.data}")
        return load_world(args.data, config.world, config.seed)
    return generate_synthetic_world(config.world, config.seed)


def _write_metrics(manifest: RunManifest, metrics: Dict, prefix: str = "metrics") -> Dict[str, dict]:
    schema = MetricsReportSchema()
    dumped = {}
    for task, report in metrics.items():
        dumped[task] = schema.dump(report)
        manifest.write_json(f"{prefix}_{task}.json", dumped[task], kind="metrics")
    return dumped


def _mapping_distance(state: RunState) -> Optional[float]:
    mapping = state.model_for("expression").mapping
    if mapping is None or not mapping.has_matrices:
        return None
    with torch.no_grad():
        W_ae, W_ea = mapping.raw_matrices()
        return frobenius_distance(W_ea, W_ae.t())


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    config = _config(args)
    with RunManifest(args.out, "gen-data", args.force) as manifest:
        manifest.write_config(config)
        world = generate_synthetic_world(config.world, config.seed)
        save_world(world, manifest.path(WORLD_FILE))
        manifest.record(manifest.path(WORLD_FILE), "dataset")
        manifest.note("samples", {name: len(ds) for name, ds in world.splits.items()})
        manifest.finalize(config)
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    with RunManifest(args.out, "train", args.force) as manifest:
        manifest.write_config(config)
        world = _world(args, config)
        state = Trainer(config, world, config.seed).train()

        save_checkpoint(state, manifest.path(CHECKPOINT_FILE))
        manifest.record(manifest.path(CHECKPOINT_FILE), "checkpoint")
        metrics = _write_metrics(manifest, state.metrics)
        summary = {
            "seed": config.seed,
            "steps": state.steps,
            "fe_batches": state.fe_batches,
            "au_batches": state.au_batches,
            "loss_curve": state.loss_curve,
            "task_loss_curves": state.task_loss_curves,
            "metrics": metrics,
            "mapping_distance": _mapping_distance(state),
        }
        manifest.write_json("summary.json", summary, kind="summary")
        manifest.finalize(config)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _config(args)
    with RunManifest(args.out, "evaluate", args.force) as manifest:
        manifest.write_config(config)
        world = _world(args, config)
        state = load_checkpoint(args.checkpoint, config, config.seed)
        metrics = evaluate(state, world, cross=args.cross)
        dumped = _write_metrics(manifest, metrics)
        manifest.write_json("summary.json", {"checkpoint": str(args.checkpoint), "metrics": dumped},
            kind="summary")
        manifest.finalize(config)
    return EXIT_OK


def _seed_list(config: ExperimentConfig, count: Optional[int]) -> List[int]:
    if count is None:
        return list(config.seeds)
    if count <= len(config.seeds):
        return list(config.seeds[:count])
    return list(range(count))


def cmd_ablate(args) -> int:
    config = _config(args)
    with RunManifest(args.out, "ablate", args.force) as manifest:
        manifest.write_config(config)
        seeds = _seed_list(config, args.seeds)
        rows = ablation_suite(config, args.grid, seeds, workers=args.workers or config.workers)
        manifest.write_json(f"ablation_{args.grid}.json", AblationRowSchema(many=True).dump(rows), kind="table")

        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["grid", "setting", "task", "metric", "median"] + [f"seed_{s}" for s in seeds])
        for row in rows:
            writer.writerow([row.grid, row.setting, row.task, row.metric, f"{row.median:.9g}"]
                            + [f"{row.per_seed.get(str(s), float('nan')):.9g}" for s in seeds])
        manifest.write_text(f"ablation_{args.grid}.csv", buffer.getvalue(), kind="table")

        checks = check_orderings(rows)
        manifest.write_json("orderings.json", OrderingCheckSchema(many=True).dump(checks), kind="report")
        manifest.note("seeds", seeds)
        manifest.finalize(config)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    config = _config(args)
    world = _world(args, config)
    report = grad_check_run(config, world, h=args.h, tol=args.tol, max_entries=args.max_entries)
    worst = report.worst
    print(f"max relative error {report.max_error:.3e} (tolerance {report.tolerance:g})"
          + (f", worst parameter {worst.name}" if worst else ""))
    if args.out:
        with RunManifest(args.out, "grad-check", args.force) as manifest:
            manifest.write_json("grad_check.json", report.as_dict(), kind="report")
            manifest.finalize(config)
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_export_mapping(args) -> int:
    config = _config(args)
    if args.checkpoint:
        models = load_checkpoint(args.checkpoint, config, config.seed).models
    else:
        models = build_models(config, config.seed)
    model = next(iter(models.values()))
    mapping = model.mapping
    if mapping is None or not mapping.has_matrices:
        raise ConfigurationError(f"No mapping matrices in head '{config.head}' with DPM mode '{config.dpm_mode}'")
    with RunManifest(args.out, "export-mapping", args.force) as manifest:
        ae_path, ea_path, distance = export_mapping_heatmap(mapping, manifest.output_dir, config.expr_set,
            config.au_set, args.raw)
        manifest.record(ae_path, "heatmap")
        manifest.record(ea_path, "heatmap")
        manifest.note("frobenius_distance", distance)
        manifest.note("values", "raw" if args.raw else "softmax")
        manifest.finalize(config)
    return EXIT_OK


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssm", description="Bidirectional AU / expression learning harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="experiment JSON file (defaults apply when omitted)")
        p.add_argument("--out", required=out_required, help="run directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--force", action="store_true", help="write into a non-empty run directory")
        p.add_argument("-v", "--verbose", action="store_true")
        p.add_argument("-q", "--quiet", action="store_true")

    p = sub.add_parser("gen-data", help="generate and save the synthetic world")
    common(p)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration and evaluate it")
    common(p)
    p.add_argument("--data", help="dataset file written by gen-data")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a saved checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file written by gen-data")
    p.add_argument("--cross", action="store_true", help="also score the cross-domain sets")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation grid over several seeds")
    common(p)
    p.add_argument("--grid", choices=sorted(GRIDS), default="component")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--workers", type=int, help="parallel training threads")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of every trainable parameter")
    common(p, out_required=False)
    p.add_argument("--data", help="dataset file written by gen-data")
    p.add_argument("--h", type=float, default=1e-6, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=16, help="sampled entries per parameter")
    p.set_defaults(handler=cmd_grad_check)

    p = sub.add_parser("export-mapping", help="write the mapping matrices as CSV heatmaps")
    common(p)
    p.add_argument("--checkpoint", help="trained checkpoint; the initial mapping is exported without one")
    p.add_argument("--raw", action="store_true", help="export pre-softmax values")
    p.set_defaults(handler=cmd_export_mapping)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    try:
        return args.handler(args)
    except VALIDATION_ERRORS as e:
        logging.error(f"{args.command}: {e}")
        return EXIT_INVALID
    except Exception as e:
        logging.error(f"{args.command} failed: {e}")
        logging.debug("Traceback", exc_info=True)
        return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    configure_logging("-v" in argv or "--verbose" in argv, "-q" in argv or "--quiet" in argv)
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
