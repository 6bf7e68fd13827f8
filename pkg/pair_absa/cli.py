"""Command line: ``train``, ``eval``, ``predict``, ``check`` and ``bench``.

Exit codes: 0 on success, 1 for data or model errors, 2 for usage errors.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd
from pydantic import BaseModel, ValidationError

from pair_absa.bench import run_bench
from pair_absa.checkpoint import load_checkpoint, save_checkpoint
from pair_absa.checks import (
    GRADCHECK_SAMPLES,
    micro_config,
    run_grid_roundtrip,
    run_gradcheck,
    run_mdgru_equivalence,
    run_worker_invariance,
)
from pair_absa.config import ModelConfig, build_config, log_level_from_env, output_dir_from_env
from pair_absa.data import Example, parse_dataset, write_dataset
from pair_absa.embedding import attach_contextual, load_contextual
from pair_absa.errors import AbsaError, ConfigError
from pair_absa.pair_encoder import MODE_DIRECTIONS
from pair_absa.tracking import RunTracker
from pair_absa.training import build_model, evaluate, predict_all, train

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.npz"
TRAIN_LOG_NAME = "train_log.csv"
METRICS_NAME = "metrics.csv"


class UsageError(Exception):
    """Invalid flag combination; exit code 2."""


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any] = {}
    data: Dict[str, Optional[str]] = {}
    options: Dict[str, Any] = {}
    seed: int = 0
    output_dir: str


def manifest_path(output_dir: Path, command: str) -> Path:
    return output_dir / f"{command}_manifest.json"


def write_manifest(manifest: RunManifest) -> Path:
    output_dir = Path(manifest.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = manifest_path(output_dir, manifest.command)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote run manifest {path}")
    return path


def read_manifest(path: str) -> RunManifest:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not a run manifest: {e}") from e
    try:
        return RunManifest(**payload)
    except ValidationError as e:
        raise ConfigError(f"{path} is not a run manifest: {e}") from e


def _output_dir(out: Optional[str], fallback: Optional[str] = None) -> Path:
    if out:
        return Path(out)
    if fallback:
        return Path(fallback)
    return output_dir_from_env()


def _load_examples(path: Optional[str], task: str, contextual: Optional[str] = None) -> List[Example]:
    if not path:
        return []
    examples = parse_dataset(path, task)
    if contextual:
        attach_contextual(examples, load_contextual(contextual))
    return examples


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_config(args: argparse.Namespace, manifest: Optional[RunManifest]) -> ModelConfig:
    if args.no_pair_encoder and args.directions is not None:
        raise UsageError("--directions has no effect with --no-pair-encoder")
    overrides: Dict[str, Any] = dict(
        task=args.task,
        directions=args.directions,
        n_layers=args.layers,
        seed=args.seed,
        epochs=args.epochs,
        max_steps=args.max_steps,
        use_pair_encoder=False if args.no_pair_encoder else None,
        use_interaction=False if args.no_interaction else None,
        use_char=False if args.no_char else None,
        share_direction_weights=True if args.share_direction_weights else None,
    )
    if manifest is not None:
        base = dict(manifest.config)
        base.update({k: v for k, v in overrides.items() if v is not None})
        overrides = base
    try:
        return build_config(args.config, **overrides)
    except ConfigError as e:
        raise UsageError(str(e)) from e


def cmd_train(args: argparse.Namespace) -> int:
    manifest_in = read_manifest(args.from_manifest) if args.from_manifest else None
    data_in = manifest_in.data if manifest_in else {}
    paths: Dict[str, Optional[str]] = {
        "train": args.train or data_in.get("train"),
        "dev": args.dev or data_in.get("dev"),
        "embeddings": args.embeddings or data_in.get("embeddings"),
        "contextual": args.contextual or data_in.get("contextual"),
    }
    if not paths["train"]:
        raise UsageError("train needs --train or --from-manifest")
    config = _train_config(args, manifest_in)
    output_dir = _output_dir(args.out, manifest_in.output_dir if manifest_in else None)
    write_manifest(
        RunManifest(
            command="train",
            config=config.model_dump(),
            data=paths,
            options={"mlflow_experiment": args.mlflow_experiment},
            seed=config.seed,
            output_dir=str(output_dir),
        )
    )

    train_set = parse_dataset(str(paths["train"]), config.task)
    dev_set = parse_dataset(paths["dev"], config.task) if paths["dev"] else []
    model = build_model(config, train_set, paths["embeddings"], paths["contextual"], extra=dev_set)

    with RunTracker(args.mlflow_experiment, run_name=output_dir.name) as tracker:
        tracker.log_params(config.model_dump())
        result = train(model, train_set, dev_set, on_epoch=lambda epoch, m: tracker.log_metrics(m, step=epoch))
        result.log.to_csv(output_dir / TRAIN_LOG_NAME, index=False)
        report = result.dev_report if dev_set and result.dev_report else evaluate(model, dev_set or train_set)
        report.to_frame().to_csv(output_dir / METRICS_NAME, index=False)
        checkpoint = save_checkpoint(
            output_dir / CHECKPOINT_NAME,
            model,
            extra={"best_epoch": result.best_epoch, "skipped": result.skipped, "steps": result.state.step},
        )
        tracker.log_metrics({f"final_{k}": v.f1 for k, v in report.metrics.items()})
        tracker.log_artifact(str(checkpoint))

    print(f"Evaluated on {'dev' if dev_set else 'train'} ({len(dev_set or train_set)} sentences)")
    print(report.format_table())
    return 0


# ---------------------------------------------------------------------------
# eval / predict
# ---------------------------------------------------------------------------


def _eval_sources(args: argparse.Namespace) -> Dict[str, Optional[str]]:
    if not args.from_manifest:
        return {"model": args.model, "data": args.data, "contextual": args.contextual}
    manifest = read_manifest(args.from_manifest)
    if manifest.command == "train":
        model = str(Path(manifest.output_dir) / CHECKPOINT_NAME)
        data = manifest.data.get("dev") or manifest.data.get("train")
    else:
        model, data = manifest.data.get("model"), manifest.data.get("data")
    return {
        "model": args.model or model,
        "data": args.data or data,
        "contextual": args.contextual or manifest.data.get("contextual"),
    }


def cmd_eval(args: argparse.Namespace) -> int:
    sources = _eval_sources(args)
    if not sources["model"] or not sources["data"]:
        raise UsageError("eval needs --model and --data, or --from-manifest")
    output_dir = _output_dir(args.out)
    write_manifest(
        RunManifest(command="eval", data=sources, options={"task": args.task}, output_dir=str(output_dir))
    )
    model = load_checkpoint(sources["model"], task=args.task)
    examples = _load_examples(sources["data"], model.config.task, sources["contextual"])
    report = evaluate(model, examples)
    report.to_frame().to_csv(output_dir / METRICS_NAME, index=False)
    print(report.format_table())
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    out = Path(args.out)
    write_manifest(
        RunManifest(
            command="predict",
            data={"model": args.model, "data": args.data, "contextual": args.contextual},
            options={"out": str(out)},
            output_dir=str(out.parent),
        )
    )
    model = load_checkpoint(args.model)
    task = model.config.task
    examples = _load_examples(args.data, task, args.contextual)
    predictions = predict_all(model, examples)
    count = write_dataset(out, ((ex.tokens, p.items(task)) for ex, p in zip(examples, predictions)))
    print(f"Wrote {count} predictions to {out}")
    return 0


# ---------------------------------------------------------------------------
# check / bench
# ---------------------------------------------------------------------------


def cmd_check(args: argparse.Namespace) -> int:
    output_dir = _output_dir(args.out)
    write_manifest(
        RunManifest(
            command="check",
            data={f"data{k}": path for k, path in enumerate(args.data or [])},
            options={
                "mode": args.mode,
                "task": args.task,
                "max_per_param": None if args.all_elements else args.max_per_param,
            },
            seed=args.seed,
            output_dir=str(output_dir),
        )
    )
    if args.mode == "gridroundtrip":
        if not args.data:
            raise UsageError("--mode gridroundtrip needs --data")
        rows = []
        for path in args.data:
            examples = parse_dataset(path, args.task)
            report = run_grid_roundtrip(examples, args.task)
            rows.append({"data": path, **report.stats.model_dump(), "conflicts": report.conflicts, "mismatches": report.mismatches})
            for example_id in report.conflict_ids:
                print(f"conflict: {example_id}")
            for example_id in report.mismatch_ids:
                print(f"mismatch: {example_id}")
        table = pd.DataFrame(rows)
        passed = bool((table["mismatches"] == 0).all())
    elif args.mode == "gradcheck":
        max_per_param = None if args.all_elements else args.max_per_param
        grad = run_gradcheck(micro_config(seed=args.seed), max_per_param=max_per_param)
        table = pd.DataFrame([{"parameter": k, "max_rel_error": v} for k, v in grad.per_parameter.items()])
        print(f"max relative error {grad.max_rel_error:.3e} at {grad.worst_parameter} {grad.worst_index}")
        print(f"checked {grad.checked} elements, {grad.skipped_kinks} skipped at kinks, tol {grad.tol:g}")
        passed = grad.passed
    else:
        equiv = run_mdgru_equivalence(seeds=args.seeds)
        invariance = run_worker_invariance(n=args.invariance_n)
        table = pd.DataFrame(
            [
                {"check": "reference", "cases": equiv.cases, "max_deviation": equiv.max_deviation},
                {"check": f"workers 1 vs 4 at n={args.invariance_n}", "cases": 1, "max_deviation": invariance},
            ]
        )
        passed = equiv.passed and invariance <= equiv.tol
    table.to_csv(output_dir / f"check_{args.mode}.csv", index=False)
    print(table.to_string(index=False))
    print("PASSED" if passed else "FAILED")
    return 0 if passed else 1


def cmd_bench(args: argparse.Namespace) -> int:
    if args.n < 1 or args.workers < 1:
        raise UsageError("--n and --workers must be at least 1")
    output_dir = _output_dir(args.out)
    modes = list(MODE_DIRECTIONS) if args.directions == "all" else [args.directions]
    write_manifest(
        RunManifest(
            command="bench",
            options={"n": args.n, "workers": args.workers, "directions": modes, "repeats": args.repeats},
            seed=args.seed,
            output_dir=str(output_dir),
        )
    )
    report = run_bench(args.n, args.workers, modes, seed=args.seed, repeats=args.repeats)
    report.to_csv(output_dir / "bench.csv", index=False)
    print(report.to_string(index=False))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(prog="pair-absa", description="Aspect sentiment triplet extraction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--out", help="output directory (default: $PAIR_ABSA_OUTPUT_DIR or ./runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=["aste", "aesc"])
    p.add_argument("--directions", choices=list(MODE_DIRECTIONS))
    p.add_argument("--no-pair-encoder", action="store_true")
    p.add_argument("--no-interaction", action="store_true")
    p.add_argument("--no-char", action="store_true")
    p.add_argument("--share-direction-weights", action="store_true")
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--embeddings", help="word vectors in text format")
    p.add_argument("--contextual", help="precomputed contextual token vectors")
    p.add_argument("--mlflow-experiment")
    p.add_argument("--from-manifest")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--task", choices=["aste", "aesc"])
    p.add_argument("--contextual")
    p.add_argument("--out")
    p.add_argument("--from-manifest")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="write predictions in the dataset format")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="prediction file")
    p.add_argument("--contextual")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("check", parents=[common], help="run a self-check")
    p.add_argument("--mode", required=True, choices=["gridroundtrip", "gradcheck", "mdgru-equiv"])
    p.add_argument("--data", nargs="+")
    p.add_argument("--task", choices=["aste", "aesc"], default="aste")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=100, help="random grids per size for mdgru-equiv")
    p.add_argument("--invariance-n", type=int, default=64)
    p.add_argument(
        "--max-per-param",
        type=int,
        default=GRADCHECK_SAMPLES,
        help="sample at most this many elements per parameter for gradcheck",
    )
    p.add_argument("--all-elements", action="store_true", help="gradcheck every parameter element")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_check)

    p = sub.add_parser("bench", parents=[common], help="time wavefront against sequential scans")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--directions", choices=[*MODE_DIRECTIONS, "all"], default="quad")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_bench)
    return parser


def _configure_logging(level: Optional[str]) -> None:
    name = (level or log_level_from_env()).upper()
    if not isinstance(logging.getLevelName(name), int):
        raise UsageError(f"unknown log level '{name}'")
    logging.basicConfig(level=name, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(name)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        _configure_logging(args.log_level)
        return handler(args)
    except UsageError as e:
        logger.error(str(e))
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (AbsaError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
