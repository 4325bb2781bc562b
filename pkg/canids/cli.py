"""
``canids`` command line: generate, train, quantize, evaluate, replay, report.

Each command reads one RunConfig (``--config``), applies flag overrides,
writes the resolved config into its output directory and stamps every
artifact with the config digest and the checksums of its inputs.
"""
import argparse
import csv
from dataclasses import (
    replace,
)
import json
import logging
import math
from pathlib import (
    Path,
)
import sys
from typing import (
    Any,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

from eth_utils import (
    get_extended_debug_logger,
)
from hexbytes import (
    HexBytes,
)

from canids.canlog import (
    attack_fraction,
    generate_synthetic_log,
    label_counts,
    load_car_hacking_log,
    split_dataset,
    write_log,
)
from canids.config import (
    RunConfig,
    load_config,
    write_resolved_config,
)
from canids.constants import (
    EXIT_CONFIG_ERROR,
    EXIT_DATA_ERROR,
    EXIT_NUMERIC_ERROR,
    EXIT_OK,
)
from canids.engine import (
    DetectorPair,
    measure_batch_latency,
    replay,
    report_to_json,
    write_verdicts_csv,
)
from canids.exceptions import (
    BiasOverflow,
    CalibrationError,
    ConfigError,
    CorruptModelFile,
    DimensionMismatch,
    EmptyDatasetError,
    FrameParseError,
    NonFiniteLossError,
    ValidationError,
)
from canids.metrics import (
    ConfusionMatrix,
    MetricsReport,
    comparison_table,
    confusion_table,
    derive_metrics,
)
from canids.nn import (
    EpochRecord,
    MlpModel,
    evaluate,
    fold_batchnorm,
    init_model,
    train,
    transfer_train,
)
from canids.quant import (
    calibrate,
    calibration_set,
    evaluate_quantized,
    finetune_qat,
    quantize,
    saturation_report,
    scales_summary,
)
from canids.typing import (
    LabeledArrays,
)
from canids.utils.codec import (
    load_model,
    load_quant_model,
    save_model,
    save_quant_model,
)
from canids.utils.provenance import (
    file_checksum,
)
from canids.window import (
    window_arrays,
)

logger = get_extended_debug_logger("canids.cli")

LOG_FORMAT = "%(levelname)8s  %(asctime)s  %(filename)20s  %(message)s"
LOG_DATE_FORMAT = "%m-%d %H:%M:%S"

MODEL_FILE = "model.ckpt"
BF_MODEL_FILE = "model-bf.qmodel"
AF_MODEL_FILE = "model-af.qmodel"
HISTORY_FILE = "history.csv"
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy", "checkpoint")
EVALUATION_FILE = "evaluation.json"
REPLAY_FILE = "replay.json"
VERDICTS_FILE = "verdicts.csv"
REPORT_FILE = "report.txt"
MODEL_COLUMNS = ("Pre-Q", "BF", "AF")


#
# Shared plumbing
#
def _output_dir(cfg: RunConfig) -> Path:
    directory = Path(cfg.output_dir)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"Cannot create output directory {directory}: {exc}") from exc
    write_resolved_config(cfg, directory)
    return directory


def _provenance(cfg: RunConfig, inputs: Mapping[str, Path]) -> Dict[str, Any]:
    return {
        "config_digest": cfg.digest().hex(),
        "inputs": {name: file_checksum(path).hex() for name, path in inputs.items()},
    }


def _model_metadata(cfg: RunConfig, inputs: Mapping[str, Path], **extra: Any):
    return {
        "config": cfg.to_yaml(),
        "provenance": json.dumps(_provenance(cfg, inputs), sort_keys=True),
        **{key: str(value) for key, value in extra.items()},
    }


def _write_json(path: Path, document: Mapping[str, Any]) -> None:
    path.write_text(json.dumps(document, indent=2, sort_keys=True))


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"No such file: {path}")
    return path


def _windows(cfg: RunConfig, log_path: Path) -> LabeledArrays:
    log = load_car_hacking_log(_require_file(log_path))
    arrays = window_arrays(log, cfg.window)
    if arrays.size == 0:
        raise EmptyDatasetError(f"{log_path} is too short for a single window")
    return arrays


def _splits(cfg: RunConfig, log_path: Path) -> Tuple[LabeledArrays, ...]:
    return split_dataset(_windows(cfg, log_path))


def _parse_attack_logs(entries: Sequence[str]) -> Dict[str, Path]:
    logs = {}
    for entry in entries:
        name, separator, path = entry.partition("=")
        if not separator or not name or not path:
            raise ConfigError(f"Expected ATTACK=PATH, got {entry!r}")
        logs[name] = Path(path)
    return logs


#
# Commands
#
def cmd_generate(cfg: RunConfig, args: argparse.Namespace) -> int:
    directory = _output_dir(cfg)
    kind = cfg.attack_kind
    target = Path(args.output) if args.output else directory / f"{kind.value}.csv"

    frames = generate_synthetic_log(cfg.synthetic_config(kind))
    try:
        write_log(frames, target)
    except OSError as exc:
        raise ConfigError(f"Cannot write {target}: {exc}") from exc

    counts = label_counts(frames)
    summary = {
        "attack": kind.value,
        "frames": len(frames),
        "label_counts": {label.name: count for label, count in counts.items()},
        "attack_fraction": attack_fraction(frames),
        "checksum": file_checksum(target).hex(),
        **_provenance(cfg, {}),
    }
    _write_json(target.with_suffix(".json"), summary)
    print(
        f"{target}: {len(frames)} frames, "
        + ", ".join(f"{label.name}={count}" for label, count in counts.items())
        + f", attack fraction {summary['attack_fraction']:.4f}"
    )
    return EXIT_OK


def _write_history(path: Path, records: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(HISTORY_COLUMNS)
        for record in records:
            writer.writerow(
                (
                    record.epoch,
                    repr(record.train_loss),
                    repr(record.val_loss),
                    repr(record.val_accuracy),
                    record.checkpoint or "",
                )
            )


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    directory = _output_dir(cfg)
    log_path = Path(args.log)
    train_part, val_part, _ = _splits(cfg, log_path)
    inputs = {"log": log_path}

    if args.transfer_from:
        parent_path = _require_file(Path(args.transfer_from))
        model, _ = load_model(parent_path)
        inputs["parent"] = parent_path
        if model.spec.layer_units != cfg.model.layer_units:
            raise DimensionMismatch(cfg.model.layer_units, model.spec.layer_units)
    else:
        model = init_model(cfg.model, cfg.seed)

    retain = None
    if args.retain_log:
        if not args.transfer_from:
            raise ConfigError("--retain-log only applies with --transfer-from")
        retain_path = Path(args.retain_log)
        retain = _windows(cfg, retain_path)
        inputs["retain"] = retain_path

    checkpoint_dir = directory / "checkpoints"
    checkpoint_dir.mkdir(exist_ok=True)
    records: List[EpochRecord] = []
    metadata = _model_metadata(cfg, inputs)

    def save_checkpoint(record: EpochRecord, snapshot: MlpModel) -> str:
        path = checkpoint_dir / f"epoch-{record.epoch:03d}.ckpt"
        save_model(snapshot, path, {**metadata, "epoch": str(record.epoch)})
        records.append(record._replace(checkpoint=str(path)))
        return str(path)

    train_cfg = cfg.train_config()
    if train_cfg.epochs == 0:
        untrained = EpochRecord(0, math.nan, math.nan, math.nan, None)
        save_checkpoint(untrained, model)
        best = model
    elif args.transfer_from:
        best = transfer_train(
            model,
            train_part,
            train_cfg,
            validation=val_part,
            retain=retain,
            on_epoch_end=save_checkpoint,
        )
    else:
        best, _ = train(
            model, train_part, val_part, train_cfg, on_epoch_end=save_checkpoint
        )

    save_model(best, directory / MODEL_FILE, metadata)
    _write_history(directory / HISTORY_FILE, [r for r in records if r.epoch > 0])
    print(f"{directory / MODEL_FILE}: {len(records)} checkpoints")
    return EXIT_OK


def cmd_quantize(cfg: RunConfig, args: argparse.Namespace) -> int:
    directory = _output_dir(cfg)
    model_path = _require_file(Path(args.model))
    log_path = Path(args.log)
    inputs = {"model": model_path, "log": log_path}

    model, _ = load_model(model_path)
    folded = fold_batchnorm(model)
    train_part, val_part, _ = _splits(cfg, log_path)

    calib = calibration_set(train_part, cfg.quant.calibration_size, cfg.seed)
    scales = calibrate(folded, calib)
    before = quantize(folded, scales)
    saturation = saturation_report(before, calib)
    after = finetune_qat(
        folded,
        scales,
        train_part,
        val_part,
        cfg.qat_config(),
        epochs=cfg.quant.qat_epochs,
    )

    save_quant_model(before, directory / BF_MODEL_FILE, _model_metadata(cfg, inputs))
    save_quant_model(after, directory / AF_MODEL_FILE, _model_metadata(cfg, inputs))
    _write_json(
        directory / "quantization.json",
        {
            "fraction_bits": scales_summary(scales),
            "saturation": {
                name: {"saturated": count.saturated, "total": count.total}
                for name, count in saturation.items()
            },
            "source_hash": HexBytes(before.source_hash).hex(),
            **_provenance(cfg, inputs),
        },
    )
    print(f"{directory / BF_MODEL_FILE}, {directory / AF_MODEL_FILE}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    directory = _output_dir(cfg)
    logs = _parse_attack_logs(args.log)
    if not logs:
        raise ConfigError("evaluate needs at least one --log ATTACK=PATH")

    variants = {}
    inputs: Dict[str, Path] = {}
    if args.model:
        inputs["model"] = _require_file(Path(args.model))
        variants["Pre-Q"] = load_model(inputs["model"])[0]
    for column, option in (("BF", args.qmodel_bf), ("AF", args.qmodel_af)):
        if option:
            inputs[column] = _require_file(Path(option))
            variants[column] = load_quant_model(inputs[column])[0]
    if not variants:
        raise ConfigError("evaluate needs --model, --qmodel-bf or --qmodel-af")

    threshold = cfg.quant.threshold
    results: Dict[str, Dict[str, MetricsReport]] = {}
    for attack, log_path in logs.items():
        inputs[f"log:{attack}"] = log_path
        arrays = _windows(cfg, log_path)
        if args.split == "test":
            arrays = split_dataset(arrays)[2]
        if arrays.size == 0:
            raise EmptyDatasetError(f"No {args.split} windows in {log_path}")
        results[attack] = {
            column: (
                evaluate(variant, arrays, threshold)
                if isinstance(variant, MlpModel)
                else evaluate_quantized(variant, arrays, threshold)
            )
            for column, variant in variants.items()
        }

    document = {
        "threshold": threshold,
        "split": args.split,
        "results": {
            attack: {column: report.as_dict() for column, report in reports.items()}
            for attack, reports in results.items()
        },
        **_provenance(cfg, inputs),
    }
    _write_json(directory / EVALUATION_FILE, document)
    text = _evaluation_text(results)
    (directory / "evaluation.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def _evaluation_text(results: Mapping[str, Mapping[str, MetricsReport]]) -> str:
    columns = tuple(
        column
        for column in MODEL_COLUMNS
        if any(column in reports for reports in results.values())
    )
    final_column = columns[-1]
    matrices = {
        attack: reports[final_column].confusion
        for attack, reports in results.items()
        if final_column in reports
    }
    return "\n\n".join(
        (
            comparison_table(results, columns),
            f"Confusion matrices ({final_column})",
            confusion_table(matrices),
        )
    )


def cmd_replay(cfg: RunConfig, args: argparse.Namespace) -> int:
    directory = _output_dir(cfg)
    inputs = {
        "detector_1": _require_file(Path(args.detector_1)),
        "detector_2": _require_file(Path(args.detector_2)),
        "log": _require_file(Path(args.log)),
    }
    pair = DetectorPair(
        load_quant_model(inputs["detector_1"])[0],
        load_quant_model(inputs["detector_2"])[0],
    )
    log = load_car_hacking_log(inputs["log"])
    if args.frames:
        log = log[: args.frames]

    report = replay(
        log,
        pair,
        cfg.replay_mode,
        window_config=cfg.window,
        threshold=cfg.quant.threshold,
        queue_depth=cfg.replay.queue_depth,
        speed=cfg.replay.speed,
    )
    write_verdicts_csv(report.verdicts, directory / VERDICTS_FILE)

    extra: Dict[str, Any] = {
        "verdicts_file": VERDICTS_FILE,
        **_provenance(cfg, inputs),
    }
    if args.batch_size and report.verdict_count:
        features = window_arrays(log, cfg.window).features
        extra["batch_latency"] = measure_batch_latency(
            pair, features, args.batch_size
        )._asdict()
    (directory / REPLAY_FILE).write_text(report_to_json(report, **extra))

    print(
        f"{report.verdict_count} verdicts, {report.warm_up_skipped} warm-up frames, "
        f"{report.throughput:.0f} msg/s (~{report.line_rate_kbps:.0f} kbps at "
        f"{report.frame_bits} bits/frame)"
    )
    return EXIT_OK


def _report_from_dict(entry: Mapping[str, Any]) -> MetricsReport:
    report = derive_metrics(ConfusionMatrix(**entry["confusion"]))
    return replace(report, auc=entry.get("auc"))


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    source = Path(args.input_dir)
    if not source.is_dir():
        raise FileNotFoundError(f"No such directory: {source}")

    sections = []
    for path in sorted(source.rglob(EVALUATION_FILE)):
        document = json.loads(path.read_text())
        results = {
            attack: {
                column: _report_from_dict(entry) for column, entry in reports.items()
            }
            for attack, reports in document["results"].items()
        }
        sections.append(f"# {path.parent}\n\n{_evaluation_text(results)}")
    for path in sorted(source.rglob(REPLAY_FILE)):
        document = json.loads(path.read_text())
        latency = document["latency_seconds"]
        p99 = latency["p99"]
        sections.append(
            f"# {path.parent}\n\n"
            f"verdicts {document['verdict_count']}, "
            f"throughput {document['throughput_messages_per_second']:.0f} msg/s, "
            f"line rate {document['line_rate_kbps']:.0f} kbps, "
            f"p99 latency {'n/a' if p99 is None else f'{p99 * 1e6:.1f} us'}"
        )
    if not sections:
        raise EmptyDatasetError(f"No evaluation or replay results under {source}")

    text = "\n\n".join(sections)
    target = Path(args.output) if args.output else source / REPORT_FILE
    target.write_text(text + "\n")
    print(text)
    return EXIT_OK


#
# Entry point
#
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canids", description="INT8 intrusion detection for CAN bus traffic"
    )
    parser.add_argument("--config", help="RunConfig YAML; defaults apply when omitted")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output-dir")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="write a synthetic labeled log")
    generate.add_argument("--attack", help="DoS, Fuzzy, SpoofRpm or SpoofGear")
    generate.add_argument("--duration", type=float)
    generate.add_argument("--output", help="CSV path; defaults into --output-dir")
    generate.set_defaults(handler=cmd_generate)

    train_parser = commands.add_parser("train", help="train a float detector")
    train_parser.add_argument("--log", required=True)
    train_parser.add_argument("--epochs", type=int)
    train_parser.add_argument("--transfer-from", help="checkpoint to continue from")
    train_parser.add_argument(
        "--retain-log", help="first-attack log rehearsed during --transfer-from"
    )
    train_parser.set_defaults(handler=cmd_train)

    quantize_parser = commands.add_parser(
        "quantize", help="INT8 models before and after fine-tuning"
    )
    quantize_parser.add_argument("--model", required=True)
    quantize_parser.add_argument("--log", required=True)
    quantize_parser.add_argument("--qat-epochs", type=int)
    quantize_parser.set_defaults(handler=cmd_quantize)

    evaluate_parser = commands.add_parser("evaluate", help="metrics per attack log")
    evaluate_parser.add_argument("--model", help="float checkpoint (Pre-Q column)")
    evaluate_parser.add_argument("--qmodel-bf")
    evaluate_parser.add_argument("--qmodel-af")
    evaluate_parser.add_argument(
        "--log", action="append", default=[], metavar="ATTACK=PATH"
    )
    evaluate_parser.add_argument("--split", choices=("test", "all"), default="test")
    evaluate_parser.set_defaults(handler=cmd_evaluate)

    replay_parser = commands.add_parser(
        "replay", help="stream a log through both detectors"
    )
    replay_parser.add_argument("--detector-1", required=True)
    replay_parser.add_argument("--detector-2", required=True)
    replay_parser.add_argument("--log", required=True)
    replay_parser.add_argument("--mode", choices=("max-rate", "timestamped"))
    replay_parser.add_argument("--frames", type=int, help="replay only the first N")
    replay_parser.add_argument(
        "--batch-size", type=int, default=0, help="also time batch inference"
    )
    replay_parser.set_defaults(handler=cmd_replay)

    report_parser = commands.add_parser("report", help="tables from earlier results")
    report_parser.add_argument("--input-dir", required=True)
    report_parser.add_argument("--output")
    report_parser.set_defaults(handler=cmd_report)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "seed": args.seed,
        "output_dir": args.output_dir,
        "synthetic.attack": getattr(args, "attack", None),
        "synthetic.duration": getattr(args, "duration", None),
        "train.epochs": getattr(args, "epochs", None),
        "quant.qat_epochs": getattr(args, "qat_epochs", None),
        "replay.mode": getattr(args, "mode", None),
    }


def configure_logging(verbosity: int) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        cfg = load_config(args.config).override(_overrides(args))
        return args.handler(cfg, args)
    except (ConfigError, ValidationError) as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG_ERROR
    except (
        FrameParseError,
        EmptyDatasetError,
        CorruptModelFile,
        DimensionMismatch,
        FileNotFoundError,
    ) as exc:
        logger.error("Data error: %s", exc)
        return EXIT_DATA_ERROR
    except (NonFiniteLossError, BiasOverflow, CalibrationError) as exc:
        logger.error("Numeric failure: %s", exc)
        return EXIT_NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
