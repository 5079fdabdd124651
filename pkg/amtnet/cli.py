"""Command line entry-point for the recognition pipeline."""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml

from .config import RunConfig, apply_overrides, build_run_config, deep_merge, dump_run_config, read_config_file
from .dataset import (
    AUX_TASKS,
    CATEGORIES,
    Factor,
    IngestFailure,
    LabeledFeatures,
    RecordingMeta,
    SplitEntry,
    SplitManifest,
    build_split,
    featurize_segments,
    load_shipsear,
    load_split_manifest,
    preprocess_recordings,
    read_wav,
    segment_recording,
)
from .errors import AmtError, ConfigError, InvalidInput
from .evaluation import (
    evaluate,
    export_embeddings,
    multi_seed_report,
    read_embedding_index,
    report_from_results,
    robustness_analysis,
)
from .feature_cache import cache_file_name, cache_fingerprint, read_matrix, write_feature_cache
from .network import infer, load_checkpoint, parameter_count, prune_aux, save_checkpoint
from .plotting import plot_embedding_scatter, plot_feature_map, project_tsne
from .signal_pipeline import FeatureConfig, FeatureKind, Waveform, extract_features, preprocess
from .synthetic import generate_synthetic, synthetic_split, write_synthetic_corpus
from .training import train

LOGGER = logging.getLogger(__name__)

_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]

# argparse destination -> dotted config key
_OVERRIDES = {
    "seed": "seed",
    "out": "out",
    "feature": "data.feature",
    "factor": "train.factor",
    "synthetic": "data.synthetic",
    "data_root": "data.root",
    "metadata": "data.metadata",
    "split": "data.split",
    "jobs": "data.jobs",
    "epochs": "train.epochs",
    "variant": "train.variant",
    "width": "train.width",
}


def _setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format="%(levelname)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration; flags override its values.")
    common.add_argument("--seed", type=int, help="Global seed (default: 123).")
    common.add_argument("--out", help="Output directory (default: runs/amtnet).")
    common.add_argument("--log-level", default="INFO", choices=_LOG_LEVELS, help="Logging level (default: INFO).")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--feature", choices=[kind.value for kind in FeatureKind], help="Time-frequency feature.")
    data.add_argument("--factor", choices=[factor.value for factor in Factor], help="Influential factor of the auxiliary task.")
    data.add_argument(
        "--synthetic",
        action="store_true",
        default=None,
        help="Use the generated desk-scale corpus instead of recordings on disk.",
    )
    data.add_argument("--data-root", help="Corpus directory with WAV files named by id (default: $AMT_DATA_ROOT).")
    data.add_argument("--metadata", help="Metadata manifest (default: <data-root>/metadata.csv).")
    data.add_argument("--split", help="Split manifest YAML (default: the packaged ShipsEar split).")

    parser = argparse.ArgumentParser(description="Adversarial multi-task underwater target recognition")
    commands = parser.add_subparsers(dest="command", required=True)

    extract = commands.add_parser("extract", parents=[common, data], help="Cache segment features.")
    _add_force_flag(extract)
    extract.add_argument("--jobs", type=int, help="Worker processes (default: 1).")

    commands.add_parser("synth", parents=[common], help="Write the synthetic corpus as WAV files plus manifests.")

    train_cmd = commands.add_parser("train", parents=[common, data], help="Train a model.")
    _add_training_flags(train_cmd)
    _add_force_flag(train_cmd)

    report = commands.add_parser("report", parents=[common, data], help="Train and score over several seeds.")
    _add_training_flags(report)
    _add_force_flag(report)
    report.add_argument("--seeds", type=int, nargs="+", help="Seeds (default: 123 3407).")

    eval_cmd = commands.add_parser("eval", parents=[common, data], help="Score a checkpoint on the test split.")
    eval_cmd.add_argument("--checkpoint", required=True)
    _add_force_flag(eval_cmd)

    predict = commands.add_parser("predict", parents=[common], help="Classify WAV files.")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("inputs", nargs="+", help="WAV files")

    embed_cmd = commands.add_parser("embed", parents=[common, data], help="Export embeddings of a split.")
    embed_cmd.add_argument("--checkpoint", required=True)
    embed_cmd.add_argument("--subset", choices=["train", "test"], default="test")
    _add_force_flag(embed_cmd)

    prune = commands.add_parser("prune", parents=[common], help="Drop the auxiliary branch of a checkpoint.")
    prune.add_argument("--checkpoint", required=True)

    similarity = commands.add_parser("similarity", parents=[common, data], help="Cross-recording embedding similarity.")
    similarity.add_argument("--checkpoint", required=True)
    similarity.add_argument("--ids", type=int, nargs="+", help="Recording ids (default: 11 36 65).")

    plot = commands.add_parser("plot", parents=[common, data], help="Feature images and embedding scatters.")
    plot.add_argument("--kind", choices=["spectrogram", "embedding"], required=True)
    plot.add_argument("--input", nargs="*", default=[], help="WAV files to draw (spectrogram kind).")
    plot.add_argument("--recording", type=int, nargs="*", default=[], help="Corpus recording ids to draw.")
    plot.add_argument("--embeddings", help="Export stem written by the embed command (embedding kind).")
    plot.add_argument("--matrix", choices=["repr", "embed"], default="repr", help="Which exported matrix to project.")
    return parser


def _add_force_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--force", action="store_true", help="Recompute feature caches that already exist.")


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, help="Training epochs (default: 200).")
    parser.add_argument("--no-adversarial", action="store_true", help="Plain multi-task training (MTNet).")
    parser.add_argument("--variant", choices=["amtnet", "mtnet", "resnet18"], help="Model variant.")
    parser.add_argument("--width", type=float, help="Channel width multiplier (default: 1.0).")


def _collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {key: getattr(args, dest) for dest, key in _OVERRIDES.items() if getattr(args, dest, None) is not None}
    if getattr(args, "no_adversarial", False):
        overrides["train.variant"] = "mtnet"
    return overrides


def _resolve_config(args: argparse.Namespace, base: Optional[Dict[str, Any]] = None) -> RunConfig:
    raw: Dict[str, Any] = {}
    if base:
        deep_merge(raw, base)
    if args.config:
        deep_merge(raw, read_config_file(args.config))
    apply_overrides(raw, _collect_overrides(args))
    return build_run_config(raw)


def _prepare_output(run: RunConfig) -> Path:
    out = Path(run.out).expanduser()
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(run, out)
    return out


def _print_failure_summary(failures: List[IngestFailure]) -> None:
    if not failures:
        return
    print("\nIngestion failures:")
    for failure in failures:
        location = failure.source or "<input>"
        print(f" - {location}: recording {failure.recording_id}: {failure.reason}")


def _write_failure_log(failures: List[IngestFailure], out: Path) -> None:
    if not failures:
        return
    directory = out / "ingest_log"
    directory.mkdir(parents=True, exist_ok=True)
    timestamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    log_path = directory / f"ingest_failures_{timestamp}.log"
    with log_path.open("w", encoding="utf-8") as handle:
        handle.write(f"Ingestion failures collected at {datetime.now().isoformat()}\n\n")
        for failure in failures:
            location = failure.source or "<input>"
            handle.write(f"{location}\n  recording {failure.recording_id}: {failure.reason}\n")
    print(f"Ingestion log written to {log_path}")


# ---------------------------------------------------------------------------
# Corpus helpers


def _load_corpus(
    run: RunConfig,
    failures: List[IngestFailure],
) -> Tuple[List[Tuple[RecordingMeta, Waveform]], SplitManifest]:
    if run.data.synthetic:
        recordings = generate_synthetic(run.synthetic, run.seed)
        return recordings, synthetic_split(recordings, run.synthetic.test_fraction, run.seed)
    if not run.data.root:
        raise ConfigError(["data.root is not set (use --data-root, the config file or AMT_DATA_ROOT)"])
    root = Path(run.data.root).expanduser()
    metadata = Path(run.data.metadata).expanduser() if run.data.metadata else root / "metadata.csv"
    recordings = load_shipsear(root, metadata, failures=failures)
    split_path = run.data.split
    if split_path is None and (root / "split.yaml").exists():
        split_path = str(root / "split.yaml")
    return recordings, load_split_manifest(split_path)


def _cache_dir(run: RunConfig) -> Path:
    """Feature cache directory of this run's feature and corpus settings."""
    base = Path(run.data.cache_dir).expanduser() if run.data.cache_dir else Path(run.out).expanduser() / "cache"
    if run.data.synthetic:
        corpus: Dict[str, Any] = {"synthetic": asdict(run.synthetic), "seed": run.seed}
    else:
        corpus = {"root": str(Path(run.data.root or ".").expanduser().resolve()), "metadata": run.data.metadata}
    return base / cache_fingerprint(run.features, segment_s=run.data.segment_s, corpus=corpus)


def _featurized_split(
    run: RunConfig,
    failures: List[IngestFailure],
    force: bool = False,
) -> Tuple[LabeledFeatures, LabeledFeatures]:
    recordings, manifest = _load_corpus(run, failures)
    prepared = preprocess_recordings(recordings, run.features)
    train_segments, test_segments = build_split(manifest, prepared, run.data.segment_s, run.data.hop_s)
    cache = _cache_dir(run)
    kind = run.data.feature_kind
    return (
        featurize_segments(train_segments, kind, run.features, cache, force),
        featurize_segments(test_segments, kind, run.features, cache, force),
    )


def _extract_recording(
    meta: RecordingMeta,
    wave: Waveform,
    entries: Sequence[SplitEntry],
    features: FeatureConfig,
    kind: FeatureKind,
    segment_s: float,
    hop_s: float,
    cache_dir: Path,
    force: bool,
) -> Tuple[int, int]:
    prepared = preprocess(wave, features)
    ranges = [(entry.start_s, entry.end_s) for entry in entries] or [(0.0, None)]
    written = skipped = 0
    for start_s, end_s in ranges:
        for segment in segment_recording(meta, prepared, segment_s, hop_s, start_s, end_s):
            path = cache_dir / cache_file_name(str(meta.recording_id), segment.start_s, kind)
            if path.exists() and not force:
                skipped += 1
                continue
            write_feature_cache(path, extract_features(segment.waveform, kind, features))
            written += 1
    return written, skipped


def cmd_extract(args: argparse.Namespace) -> int:
    run = _resolve_config(args)
    out = _prepare_output(run)
    failures: List[IngestFailure] = []
    recordings, manifest = _load_corpus(run, failures)
    cache = _cache_dir(run)
    kind = run.data.feature_kind
    jobs = [
        (meta, wave, [entry for _, entry in manifest.entries_for(meta.recording_id)])
        for meta, wave in recordings
    ]
    written = skipped = 0

    def record(meta: RecordingMeta, exc: AmtError) -> None:
        LOGGER.warning("Recording %d failed: %s", meta.recording_id, exc)
        failures.append(IngestFailure(source=None, recording_id=meta.recording_id, reason=str(exc)))

    if run.data.jobs > 1:
        with ProcessPoolExecutor(max_workers=run.data.jobs) as pool:
            futures = {
                pool.submit(
                    _extract_recording, meta, wave, entries, run.features, kind,
                    run.data.segment_s, run.data.hop_s, cache, args.force,
                ): meta
                for meta, wave, entries in jobs
            }
            for future in as_completed(futures):
                try:
                    w, s = future.result()
                except AmtError as exc:
                    record(futures[future], exc)
                    continue
                written, skipped = written + w, skipped + s
    else:
        for meta, wave, entries in jobs:
            try:
                w, s = _extract_recording(
                    meta, wave, entries, run.features, kind, run.data.segment_s, run.data.hop_s, cache, args.force
                )
            except AmtError as exc:
                record(meta, exc)
                continue
            written, skipped = written + w, skipped + s

    print(f"{written} feature caches written, {skipped} already present, in {cache}")
    _print_failure_summary(failures)
    _write_failure_log(failures, out)
    return 1 if failures else 0


def cmd_synth(args: argparse.Namespace) -> int:
    run = _resolve_config(args)
    out = _prepare_output(run)
    recordings = generate_synthetic(run.synthetic, run.seed)
    manifest = synthetic_split(recordings, run.synthetic.test_fraction, run.seed)
    root = write_synthetic_corpus(recordings, out / "corpus", manifest)
    print(f"{len(recordings)} synthetic recordings written to {root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run = _resolve_config(args)
    out = _prepare_output(run)
    failures: List[IngestFailure] = []
    train_data, test_data = _featurized_split(run, failures, args.force)
    config = run.train_config()
    outcome = train(config, train_data, run_log=out / "run_log.jsonl")
    snapshot = run.to_dict()
    factor = config.active_factor.value
    save_checkpoint(out / "best.pt", outcome.best_model, snapshot, factor)
    save_checkpoint(out / "final.pt", outcome.model, snapshot, factor)
    result = evaluate(outcome.best_model, test_data, factor, run.evaluation.batch_size, seed=run.seed)
    report_from_results([result], run.evaluation.stdev_convention, factor).write_yaml(out / "eval_report.yaml")
    print(f"Best epoch {outcome.best_epoch + 1}; test accuracy {result.accuracy * 100:.2f}%")
    if result.aux_accuracy is not None:
        print(f"Auxiliary ({factor}) test accuracy {result.aux_accuracy * 100:.2f}%")
    print(f"Checkpoints and run log written to {out}")
    _print_failure_summary(failures)
    _write_failure_log(failures, out)
    return 1 if failures else 0


def cmd_report(args: argparse.Namespace) -> int:
    run = _resolve_config(args)
    out = _prepare_output(run)
    failures: List[IngestFailure] = []
    train_data, test_data = _featurized_split(run, failures, args.force)
    seeds = args.seeds or list(run.evaluation.seeds)
    report = multi_seed_report(
        run.train_config(),
        train_data,
        test_data,
        seeds,
        run.evaluation.stdev_convention,
        log_dir=out,
    )
    report.write_yaml(out / "report.yaml")
    for line in report.summary_lines():
        print(line)
    _print_failure_summary(failures)
    _write_failure_log(failures, out)
    return 1 if failures else 0


def _load_model(args: argparse.Namespace) -> Tuple[Any, Dict[str, Any], RunConfig]:
    """Checkpoint plus its run configuration.

    Outputs go to ``<training out>/<command>`` unless another directory is
    chosen, and feature caches are shared with the training run.
    """
    model, meta = load_checkpoint(args.checkpoint)
    run = _resolve_config(args, base=meta.get("config"))
    trained_out = Path(str((meta.get("config") or {}).get("out", run.out))).expanduser()
    if not run.data.cache_dir:
        run = replace(run, data=replace(run.data, cache_dir=str(trained_out / "cache")))
    if Path(run.out).expanduser() == trained_out:
        run = replace(run, out=str(trained_out / args.command))
    return model, meta, run


def cmd_eval(args: argparse.Namespace) -> int:
    model, meta, run = _load_model(args)
    out = _prepare_output(run)
    failures: List[IngestFailure] = []
    _, test_data = _featurized_split(run, failures, args.force)
    factor = meta.get("factor") or run.train.factor
    result = evaluate(model, test_data, factor, run.evaluation.batch_size, seed=run.seed)
    report = report_from_results([result], run.evaluation.stdev_convention, factor)
    report.write_yaml(out / "eval_report.yaml")
    print(f"Segment accuracy: {result.accuracy * 100:.2f}% on {len(test_data)} segments")
    if result.aux_accuracy is not None:
        print(f"Auxiliary ({factor}) accuracy: {result.aux_accuracy * 100:.2f}%")
    print("Per-class correct/total:")
    for index, name in enumerate(CATEGORIES[: result.confusion.shape[0]]):
        total = int(result.confusion[index].sum())
        if total:
            print(f" - {name}: {int(result.confusion[index, index])}/{total}")
    _print_failure_summary(failures)
    _write_failure_log(failures, out)
    return 1 if failures else 0


def _windows(wave: Waveform, segment_s: float, hop_s: float) -> List[Tuple[float, Waveform]]:
    rate = wave.sample_rate
    length, hop = int(round(segment_s * rate)), int(round(hop_s * rate))
    if wave.samples.size < length:
        LOGGER.warning("Input shorter than %.0f s; classifying it as a single window", segment_s)
        return [(0.0, wave)]
    return [
        (offset / rate, Waveform(wave.samples[offset : offset + length], rate))
        for offset in range(0, wave.samples.size - length + 1, hop)
    ]


def cmd_predict(args: argparse.Namespace) -> int:
    model, _, run = _load_model(args)
    out = _prepare_output(run)
    kind = run.data.feature_kind
    rows: List[str] = []
    failures: List[IngestFailure] = []
    for source in args.inputs:
        try:
            wave = preprocess(read_wav(source), run.features)
        except AmtError as exc:
            failures.append(IngestFailure(source=source, recording_id=None, reason=str(exc)))
            continue
        windows = _windows(wave, run.data.segment_s, run.data.hop_s)
        stacked = np.stack([extract_features(w, kind, run.features).data for _, w in windows]).astype(np.float32)
        p, _ = infer(model, torch.from_numpy(stacked).unsqueeze(1), run.evaluation.batch_size)
        for (start_s, _), probs in zip(windows, p):
            label = int(np.argmax(probs))
            rows.append(f"{source}\t{start_s:.1f}\t{CATEGORIES[label]}\t{probs[label]:.4f}")
            print(f"{source} @ {start_s:.1f}s: {CATEGORIES[label]} ({probs[label]:.4f})")
    target = out / "predictions.tsv"
    with target.open("w", encoding="utf-8") as handle:
        handle.write("file\tstart_s\tclass\tprobability\n")
        handle.writelines(row + "\n" for row in rows)
    _print_failure_summary(failures)
    _write_failure_log(failures, out)
    return 1 if failures else 0


def cmd_embed(args: argparse.Namespace) -> int:
    model, _, run = _load_model(args)
    out = _prepare_output(run)
    failures: List[IngestFailure] = []
    train_data, test_data = _featurized_split(run, failures, args.force)
    data = train_data if args.subset == "train" else test_data
    export = export_embeddings(model, data, out / "embeddings" / args.subset, run.evaluation.batch_size)
    print(f"Embeddings: {export.embeddings}\nRepresentations: {export.representations}\nIndex: {export.index}")
    _print_failure_summary(failures)
    _write_failure_log(failures, out)
    return 1 if failures else 0


def cmd_prune(args: argparse.Namespace) -> int:
    model, meta, run = _load_model(args)
    out = _prepare_output(run)
    if model.pruned:
        raise InvalidInput(f"{args.checkpoint} is already pruned")
    pruned = prune_aux(model)
    target = save_checkpoint(out / "pruned.pt", pruned, meta.get("config"), meta.get("factor"))
    full, kept = parameter_count(model), parameter_count(pruned)
    print(f"Pruned checkpoint written to {target}: {kept} of {full} parameters kept ({kept / full:.1%})")
    return 0


def cmd_similarity(args: argparse.Namespace) -> int:
    model, _, run = _load_model(args)
    out = _prepare_output(run)
    failures: List[IngestFailure] = []
    recordings, _ = _load_corpus(run, failures)
    wanted = args.ids or list(run.evaluation.robustness_ids)
    by_id = {meta.recording_id: (meta, wave) for meta, wave in recordings}
    missing = [rid for rid in wanted if rid not in by_id]
    if missing:
        raise InvalidInput(f"recordings not found in the corpus: {missing}")
    table = robustness_analysis(
        model, [by_id[rid] for rid in wanted], run.data.feature_kind, run.features, run.evaluation.window_s
    )
    with (out / "similarity.yaml").open("w", encoding="utf-8") as handle:
        yaml.safe_dump(table.to_dict(), handle, sort_keys=False)
    for a, b, sim in table.pairs:
        print(f"{a} vs {b}: {sim:.4f}")
    print(f"Average: {table.average:.4f}")
    _print_failure_summary(failures)
    _write_failure_log(failures, out)
    return 1 if failures else 0


def _plot_spectrograms(args: argparse.Namespace, run: RunConfig, out: Path, failures: List[IngestFailure]) -> int:
    kind = run.data.feature_kind
    sources: List[Tuple[str, Waveform]] = [(Path(path).stem, read_wav(path)) for path in args.input]
    if args.recording:
        recordings, _ = _load_corpus(run, failures)
        by_id = {meta.recording_id: wave for meta, wave in recordings}
        for rid in args.recording:
            if rid not in by_id:
                raise InvalidInput(f"recording {rid} not found in the corpus")
            sources.append((str(rid), by_id[rid]))
    if not sources:
        raise InvalidInput("plot --kind spectrogram needs --input or --recording")
    for stem, wave in sources:
        prepared = preprocess(wave, run.features)
        opening = prepared.slice_seconds(0.0, min(prepared.duration, run.data.segment_s))
        path = plot_feature_map(extract_features(opening, kind, run.features), out / "plots" / f"{stem}_{kind.value}.png")
        print(f"Plot written to {path}")
    return 0


def _plot_embeddings(args: argparse.Namespace, run: RunConfig, out: Path) -> int:
    if not args.embeddings:
        raise InvalidInput("plot --kind embedding needs --embeddings <export stem>")
    stem = Path(args.embeddings)
    _, matrix = read_matrix(stem.with_name(f"{stem.name}.{args.matrix}.amtf"))
    index = read_embedding_index(stem.with_name(f"{stem.name}.index.tsv"))
    points = project_tsne(matrix, run.evaluation.tsne_perplexity, run.seed)
    colorings = {"category": [row["category"] for row in index]}
    for factor in Factor:
        spec = AUX_TASKS[factor]
        colorings[factor.value] = [spec.describe(int(row[factor.value])) for row in index]
    for name, labels in colorings.items():
        path = plot_embedding_scatter(points, labels, out / "plots" / f"{stem.name}_{args.matrix}_{name}.png", f"by {name}")
        print(f"Plot written to {path}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    run = _resolve_config(args)
    out = _prepare_output(run)
    failures: List[IngestFailure] = []
    if args.kind == "spectrogram":
        _plot_spectrograms(args, run, out, failures)
    else:
        _plot_embeddings(args, run, out)
    _print_failure_summary(failures)
    _write_failure_log(failures, out)
    return 1 if failures else 0


_COMMANDS = {
    "extract": cmd_extract,
    "synth": cmd_synth,
    "train": cmd_train,
    "report": cmd_report,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "embed": cmd_embed,
    "prune": cmd_prune,
    "similarity": cmd_similarity,
    "plot": cmd_plot,
}


def run_cli(args: argparse.Namespace) -> int:
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return 2
    except (AmtError, OSError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    return run_cli(args)


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
