import sys
import json
import argparse
import logging
import traceback
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from config.settings import Settings
from utils.logger import setup_logger
from utils.exceptions import DiarizationError, ParseError, ValidationError
from diarization.clustering import cluster_tracks, write_partition
from diarization.diarizer import DiarizationPipeline, diarize_batch
from diarization.formats import (
    Diarization,
    discover_bundles,
    read_bundle,
    read_rttm,
    read_uem,
    write_bundle,
    write_rttm_many,
)
from diarization.metrics import dataset_stats, score_recordings
from diarization.simgen import ScenarioSpec, generate_dataset
from diarization.timeline import Timeline, seconds_to_ms
from diarization.tracker import build_tracks, write_tracks
from diarization.tuner import GridSpec, tune

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INTERNAL = 2


class ArgumentParser(argparse.ArgumentParser):
    """Argument errors exit with the validation code instead of argparse's 2."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _read_text(path: str) -> str:
    file_path = Path(path)
    if not file_path.is_file():
        raise ValidationError(f"{path}: no such file")
    return file_path.read_text(encoding="utf-8")


def _parse_file(path: str, parser: Callable[[str], object]):
    """Run a text parser on a file, naming the file in parse errors."""
    text = _read_text(path)
    try:
        return parser(text)
    except ParseError as e:
        error = ParseError(f"{path}: {e}")
        error.line_number = e.line_number
        raise error from e


def _collar_ms(value: str) -> int:
    try:
        collar = seconds_to_ms(value)
    except ValueError as e:
        raise ValidationError(f"bad --collar: {e}")
    if collar < 0:
        raise ValidationError(f"--collar must be >= 0, got {value}")
    return collar


def cmd_score(args: argparse.Namespace, settings: Settings, logger: logging.Logger) -> int:
    refs = _parse_file(args.ref, read_rttm)
    hyps = _parse_file(args.hyp, read_rttm)
    uem = _parse_file(args.uem, read_uem) if args.uem else None
    if not refs:
        raise ValidationError(f"{args.ref}: no reference turns")
    table, total = score_recordings(refs, hyps, _collar_ms(args.collar), uem)

    if args.json:
        report = {"aggregate": total.to_dict()}
        if args.per_file:
            report["recordings"] = table.to_dict(orient="records")
        print(json.dumps(report, indent=2))
        return EXIT_OK
    if args.per_file:
        width = max(len(r) for r in table["recording_id"])
        for row in table.itertuples(index=False):
            print(
                f"{row.recording_id:<{width}}  MS {row.ms_pct:.1f} FA {row.fa_pct:.1f} "
                f"SC {row.sc_pct:.1f} DER {row.der_pct:.1f}"
            )
    if total.undefined:
        logger.warning("No scored reference speech: DER is undefined and reported as inf")
    print(total.format_row())
    return EXIT_OK


def cmd_diarize(args: argparse.Namespace, settings: Settings, logger: logging.Logger) -> int:
    cfg = settings.pipeline_config()
    paths = discover_bundles(args.inputs)
    if not paths:
        raise ValidationError(f"no recording bundles found under {args.inputs}")
    logger.info(f"Found {len(paths)} recordings to diarize")

    processing = settings.get("processing")
    results = diarize_batch(paths, cfg, processing["parallel"], processing["max_workers"])
    diarizations: List[Diarization] = [r["diarization"] for r in results if r["success"]]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(write_rttm_many(diarizations), encoding="utf-8")
    print(f"Diarized {len(diarizations)}/{len(results)} recordings -> {out}")

    failed = [r for r in results if not r["success"]]
    for r in failed:
        print(r["error"], file=sys.stderr)
    if any(r.get("internal") for r in failed):
        return EXIT_INTERNAL
    return EXIT_INVALID if failed else EXIT_OK


def cmd_track(args: argparse.Namespace, settings: Settings, logger: logging.Logger) -> int:
    cfg = settings.pipeline_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in discover_bundles(args.inputs):
        bundle = read_bundle(path)
        tracks = build_tracks(
            bundle.detections, bundle.shots, bundle.frame_rate_hz, cfg.iou_threshold, cfg.max_frame_skip
        )
        target = out / f"{bundle.recording_id}.tracks.jsonl"
        target.write_text(write_tracks(tracks), encoding="utf-8")
        print(f"{bundle.recording_id}: {len(tracks)} tracks -> {target}")
    return EXIT_OK


def cmd_cluster(args: argparse.Namespace, settings: Settings, logger: logging.Logger) -> int:
    cfg = settings.pipeline_config()
    pipeline = DiarizationPipeline(cfg, logger)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in discover_bundles(args.inputs):
        bundle = read_bundle(path)
        tracks = pipeline.tracks(bundle)
        partition = cluster_tracks(tracks, cfg.face_cluster_threshold)
        target = out / f"{bundle.recording_id}.partition.jsonl"
        target.write_text(write_partition(partition), encoding="utf-8")
        print(f"{bundle.recording_id}: {len(tracks)} tracks, {partition.n_clusters} identities -> {target}")
    return EXIT_OK


def cmd_tune(args: argparse.Namespace, settings: Settings, logger: logging.Logger) -> int:
    base = settings.pipeline_config()
    grid = GridSpec.from_yaml(args.grid, base)
    refs = _parse_file(args.refs, read_rttm)

    bundles = []
    for path in discover_bundles(args.dev):
        try:
            bundles.append(read_bundle(path))
        except DiarizationError as e:
            if args.strict:
                raise
            logger.warning(f"Skipping dev bundle {path}: {str(e)}")
    if not bundles:
        raise ValidationError(f"no usable recording bundles under {args.dev}")

    processing = settings.get("processing")
    result = tune(
        bundles,
        refs,
        grid,
        base,
        strict=args.strict,
        parallel=processing["parallel"],
        max_workers=processing["max_workers"],
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings.set_pipeline_config(result.best_config)
    settings.dump(out / "best_config.yaml")
    result.table.to_csv(out / "grid_table.csv", index=False)

    best = result.best_config
    print(
        f"best face_cluster_threshold={best.face_cluster_threshold} "
        f"sync_conf_threshold={best.sync_conf_threshold} "
        f"speaker_id_threshold={best.speaker_id_threshold}"
    )
    print(result.best_breakdown.format_row())
    if result.excluded:
        print(f"excluded recordings: {', '.join(result.excluded)}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, settings: Settings, logger: logging.Logger) -> int:
    spec = ScenarioSpec.from_yaml(args.spec)
    scenarios = generate_dataset(spec, args.recordings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for scenario in scenarios:
        write_bundle(scenario.bundle, out / scenario.bundle.recording_id)
    (out / "reference.rttm").write_text(
        write_rttm_many(s.reference for s in scenarios), encoding="utf-8"
    )
    print(f"Simulated {len(scenarios)} recordings -> {out}")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace, settings: Settings, logger: logging.Logger) -> int:
    refs = _parse_file(args.ref, read_rttm)
    durations: Dict[str, int] = {}
    if args.uem:
        regions: Dict[str, Timeline] = _parse_file(args.uem, read_uem)
        durations = {rec: region.span().offset_ms for rec, region in regions.items()}
    fallback = []
    for ref in refs:
        if ref.recording_id not in durations:
            span = ref.speech().span()
            durations[ref.recording_id] = span.offset_ms if span else 0
            fallback.append(ref.recording_id)
    if fallback:
        logger.warning(
            f"No UEM extent for {len(fallback)} recording(s) ({', '.join(fallback)}); "
            f"video duration taken as the last speech offset, so speech % is an upper bound"
        )
    stats = dataset_stats(refs, durations)

    if args.json:
        print(json.dumps(stats.to_dict(), indent=2))
    else:
        print("name | videos | minutes | speakers min/mean/max | duration s | speech % | overlap %")
        print(stats.format_row(args.name))
    return EXIT_OK


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="main.py", description="Audio-visual speaker diarization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    subparsers = parser.add_subparsers(dest="command", metavar="command", parser_class=ArgumentParser)
    subparsers.required = True

    score = subparsers.add_parser("score", help="Score a hypothesis RTTM against a reference RTTM")
    score.add_argument("--ref", required=True, help="Reference RTTM file")
    score.add_argument("--hyp", required=True, help="Hypothesis RTTM file")
    score.add_argument("--collar", default="0.25", help="No-score collar in seconds (default 0.25)")
    score.add_argument("--uem", help="UEM file restricting the scored regions")
    score.add_argument("--per-file", action="store_true", help="Also print one row per recording")
    score.add_argument("--json", action="store_true", help="Print the report as JSON")
    score.set_defaults(handler=cmd_score)

    diarize = subparsers.add_parser("diarize", help="Diarize recording bundles into one RTTM file")
    diarize.add_argument("--inputs", required=True, help="Bundle directory, or a directory of bundles")
    diarize.add_argument("--out", required=True, help="Output RTTM file")
    diarize.add_argument("--config", help="Pipeline configuration file")
    diarize.set_defaults(handler=cmd_diarize)

    track = subparsers.add_parser("track", help="Build face tracks for each bundle")
    track.add_argument("--inputs", required=True, help="Bundle directory, or a directory of bundles")
    track.add_argument("--out", required=True, help="Output directory for <recording>.tracks.jsonl")
    track.add_argument("--config", help="Pipeline configuration file (tracker settings)")
    track.set_defaults(handler=cmd_track)

    cluster = subparsers.add_parser("cluster", help="Cluster face tracks into identities")
    cluster.add_argument("--inputs", required=True, help="Bundle directory, or a directory of bundles")
    cluster.add_argument("--out", required=True, help="Output directory for <recording>.partition.jsonl")
    cluster.add_argument("--config", help="Pipeline configuration file")
    cluster.set_defaults(handler=cmd_cluster)

    tune_cmd = subparsers.add_parser("tune", help="Grid-search the thresholds on a dev set")
    tune_cmd.add_argument("--dev", required=True, help="Directory of dev recording bundles")
    tune_cmd.add_argument("--refs", required=True, help="Reference RTTM for the dev set")
    tune_cmd.add_argument("--grid", required=True, help="YAML grid: threshold name -> list of values")
    tune_cmd.add_argument("--out", required=True, help="Output directory for best_config.yaml and grid_table.csv")
    tune_cmd.add_argument("--config", help="Base configuration for the settings that are not tuned")
    tune_cmd.add_argument("--strict", action="store_true", help="Abort on the first failing recording")
    tune_cmd.set_defaults(handler=cmd_tune)

    simulate = subparsers.add_parser("simulate", help="Generate synthetic recordings with ground truth")
    simulate.add_argument("--spec", required=True, help="YAML scenario specification")
    simulate.add_argument("--out", required=True, help="Output directory")
    simulate.add_argument("--recordings", type=int, default=1, help="Number of recordings (default 1)")
    simulate.set_defaults(handler=cmd_simulate)

    stats = subparsers.add_parser("stats", help="Dataset statistics of a reference RTTM")
    stats.add_argument("--ref", required=True, help="Reference RTTM file")
    stats.add_argument("--uem", help="UEM file giving the video extents")
    stats.add_argument("--name", default="dataset", help="Row name in the report")
    stats.add_argument("--json", action="store_true", help="Print the statistics as JSON")
    stats.set_defaults(handler=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the diarization toolkit."""
    # Parse command line arguments
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logger = logging.getLogger("diarization_toolkit")
    try:
        # Load settings
        settings = Settings(getattr(args, "config", None))
        if args.verbose:
            settings.config["logging"]["level"] = "DEBUG"

        # Set up logger
        logger = setup_logger(settings.get("logging"))
        logger.debug(f"Running '{args.command}'")
        return args.handler(args, settings, logger)

    except DiarizationError as e:
        logger.debug(traceback.format_exc())
        print(f"error: {str(e)}", file=sys.stderr)
        return EXIT_INVALID

    except Exception as e:
        logger.debug(traceback.format_exc())
        print(f"internal error: {str(e)}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
