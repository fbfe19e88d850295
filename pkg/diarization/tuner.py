"""
Grid search over the three pipeline thresholds, minimizing dev-set DER.

Stages upstream of a threshold are cached per recording: face tracks are
built once, the face partition once per clustering threshold and the
active-speaker timelines once per sync threshold.
"""
import concurrent.futures
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Hashable, List, Optional, Sequence, Tuple, Union

import pandas as pd
import yaml

from diarization.diarizer import DiarizationPipeline, PipelineConfig
from diarization.formats import Diarization, RecordingBundle
from diarization.metrics import DerBreakdown, aggregate, der
from utils.exceptions import ConfigurationError, DiarizationError, ValidationError
from utils.logger import get_logger

logger = get_logger(__name__)

GRID_KEYS = ("face_cluster_threshold", "sync_conf_threshold", "speaker_id_threshold")

GridPoint = Tuple[float, float, float]


@dataclass(frozen=True)
class GridSpec:
    """Candidate values per threshold; stored sorted and de-duplicated."""

    face_cluster_threshold: Tuple[float, ...]
    sync_conf_threshold: Tuple[float, ...]
    speaker_id_threshold: Tuple[float, ...]

    def __post_init__(self) -> None:
        for name in GRID_KEYS:
            raw = getattr(self, name)
            if isinstance(raw, (int, float)):
                raw = [raw]
            try:
                values = tuple(sorted({float(v) for v in raw}))
            except (TypeError, ValueError):
                raise ConfigurationError(f"grid values for {name} must be numbers, got {raw!r}")
            if not values:
                raise ConfigurationError(f"grid for {name} is empty")
            if not all(math.isfinite(v) for v in values):
                raise ConfigurationError(f"grid for {name} has non-finite values")
            if name != "sync_conf_threshold" and not all(0.0 <= v <= 2.0 for v in values):
                raise ConfigurationError(f"grid for {name} must hold cosine distances in [0, 2]")
            object.__setattr__(self, name, values)

    @classmethod
    def from_dict(cls, values: Dict[str, Any], base: Optional[PipelineConfig] = None) -> "GridSpec":
        """
        Build a grid from a mapping of threshold name -> list of values.

        A threshold missing from the mapping is pinned to ``base``'s value.

        Raises:
            ConfigurationError: Unknown keys, or a missing key without ``base``
        """
        if not isinstance(values, dict):
            raise ConfigurationError("grid file must be a mapping of threshold -> values")
        unknown = sorted(set(values) - set(GRID_KEYS))
        if unknown:
            raise ConfigurationError(f"unknown grid keys: {unknown}")
        lists = {}
        for name in GRID_KEYS:
            if name in values:
                lists[name] = values[name]
            elif base is not None:
                lists[name] = [getattr(base, name)]
            else:
                raise ConfigurationError(f"grid is missing '{name}'")
        return cls(**lists)

    @classmethod
    def from_yaml(cls, path: Union[str, Path], base: Optional[PipelineConfig] = None) -> "GridSpec":
        try:
            with open(path, "r") as f:
                values = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigurationError(f"cannot read grid file {path}: {e}")
        return cls.from_dict(values, base)

    def points(self) -> List[GridPoint]:
        """Every combination, in lexicographic order."""
        return list(itertools.product(*(getattr(self, name) for name in GRID_KEYS)))

    def __len__(self) -> int:
        return len(self.face_cluster_threshold) * len(self.sync_conf_threshold) * len(self.speaker_id_threshold)


@dataclass(frozen=True, eq=False)
class TuningResult:
    best_config: PipelineConfig
    best_breakdown: DerBreakdown
    table: pd.DataFrame
    excluded: Tuple[str, ...] = ()
    stage_calls: Counter = field(default_factory=Counter)


class RecordingCache:
    """Runs the pipeline on one recording for many grid points, reusing upstream stages."""

    def __init__(self, bundle: RecordingBundle, base_cfg: PipelineConfig, use_cache: bool = True):
        self.bundle = bundle
        self.base_cfg = base_cfg
        self.use_cache = use_cache
        self.pipeline = DiarizationPipeline(base_cfg)
        self.stage_calls: Counter = Counter()
        self._cache: Dict[Tuple[str, Hashable], Any] = {}

    def _get(self, stage: str, key: Hashable, compute: Callable[[], Any]) -> Any:
        if self.use_cache and (stage, key) in self._cache:
            return self._cache[(stage, key)]
        self.stage_calls[stage] += 1
        value = compute()
        if self.use_cache:
            self._cache[(stage, key)] = value
        return value

    def run(self, point: GridPoint) -> Diarization:
        face, sync, speaker = point
        cfg = self.base_cfg.replace(
            face_cluster_threshold=face, sync_conf_threshold=sync, speaker_id_threshold=speaker
        )
        bundle, pipeline = self.bundle, self.pipeline

        vad = self._get("vad", None, lambda: pipeline.speech(bundle))
        if not vad:
            return Diarization(bundle.recording_id)
        tracks = self._get("tracker", None, lambda: pipeline.tracks(bundle))
        partition = self._get("clustering", face, lambda: pipeline.cluster(bundle, tracks, face))
        active = self._get("asd", sync, lambda: pipeline.detect(bundle, tracks, cfg.asd_config()))
        onscreen = self._get(
            "attribution", (face, sync), lambda: pipeline.attribute(bundle, tracks, partition, active, vad)
        )
        self.stage_calls["offscreen"] += 1
        return pipeline.label_offscreen(bundle, onscreen, vad, cfg)


def _evaluate_recording(
    bundle: RecordingBundle,
    ref: Diarization,
    points: Sequence[GridPoint],
    base_cfg: PipelineConfig,
    use_cache: bool,
) -> Dict[str, Any]:
    result: Dict[str, Any] = {
        "recording_id": bundle.recording_id,
        "success": False,
        "breakdowns": {},
        "error": None,
        "exception": None,
        "stage_calls": Counter(),
    }
    cache = RecordingCache(bundle, base_cfg, use_cache)
    try:
        for point in points:
            result["breakdowns"][point] = der(ref, cache.run(point), base_cfg.collar_ms)
        result["success"] = True
    except DiarizationError as e:
        error_msg = f"Error tuning on {bundle.recording_id}: {str(e)}"
        logger.error(error_msg)
        result["error"] = error_msg
        result["exception"] = e
    result["stage_calls"] = cache.stage_calls
    return result


def tune(
    dev_bundles: Sequence[RecordingBundle],
    refs: Sequence[Diarization],
    grid: GridSpec,
    base_cfg: Optional[PipelineConfig] = None,
    strict: bool = False,
    use_cache: bool = True,
    parallel: bool = True,
    max_workers: int = 4,
) -> TuningResult:
    """
    Pick the grid point with the lowest aggregate dev-set DER.

    Aggregate DER is duration-weighted over recordings. A recording that
    fails at any grid point is left out of every point so all rows score
    the same material. Ties go to the lexicographically smallest point.

    Args:
        dev_bundles: Development recordings
        refs: Reference diarizations, matched by recording id
        grid: Threshold values to try
        base_cfg: Values for every non-tuned setting (also supplies collar_ms)
        strict: Raise on the first failing recording instead of excluding it
        use_cache: Reuse upstream stages across grid points
        parallel: Evaluate recordings concurrently
        max_workers: Thread pool size

    Returns:
        TuningResult with the full grid table

    Raises:
        ValidationError: A recording has no reference, or nothing could be scored
        PipelineError: A recording failed and ``strict`` is set
    """
    base_cfg = base_cfg or PipelineConfig()
    refs_by_id = {r.recording_id: r for r in refs}
    bundles = sorted(dev_bundles, key=lambda b: b.recording_id)
    points = grid.points()

    excluded: List[str] = []
    jobs = []
    for bundle in bundles:
        if bundle.recording_id not in refs_by_id:
            error_msg = f"Dev recording {bundle.recording_id} has no reference diarization"
            if strict:
                logger.error(error_msg)
                raise ValidationError(error_msg)
            logger.warning(f"{error_msg}; excluded")
            excluded.append(bundle.recording_id)
            continue
        jobs.append(bundle)
    unused = sorted(set(refs_by_id) - {b.recording_id for b in bundles})
    if unused:
        logger.warning(f"References without dev bundle are ignored: {unused}")

    logger.info(f"Tuning {len(points)} grid points on {len(jobs)} recordings")
    results: List[Dict[str, Any]] = []
    if parallel and len(jobs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
            futures = [
                executor.submit(_evaluate_recording, b, refs_by_id[b.recording_id], points, base_cfg, use_cache)
                for b in jobs
            ]
            for future in concurrent.futures.as_completed(futures):
                results.append(future.result())
    else:
        results = [
            _evaluate_recording(b, refs_by_id[b.recording_id], points, base_cfg, use_cache) for b in jobs
        ]
    results.sort(key=lambda r: r["recording_id"])

    failed = [r for r in results if not r["success"]]
    if failed:
        if strict:
            raise failed[0]["exception"]
        logger.warning("Recordings excluded from tuning:")
        for r in failed:
            logger.warning(f"  {r['recording_id']}: {r['error']}")
            excluded.append(r["recording_id"])
    scored = [r for r in results if r["success"]]
    if not scored:
        error_msg = "No dev recording could be evaluated"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    rows = []
    totals: Dict[GridPoint, DerBreakdown] = {}
    for point in points:
        total = aggregate(r["breakdowns"][point] for r in scored)
        totals[point] = total
        rows.append({**dict(zip(GRID_KEYS, point)), **total.to_dict(), "n_recordings": len(scored)})
    table = pd.DataFrame(rows)

    best_index = int(table["der_pct"].idxmin())
    best_point = points[best_index]
    best_config = base_cfg.replace(**dict(zip(GRID_KEYS, best_point)))
    stage_calls: Counter = Counter()
    for r in results:
        stage_calls.update(r["stage_calls"])

    logger.info(f"Best grid point {dict(zip(GRID_KEYS, best_point))}: {totals[best_point].format_row()}")
    return TuningResult(
        best_config=best_config,
        best_breakdown=totals[best_point],
        table=table,
        excluded=tuple(sorted(excluded)),
        stage_calls=stage_calls,
    )
