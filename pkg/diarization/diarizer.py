"""
End-to-end diarization of one recording bundle.

Stages: face tracking -> face-track clustering -> active speaker detection ->
on-screen attribution -> speaker self-enrolment -> off-screen labelling.
"""
import concurrent.futures
import dataclasses
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from diarization.asd import AsdConfig, AsdMode, detect_active_tracks, vad_timeline
from diarization.clustering import ClusterInput, Partition, ahc_constrained, cluster_tracks, cosine_distance
from diarization.formats import Diarization, EmbeddingRecord, RecordingBundle, read_bundle
from diarization.timeline import Interval, Timeline, intersect, subtract, total_duration, union
from diarization.tracker import FaceTrack, attach_embeddings, build_tracks
from utils.exceptions import ConfigurationError, DiarizationError, PipelineError, ValidationError
from utils.logger import get_logger

logger = get_logger(__name__)

ONSCREEN_PREFIX = "ID_"
UNKNOWN_PREFIX = "UNK_"
OFFSCREEN_COMPARISONS = ("centroid", "segment")
UNKNOWN_LABELINGS = ("per_segment", "linked")


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable knob of the pipeline; mirrors the flat config file."""

    face_cluster_threshold: float = 0.3
    sync_conf_threshold: float = 0.5
    speaker_id_threshold: float = 0.4
    collar_ms: int = 250
    gap_merge_ms: int = 250
    min_offscreen_segment_ms: int = 400
    iou_threshold: float = 0.5
    max_frame_skip: int = 10
    vad_positive_value: float = 0.5
    smoothing_window_ms: int = 0
    min_active_ms: int = 200
    asd_mode: str = AsdMode.FUSED.value
    offscreen_comparison: str = "centroid"
    unknown_labeling: str = "per_segment"

    def __post_init__(self) -> None:
        for name in ("face_cluster_threshold", "speaker_id_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 2.0:
                raise ConfigurationError(f"{name} is a cosine distance in [0, 2], got {value}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigurationError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        for name in (
            "collar_ms",
            "gap_merge_ms",
            "min_offscreen_segment_ms",
            "max_frame_skip",
            "smoothing_window_ms",
            "min_active_ms",
        ):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.asd_mode not in {m.value for m in AsdMode}:
            raise ConfigurationError(f"unknown asd_mode '{self.asd_mode}'")
        if self.offscreen_comparison not in OFFSCREEN_COMPARISONS:
            raise ConfigurationError(f"unknown offscreen_comparison '{self.offscreen_comparison}'")
        if self.unknown_labeling not in UNKNOWN_LABELINGS:
            raise ConfigurationError(f"unknown unknown_labeling '{self.unknown_labeling}'")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "PipelineConfig":
        """
        Build a config from a flat mapping, coercing to the declared types.

        Raises:
            ConfigurationError: Unknown key or uncoercible value
        """
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigurationError(f"unknown pipeline settings: {unknown}")
        kwargs = {}
        for name, value in values.items():
            kind = type(fields[name].default)
            try:
                if kind is int:
                    if isinstance(value, float) and not value.is_integer():
                        raise ValueError("expected an integer")
                    kwargs[name] = int(value)
                else:
                    kwargs[name] = kind(value)
            except (TypeError, ValueError) as e:
                raise ConfigurationError(f"bad value for {name}: {value!r} ({e})")
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes: Any) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def asd_config(self) -> AsdConfig:
        return AsdConfig(
            sync_conf_threshold=self.sync_conf_threshold,
            vad_positive_value=self.vad_positive_value,
            smoothing_window_ms=self.smoothing_window_ms,
            min_active_ms=self.min_active_ms,
            merge_gap_ms=self.gap_merge_ms,
            mode=AsdMode(self.asd_mode),
        )


@dataclass(frozen=True, eq=False)
class SpeakerModel:
    """Self-enrolled voice model of one on-screen identity."""

    label: str
    centroid: np.ndarray
    support_ms: int
    exemplars: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def distance(self, vector: np.ndarray, comparison: str = "centroid") -> float:
        if comparison == "segment" and len(self.exemplars):
            return min(cosine_distance(vector, e) for e in self.exemplars)
        return cosine_distance(vector, self.centroid)


def _unit(vector: np.ndarray) -> Optional[np.ndarray]:
    norm = float(np.linalg.norm(vector))
    if norm < 1e-12:
        return None
    return vector / norm


def _record_order(record: EmbeddingRecord) -> Tuple:
    return (record.interval.onset_ms, record.interval.offset_ms, record.owner_id, tuple(record.vector.tolist()))


def _weighted_unit_mean(vectors: Sequence[np.ndarray], weights: Sequence[int]) -> Optional[np.ndarray]:
    mean = np.average(np.vstack(vectors), axis=0, weights=np.asarray(weights, dtype=float))
    return _unit(mean)


def attribute_onscreen(
    tracks: Sequence[FaceTrack],
    partition: Partition,
    active_timelines: Dict[str, Timeline],
    gap_merge_ms: int = 250,
    recording_id: str = "",
) -> Diarization:
    """
    Turn per-track speaking timelines into identity turns.

    Each face cluster becomes speaker ``ID_<cluster>``; its speech is the
    union of its tracks' active timelines with pauses up to ``gap_merge_ms``
    bridged.

    Raises:
        ValidationError: An active timeline names a track missing from the partition
    """
    known_tracks = {t.track_id for t in tracks}
    per_speaker: Dict[str, Timeline] = {}
    for track_id in sorted(active_timelines):
        if track_id not in partition or (known_tracks and track_id not in known_tracks):
            raise ValidationError(f"active timeline for unknown track '{track_id}'")
        speaker = f"{ONSCREEN_PREFIX}{partition[track_id]}"
        per_speaker[speaker] = union(per_speaker.get(speaker, Timeline()), active_timelines[track_id])
    timelines = {
        speaker: timeline.merge_gaps(gap_merge_ms)
        for speaker, timeline in per_speaker.items()
        if timeline
    }
    return Diarization.from_timelines(recording_id, timelines)


def enroll_speakers(diar: Diarization, segment_embeddings: Sequence[EmbeddingRecord]) -> List[SpeakerModel]:
    """
    Build one voice model per attributed speaker.

    A segment embedding counts for a speaker when its interval meets that
    speaker's speech and nobody else's; it is weighted by the overlap
    duration. Segments touching several speakers (or none) are skipped.

    Args:
        diar: On-screen diarization
        segment_embeddings: Speech embedding records

    Returns:
        Models sorted by label; speakers without usable embeddings are left out
    """
    timelines = diar.timelines()
    vectors: Dict[str, List[np.ndarray]] = {}
    weights: Dict[str, List[int]] = {}
    ambiguous = unmatched = 0
    for record in sorted(segment_embeddings, key=_record_order):
        piece = Timeline([record.interval])
        hits = {}
        for speaker, timeline in timelines.items():
            shared = total_duration(intersect(piece, timeline))
            if shared > 0:
                hits[speaker] = shared
        if len(hits) != 1:
            if hits:
                ambiguous += 1
            else:
                unmatched += 1
            continue
        vector = _unit(record.vector)
        if vector is None:
            continue
        (speaker, shared), = hits.items()
        vectors.setdefault(speaker, []).append(vector)
        weights.setdefault(speaker, []).append(shared)

    if ambiguous:
        logger.warning(f"{diar.recording_id}: {ambiguous} speech embeddings span several speakers and were skipped")
    logger.debug(f"{diar.recording_id}: {unmatched} speech embeddings fall outside on-screen speech")

    models = []
    excluded = []
    for speaker in sorted(timelines):
        if speaker not in vectors:
            excluded.append(speaker)
            continue
        centroid = _weighted_unit_mean(vectors[speaker], weights[speaker])
        if centroid is None:
            excluded.append(speaker)
            continue
        models.append(
            SpeakerModel(
                label=speaker,
                centroid=centroid,
                support_ms=int(sum(weights[speaker])),
                exemplars=np.vstack(vectors[speaker]),
            )
        )
    if excluded:
        logger.warning(f"{diar.recording_id}: no usable speech embeddings for {excluded}; not enrolled")
    logger.info(f"{diar.recording_id}: enrolled {len(models)} speaker models")
    return models


def _segment_embedding(records: Sequence[EmbeddingRecord], segment: Interval) -> Optional[np.ndarray]:
    vectors, weights = [], []
    for record in records:
        shared = record.interval.intersection(segment)
        if shared is None:
            continue
        vector = _unit(record.vector)
        if vector is not None:
            vectors.append(vector)
            weights.append(shared.duration_ms)
    if not vectors:
        return None
    return _weighted_unit_mean(vectors, weights)


def assign_offscreen(
    vad: Timeline,
    onscreen: Diarization,
    models: Sequence[SpeakerModel],
    segment_embeddings: Sequence[EmbeddingRecord],
    cfg: PipelineConfig,
) -> Diarization:
    """
    Label speech that no visible face accounts for.

    Off-screen speech is the VAD minus all on-screen speech. Each segment of
    at least ``min_offscreen_segment_ms`` goes to the nearest enrolled model
    when its cosine distance is below ``speaker_id_threshold``; otherwise it
    becomes ``UNK_<n>``. Shorter segments are dropped.

    Returns:
        The on-screen diarization merged with the labelled off-screen speech
    """
    offscreen = subtract(vad, onscreen.speech())
    records = sorted(segment_embeddings, key=_record_order)
    models = sorted(models, key=lambda m: m.label)

    assigned: Dict[str, List[Interval]] = {}
    unknown: List[Tuple[Interval, Optional[np.ndarray]]] = []
    too_short = no_embedding = 0
    for segment in offscreen:
        if segment.duration_ms < cfg.min_offscreen_segment_ms:
            too_short += 1
            continue
        vector = _segment_embedding(records, segment)
        if vector is None:
            no_embedding += 1
            unknown.append((segment, None))
            continue
        best: Optional[Tuple[float, str]] = None
        for model in models:
            distance = model.distance(vector, cfg.offscreen_comparison)
            if best is None or distance < best[0]:
                best = (distance, model.label)
        if best is not None and best[0] < cfg.speaker_id_threshold:
            assigned.setdefault(best[1], []).append(segment)
        else:
            unknown.append((segment, vector))

    for label, segments in _label_unknown(unknown, cfg).items():
        assigned.setdefault(label, []).extend(segments)

    logger.info(
        f"{onscreen.recording_id}: {len(offscreen)} off-screen segments, "
        f"{sum(len(v) for k, v in assigned.items() if not k.startswith(UNKNOWN_PREFIX))} assigned, "
        f"{len(unknown)} unknown ({no_embedding} without embedding), {too_short} too short"
    )
    offscreen_diar = Diarization.from_timelines(
        onscreen.recording_id, {label: Timeline(segments) for label, segments in assigned.items()}
    )
    return onscreen.merge(offscreen_diar)


def _label_unknown(
    unknown: List[Tuple[Interval, Optional[np.ndarray]]], cfg: PipelineConfig
) -> Dict[str, List[Interval]]:
    labels: Dict[str, List[Interval]] = {}
    if cfg.unknown_labeling == "per_segment":
        for n, (segment, _) in enumerate(unknown):
            labels[f"{UNKNOWN_PREFIX}{n}"] = [segment]
        return labels

    embedded = [(f"{k:06d}", segment, vector) for k, (segment, vector) in enumerate(unknown) if vector is not None]
    partition = ahc_constrained(
        ClusterInput(
            items=tuple((key, vector) for key, _, vector in embedded),
            stop_threshold=cfg.speaker_id_threshold,
        )
    )
    for key, segment, _ in embedded:
        labels.setdefault(f"{UNKNOWN_PREFIX}{partition[key]}", []).append(segment)
    n = partition.n_clusters
    for segment, vector in unknown:
        if vector is None:
            labels[f"{UNKNOWN_PREFIX}{n}"] = [segment]
            n += 1
    return labels


class DiarizationPipeline:
    """Runs the pipeline stages for one recording; each stage is callable on its own."""

    def __init__(self, config: PipelineConfig, logger: Optional[logging.Logger] = None):
        """
        Initialize the pipeline.

        Args:
            config: Pipeline configuration
            logger: Logger instance
        """
        self.config = config
        self.logger = logger or get_logger(__name__)

    def _stage(self, name: str, recording_id: str, fn: Callable[..., Any], *args: Any) -> Any:
        try:
            return fn(*args)
        except PipelineError:
            raise
        except DiarizationError as e:
            self.logger.error(f"{recording_id}: stage '{name}' failed: {e}")
            raise PipelineError(name, str(e), recording_id) from e

    def speech(self, bundle: RecordingBundle) -> Timeline:
        vad = self._stage(
            "vad", bundle.recording_id, vad_timeline, bundle.recording_vad, self.config.vad_positive_value
        )
        return vad.clip(Interval(0, bundle.duration_ms)) if bundle.duration_ms > 0 else vad

    def tracks(self, bundle: RecordingBundle) -> List[FaceTrack]:
        """Face tracks carrying averaged embeddings."""
        def run() -> List[FaceTrack]:
            tracks = build_tracks(
                bundle.detections,
                bundle.shots,
                bundle.frame_rate_hz,
                self.config.iou_threshold,
                self.config.max_frame_skip,
            )
            return attach_embeddings(tracks, bundle.face_embeddings)

        return self._stage("tracker", bundle.recording_id, run)

    def cluster(self, bundle: RecordingBundle, tracks: Sequence[FaceTrack], threshold: float) -> Partition:
        return self._stage("clustering", bundle.recording_id, cluster_tracks, tracks, threshold)

    def detect(self, bundle: RecordingBundle, tracks: Sequence[FaceTrack], asd: AsdConfig) -> Dict[str, Timeline]:
        return self._stage(
            "asd", bundle.recording_id, detect_active_tracks, tracks, bundle.sync_scores, bundle.track_vad, asd
        )

    def attribute(
        self,
        bundle: RecordingBundle,
        tracks: Sequence[FaceTrack],
        partition: Partition,
        active: Dict[str, Timeline],
        vad: Timeline,
    ) -> Diarization:
        """On-screen diarization, restricted to the recording VAD."""
        def run() -> Diarization:
            onscreen = attribute_onscreen(
                tracks, partition, active, self.config.gap_merge_ms, bundle.recording_id
            )
            return Diarization.from_timelines(
                bundle.recording_id,
                {s: intersect(t, vad) for s, t in onscreen.timelines().items()},
            )

        return self._stage("attribution", bundle.recording_id, run)

    def label_offscreen(
        self, bundle: RecordingBundle, onscreen: Diarization, vad: Timeline, cfg: PipelineConfig
    ) -> Diarization:
        def run() -> Diarization:
            models = enroll_speakers(onscreen, bundle.speech_embeddings)
            return assign_offscreen(vad, onscreen, models, bundle.speech_embeddings, cfg)

        return self._stage("offscreen", bundle.recording_id, run)

    def run(self, bundle: RecordingBundle) -> Diarization:
        """
        Diarize one recording.

        Raises:
            PipelineError: A stage failed; the error names the stage
        """
        cfg = self.config
        self.logger.info(f"Diarizing {bundle.recording_id}")
        vad = self.speech(bundle)
        if not vad:
            self.logger.info(f"{bundle.recording_id}: recording VAD is empty")
            return Diarization(bundle.recording_id)

        tracks = self.tracks(bundle)
        partition = self.cluster(bundle, tracks, cfg.face_cluster_threshold)
        clustered = [t for t in tracks if t.track_id in partition]
        active = self.detect(bundle, clustered, cfg.asd_config())
        onscreen = self.attribute(bundle, clustered, partition, active, vad)
        result = self.label_offscreen(bundle, onscreen, vad, cfg)
        self.logger.info(
            f"{bundle.recording_id}: {len(result.speakers)} speakers, {len(result)} turns"
        )
        return result


def run_pipeline(inputs: RecordingBundle, cfg: PipelineConfig) -> Diarization:
    """Tracker -> clustering -> ASD -> attribution -> enrolment -> off-screen labelling."""
    return DiarizationPipeline(cfg).run(inputs)


def process_bundle(path: Path, cfg: PipelineConfig) -> Dict[str, Any]:
    """
    Load and diarize one bundle directory.

    Returns:
        Dictionary with processing results
    """
    result: Dict[str, Any] = {
        "path": str(path),
        "recording_id": None,
        "success": False,
        "diarization": None,
        "error": None,
    }
    try:
        bundle = read_bundle(path)
        result["recording_id"] = bundle.recording_id
        result["diarization"] = run_pipeline(bundle, cfg)
        result["success"] = True
    except DiarizationError as e:
        error_msg = f"Error diarizing {path}: {str(e)}"
        logger.error(error_msg)
        result["error"] = error_msg
    except Exception as e:
        error_msg = f"Unexpected error diarizing {path}: {str(e)}"
        logger.error(error_msg)
        logger.debug(traceback.format_exc())
        result["error"] = error_msg
        result["internal"] = True
    return result


def diarize_batch(
    paths: Sequence[Path], cfg: PipelineConfig, parallel: bool = True, max_workers: int = 4
) -> List[Dict[str, Any]]:
    """Diarize several bundles; results come back sorted by path."""
    results: List[Dict[str, Any]] = []
    if parallel and len(paths) > 1:
        logger.info(f"Processing {len(paths)} recordings in parallel with {max_workers} workers")
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
            futures = [executor.submit(process_bundle, path, cfg) for path in paths]
            for future in concurrent.futures.as_completed(futures):
                results.append(future.result())
    else:
        logger.info(f"Processing {len(paths)} recordings sequentially")
        results = [process_bundle(path, cfg) for path in paths]

    results.sort(key=lambda r: r["path"])
    successful = sum(1 for r in results if r["success"])
    logger.info(f"Diarization completed. {successful}/{len(results)} recordings processed successfully.")
    if successful != len(results):
        logger.warning("Failed recordings:")
        for r in results:
            if not r["success"]:
                logger.warning(f"  {r['path']}: {r.get('error', 'Unknown error')}")
    return results
