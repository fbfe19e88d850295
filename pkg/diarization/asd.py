"""
Active speaker detection: turn per-track confidence and VAD streams into
speaking timelines and fuse the two detectors by agreement.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
from scipy.ndimage import median_filter

from diarization.formats import ScoreStream
from diarization.timeline import Interval, Timeline, intersect, merge_gaps, union
from diarization.tracker import FaceTrack
from utils.exceptions import ValidationError
from utils.logger import get_logger

logger = get_logger(__name__)


class AsdMode(str, Enum):
    """Which detectors decide that a face is speaking."""

    FUSED = "fused"
    SYNC_ONLY = "sync_only"
    VAD_ONLY = "vad_only"


@dataclass(frozen=True)
class AsdConfig:
    sync_conf_threshold: float = 0.5
    vad_positive_value: float = 0.5
    smoothing_window_ms: int = 0
    min_active_ms: int = 200
    merge_gap_ms: int = 250
    mode: AsdMode = AsdMode.FUSED

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", AsdMode(self.mode))
        for name in ("smoothing_window_ms", "min_active_ms", "merge_gap_ms"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")


def stream_to_timeline(s: ScoreStream, threshold: float) -> Timeline:
    """Union of the hops whose value is strictly above ``threshold``."""
    active = s.values > threshold
    if not active.any():
        return Timeline()
    edges = np.diff(np.concatenate(([0], active.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return Timeline.from_pairs(
        (s.start_ms + int(a) * s.hop_ms, s.start_ms + int(b) * s.hop_ms)
        for a, b in zip(starts, ends)
    )


def filter_stream(s: ScoreStream, window_ms: int) -> ScoreStream:
    """Running median over roughly ``window_ms``; 0 leaves the stream as is."""
    if window_ms <= 0 or len(s) < 2:
        return s
    size = max(1, int(round(window_ms / s.hop_ms)))
    if size % 2 == 0:
        size += 1
    if size == 1:
        return s
    return ScoreStream(s.owner_id, s.start_ms, s.hop_ms, median_filter(s.values, size=size, mode="nearest"))


def smooth(t: Timeline, cfg: AsdConfig) -> Timeline:
    """Bridge short pauses, then drop islands shorter than ``min_active_ms``."""
    return merge_gaps(t, cfg.merge_gap_ms).drop_shorter(cfg.min_active_ms)


def fuse_agreement(sync_active: Timeline, vad_active: Timeline) -> Timeline:
    """A face speaks only where both detectors say so."""
    return intersect(sync_active, vad_active)


def combine(sync_active: Timeline, vad_active: Timeline, mode: AsdMode) -> Timeline:
    if mode is AsdMode.SYNC_ONLY:
        return sync_active
    if mode is AsdMode.VAD_ONLY:
        return vad_active
    return fuse_agreement(sync_active, vad_active)


def vad_timeline(streams: Iterable[ScoreStream], threshold: float = 0.5) -> Timeline:
    """Speech timeline of one or more VAD streams."""
    result = Timeline()
    for stream in streams:
        result = union(result, stream_to_timeline(stream, threshold))
    return result


def detect_active(
    track_interval: Interval,
    sync_stream: Optional[ScoreStream],
    vad_stream: Optional[ScoreStream],
    cfg: AsdConfig,
) -> Timeline:
    """
    Speaking timeline of one face track.

    A missing stream counts as never active, so in fused mode it vetoes.

    Args:
        track_interval: Span of the face track
        sync_stream: Audio-visual sync confidence stream
        vad_stream: VAD stream of the track's enhanced audio
        cfg: Thresholds, smoothing and mode

    Returns:
        Active timeline clipped to the track interval
    """
    sync_active = Timeline()
    if sync_stream is not None:
        sync_active = stream_to_timeline(
            filter_stream(sync_stream, cfg.smoothing_window_ms), cfg.sync_conf_threshold
        )
    vad_active = Timeline()
    if vad_stream is not None:
        vad_active = stream_to_timeline(
            filter_stream(vad_stream, cfg.smoothing_window_ms), cfg.vad_positive_value
        )
    return smooth(combine(sync_active, vad_active, cfg.mode), cfg).clip(track_interval)


def _index_streams(streams: Iterable[ScoreStream], kind: str) -> Dict[str, ScoreStream]:
    indexed: Dict[str, ScoreStream] = {}
    for stream in streams:
        if stream.owner_id in indexed:
            raise ValidationError(f"duplicate {kind} stream for '{stream.owner_id}'")
        indexed[stream.owner_id] = stream
    return indexed


def detect_active_tracks(
    tracks: Sequence[FaceTrack],
    sync_streams: Iterable[ScoreStream],
    vad_streams: Iterable[ScoreStream],
    cfg: AsdConfig,
) -> Dict[str, Timeline]:
    """Active timeline per track id."""
    sync = _index_streams(sync_streams, "sync")
    vad = _index_streams(vad_streams, "VAD")
    missing_sync = [t.track_id for t in tracks if t.track_id not in sync]
    missing_vad = [t.track_id for t in tracks if t.track_id not in vad]
    if missing_sync and cfg.mode is not AsdMode.VAD_ONLY:
        logger.warning(f"{len(missing_sync)} tracks have no sync stream: {missing_sync[:5]}")
    if missing_vad and cfg.mode is not AsdMode.SYNC_ONLY:
        logger.warning(f"{len(missing_vad)} tracks have no VAD stream: {missing_vad[:5]}")

    active = {
        t.track_id: detect_active(t.interval, sync.get(t.track_id), vad.get(t.track_id), cfg)
        for t in tracks
    }
    speaking = sum(1 for timeline in active.values() if timeline)
    logger.info(f"ASD ({cfg.mode.value}): {speaking}/{len(tracks)} tracks speak")
    return active
