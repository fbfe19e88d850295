"""
Face tracking within shots and per-track embedding averaging.
"""
import bisect
import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from diarization.formats import (
    DetectionRecord,
    EmbeddingRecord,
    Source,
    detection_from_dict,
    detection_to_dict,
    dump_json_records,
    iter_json_records,
    require,
)
from diarization.timeline import Interval
from utils.exceptions import DegenerateEmbeddingError, ParseError, ValidationError
from utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_MAX_FRAME_SKIP = 10
UNIT_NORM_TOLERANCE = 1e-6


def frame_to_ms(frame_index: int, frame_rate_hz: float) -> int:
    """Onset of a frame on the millisecond grid."""
    return int(math.floor(frame_index * 1000.0 / frame_rate_hz + 0.5))


@dataclass(frozen=True, eq=False)
class FaceTrack:
    """Detections of one face inside one shot."""

    track_id: str
    shot_index: int
    frames: Tuple[DetectionRecord, ...]
    interval: Interval
    embedding: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        indices = [d.frame_index for d in self.frames]
        if not indices:
            raise ValidationError(f"track '{self.track_id}' has no frames")
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValidationError(f"track '{self.track_id}': frame indices must strictly increase")
        if self.embedding is not None:
            norm = float(np.linalg.norm(self.embedding))
            if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
                raise ValidationError(f"track '{self.track_id}': embedding norm {norm} is not 1")

    @property
    def first_frame(self) -> int:
        return self.frames[0].frame_index

    @property
    def last_frame(self) -> int:
        return self.frames[-1].frame_index

    def with_embedding(self, embedding: np.ndarray) -> "FaceTrack":
        return dataclasses.replace(self, embedding=embedding)


def box_iou(a: Tuple[float, float, float, float], b: Tuple[float, float, float, float]) -> float:
    """Intersection over union of two (x, y, width, height) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _shot_index(shots: Sequence[Interval], onsets: List[int], t_ms: int) -> Optional[int]:
    i = bisect.bisect_right(onsets, t_ms) - 1
    if i >= 0 and t_ms < shots[i].offset_ms:
        return i
    return None


def _validate_shots(shots: Sequence[Interval]) -> None:
    for prev, cur in zip(shots, shots[1:]):
        if cur.onset_ms < prev.offset_ms:
            raise ValidationError(
                f"shots must be sorted and disjoint: {prev!r} then {cur!r}"
            )


def _track_shot(
    shot_index: int,
    detections: List[DetectionRecord],
    frame_rate_hz: float,
    iou_threshold: float,
    max_frame_skip: int,
) -> List[FaceTrack]:
    tracks: List[List[DetectionRecord]] = []
    by_frame: Dict[int, List[DetectionRecord]] = {}
    for detection in detections:
        by_frame.setdefault(detection.frame_index, []).append(detection)

    alive: List[int] = []
    for frame in sorted(by_frame):
        current = sorted(by_frame[frame], key=lambda d: (d.x, d.y, d.width, d.height, -d.confidence))
        alive = [t for t in alive if frame - tracks[t][-1].frame_index - 1 <= max_frame_skip]

        candidates = []
        for t in alive:
            last_box = tracks[t][-1].box
            for k, detection in enumerate(current):
                iou = box_iou(last_box, detection.box)
                if iou >= iou_threshold:
                    candidates.append((-iou, t, k))
        candidates.sort()

        used_tracks, used_dets = set(), set()
        for _, t, k in candidates:
            if t in used_tracks or k in used_dets:
                continue
            tracks[t].append(current[k])
            used_tracks.add(t)
            used_dets.add(k)

        for k, detection in enumerate(current):
            if k not in used_dets:
                tracks.append([detection])
                alive.append(len(tracks) - 1)

    result = []
    for n, frames in enumerate(tracks):
        result.append(
            FaceTrack(
                track_id=f"track_{shot_index:03d}_{n:03d}",
                shot_index=shot_index,
                frames=tuple(frames),
                interval=Interval(
                    frame_to_ms(frames[0].frame_index, frame_rate_hz),
                    frame_to_ms(frames[-1].frame_index + 1, frame_rate_hz),
                ),
            )
        )
    return result


def build_tracks(
    detections: Iterable[DetectionRecord],
    shots: Sequence[Interval],
    frame_rate_hz: float,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    max_frame_skip: int = DEFAULT_MAX_FRAME_SKIP,
) -> List[FaceTrack]:
    """
    Group per-frame detections into shot-bounded face tracks.

    Within a shot a detection extends the live track whose last box has the
    highest IoU (at least ``iou_threshold``) and whose last frame is at most
    ``max_frame_skip`` frames behind; otherwise it opens a new track.

    Args:
        detections: Detections sorted by frame
        shots: Shot intervals in milliseconds, sorted and disjoint
        frame_rate_hz: Video frame rate
        iou_threshold: Minimum IoU to extend a track
        max_frame_skip: Maximum number of missing frames inside a track

    Returns:
        Tracks ordered by (shot, first frame)

    Raises:
        ValidationError: A detection falls outside every shot
    """
    if frame_rate_hz <= 0:
        raise ValidationError(f"frame_rate_hz must be > 0, got {frame_rate_hz}")
    if max_frame_skip < 0:
        raise ValidationError(f"max_frame_skip must be >= 0, got {max_frame_skip}")
    shots = list(shots)
    _validate_shots(shots)
    onsets = [s.onset_ms for s in shots]

    per_shot: Dict[int, List[DetectionRecord]] = {}
    for detection in detections:
        t_ms = frame_to_ms(detection.frame_index, frame_rate_hz)
        index = _shot_index(shots, onsets, t_ms)
        if index is None:
            raise ValidationError(
                f"detection at frame {detection.frame_index} ({t_ms} ms) lies outside every shot"
            )
        per_shot.setdefault(index, []).append(detection)

    tracks: List[FaceTrack] = []
    for index in sorted(per_shot):
        tracks.extend(
            _track_shot(index, per_shot[index], frame_rate_hz, iou_threshold, max_frame_skip)
        )
    tracks.sort(key=lambda t: (t.shot_index, t.first_frame, t.track_id))
    logger.info(f"Built {len(tracks)} face tracks from {len(shots)} shots")
    return tracks


def average_track_embedding(samples: Sequence[np.ndarray]) -> np.ndarray:
    """
    Mean of the samples, L2-normalized.

    Raises:
        ValidationError: No samples or unequal dimensions
        DegenerateEmbeddingError: The mean has zero norm
    """
    if len(samples) == 0:
        raise ValidationError("at least one embedding sample is required")
    dims = {np.asarray(s).shape for s in samples}
    if len(dims) != 1:
        raise ValidationError(f"embedding samples have unequal dimensions: {sorted(dims)}")
    mean = np.mean(np.vstack(samples), axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise DegenerateEmbeddingError("mean embedding has zero norm")
    return mean / norm


def _sample_order(record: EmbeddingRecord) -> Tuple:
    return (record.interval.onset_ms, record.interval.offset_ms, tuple(record.vector.tolist()))


def attach_embeddings(tracks: Sequence[FaceTrack], records: Iterable[EmbeddingRecord]) -> List[FaceTrack]:
    """
    Average each track's face embedding samples onto the track.

    Tracks with no samples are left out with a warning.
    """
    grouped: Dict[str, List[EmbeddingRecord]] = {}
    for record in records:
        grouped.setdefault(record.owner_id, []).append(record)

    result = []
    missing = []
    for track in tracks:
        samples = sorted(grouped.get(track.track_id, []), key=_sample_order)
        if not samples:
            missing.append(track.track_id)
            continue
        result.append(track.with_embedding(average_track_embedding([s.vector for s in samples])))
    if missing:
        logger.warning(f"{len(missing)} tracks have no face embeddings and are not clustered: {missing[:5]}")
    unknown = sorted(set(grouped) - {t.track_id for t in tracks})
    if unknown:
        logger.warning(f"Face embeddings reference {len(unknown)} unknown tracks: {unknown[:5]}")
    return result


def tracks_overlap_in_time(a: FaceTrack, b: FaceTrack) -> bool:
    return a.interval.overlaps(b.interval)


def write_tracks(tracks: Iterable[FaceTrack]) -> str:
    return dump_json_records(
        {
            "track_id": t.track_id,
            "shot_index": t.shot_index,
            "onset_ms": t.interval.onset_ms,
            "offset_ms": t.interval.offset_ms,
            "frames": [detection_to_dict(d) for d in t.frames],
        }
        for t in tracks
    )


def read_tracks(lines: Source) -> List[FaceTrack]:
    """Parse a tracks file; frame indices inside a track must strictly increase."""
    tracks = []
    for number, obj in iter_json_records(lines):
        track_id = require(obj, "track_id", str, number)
        frames_raw = require(obj, "frames", list, number)
        frames = []
        for item in frames_raw:
            if not isinstance(item, dict):
                raise ParseError("track frames must be objects", number)
            frames.append(detection_from_dict(item, number))
        for prev, cur in zip(frames, frames[1:]):
            if cur.frame_index <= prev.frame_index:
                raise ParseError(
                    f"track '{track_id}': non-monotone frame indices {prev.frame_index} -> {cur.frame_index}",
                    number,
                )
        try:
            tracks.append(
                FaceTrack(
                    track_id=track_id,
                    shot_index=require(obj, "shot_index", int, number),
                    frames=tuple(frames),
                    interval=Interval(
                        require(obj, "onset_ms", int, number),
                        require(obj, "offset_ms", int, number),
                    ),
                )
            )
        except ValidationError as e:
            raise ParseError(str(e), number)
    return tracks
