"""
Readers and writers for RTTM, UEM and the toolkit's interchange files.

Interchange files are JSON Lines: one object per line with explicit keys.
Every reader reports malformed input as ``ParseError`` carrying the 1-based
line number; blank lines and trailing whitespace are ignored.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import yaml

from diarization.timeline import Interval, Timeline, coverage, ms_to_seconds, seconds_to_ms, union
from utils.exceptions import ParseError, ValidationError
from utils.logger import get_logger

logger = get_logger(__name__)

Source = Union[str, Iterable[str]]

RTTM_NA = "<NA>"


class Turn(NamedTuple):
    speaker: str
    interval: Interval


def _turn_key(turn: Turn) -> Tuple[int, str, int]:
    return (turn.interval.onset_ms, turn.speaker, turn.interval.offset_ms)


@dataclass(frozen=True)
class Diarization:
    """Speaker turns of one recording. Speakers may overlap each other but not themselves."""

    recording_id: str
    turns: Tuple[Turn, ...] = ()

    def __post_init__(self) -> None:
        turns = tuple(sorted((Turn(str(s), i) for s, i in self.turns), key=_turn_key))
        object.__setattr__(self, "turns", turns)
        last_offset: Dict[str, int] = {}
        for speaker, interval in sorted(turns, key=lambda t: (t.speaker, t.interval.onset_ms)):
            if speaker in last_offset and interval.onset_ms < last_offset[speaker]:
                raise ValidationError(
                    f"{self.recording_id}: speaker '{speaker}' overlaps itself at "
                    f"{ms_to_seconds(interval.onset_ms)} s"
                )
            last_offset[speaker] = interval.offset_ms

    @classmethod
    def from_timelines(cls, recording_id: str, timelines: Dict[str, Timeline]) -> "Diarization":
        return cls(
            recording_id,
            tuple(Turn(speaker, i) for speaker, t in timelines.items() for i in t),
        )

    @property
    def speakers(self) -> List[str]:
        return sorted({t.speaker for t in self.turns})

    def timeline(self, speaker: str) -> Timeline:
        return Timeline(t.interval for t in self.turns if t.speaker == speaker)

    def timelines(self) -> Dict[str, Timeline]:
        grouped: Dict[str, List[Interval]] = {}
        for speaker, interval in self.turns:
            grouped.setdefault(speaker, []).append(interval)
        return {speaker: Timeline(grouped[speaker]) for speaker in sorted(grouped)}

    def speech(self) -> Timeline:
        """Milliseconds where anyone speaks."""
        return Timeline(t.interval for t in self.turns)

    def overlap(self) -> Timeline:
        """Milliseconds where two or more speakers are active."""
        return coverage(list(self.timelines().values()), 2)

    def relabel(self, mapping: Dict[str, str]) -> "Diarization":
        return Diarization(
            self.recording_id,
            tuple(Turn(mapping.get(s, s), i) for s, i in self.turns),
        )

    def merge(self, other: "Diarization") -> "Diarization":
        """Union two diarizations speaker by speaker."""
        timelines = self.timelines()
        for speaker, timeline in other.timelines().items():
            timelines[speaker] = union(timelines.get(speaker, Timeline()), timeline)
        return Diarization.from_timelines(self.recording_id, timelines)

    def __len__(self) -> int:
        return len(self.turns)


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """Embedding vector of a face track sample or a speech segment."""

    owner_id: str
    interval: Interval
    vector: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True, eq=False)
class ScoreStream:
    """Uniformly sampled scalar stream: value k covers [start + k*hop, start + (k+1)*hop)."""

    owner_id: str
    start_ms: int
    hop_ms: int
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.hop_ms <= 0:
            raise ValidationError(f"stream '{self.owner_id}': hop_ms must be > 0, got {self.hop_ms}")
        values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"stream '{self.owner_id}' contains non-finite values")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def end_ms(self) -> int:
        return self.start_ms + self.hop_ms * len(self)


@dataclass(frozen=True)
class DetectionRecord:
    """One face box on one video frame."""

    frame_index: int
    x: float
    y: float
    width: float
    height: float
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(
                f"frame {self.frame_index}: box width and height must be > 0"
            )
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(
                f"frame {self.frame_index}: confidence {self.confidence} outside [0, 1]"
            )

    @property
    def box(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.width, self.height)


# ----------------------------------------------------------------------------
# RTTM / UEM
# ----------------------------------------------------------------------------

def _lines(source: Source) -> Iterator[Tuple[int, str]]:
    lines = source.splitlines() if isinstance(source, str) else source
    for number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if stripped:
            yield number, stripped


def read_rttm(text: Source) -> List[Diarization]:
    """
    Parse RTTM ``SPEAKER`` rows into one Diarization per recording.

    Args:
        text: RTTM content or an iterable of lines

    Returns:
        Diarizations sorted by recording id

    Raises:
        ParseError: Malformed row or negative duration
        ValidationError: A speaker overlaps itself
    """
    grouped: Dict[str, List[Turn]] = {}
    for number, line in _lines(text):
        fields = line.split()
        if len(fields) not in (9, 10):
            raise ParseError(f"expected 9 or 10 RTTM fields, got {len(fields)}", number)
        if fields[0] != "SPEAKER":
            raise ParseError(f"unsupported RTTM record type '{fields[0]}'", number)
        try:
            onset_ms = seconds_to_ms(fields[3])
            duration_ms = seconds_to_ms(fields[4])
        except ValueError as e:
            raise ParseError(str(e), number)
        if duration_ms < 0:
            raise ParseError(f"negative duration {fields[4]}", number)
        recording_id, speaker = fields[1], fields[7]
        if duration_ms == 0:
            logger.warning(f"RTTM line {number}: zero-length turn for '{speaker}' skipped")
            continue
        grouped.setdefault(recording_id, []).append(
            Turn(speaker, Interval(onset_ms, onset_ms + duration_ms))
        )
    return [Diarization(rec, tuple(grouped[rec])) for rec in sorted(grouped)]


def write_rttm(d: Diarization) -> str:
    """Serialize one diarization; rows sorted by onset then speaker."""
    rows = []
    for speaker, interval in d.turns:
        rows.append(
            f"SPEAKER {d.recording_id} 1 {ms_to_seconds(interval.onset_ms)} "
            f"{ms_to_seconds(interval.duration_ms)} {RTTM_NA} {RTTM_NA} {speaker} {RTTM_NA} {RTTM_NA}\n"
        )
    return "".join(rows)


def write_rttm_many(diarizations: Iterable[Diarization]) -> str:
    return "".join(write_rttm(d) for d in sorted(diarizations, key=lambda d: d.recording_id))


def read_uem(text: Source) -> Dict[str, Timeline]:
    """Parse ``<recording> 1 <onset s> <offset s>`` rows into scoring regions."""
    regions: Dict[str, List[Interval]] = {}
    for number, line in _lines(text):
        fields = line.split()
        if len(fields) != 4:
            raise ParseError(f"expected 4 UEM fields, got {len(fields)}", number)
        try:
            onset_ms, offset_ms = seconds_to_ms(fields[2]), seconds_to_ms(fields[3])
        except ValueError as e:
            raise ParseError(str(e), number)
        if offset_ms <= onset_ms:
            raise ParseError("UEM region must have onset < offset", number)
        regions.setdefault(fields[0], []).append(Interval(onset_ms, offset_ms))
    return {rec: Timeline(regions[rec]) for rec in sorted(regions)}


def write_uem(regions: Dict[str, Timeline]) -> str:
    rows = []
    for rec in sorted(regions):
        for interval in regions[rec]:
            rows.append(
                f"{rec} 1 {ms_to_seconds(interval.onset_ms)} {ms_to_seconds(interval.offset_ms)}\n"
            )
    return "".join(rows)


# ----------------------------------------------------------------------------
# JSON Lines interchange files
# ----------------------------------------------------------------------------

def iter_json_records(source: Source) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield ``(line_number, object)`` for every non-blank line."""
    for number, line in _lines(source):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", number)
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", number)
        yield number, obj


def dump_json_records(records: Iterable[Dict[str, Any]]) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)


def require(obj: Dict[str, Any], key: str, kind: type, number: int) -> Any:
    """Fetch a typed field from a parsed record."""
    if key not in obj:
        raise ParseError(f"missing field '{key}'", number)
    value = obj[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and not math.isfinite(value):
            raise ParseError(f"field '{key}' is not finite", number)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ParseError(f"field '{key}' must be {kind.__name__}", number)
    return value


def _vector(values: Any, key: str, number: int) -> np.ndarray:
    if not isinstance(values, list):
        raise ParseError(f"field '{key}' must be a list", number)
    try:
        vector = np.asarray(values, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(f"field '{key}' must hold numbers", number)
    if vector.ndim != 1:
        raise ParseError(f"field '{key}' must be flat", number)
    if not np.all(np.isfinite(vector)):
        raise ParseError(f"field '{key}' contains non-finite values", number)
    return vector


def read_embeddings(lines: Source) -> List[EmbeddingRecord]:
    """
    Parse an embeddings file.

    Raises:
        ParseError: Missing fields, non-finite values, or a dimension that
            differs from the declared ``dim`` or from earlier records
    """
    records: List[EmbeddingRecord] = []
    file_dim: Optional[int] = None
    for number, obj in iter_json_records(lines):
        owner_id = require(obj, "owner_id", str, number)
        onset_ms = require(obj, "onset_ms", int, number)
        offset_ms = require(obj, "offset_ms", int, number)
        dim = require(obj, "dim", int, number)
        vector = _vector(require(obj, "vector", list, number), "vector", number)
        if vector.shape[0] != dim:
            raise ParseError(f"declared dim {dim} but vector has {vector.shape[0]} values", number)
        if file_dim is None:
            file_dim = dim
        elif dim != file_dim:
            raise ParseError(f"dimension mismatch: {dim} != {file_dim}", number)
        try:
            interval = Interval(onset_ms, offset_ms)
        except ValidationError as e:
            raise ParseError(str(e), number)
        vector.setflags(write=False)
        records.append(EmbeddingRecord(owner_id, interval, vector))
    return records


def write_embeddings(records: Iterable[EmbeddingRecord]) -> str:
    return dump_json_records(
        {
            "owner_id": r.owner_id,
            "onset_ms": r.interval.onset_ms,
            "offset_ms": r.interval.offset_ms,
            "dim": r.dim,
            "vector": [float(v) for v in r.vector],
        }
        for r in records
    )


def read_scores(lines: Source) -> List[ScoreStream]:
    """Parse a score stream file (one stream per line)."""
    streams: List[ScoreStream] = []
    for number, obj in iter_json_records(lines):
        owner_id = require(obj, "owner_id", str, number)
        start_ms = require(obj, "start_ms", int, number)
        hop_ms = require(obj, "hop_ms", int, number)
        count = require(obj, "count", int, number)
        values = _vector(require(obj, "values", list, number), "values", number)
        if hop_ms <= 0:
            raise ParseError(f"hop_ms must be > 0, got {hop_ms}", number)
        if values.shape[0] != count:
            raise ParseError(f"declared count {count} but {values.shape[0]} values", number)
        streams.append(ScoreStream(owner_id, start_ms, hop_ms, values))
    return streams


def write_scores(streams: Iterable[ScoreStream]) -> str:
    return dump_json_records(
        {
            "owner_id": s.owner_id,
            "start_ms": s.start_ms,
            "hop_ms": s.hop_ms,
            "count": len(s),
            "values": [float(v) for v in s.values],
        }
        for s in streams
    )


def detection_to_dict(d: DetectionRecord) -> Dict[str, Any]:
    return {
        "frame": d.frame_index,
        "x": d.x,
        "y": d.y,
        "w": d.width,
        "h": d.height,
        "conf": d.confidence,
    }


def detection_from_dict(obj: Dict[str, Any], number: int) -> DetectionRecord:
    frame = require(obj, "frame", int, number)
    if frame < 0:
        raise ParseError(f"frame index must be >= 0, got {frame}", number)
    try:
        return DetectionRecord(
            frame,
            require(obj, "x", float, number),
            require(obj, "y", float, number),
            require(obj, "w", float, number),
            require(obj, "h", float, number),
            require(obj, "conf", float, number),
        )
    except ValidationError as e:
        raise ParseError(str(e), number)


def read_detections(lines: Source) -> List[DetectionRecord]:
    """Parse per-frame face detections; frame indices must not decrease."""
    detections: List[DetectionRecord] = []
    for number, obj in iter_json_records(lines):
        detection = detection_from_dict(obj, number)
        if detections and detection.frame_index < detections[-1].frame_index:
            raise ParseError(
                f"frame index {detection.frame_index} after {detections[-1].frame_index}: "
                "detections must be sorted by frame",
                number,
            )
        detections.append(detection)
    return detections


def write_detections(detections: Iterable[DetectionRecord]) -> str:
    return dump_json_records(detection_to_dict(d) for d in detections)


def read_shots(lines: Source) -> List[Interval]:
    shots: List[Interval] = []
    for number, obj in iter_json_records(lines):
        onset_ms = require(obj, "onset_ms", int, number)
        offset_ms = require(obj, "offset_ms", int, number)
        try:
            shots.append(Interval(onset_ms, offset_ms))
        except ValidationError as e:
            raise ParseError(str(e), number)
    return shots


def write_shots(shots: Iterable[Interval]) -> str:
    return dump_json_records({"onset_ms": s.onset_ms, "offset_ms": s.offset_ms} for s in shots)


# ----------------------------------------------------------------------------
# Recording bundles
# ----------------------------------------------------------------------------

META_FILE = "meta.yaml"
BUNDLE_FILES = {
    "detections": "detections.jsonl",
    "shots": "shots.jsonl",
    "face_embeddings": "face_embeddings.jsonl",
    "sync_scores": "sync_scores.jsonl",
    "track_vad": "track_vad.jsonl",
    "recording_vad": "recording_vad.jsonl",
    "speech_embeddings": "speech_embeddings.jsonl",
}


@dataclass
class RecordingBundle:
    """Everything the pipeline consumes for one recording."""

    recording_id: str
    duration_ms: int
    frame_rate_hz: float
    detections: List[DetectionRecord] = field(default_factory=list)
    shots: List[Interval] = field(default_factory=list)
    face_embeddings: List[EmbeddingRecord] = field(default_factory=list)
    sync_scores: List[ScoreStream] = field(default_factory=list)
    track_vad: List[ScoreStream] = field(default_factory=list)
    recording_vad: List[ScoreStream] = field(default_factory=list)
    speech_embeddings: List[EmbeddingRecord] = field(default_factory=list)


def _read_file(directory: Path, name: str) -> str:
    path = directory / name
    if not path.is_file():
        raise ValidationError(f"bundle {directory} is incomplete: missing {name}")
    return path.read_text(encoding="utf-8")


def read_bundle(directory: Union[str, Path]) -> RecordingBundle:
    """
    Load a recording bundle directory.

    Args:
        directory: Directory holding meta.yaml and the interchange files

    Returns:
        RecordingBundle

    Raises:
        ValidationError: Missing files or bad metadata
        ParseError: Malformed interchange file (message names the file)
    """
    directory = Path(directory)
    try:
        meta = yaml.safe_load(_read_file(directory, META_FILE)) or {}
    except yaml.YAMLError as e:
        raise ParseError(f"{directory / META_FILE}: {e}")
    for key in ("recording_id", "duration_ms", "frame_rate_hz"):
        if key not in meta:
            raise ValidationError(f"{directory / META_FILE}: missing '{key}'")
    if float(meta["frame_rate_hz"]) <= 0:
        raise ValidationError(f"{directory / META_FILE}: frame_rate_hz must be > 0")

    readers = {
        "detections": read_detections,
        "shots": read_shots,
        "face_embeddings": read_embeddings,
        "sync_scores": read_scores,
        "track_vad": read_scores,
        "recording_vad": read_scores,
        "speech_embeddings": read_embeddings,
    }
    contents: Dict[str, Any] = {}
    for key, reader in readers.items():
        name = BUNDLE_FILES[key]
        try:
            contents[key] = reader(_read_file(directory, name))
        except ParseError as e:
            error = ParseError(f"{directory / name}: {e}")
            error.line_number = e.line_number
            raise error from e

    logger.debug(f"Loaded bundle {meta['recording_id']} from {directory}")
    return RecordingBundle(
        recording_id=str(meta["recording_id"]),
        duration_ms=int(meta["duration_ms"]),
        frame_rate_hz=float(meta["frame_rate_hz"]),
        **contents,
    )


def write_bundle(bundle: RecordingBundle, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "recording_id": bundle.recording_id,
        "duration_ms": bundle.duration_ms,
        "frame_rate_hz": bundle.frame_rate_hz,
    }
    (directory / META_FILE).write_text(yaml.safe_dump(meta, sort_keys=True), encoding="utf-8")
    writers = {
        "detections": write_detections(bundle.detections),
        "shots": write_shots(bundle.shots),
        "face_embeddings": write_embeddings(bundle.face_embeddings),
        "sync_scores": write_scores(bundle.sync_scores),
        "track_vad": write_scores(bundle.track_vad),
        "recording_vad": write_scores(bundle.recording_vad),
        "speech_embeddings": write_embeddings(bundle.speech_embeddings),
    }
    for key, text in writers.items():
        (directory / BUNDLE_FILES[key]).write_text(text, encoding="utf-8")
    return directory


def discover_bundles(root: Union[str, Path]) -> List[Path]:
    """
    List bundle directories under ``root``.

    A root holding meta.yaml is a single bundle; otherwise every direct
    sub-directory holding meta.yaml is one.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"input directory {root} does not exist")
    if (root / META_FILE).is_file():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / META_FILE).is_file())
