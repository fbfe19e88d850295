"""
Diarization error rate and dataset statistics.

DER is scored per millisecond with speaker-count semantics, overlap
included: at every scored instant the reference and the hypothesis are sets
of active speakers, compared under one optimal reference-to-hypothesis
mapping chosen for the whole recording.
"""
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from diarization.formats import Diarization
from diarization.timeline import Interval, Timeline, subtract, total_duration
from utils.exceptions import ScoringError, ValidationError
from utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class DerBreakdown:
    missed_ms: int = 0
    false_alarm_ms: int = 0
    confusion_ms: int = 0
    scored_ref_speech_ms: int = 0

    def _pct(self, value: int) -> float:
        if self.scored_ref_speech_ms > 0:
            return 100.0 * value / self.scored_ref_speech_ms
        return 0.0 if value == 0 else math.inf

    @property
    def ms_pct(self) -> float:
        return self._pct(self.missed_ms)

    @property
    def fa_pct(self) -> float:
        return self._pct(self.false_alarm_ms)

    @property
    def sc_pct(self) -> float:
        return self._pct(self.confusion_ms)

    @property
    def der_pct(self) -> float:
        return self.ms_pct + self.fa_pct + self.sc_pct

    @property
    def error_ms(self) -> int:
        return self.missed_ms + self.false_alarm_ms + self.confusion_ms

    @property
    def undefined(self) -> bool:
        """No scored reference speech but some hypothesis error: DER is reported as +inf."""
        return self.scored_ref_speech_ms == 0 and self.error_ms > 0

    def __add__(self, other: "DerBreakdown") -> "DerBreakdown":
        return DerBreakdown(
            self.missed_ms + other.missed_ms,
            self.false_alarm_ms + other.false_alarm_ms,
            self.confusion_ms + other.confusion_ms,
            self.scored_ref_speech_ms + other.scored_ref_speech_ms,
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            "missed_ms": self.missed_ms,
            "false_alarm_ms": self.false_alarm_ms,
            "confusion_ms": self.confusion_ms,
            "scored_ref_speech_ms": self.scored_ref_speech_ms,
            "ms_pct": self.ms_pct,
            "fa_pct": self.fa_pct,
            "sc_pct": self.sc_pct,
            "der_pct": self.der_pct,
            "undefined": self.undefined,
        }

    def format_row(self) -> str:
        """MS, FA, SC and DER in percent with one decimal."""
        return f"MS {self.ms_pct:.1f} FA {self.fa_pct:.1f} SC {self.sc_pct:.1f} DER {self.der_pct:.1f}"


def aggregate(breakdowns: Iterable[DerBreakdown]) -> DerBreakdown:
    """Duration-weighted total: summed error over summed scored reference speech."""
    total = DerBreakdown()
    for breakdown in breakdowns:
        total = total + breakdown
    return total


def optimal_mapping(overlap_matrix: np.ndarray) -> Dict[int, int]:
    """
    One-to-one reference -> hypothesis mapping maximizing total overlap.

    Args:
        overlap_matrix: R x H matrix of co-occurrence durations

    Returns:
        Partial mapping; pairs with zero overlap are left unmapped
    """
    matrix = np.asarray(overlap_matrix, dtype=float)
    if matrix.size == 0:
        return {}
    if (matrix < 0).any():
        raise ScoringError("overlap matrix entries must be non-negative")
    rows, cols = linear_sum_assignment(matrix, maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols) if matrix[r, c] > 0}


def apply_collar(ref: Diarization, collar_ms: int) -> Timeline:
    """Regions within ``collar_ms`` of any reference turn boundary."""
    if collar_ms <= 0:
        return Timeline()
    boundaries = set()
    for _, interval in ref.turns:
        boundaries.add(interval.onset_ms)
        boundaries.add(interval.offset_ms)
    return Timeline(Interval(b - collar_ms, b + collar_ms) for b in boundaries)


class Segment(NamedTuple):
    duration_ms: int
    ref: FrozenSet[int]
    hyp: FrozenSet[int]


def _scored_region(ref: Diarization, hyp: Diarization, collar_ms: int, uem: Optional[Timeline]) -> Timeline:
    if uem is None:
        span = Timeline(list(ref.speech()) + list(hyp.speech())).span()
        region = Timeline([span]) if span else Timeline()
    else:
        region = uem
    return subtract(region, apply_collar(ref, collar_ms))


def elementary_segments(
    ref_timelines: Sequence[Timeline], hyp_timelines: Sequence[Timeline], region: Timeline
) -> List[Segment]:
    """Split ``region`` wherever any speaker starts or stops; keep pieces with speech."""
    deltas: Dict[int, List[Tuple[int, int, int]]] = {}

    def add(timelines: Sequence[Timeline], side: int) -> None:
        for k, timeline in enumerate(timelines):
            for interval in timeline:
                deltas.setdefault(interval.onset_ms, []).append((side, k, 1))
                deltas.setdefault(interval.offset_ms, []).append((side, k, -1))

    add(ref_timelines, 0)
    add(hyp_timelines, 1)
    add([region], 2)

    counts = [np.zeros(len(ref_timelines), dtype=int), np.zeros(len(hyp_timelines), dtype=int), np.zeros(1, dtype=int)]
    points = sorted(deltas)
    segments: List[Segment] = []
    for t0, t1 in zip(points, points[1:]):
        for side, k, step in deltas[t0]:
            counts[side][k] += step
        if counts[2][0] <= 0:
            continue
        ref_active = frozenset(int(k) for k in np.flatnonzero(counts[0]))
        hyp_active = frozenset(int(k) for k in np.flatnonzero(counts[1]))
        if ref_active or hyp_active:
            segments.append(Segment(t1 - t0, ref_active, hyp_active))
    return segments


def der(
    ref: Diarization,
    hyp: Diarization,
    collar_ms: int = 0,
    uem: Optional[Timeline] = None,
) -> DerBreakdown:
    """
    Score a hypothesis against a reference.

    Args:
        ref: Reference diarization
        hyp: Hypothesis diarization for the same recording
        collar_ms: Half-width of the no-score zone around reference boundaries
        uem: Scoring region; None scores the span of all speech

    Returns:
        DerBreakdown

    Raises:
        ScoringError: Recording ids differ
    """
    if ref.recording_id != hyp.recording_id:
        raise ScoringError(f"recording id mismatch: '{ref.recording_id}' vs '{hyp.recording_id}'")
    ref_t = list(ref.timelines().values())
    hyp_t = list(hyp.timelines().values())
    segments = elementary_segments(ref_t, hyp_t, _scored_region(ref, hyp, collar_ms, uem))

    overlap = np.zeros((len(ref_t), len(hyp_t)))
    for segment in segments:
        for r in segment.ref:
            for h in segment.hyp:
                overlap[r, h] += segment.duration_ms
    mapping = optimal_mapping(overlap)

    missed = false_alarm = confusion = scored = 0
    for d, refs, hyps in segments:
        n_ref, n_hyp = len(refs), len(hyps)
        correct = sum(1 for r in refs if mapping.get(r) in hyps)
        scored += d * n_ref
        missed += d * max(0, n_ref - n_hyp)
        false_alarm += d * max(0, n_hyp - n_ref)
        confusion += d * (min(n_ref, n_hyp) - correct)
    return DerBreakdown(missed, false_alarm, confusion, scored)


def score_recordings(
    refs: Sequence[Diarization],
    hyps: Sequence[Diarization],
    collar_ms: int = 0,
    uem: Optional[Dict[str, Timeline]] = None,
) -> Tuple[pd.DataFrame, DerBreakdown]:
    """
    Score every reference recording; a missing hypothesis scores as empty.

    Returns:
        Per-recording table sorted by recording id, and the aggregate breakdown
    """
    by_id = {h.recording_id: h for h in hyps}
    extra = sorted(set(by_id) - {r.recording_id for r in refs})
    if extra:
        logger.warning(f"Hypothesis recordings without reference are ignored: {extra}")

    rows = []
    breakdowns = []
    for ref in sorted(refs, key=lambda r: r.recording_id):
        hyp = by_id.get(ref.recording_id, Diarization(ref.recording_id))
        region = None
        if uem is not None:
            region = uem.get(ref.recording_id)
            if region is None:
                logger.warning(f"{ref.recording_id}: not in UEM, scoring the full span")
        breakdown = der(ref, hyp, collar_ms, region)
        breakdowns.append(breakdown)
        rows.append({"recording_id": ref.recording_id, **breakdown.to_dict()})
    table = pd.DataFrame(rows, columns=["recording_id"] + list(DerBreakdown().to_dict()))
    return table, aggregate(breakdowns)


class MinMeanMax(NamedTuple):
    min: float
    mean: float
    max: float

    def format(self, digits: int = 1) -> str:
        return f"{self.min:.{digits}f} / {self.mean:.{digits}f} / {self.max:.{digits}f}"


@dataclass(frozen=True, eq=False)
class DatasetStats:
    n_videos: int
    total_minutes: float
    speakers: MinMeanMax
    durations_s: MinMeanMax
    speech_pct: MinMeanMax
    overlap_pct: MinMeanMax
    per_video: pd.DataFrame

    def format_row(self, name: str) -> str:
        """One row shaped like a dataset statistics table."""
        spk = f"{self.speakers.min:.0f} / {self.speakers.mean:.1f} / {self.speakers.max:.0f}"
        return (
            f"{name} | {self.n_videos} | {self.total_minutes:,.0f} | {spk} | "
            f"{self.durations_s.format()} | {self.speech_pct.format()} | {self.overlap_pct.format()}"
        )

    def to_dict(self) -> Dict[str, object]:
        return {
            "n_videos": self.n_videos,
            "total_minutes": self.total_minutes,
            "speakers": self.speakers._asdict(),
            "durations_s": self.durations_s._asdict(),
            "speech_pct": self.speech_pct._asdict(),
            "overlap_pct": self.overlap_pct._asdict(),
        }


def _summary(column: pd.Series) -> MinMeanMax:
    return MinMeanMax(float(column.min()), float(column.mean()), float(column.max()))


def dataset_stats(refs: Sequence[Diarization], durations: Dict[str, int]) -> DatasetStats:
    """
    Per-video speaker count, duration, speech % and overlap %, summarized.

    speech % is speech time over video time; overlap % is time with two or
    more speakers over speech time.

    Args:
        refs: Reference diarizations
        durations: Video duration in ms per recording id

    Raises:
        ValidationError: Missing or zero video duration, or no videos
    """
    if not refs:
        raise ValidationError("no recordings to summarize")
    rows = []
    for ref in sorted(refs, key=lambda r: r.recording_id):
        duration = durations.get(ref.recording_id)
        if duration is None:
            raise ValidationError(f"{ref.recording_id}: no video duration given")
        if duration <= 0:
            raise ValidationError(f"{ref.recording_id}: zero-duration video")
        video = Interval(0, duration)
        speech = total_duration(ref.speech().clip(video))
        overlap = total_duration(ref.overlap().clip(video))
        rows.append(
            {
                "recording_id": ref.recording_id,
                "n_speakers": len(ref.speakers),
                "duration_s": duration / 1000.0,
                "speech_pct": 100.0 * speech / duration,
                "overlap_pct": 100.0 * overlap / speech if speech else 0.0,
            }
        )
    table = pd.DataFrame(rows)
    return DatasetStats(
        n_videos=len(table),
        total_minutes=float(table["duration_s"].sum()) / 60.0,
        speakers=_summary(table["n_speakers"]),
        durations_s=_summary(table["duration_s"]),
        speech_pct=_summary(table["speech_pct"]),
        overlap_pct=_summary(table["overlap_pct"]),
        per_video=table,
    )
