"""
Interval and timeline algebra on an integer millisecond grid.

Intervals are half-open ``[onset_ms, offset_ms)``. A ``Timeline`` is kept in
canonical form: sorted, disjoint, and with touching intervals coalesced, so two
timelines covering the same milliseconds compare equal.
"""
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation, ROUND_HALF_UP
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from utils.exceptions import ValidationError

_MS_PER_SECOND = Decimal(1000)


def seconds_to_ms(value: Union[str, float, int, Decimal]) -> int:
    """
    Convert seconds to integer milliseconds, rounding half away from zero.

    Args:
        value: Seconds as text or a number

    Returns:
        Milliseconds

    Raises:
        ValueError: If the value is not a finite number
    """
    try:
        seconds = value if isinstance(value, Decimal) else Decimal(str(value).strip())
    except InvalidOperation:
        raise ValueError(f"not a number: {value!r}")
    if not seconds.is_finite():
        raise ValueError(f"not a finite number: {value!r}")
    return int((seconds * _MS_PER_SECOND).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def ms_to_seconds(ms: int) -> str:
    """Format milliseconds as seconds with exactly three decimals."""
    sign = "-" if ms < 0 else ""
    ms = abs(int(ms))
    return f"{sign}{ms // 1000}.{ms % 1000:03d}"


@dataclass(frozen=True, order=True)
class Interval:
    """Half-open time span ``[onset_ms, offset_ms)``."""

    onset_ms: int
    offset_ms: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "onset_ms", int(self.onset_ms))
        object.__setattr__(self, "offset_ms", int(self.offset_ms))
        if self.onset_ms >= self.offset_ms:
            raise ValidationError(
                f"Interval must have onset < offset, got [{self.onset_ms}, {self.offset_ms})"
            )

    @property
    def duration_ms(self) -> int:
        return self.offset_ms - self.onset_ms

    def overlaps(self, other: "Interval") -> bool:
        return self.onset_ms < other.offset_ms and other.onset_ms < self.offset_ms

    def intersection(self, other: "Interval") -> Optional["Interval"]:
        lo = max(self.onset_ms, other.onset_ms)
        hi = min(self.offset_ms, other.offset_ms)
        return Interval(lo, hi) if lo < hi else None

    def __repr__(self) -> str:
        return f"[{self.onset_ms},{self.offset_ms})"


IntervalLike = Union[Interval, Tuple[int, int]]


def _as_interval(item: IntervalLike) -> Interval:
    if isinstance(item, Interval):
        return item
    onset, offset = item
    return Interval(onset, offset)


class Timeline:
    """Canonical union of intervals."""

    __slots__ = ("_intervals",)

    def __init__(self, intervals: Iterable[IntervalLike] = ()):
        self._intervals: Tuple[Interval, ...] = _normalize(_as_interval(i) for i in intervals)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[int, int]]) -> "Timeline":
        return cls(Interval(on, off) for on, off in pairs)

    @property
    def intervals(self) -> Tuple[Interval, ...]:
        return self._intervals

    def __iter__(self) -> Iterator[Interval]:
        return iter(self._intervals)

    def __len__(self) -> int:
        return len(self._intervals)

    def __bool__(self) -> bool:
        return bool(self._intervals)

    def __getitem__(self, index: int) -> Interval:
        return self._intervals[index]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Timeline):
            return NotImplemented
        return self._intervals == other._intervals

    def __hash__(self) -> int:
        return hash(self._intervals)

    def __repr__(self) -> str:
        if not self._intervals:
            return "Timeline(∅)"
        return "Timeline(" + "∪".join(repr(i) for i in self._intervals) + ")"

    def to_pairs(self) -> List[Tuple[int, int]]:
        return [(i.onset_ms, i.offset_ms) for i in self._intervals]

    def union(self, other: "Timeline") -> "Timeline":
        return union(self, other)

    def intersect(self, other: "Timeline") -> "Timeline":
        return intersect(self, other)

    def subtract(self, other: "Timeline") -> "Timeline":
        return subtract(self, other)

    def merge_gaps(self, max_gap_ms: int) -> "Timeline":
        return merge_gaps(self, max_gap_ms)

    def total_duration(self) -> int:
        return total_duration(self)

    def drop_shorter(self, min_ms: int) -> "Timeline":
        """Remove intervals shorter than ``min_ms``."""
        return Timeline(i for i in self._intervals if i.duration_ms >= min_ms)

    def clip(self, interval: Interval) -> "Timeline":
        return intersect(self, Timeline([interval]))

    def contains(self, other: "Timeline") -> bool:
        """True if every millisecond of ``other`` is covered."""
        return not subtract(other, self)

    def overlaps(self, other: "Timeline") -> bool:
        return bool(intersect(self, other))

    def span(self) -> Optional[Interval]:
        if not self._intervals:
            return None
        return Interval(self._intervals[0].onset_ms, self._intervals[-1].offset_ms)


def _normalize(intervals: Iterable[Interval]) -> Tuple[Interval, ...]:
    ordered = sorted(intervals)
    merged: List[Interval] = []
    for interval in ordered:
        if merged and interval.onset_ms <= merged[-1].offset_ms:
            last = merged[-1]
            if interval.offset_ms > last.offset_ms:
                merged[-1] = Interval(last.onset_ms, interval.offset_ms)
        else:
            merged.append(interval)
    return tuple(merged)


def union(a: Timeline, b: Timeline) -> Timeline:
    """Milliseconds covered by either timeline."""
    return Timeline(a.intervals + b.intervals)


def intersect(a: Timeline, b: Timeline) -> Timeline:
    """Milliseconds covered by both timelines."""
    left, right = a.intervals, b.intervals
    i = j = 0
    out: List[Interval] = []
    while i < len(left) and j < len(right):
        lo = max(left[i].onset_ms, right[j].onset_ms)
        hi = min(left[i].offset_ms, right[j].offset_ms)
        if lo < hi:
            out.append(Interval(lo, hi))
        if left[i].offset_ms < right[j].offset_ms:
            i += 1
        else:
            j += 1
    return Timeline(out)


def subtract(a: Timeline, b: Timeline) -> Timeline:
    """Milliseconds covered by ``a`` but not by ``b``."""
    cut = b.intervals
    out: List[Interval] = []
    j = 0
    for interval in a:
        start = interval.onset_ms
        while j < len(cut) and cut[j].offset_ms <= start:
            j += 1
        k = j
        while k < len(cut) and cut[k].onset_ms < interval.offset_ms:
            if cut[k].onset_ms > start:
                out.append(Interval(start, cut[k].onset_ms))
            start = max(start, cut[k].offset_ms)
            if start >= interval.offset_ms:
                break
            k += 1
        if start < interval.offset_ms:
            out.append(Interval(start, interval.offset_ms))
    return Timeline(out)


def merge_gaps(t: Timeline, max_gap_ms: int) -> Timeline:
    """Coalesce consecutive intervals separated by at most ``max_gap_ms``."""
    if max_gap_ms < 0:
        raise ValidationError(f"max_gap_ms must be >= 0, got {max_gap_ms}")
    merged: List[Interval] = []
    for interval in t:
        if merged and interval.onset_ms - merged[-1].offset_ms <= max_gap_ms:
            merged[-1] = Interval(merged[-1].onset_ms, interval.offset_ms)
        else:
            merged.append(interval)
    return Timeline(merged)


def total_duration(t: Timeline) -> int:
    return sum(i.duration_ms for i in t)


def coverage(timelines: Sequence[Timeline], min_count: int) -> Timeline:
    """
    Region covered by at least ``min_count`` of the given timelines.

    Args:
        timelines: Timelines to count over
        min_count: Minimum number of simultaneously active timelines

    Returns:
        Timeline where the active count is >= min_count
    """
    if min_count < 1:
        raise ValidationError(f"min_count must be >= 1, got {min_count}")
    deltas: Dict[int, int] = {}
    for timeline in timelines:
        for interval in timeline:
            deltas[interval.onset_ms] = deltas.get(interval.onset_ms, 0) + 1
            deltas[interval.offset_ms] = deltas.get(interval.offset_ms, 0) - 1
    out: List[Interval] = []
    count = 0
    start: Optional[int] = None
    for t in sorted(deltas):
        count += deltas[t]
        if count >= min_count and start is None:
            start = t
        elif count < min_count and start is not None:
            out.append(Interval(start, t))
            start = None
    return Timeline(out)
