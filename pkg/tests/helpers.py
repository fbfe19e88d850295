"""Small builders shared by the test modules."""
from typing import List, Tuple

import numpy as np

from diarization.formats import Diarization, Turn
from diarization.timeline import Interval, Timeline


def make_diar(recording_id: str, turns: List[Tuple[str, int, int]]) -> Diarization:
    return Diarization(recording_id, tuple(Turn(s, Interval(a, b)) for s, a, b in turns))


def bitmap(timeline: Timeline, length: int, offset: int = 0) -> np.ndarray:
    bits = np.zeros(length, dtype=bool)
    for i in timeline:
        bits[max(0, i.onset_ms - offset):max(0, i.offset_ms - offset)] = True
    return bits


def random_timeline(rng: np.random.Generator, n: int, span: int = 1000, max_len: int = 80) -> Timeline:
    intervals = []
    for _ in range(n):
        onset = int(rng.integers(0, span))
        intervals.append(Interval(onset, onset + int(rng.integers(1, max_len))))
    return Timeline(intervals)


def unit(*values: float) -> np.ndarray:
    vector = np.asarray(values, dtype=float)
    return vector / np.linalg.norm(vector)
