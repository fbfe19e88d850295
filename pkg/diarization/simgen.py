"""
Synthetic recordings with known ground truth, plus a brute-force DER oracle.

A scenario is generated on the video frame grid: turn sequences with
controlled cross-talk, static face boxes for the visible speakers, noisy
per-track embeddings and detector streams, and speech embeddings drawn
around a separate set of voice centroids.
"""
import dataclasses
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import yaml

from diarization.formats import (
    DetectionRecord,
    Diarization,
    EmbeddingRecord,
    RecordingBundle,
    ScoreStream,
    Turn,
)
from diarization.metrics import DerBreakdown
from diarization.timeline import Interval, Timeline, subtract, union
from diarization.tracker import FaceTrack, build_tracks
from utils.exceptions import ConfigurationError, ScoringError, SimulationError, ValidationError
from utils.logger import get_logger

logger = get_logger(__name__)

MAX_CENTROID_ATTEMPTS = 2000
FACE_SAMPLES_PER_TRACK = 5

MIN_TURN_MS = 1000
MEAN_TURN_EXTRA_MS = 3000
MAX_TURN_MS = 8000
MIN_OVERLAP_MS = 400
MEAN_OVERLAP_EXTRA_MS = 800
MAX_OVERLAP_MS = 4000
MIN_SOLO_PART_MS = 500
MEAN_SOLO_PART_EXTRA_MS = 1000
MAX_SOLO_PART_MS = 3000
MIN_PAUSE_MS = 300
MEAN_PAUSE_EXTRA_MS = 700
MAX_PAUSE_MS = 3000
MIN_SHOT_MS = 5000
MAX_SHOT_MS = 20000
BURST_HOPS = (10, 30)

BOX_SIZE = 120.0
BOX_SPACING = 200.0

BRUTE_FORCE_MAX_SPEAKERS = 6
BRUTE_FORCE_MAX_SPAN_MS = 600_000


@dataclass(frozen=True)
class ScenarioSpec:
    n_speakers: int = 4
    n_onscreen: int = 3
    duration_ms: int = 120_000
    embedding_dim: int = 32
    centroid_min_cosine_distance: float = 0.5
    embedding_noise_sigma: float = 0.0
    asd_false_alarm_rate: float = 0.0
    asd_miss_rate: float = 0.0
    overlap_fraction_target: float = 0.1
    rng_seed: int = 0
    frame_rate_hz: float = 25.0
    hidden_turn_fraction: float = 0.0
    recording_id: str = "sim_000"

    def __post_init__(self) -> None:
        if self.n_speakers < 1:
            raise ValidationError(f"n_speakers must be >= 1, got {self.n_speakers}")
        if not 1 <= self.n_onscreen <= self.n_speakers:
            raise ValidationError(f"n_onscreen must be in [1, n_speakers], got {self.n_onscreen}")
        if self.duration_ms < MIN_SHOT_MS:
            raise ValidationError(f"duration_ms must be >= {MIN_SHOT_MS}, got {self.duration_ms}")
        if self.embedding_dim < 2:
            raise ValidationError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if not 0.0 <= self.centroid_min_cosine_distance <= 2.0:
            raise ValidationError("centroid_min_cosine_distance must be in [0, 2]")
        if self.embedding_noise_sigma < 0:
            raise ValidationError("embedding_noise_sigma must be >= 0")
        for name in ("asd_false_alarm_rate", "asd_miss_rate", "overlap_fraction_target", "hidden_turn_fraction"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.frame_rate_hz <= 0 or not float(1000.0 / self.frame_rate_hz).is_integer():
            raise ValidationError(
                f"frame_rate_hz must split a second into whole milliseconds, got {self.frame_rate_hz}"
            )

    @property
    def frame_ms(self) -> int:
        return int(1000.0 / self.frame_rate_hz)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ScenarioSpec":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigurationError(f"unknown scenario settings: {unknown}")
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
                raise ConfigurationError(f"bad scenario setting {name}: {value!r} ({e})")
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "ScenarioSpec":
        try:
            with open(path, "r") as f:
                values = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigurationError(f"cannot read scenario file {path}: {e}")
        if not isinstance(values, dict):
            raise ConfigurationError(f"scenario file {path} must hold a mapping")
        return cls.from_dict(values)


class Scenario(NamedTuple):
    reference: Diarization
    bundle: RecordingBundle
    track_speakers: Dict[str, str]


def speaker_label(index: int) -> str:
    return f"spk_{index:02d}"


def _unit(vector: np.ndarray) -> np.ndarray:
    return vector / np.linalg.norm(vector)


def draw_centroids(rng: np.random.Generator, n: int, dim: int, min_distance: float) -> np.ndarray:
    """
    Unit vectors with pairwise cosine distance at least ``min_distance``.

    Raises:
        SimulationError: The spacing is not reached within the allowed attempts
    """
    centroids: List[np.ndarray] = []
    attempts = 0
    while len(centroids) < n:
        if attempts >= MAX_CENTROID_ATTEMPTS:
            raise SimulationError(
                f"cannot place {n} centroids in {dim} dimensions at cosine distance "
                f">= {min_distance} after {MAX_CENTROID_ATTEMPTS} attempts"
            )
        attempts += 1
        candidate = _unit(rng.standard_normal(dim))
        if all(1.0 - float(np.dot(candidate, c)) >= min_distance for c in centroids):
            centroids.append(candidate)
    return np.vstack(centroids)


def _noisy(rng: np.random.Generator, centroid: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return centroid.copy()
    vector = centroid + rng.normal(0.0, sigma, size=centroid.shape)
    norm = np.linalg.norm(vector)
    return centroid.copy() if norm < 1e-12 else vector / norm


def _frames(ms: float, frame_ms: int) -> int:
    return int(math.ceil(ms / frame_ms))


def _dwell(rng: np.random.Generator, minimum: int, mean_extra: int, maximum: int, frame_ms: int) -> int:
    ms = min(maximum, minimum + rng.exponential(mean_extra))
    return max(1, _frames(ms, frame_ms))


def _sequence_turns(
    spec: ScenarioSpec, rng: np.random.Generator, n_frames: int
) -> Tuple[List[Tuple[int, int, int]], List[Tuple[int, int, int]]]:
    """
    Two-state solo/overlap alternation in frame units.

    An overlap episode is chosen whenever the achieved overlap share of
    speech is below target, which keeps the running share close to it.

    Returns:
        (turns, hidden) as (speaker, first frame, end frame) triples
    """
    frame_ms = spec.frame_ms
    visible = list(range(spec.n_onscreen))
    turns: List[Tuple[int, int, int]] = []
    hidden: List[Tuple[int, int, int]] = []
    speech = overlap = 0
    previous: Optional[int] = None
    # one overlap episode must carry more than the target share of its speech
    overlap_mean = int(MEAN_OVERLAP_EXTRA_MS + 4000 * spec.overlap_fraction_target)
    t = _dwell(rng, MIN_PAUSE_MS, MEAN_PAUSE_EXTRA_MS, MAX_PAUSE_MS, frame_ms)
    if spec.overlap_fraction_target > 0 and len(visible) < 2:
        logger.warning("Fewer than two visible speakers: no cross-talk is generated")

    while True:
        crosstalk = len(visible) >= 2 and overlap < spec.overlap_fraction_target * speech
        if crosstalk or (speech == 0 and spec.overlap_fraction_target > 0 and len(visible) >= 2):
            o = _dwell(rng, MIN_OVERLAP_MS, overlap_mean, MAX_OVERLAP_MS, frame_ms)
            a = o + _dwell(rng, MIN_SOLO_PART_MS, MEAN_SOLO_PART_EXTRA_MS, MAX_SOLO_PART_MS, frame_ms)
            b = o + _dwell(rng, MIN_SOLO_PART_MS, MEAN_SOLO_PART_EXTRA_MS, MAX_SOLO_PART_MS, frame_ms)
            first, second = (int(s) for s in rng.choice(visible, size=2, replace=False))
            if t + a + b - o > n_frames:
                break
            turns.append((first, t, t + a))
            turns.append((second, t + a - o, t + a - o + b))
            speech += a + b - o
            overlap += o
            previous = second
            end = t + a - o + b
        else:
            choices = [s for s in range(spec.n_speakers) if s != previous] or [previous]
            speaker = int(rng.choice(choices))
            length = _dwell(rng, MIN_TURN_MS, MEAN_TURN_EXTRA_MS, MAX_TURN_MS, frame_ms)
            if t + length > n_frames:
                break
            turns.append((speaker, t, t + length))
            if speaker < spec.n_onscreen and rng.random() < spec.hidden_turn_fraction:
                hidden.append((speaker, t, t + length))
            speech += length
            previous = speaker
            end = t + length
        t = end + _dwell(rng, MIN_PAUSE_MS, MEAN_PAUSE_EXTRA_MS, MAX_PAUSE_MS, frame_ms)
    return turns, hidden


def _shot_cuts(speech: Timeline, n_frames: int, frame_ms: int) -> List[Interval]:
    """Cut shots in pauses, keeping shots between the minimum and maximum length where pauses allow."""
    min_frames = _frames(MIN_SHOT_MS, frame_ms)
    max_frames = _frames(MAX_SHOT_MS, frame_ms)
    pauses = subtract(Timeline([Interval(0, n_frames * frame_ms)]), speech)
    cuts = [0]
    for pause in pauses:
        middle = (pause.onset_ms + pause.offset_ms) // 2 // frame_ms
        if pause.onset_ms == 0 or pause.offset_ms == n_frames * frame_ms:
            continue
        length = middle - cuts[-1]
        if length >= max_frames or (length >= min_frames and n_frames - middle >= min_frames):
            cuts.append(middle)
    cuts.append(n_frames)
    return [Interval(a * frame_ms, b * frame_ms) for a, b in zip(cuts, cuts[1:]) if b > a]


def hop_mask(timeline: Timeline, start_ms: int, hop_ms: int, n: int) -> np.ndarray:
    """Hops [start + k*hop, start + (k+1)*hop) lying wholly inside ``timeline``."""
    mask = np.zeros(n, dtype=bool)
    for interval in timeline:
        a = max(0, -(-(interval.onset_ms - start_ms) // hop_ms))
        b = min(n, (interval.offset_ms - start_ms) // hop_ms)
        if b > a:
            mask[a:b] = True
    return mask


def _inject_bursts(rng: np.random.Generator, eligible: np.ndarray, rate: float) -> np.ndarray:
    """Flip roughly ``rate`` of the eligible hops, in bursts."""
    flipped = np.zeros(eligible.shape[0], dtype=bool)
    target = int(round(rate * int(eligible.sum())))
    if target == 0:
        return flipped
    n = eligible.shape[0]
    for _ in range(20 * (target // BURST_HOPS[0] + 1)):
        if int(flipped.sum()) >= target:
            break
        length = int(rng.integers(BURST_HOPS[0], BURST_HOPS[1] + 1))
        start = int(rng.integers(0, n))
        flipped[start:start + length] = True
        flipped &= eligible
    return flipped


def _track_streams(
    rng: np.random.Generator, track: FaceTrack, speaking: Timeline, spec: ScenarioSpec
) -> Tuple[ScoreStream, ScoreStream]:
    frame_ms = spec.frame_ms
    n = track.interval.duration_ms // frame_ms
    active = hop_mask(speaking, track.interval.onset_ms, frame_ms, n)

    def corrupt() -> np.ndarray:
        false_alarm = _inject_bursts(rng, ~active, spec.asd_false_alarm_rate)
        miss = _inject_bursts(rng, active, spec.asd_miss_rate)
        return (active | false_alarm) & ~miss

    sync_active = corrupt()
    high = rng.uniform(0.6, 1.0, size=n)
    low = rng.uniform(0.0, 0.4, size=n)
    sync = ScoreStream(track.track_id, track.interval.onset_ms, frame_ms, np.where(sync_active, high, low))
    vad = ScoreStream(track.track_id, track.interval.onset_ms, frame_ms, corrupt().astype(float))
    return sync, vad


def generate(spec: ScenarioSpec) -> Scenario:
    """
    Generate one synthetic recording and its ground truth.

    Args:
        spec: Scenario parameters; everything random derives from ``rng_seed``

    Returns:
        Scenario with the reference diarization, a complete bundle, and the
        speaker behind every face track

    Raises:
        SimulationError: Centroid spacing cannot be reached
    """
    rng = np.random.default_rng(spec.rng_seed)
    frame_ms = spec.frame_ms
    n_frames = spec.duration_ms // frame_ms
    face_centroids = draw_centroids(rng, spec.n_speakers, spec.embedding_dim, spec.centroid_min_cosine_distance)
    voice_centroids = draw_centroids(rng, spec.n_speakers, spec.embedding_dim, spec.centroid_min_cosine_distance)

    turns, hidden = _sequence_turns(spec, rng, n_frames)
    per_speaker: Dict[int, List[Interval]] = {}
    for speaker, a, b in turns:
        per_speaker.setdefault(speaker, []).append(Interval(a * frame_ms, b * frame_ms))
    timelines = {speaker_label(s): Timeline(v) for s, v in sorted(per_speaker.items())}
    reference = Diarization.from_timelines(spec.recording_id, timelines)
    speech = reference.speech()

    shots = _shot_cuts(speech, n_frames, frame_ms)
    hidden_by_speaker: Dict[int, Timeline] = {}
    for speaker, a, b in hidden:
        hidden_by_speaker[speaker] = union(
            hidden_by_speaker.get(speaker, Timeline()), Timeline([Interval(a * frame_ms, b * frame_ms)])
        )

    shown = [
        ~hop_mask(hidden_by_speaker.get(slot, Timeline()), 0, frame_ms, n_frames)
        for slot in range(spec.n_onscreen)
    ]
    detections: List[DetectionRecord] = []
    for frame in range(n_frames):
        for slot in range(spec.n_onscreen):
            if not shown[slot][frame]:
                continue
            detections.append(DetectionRecord(frame, 50.0 + slot * BOX_SPACING, 100.0, BOX_SIZE, BOX_SIZE, 0.99))

    tracks = build_tracks(detections, shots, spec.frame_rate_hz)
    track_speakers: Dict[str, str] = {}
    face_embeddings: List[EmbeddingRecord] = []
    sync_scores: List[ScoreStream] = []
    track_vad: List[ScoreStream] = []
    for track in tracks:
        slot = int(round((track.frames[0].x - 50.0) / BOX_SPACING))
        label = speaker_label(slot)
        track_speakers[track.track_id] = label
        picks = np.unique(np.linspace(0, len(track.frames) - 1, FACE_SAMPLES_PER_TRACK).round().astype(int))
        for k in picks:
            frame = track.frames[int(k)].frame_index
            face_embeddings.append(
                EmbeddingRecord(
                    track.track_id,
                    Interval(frame * frame_ms, (frame + 1) * frame_ms),
                    _noisy(rng, face_centroids[slot], spec.embedding_noise_sigma),
                )
            )
        sync, vad = _track_streams(rng, track, timelines.get(label, Timeline()), spec)
        sync_scores.append(sync)
        track_vad.append(vad)

    vad_values = hop_mask(speech, 0, frame_ms, n_frames).astype(float)
    recording_vad = [ScoreStream("recording", 0, frame_ms, vad_values)]

    solo = subtract(speech, reference.overlap())
    speech_embeddings: List[EmbeddingRecord] = []
    for speaker, timeline in sorted(per_speaker.items()):
        for interval in Timeline(timeline).intersect(solo):
            speech_embeddings.append(
                EmbeddingRecord("", interval, _noisy(rng, voice_centroids[speaker], spec.embedding_noise_sigma))
            )
    speech_embeddings.sort(key=lambda r: r.interval)
    speech_embeddings = [
        EmbeddingRecord(f"seg_{k:04d}", r.interval, r.vector) for k, r in enumerate(speech_embeddings)
    ]

    bundle = RecordingBundle(
        recording_id=spec.recording_id,
        duration_ms=n_frames * frame_ms,
        frame_rate_hz=spec.frame_rate_hz,
        detections=detections,
        shots=shots,
        face_embeddings=face_embeddings,
        sync_scores=sync_scores,
        track_vad=track_vad,
        recording_vad=recording_vad,
        speech_embeddings=speech_embeddings,
    )
    logger.info(
        f"Simulated {spec.recording_id}: {len(reference.speakers)} speakers, {len(turns)} turns, "
        f"{len(hidden)} hidden, {len(shots)} shots, {len(tracks)} tracks"
    )
    return Scenario(reference, bundle, track_speakers)


def generate_dataset(spec: ScenarioSpec, n_recordings: int) -> List[Scenario]:
    """``n_recordings`` scenarios with seeds rng_seed, rng_seed + 1, ..."""
    if n_recordings < 1:
        raise ValidationError(f"n_recordings must be >= 1, got {n_recordings}")
    if n_recordings == 1:
        return [generate(spec)]
    return [
        generate(
            dataclasses.replace(spec, rng_seed=spec.rng_seed + k, recording_id=f"{spec.recording_id}_{k:03d}")
        )
        for k in range(n_recordings)
    ]


def random_diarization(
    rng: np.random.Generator,
    recording_id: str = "rand",
    n_speakers: int = 3,
    span_ms: int = 30_000,
    max_turns: int = 6,
) -> Diarization:
    """Random turns for up to ``n_speakers`` speakers inside [0, span_ms)."""
    turns = []
    for s in range(n_speakers):
        k = int(rng.integers(0, max_turns + 1))
        if k == 0:
            continue
        points = np.sort(rng.choice(span_ms + 1, size=2 * k, replace=False))
        for a, b in zip(points[0::2], points[1::2]):
            turns.append(Turn(f"s{s}", Interval(int(a), int(b))))
    return Diarization(recording_id, tuple(turns))


def perturb_boundaries(diar: Diarization, max_shift_ms: int, rng: np.random.Generator) -> Diarization:
    """Move every turn boundary by up to ``max_shift_ms``; a speaker's shifted turns are re-unioned."""
    shifted: Dict[str, List[Interval]] = {}
    for speaker, interval in diar.turns:
        onset = max(0, interval.onset_ms + int(rng.integers(-max_shift_ms, max_shift_ms + 1)))
        offset = interval.offset_ms + int(rng.integers(-max_shift_ms, max_shift_ms + 1))
        if offset <= onset:
            onset, offset = interval.onset_ms, interval.offset_ms
        shifted.setdefault(speaker, []).append(Interval(onset, offset))
    return Diarization.from_timelines(diar.recording_id, {s: Timeline(v) for s, v in shifted.items()})


def brute_force_der(
    ref: Diarization, hyp: Diarization, collar_ms: int = 0, uem: Optional[Timeline] = None
) -> DerBreakdown:
    """
    DER by per-millisecond bitmaps and exhaustive search over speaker mappings.

    Raises:
        ValidationError: More than six speakers on a side or a span over 600 s
        ScoringError: Recording ids differ
    """
    if ref.recording_id != hyp.recording_id:
        raise ScoringError(f"recording id mismatch: '{ref.recording_id}' vs '{hyp.recording_id}'")
    ref_t = list(ref.timelines().values())
    hyp_t = list(hyp.timelines().values())
    if len(ref_t) > BRUTE_FORCE_MAX_SPEAKERS or len(hyp_t) > BRUTE_FORCE_MAX_SPEAKERS:
        raise ValidationError(f"brute force supports at most {BRUTE_FORCE_MAX_SPEAKERS} speakers per side")

    everything = [i for t in ref_t + hyp_t for i in t] + (list(uem) if uem is not None else [])
    if not everything:
        return DerBreakdown()
    lo = min(i.onset_ms for i in everything)
    hi = max(i.offset_ms for i in everything)
    if hi - lo > BRUTE_FORCE_MAX_SPAN_MS:
        raise ValidationError(f"brute force supports spans up to {BRUTE_FORCE_MAX_SPAN_MS} ms")

    def bitmap(timeline: Timeline) -> np.ndarray:
        bits = np.zeros(hi - lo, dtype=bool)
        for i in timeline:
            bits[i.onset_ms - lo:i.offset_ms - lo] = True
        return bits

    if uem is None:
        speech = [i for t in ref_t + hyp_t for i in t]
        scored = bitmap(Timeline([Interval(min(i.onset_ms for i in speech), max(i.offset_ms for i in speech))])) \
            if speech else np.zeros(hi - lo, dtype=bool)
    else:
        scored = bitmap(uem)
    if collar_ms > 0:
        for _, interval in ref.turns:
            for b in (interval.onset_ms, interval.offset_ms):
                scored[max(0, b - collar_ms - lo):max(0, b + collar_ms - lo)] = False

    ref_bits = [bitmap(t) & scored for t in ref_t]
    hyp_bits = [bitmap(t) & scored for t in hyp_t]
    n_ref = np.sum(ref_bits, axis=0) if ref_bits else np.zeros(hi - lo, dtype=int)
    n_hyp = np.sum(hyp_bits, axis=0) if hyp_bits else np.zeros(hi - lo, dtype=int)
    overlap = [[int(np.count_nonzero(r & h)) for h in hyp_bits] for r in ref_bits]

    best = 0
    for k in range(min(len(ref_bits), len(hyp_bits)) + 1):
        for refs in itertools.combinations(range(len(ref_bits)), k):
            for hyps in itertools.permutations(range(len(hyp_bits)), k):
                best = max(best, sum(overlap[r][h] for r, h in zip(refs, hyps)))

    return DerBreakdown(
        missed_ms=int(np.maximum(n_ref - n_hyp, 0).sum()),
        false_alarm_ms=int(np.maximum(n_hyp - n_ref, 0).sum()),
        confusion_ms=int(np.minimum(n_ref, n_hyp).sum()) - best,
        scored_ref_speech_ms=int(n_ref.sum()),
    )
