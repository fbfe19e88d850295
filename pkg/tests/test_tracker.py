import numpy as np
import pytest

from diarization.formats import DetectionRecord, EmbeddingRecord
from diarization.timeline import Interval
from diarization.tracker import (
    FaceTrack,
    attach_embeddings,
    average_track_embedding,
    box_iou,
    build_tracks,
    frame_to_ms,
    read_tracks,
    tracks_overlap_in_time,
    write_tracks,
)
from utils.exceptions import DegenerateEmbeddingError, ParseError, ValidationError


def static_box(frames, x=10.0):
    return [DetectionRecord(f, x, 20.0, 100.0, 100.0, 0.9) for f in frames]


def make_track(track_id, onset, offset):
    return FaceTrack(track_id, 0, tuple(static_box([0])), Interval(onset, offset))


def test_box_iou():
    assert box_iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert box_iou((0, 0, 10, 10), (10, 0, 10, 10)) == 0.0
    assert box_iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(50 / 150)


def test_frame_to_ms():
    assert frame_to_ms(0, 25.0) == 0
    assert frame_to_ms(5, 25.0) == 200
    assert frame_to_ms(1, 30.0) == 33


def test_static_box_forms_one_track():
    tracks = build_tracks(static_box(range(10)), [Interval(0, 400)], 25.0)
    assert len(tracks) == 1
    assert tracks[0].interval == Interval(0, 400)
    assert [d.frame_index for d in tracks[0].frames] == list(range(10))


def test_shot_cut_splits_track():
    tracks = build_tracks(static_box(range(10)), [Interval(0, 200), Interval(200, 400)], 25.0)
    assert [(t.shot_index, t.first_frame, t.last_frame) for t in tracks] == [(0, 0, 4), (1, 5, 9)]
    assert tracks[0].interval == Interval(0, 200)
    assert tracks[1].interval == Interval(200, 400)


def test_distant_boxes_form_two_tracks():
    detections = sorted(
        static_box(range(10), x=0.0) + static_box(range(10), x=500.0),
        key=lambda d: d.frame_index,
    )
    tracks = build_tracks(detections, [Interval(0, 400)], 25.0)
    assert len(tracks) == 2
    assert {t.frames[0].x for t in tracks} == {0.0, 500.0}
    assert all(len(t.frames) == 10 for t in tracks)


def test_frame_skip_limit():
    detections = static_box([0, 1, 2]) + static_box([14, 15])
    assert len(build_tracks(detections, [Interval(0, 1000)], 25.0)) == 2
    assert len(build_tracks(detections, [Interval(0, 1000)], 25.0, max_frame_skip=11)) == 1


def test_detection_outside_shots_is_rejected():
    with pytest.raises(ValidationError, match="outside every shot"):
        build_tracks(static_box([20]), [Interval(0, 400)], 25.0)


def test_average_track_embedding():
    mean = average_track_embedding([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    assert mean == pytest.approx([0.7071, 0.7071], abs=1e-4)
    assert np.linalg.norm(mean) == pytest.approx(1.0)


def test_average_of_opposite_vectors_is_degenerate():
    with pytest.raises(DegenerateEmbeddingError):
        average_track_embedding([np.array([1.0, 0.0]), np.array([-1.0, 0.0])])


def test_average_requires_samples():
    with pytest.raises(ValidationError):
        average_track_embedding([])


def test_tracks_overlap_in_time():
    assert tracks_overlap_in_time(make_track("a", 0, 5), make_track("b", 3, 8))
    assert not tracks_overlap_in_time(make_track("a", 0, 5), make_track("b", 5, 8))


def test_attach_embeddings_skips_tracks_without_samples():
    tracks = [make_track("a", 0, 40), make_track("b", 0, 40)]
    records = [
        EmbeddingRecord("a", Interval(0, 40), np.array([3.0, 0.0])),
        EmbeddingRecord("a", Interval(0, 40), np.array([0.0, 3.0])),
    ]
    (track,) = attach_embeddings(tracks, records)
    assert track.track_id == "a"
    assert track.embedding == pytest.approx([0.7071, 0.7071], abs=1e-4)


def test_face_track_rejects_non_unit_embedding():
    with pytest.raises(ValidationError, match="norm"):
        make_track("a", 0, 40).with_embedding(np.array([2.0, 0.0]))


def test_tracks_file_reads_back():
    tracks = build_tracks(static_box(range(10)), [Interval(0, 200), Interval(200, 400)], 25.0)
    back = read_tracks(write_tracks(tracks))
    assert [(t.track_id, t.shot_index, t.interval) for t in back] == [
        (t.track_id, t.shot_index, t.interval) for t in tracks
    ]


def test_tracks_file_rejects_non_monotone_frames():
    line = (
        '{"track_id":"t","shot_index":0,"onset_ms":0,"offset_ms":80,"frames":['
        '{"frame":1,"x":0,"y":0,"w":1,"h":1,"conf":1},'
        '{"frame":0,"x":0,"y":0,"w":1,"h":1,"conf":1}]}\n'
    )
    with pytest.raises(ParseError, match="non-monotone"):
        read_tracks(line)


def _random_detections(rng, n_frames=20, n_objects=3):
    detections = []
    for obj in range(n_objects):
        x, y, w, h = 300.0 * obj + 40.0, 50.0, 100.0, 100.0
        for frame in range(n_frames):
            x += rng.uniform(-12, 12)
            y += rng.uniform(-12, 12)
            w = float(np.clip(w + rng.uniform(-8, 8), 80, 120))
            h = float(np.clip(h + rng.uniform(-8, 8), 80, 120))
            x = float(np.clip(x, 300.0 * obj, 300.0 * obj + 60.0))
            if rng.random() < 0.3:
                continue
            detections.append(DetectionRecord(frame, x, y, w, h, 0.9))
    return sorted(detections, key=lambda d: (d.frame_index, d.x))


def _detection_key(d):
    return (d.frame_index, d.x, d.y, d.width, d.height)


def test_random_detections_are_conserved_and_coarsen_with_lower_iou(rng):
    shots = [Interval(0, 400), Interval(400, 800)]
    for _ in range(100):
        detections = _random_detections(rng)
        counts = []
        for threshold in (0.9, 0.7, 0.5, 0.3, 0.1):
            tracks = build_tracks(detections, shots, 25.0, iou_threshold=threshold, max_frame_skip=2)
            linked = sorted(_detection_key(d) for t in tracks for d in t.frames)
            assert linked == sorted(_detection_key(d) for d in detections)
            counts.append(len(tracks))
        assert counts == sorted(counts, reverse=True)
