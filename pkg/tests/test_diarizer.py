import dataclasses

import numpy as np
import pytest

from diarization.clustering import Partition
from diarization.diarizer import (
    DiarizationPipeline,
    PipelineConfig,
    SpeakerModel,
    assign_offscreen,
    attribute_onscreen,
    diarize_batch,
    enroll_speakers,
    process_bundle,
    run_pipeline,
)
from diarization.formats import (
    DetectionRecord,
    EmbeddingRecord,
    RecordingBundle,
    ScoreStream,
    write_bundle,
)
from diarization.metrics import der
from diarization.simgen import ScenarioSpec, generate
from diarization.timeline import Interval, Timeline
from diarization.tracker import FaceTrack
from utils.exceptions import ConfigurationError, PipelineError, ValidationError

from helpers import make_diar, unit


def track(track_id, onset=0, offset=5000):
    return FaceTrack(track_id, 0, (DetectionRecord(0, 0.0, 0.0, 10.0, 10.0),), Interval(onset, offset))


def record(owner, onset, offset, *vector):
    return EmbeddingRecord(owner, Interval(onset, offset), np.asarray(vector, dtype=float))


class TestAttribution:
    def test_single_track(self):
        diar = attribute_onscreen([track("t0")], Partition({"t0": "0"}), {"t0": Timeline([(0, 5000)])})
        assert diar.timelines() == {"ID_0": Timeline([(0, 5000)])}

    def test_gap_longer_than_merge_stays_split(self):
        diar = attribute_onscreen(
            [track("t0"), track("t1")],
            Partition({"t0": "0", "t1": "0"}),
            {"t0": Timeline([(0, 2000)]), "t1": Timeline([(3000, 5000)])},
            gap_merge_ms=250,
        )
        assert len(diar) == 2
        assert diar.speakers == ["ID_0"]

    def test_simultaneous_tracks_give_overlapping_speakers(self):
        diar = attribute_onscreen(
            [track("t0"), track("t1")],
            Partition({"t0": "0", "t1": "1"}),
            {"t0": Timeline([(0, 3000)]), "t1": Timeline([(1000, 4000)])},
        )
        assert diar.speakers == ["ID_0", "ID_1"]
        assert diar.overlap() == Timeline([(1000, 3000)])

    def test_unknown_track_is_rejected(self):
        with pytest.raises(ValidationError, match="unknown track"):
            attribute_onscreen([track("t0")], Partition({"t0": "0"}), {"tX": Timeline([(0, 10)])})


class TestEnrollment:
    def test_single_segment(self):
        diar = make_diar("r", [("ID_0", 0, 2000)])
        (model,) = enroll_speakers(diar, [record("s", 0, 2000, 0.6, 0.8)])
        assert model.label == "ID_0"
        assert model.centroid == pytest.approx([0.6, 0.8])
        assert model.support_ms == 2000

    def test_equal_weights(self):
        diar = make_diar("r", [("ID_0", 0, 2000)])
        (model,) = enroll_speakers(diar, [record("a", 0, 1000, 1, 0), record("b", 1000, 2000, 0, 1)])
        assert model.centroid == pytest.approx([0.7071, 0.7071], abs=1e-4)

    def test_duration_weighting(self):
        diar = make_diar("r", [("ID_0", 0, 4000)])
        (model,) = enroll_speakers(diar, [record("a", 0, 3000, 1, 0), record("b", 3000, 4000, 0, 1)])
        assert model.centroid == pytest.approx([0.9487, 0.3162], abs=1e-4)

    def test_segments_spanning_two_speakers_are_skipped(self):
        diar = make_diar("r", [("ID_0", 0, 1000), ("ID_1", 1000, 2000)])
        models = enroll_speakers(
            diar, [record("a", 0, 1000, 1, 0), record("ab", 500, 1500, 0, 1)]
        )
        assert [m.label for m in models] == ["ID_0"]
        assert models[0].centroid == pytest.approx([1.0, 0.0])


class TestOffscreen:
    onscreen = make_diar("r", [("ID_0", 0, 1000), ("ID_1", 1000, 2000)])
    models = [
        SpeakerModel("ID_0", unit(1, 0), 1000, np.vstack([unit(1, 0)])),
        SpeakerModel("ID_1", unit(0, 1), 1000, np.vstack([unit(0, 1)])),
    ]

    def assign(self, records, vad=Timeline([(0, 3000)]), cfg=PipelineConfig()):
        return assign_offscreen(vad, self.onscreen, self.models, records, cfg)

    def test_centroid_match_is_assigned(self):
        diar = self.assign([record("s", 2000, 3000, 0, 1)])
        assert diar.timeline("ID_1") == Timeline([(1000, 3000)])

    def test_nearest_model_wins(self):
        diar = self.assign([record("s", 2000, 3000, 0.9, 0.436)])
        assert diar.timeline("ID_0") == Timeline([(0, 1000), (2000, 3000)])
        assert diar.timeline("ID_1") == Timeline([(1000, 2000)])

    def test_far_segment_is_unknown(self):
        diar = self.assign([record("s", 2000, 3000, -1, -1)])
        assert diar.timeline("UNK_0") == Timeline([(2000, 3000)])

    def test_orthogonal_segment_is_unknown(self):
        models = [SpeakerModel("ID_0", unit(1, 0, 0), 1000), SpeakerModel("ID_1", unit(0, 1, 0), 1000)]
        diar = assign_offscreen(
            Timeline([(0, 3000)]), self.onscreen, models, [record("s", 2000, 3000, 0, 0, 1)], PipelineConfig()
        )
        assert diar.speakers == ["ID_0", "ID_1", "UNK_0"]

    def test_segment_without_embedding_is_unknown(self):
        assert self.assign([]).timeline("UNK_0") == Timeline([(2000, 3000)])

    def test_short_segments_are_dropped(self):
        diar = self.assign([], vad=Timeline([(0, 2300)]))
        assert diar.speakers == ["ID_0", "ID_1"]

    def test_unknown_labelling_modes(self):
        vad = Timeline([(0, 2000), (3000, 4000), (5000, 6000)])
        records = [record("a", 3000, 4000, -1, -1), record("b", 5000, 6000, -1, -1)]
        per_segment = self.assign(records, vad=vad)
        assert {s for s in per_segment.speakers if s.startswith("UNK_")} == {"UNK_0", "UNK_1"}
        linked = self.assign(records, vad=vad, cfg=PipelineConfig(unknown_labeling="linked"))
        assert linked.timeline("UNK_0") == Timeline([(3000, 4000), (5000, 6000)])

    def test_segment_comparison_uses_closest_exemplar(self):
        models = [SpeakerModel("ID_0", unit(1, 1), 1000, np.vstack([unit(1, 0), unit(0, 1)]))]
        records = [record("s", 2000, 3000, 1, 0)]
        centroid = assign_offscreen(Timeline([(0, 3000)]), self.onscreen, models, records, PipelineConfig())
        segment = assign_offscreen(
            Timeline([(0, 3000)]), self.onscreen, models, records, PipelineConfig(offscreen_comparison="segment")
        )
        assert "UNK_0" not in segment.speakers
        assert segment.timeline("ID_0") == Timeline([(0, 1000), (2000, 3000)])
        assert centroid.timeline("ID_0") == Timeline([(0, 1000), (2000, 3000)])
        strict = PipelineConfig(offscreen_comparison="centroid", speaker_id_threshold=0.2)
        assert "UNK_0" in assign_offscreen(
            Timeline([(0, 3000)]), self.onscreen, models, records, strict
        ).speakers


class TestPipelineConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.face_cluster_threshold == 0.3
        assert cfg.collar_ms == 250
        assert cfg.asd_config().merge_gap_ms == cfg.gap_merge_ms

    @pytest.mark.parametrize(
        "changes",
        [
            {"face_cluster_threshold": 2.5},
            {"speaker_id_threshold": -0.1},
            {"iou_threshold": 0.0},
            {"collar_ms": -1},
            {"asd_mode": "both"},
            {"offscreen_comparison": "nearest"},
            {"unknown_labeling": "cluster"},
        ],
    )
    def test_invalid_values(self, changes):
        with pytest.raises(ConfigurationError):
            PipelineConfig(**changes)

    def test_from_dict(self):
        cfg = PipelineConfig.from_dict({"speaker_id_threshold": "0.35", "collar_ms": 100.0})
        assert cfg.speaker_id_threshold == 0.35
        assert cfg.collar_ms == 100
        with pytest.raises(ConfigurationError, match="unknown"):
            PipelineConfig.from_dict({"nonsense": 1})
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_dict({"collar_ms": 12.5})
        assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


def _silent_bundle(vad_values, detections=(), shots=(Interval(0, 1000),)):
    return RecordingBundle(
        recording_id="tiny",
        duration_ms=1000,
        frame_rate_hz=25.0,
        detections=list(detections),
        shots=list(shots),
        recording_vad=[ScoreStream("recording", 0, 40, np.asarray(vad_values, dtype=float))],
    )


def test_empty_vad_gives_empty_diarization():
    diar = run_pipeline(_silent_bundle(np.zeros(25)), PipelineConfig())
    assert diar.recording_id == "tiny"
    assert len(diar) == 0


def test_stage_failure_names_the_stage():
    bundle = _silent_bundle(np.ones(25), detections=[DetectionRecord(100, 0.0, 0.0, 10.0, 10.0)])
    with pytest.raises(PipelineError) as excinfo:
        run_pipeline(bundle, PipelineConfig())
    assert excinfo.value.stage == "tracker"
    assert excinfo.value.recording_id == "tiny"


def test_clean_scenario_scores_zero(clean_spec, linked_config):
    scenario = generate(clean_spec)
    hyp = run_pipeline(scenario.bundle, linked_config)
    assert der(scenario.reference, hyp, 250).der_pct == 0.0


def test_offscreen_voice_scores_zero(offscreen_spec, linked_config):
    scenario = generate(offscreen_spec)
    hyp = run_pipeline(scenario.bundle, linked_config)
    assert any(s.startswith("UNK_") for s in hyp.speakers)
    assert der(scenario.reference, hyp, 250).der_pct == 0.0


def test_hidden_turns_are_attributed_by_voice(clean_spec, linked_config):
    spec = dataclasses.replace(clean_spec, hidden_turn_fraction=0.3, recording_id="hidden")
    scenario = generate(spec)
    hyp = run_pipeline(scenario.bundle, linked_config)
    assert der(scenario.reference, hyp, 250).der_pct <= 1.0


@pytest.mark.slow
def test_clean_pipeline_over_seeds(linked_config):
    for seed in range(10):
        spec = ScenarioSpec(n_speakers=4, n_onscreen=3, duration_ms=60_000, rng_seed=seed, recording_id=f"c{seed}")
        scenario = generate(spec)
        assert der(scenario.reference, run_pipeline(scenario.bundle, linked_config), 250).der_pct == 0.0


def test_stages_compose_like_run(clean_spec, linked_config):
    bundle = generate(clean_spec).bundle
    pipeline = DiarizationPipeline(linked_config)
    vad = pipeline.speech(bundle)
    tracks = pipeline.tracks(bundle)
    partition = pipeline.cluster(bundle, tracks, linked_config.face_cluster_threshold)
    assert partition.n_clusters == clean_spec.n_onscreen
    active = pipeline.detect(bundle, tracks, linked_config.asd_config())
    onscreen = pipeline.attribute(bundle, tracks, partition, active, vad)
    staged = pipeline.label_offscreen(bundle, onscreen, vad, linked_config)
    assert staged == pipeline.run(bundle)


def test_batch_reports_failures_per_recording(tmp_path, clean_spec, linked_config):
    write_bundle(generate(clean_spec).bundle, tmp_path / "clean")
    (tmp_path / "broken").mkdir()
    results = diarize_batch([tmp_path / "clean", tmp_path / "broken"], linked_config, parallel=True)
    assert [r["success"] for r in results] == [False, True]
    assert "broken" in results[0]["error"]
    assert results[1]["diarization"].recording_id == "clean"
    assert process_bundle(tmp_path / "broken", linked_config)["success"] is False


def _noisy_bundles(offscreen_spec):
    for seed in range(3):
        spec = dataclasses.replace(
            offscreen_spec,
            embedding_noise_sigma=0.1,
            asd_false_alarm_rate=0.05,
            asd_miss_rate=0.05,
            rng_seed=100 + seed,
            recording_id=f"noisy_{seed}",
        )
        yield generate(spec).bundle


@pytest.mark.parametrize("unknown_labeling", ["per_segment", "linked"])
def test_output_stays_inside_recording_vad(offscreen_spec, unknown_labeling):
    cfg = PipelineConfig(unknown_labeling=unknown_labeling)
    for bundle in _noisy_bundles(offscreen_spec):
        pipeline = DiarizationPipeline(cfg)
        hyp = pipeline.run(bundle)
        assert len(hyp) > 0
        assert pipeline.speech(bundle).contains(hyp.speech())


def test_labels_do_not_depend_on_record_order(offscreen_spec, linked_config, rng):
    for bundle in _noisy_bundles(offscreen_spec):
        expected = run_pipeline(bundle, linked_config)
        for _ in range(2):
            shuffled = dataclasses.replace(
                bundle,
                face_embeddings=[bundle.face_embeddings[k] for k in rng.permutation(len(bundle.face_embeddings))],
                speech_embeddings=[
                    bundle.speech_embeddings[k] for k in rng.permutation(len(bundle.speech_embeddings))
                ],
            )
            assert run_pipeline(shuffled, linked_config) == expected


@pytest.mark.parametrize("scale", [0.25, 3.0])
def test_embedding_scale_does_not_change_output(offscreen_spec, linked_config, scale):
    for bundle in _noisy_bundles(offscreen_spec):
        scaled = dataclasses.replace(
            bundle,
            face_embeddings=[dataclasses.replace(r, vector=r.vector * scale) for r in bundle.face_embeddings],
            speech_embeddings=[dataclasses.replace(r, vector=r.vector * scale) for r in bundle.speech_embeddings],
        )
        assert run_pipeline(scaled, linked_config) == run_pipeline(bundle, linked_config)
