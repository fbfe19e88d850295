import json

import pandas as pd
import pytest

import main
from config.settings import Settings

RTTM = (
    "SPEAKER rec1 1 0.000 10.000 <NA> <NA> A <NA> <NA>\n"
    "SPEAKER rec1 1 5.000 10.000 <NA> <NA> B <NA> <NA>\n"
)

SPEC = (
    "n_speakers: 3\n"
    "n_onscreen: 2\n"
    "duration_ms: 30000\n"
    "embedding_dim: 16\n"
    "centroid_min_cosine_distance: 0.6\n"
    "rng_seed: 5\n"
    "recording_id: cli\n"
)


@pytest.fixture
def rttm(tmp_path):
    path = tmp_path / "ref.rttm"
    path.write_text(RTTM)
    return path


@pytest.fixture
def linked_config_file(tmp_path):
    path = tmp_path / "linked.yaml"
    path.write_text("unknown_labeling: linked\nprocessing:\n  parallel: false\n")
    return path


def test_score_same_file(rttm, capsys):
    assert main.main(["score", "--ref", str(rttm), "--hyp", str(rttm)]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == "MS 0.0 FA 0.0 SC 0.0 DER 0.0"


def test_score_missing_flag_is_usage_error(rttm, capsys):
    assert main.main(["score", "--ref", str(rttm)]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err
    assert "--hyp" in err


def test_unknown_flag_is_rejected(rttm):
    assert main.main(["score", "--ref", str(rttm), "--hyp", str(rttm), "--bogus"]) == 1


def test_score_json_and_per_file(rttm, tmp_path, capsys):
    hyp = tmp_path / "hyp.rttm"
    hyp.write_text("SPEAKER rec1 1 0.000 10.000 <NA> <NA> X <NA> <NA>\n")
    assert main.main(["score", "--ref", str(rttm), "--hyp", str(hyp), "--collar", "0", "--json", "--per-file"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["aggregate"]["missed_ms"] == 10_000
    assert report["aggregate"]["ms_pct"] == pytest.approx(50.0)
    assert [r["recording_id"] for r in report["recordings"]] == ["rec1"]


def test_score_reports_parse_errors(rttm, tmp_path, capsys):
    bad = tmp_path / "bad.rttm"
    bad.write_text("SPEAKER rec1 1 0.0\n")
    assert main.main(["score", "--ref", str(rttm), "--hyp", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "bad.rttm" in err and "line 1" in err


def test_score_missing_file(tmp_path, capsys):
    missing = str(tmp_path / "nope.rttm")
    assert main.main(["score", "--ref", missing, "--hyp", missing]) == 1
    assert "no such file" in capsys.readouterr().err


def test_unexpected_failure_exits_with_internal_code(rttm, monkeypatch, capsys):
    def boom(args, settings, logger):
        raise RuntimeError("kaboom")

    monkeypatch.setattr(main, "cmd_score", boom)
    assert main.main(["score", "--ref", str(rttm), "--hyp", str(rttm)]) == 2
    assert "internal error: kaboom" in capsys.readouterr().err


def test_simulate_diarize_score_end_to_end(tmp_path, linked_config_file, capsys):
    spec = tmp_path / "spec.yaml"
    spec.write_text(SPEC)
    sim = tmp_path / "sim"
    assert main.main(["simulate", "--spec", str(spec), "--out", str(sim)]) == 0
    assert (sim / "cli" / "meta.yaml").is_file()
    assert (sim / "reference.rttm").is_file()

    hyp = tmp_path / "out" / "hyp.rttm"
    assert main.main(
        ["diarize", "--inputs", str(sim), "--out", str(hyp), "--config", str(linked_config_file)]
    ) == 0
    capsys.readouterr()
    assert main.main(["score", "--ref", str(sim / "reference.rttm"), "--hyp", str(hyp)]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == "MS 0.0 FA 0.0 SC 0.0 DER 0.0"


def test_simulate_is_deterministic(tmp_path):
    spec = tmp_path / "spec.yaml"
    spec.write_text(SPEC)
    for name in ("a", "b"):
        assert main.main(["simulate", "--spec", str(spec), "--out", str(tmp_path / name), "--recordings", "2"]) == 0
    assert (tmp_path / "a" / "reference.rttm").read_text() == (tmp_path / "b" / "reference.rttm").read_text()
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["cli_000", "cli_001", "reference.rttm"]


def test_track_and_cluster_outputs(tmp_path, capsys):
    spec = tmp_path / "spec.yaml"
    spec.write_text(SPEC)
    sim = tmp_path / "sim"
    main.main(["simulate", "--spec", str(spec), "--out", str(sim)])
    assert main.main(["track", "--inputs", str(sim / "cli"), "--out", str(tmp_path / "tracks")]) == 0
    assert (tmp_path / "tracks" / "cli.tracks.jsonl").read_text().strip()
    assert main.main(["cluster", "--inputs", str(sim), "--out", str(tmp_path / "clusters")]) == 0
    lines = (tmp_path / "clusters" / "cli.partition.jsonl").read_text().splitlines()
    assert {json.loads(line)["cluster"] for line in lines} == {"0", "1"}


def test_tune_writes_best_config_and_table(tmp_path, linked_config_file, capsys):
    spec = tmp_path / "spec.yaml"
    spec.write_text(SPEC)
    dev = tmp_path / "dev"
    main.main(["simulate", "--spec", str(spec), "--out", str(dev), "--recordings", "2"])
    grid = tmp_path / "grid.yaml"
    grid.write_text("face_cluster_threshold: [0.2, 0.3]\nspeaker_id_threshold: [0.3, 0.4]\n")
    out = tmp_path / "tuned"
    code = main.main(
        [
            "tune",
            "--dev", str(dev),
            "--refs", str(dev / "reference.rttm"),
            "--grid", str(grid),
            "--out", str(out),
            "--config", str(linked_config_file),
        ]
    )
    assert code == 0
    table = pd.read_csv(out / "grid_table.csv")
    assert len(table) == 4
    best = Settings(out / "best_config.yaml").pipeline_config()
    assert best.unknown_labeling == "linked"
    row = table.loc[table["der_pct"].idxmin()]
    assert best.face_cluster_threshold == row["face_cluster_threshold"]
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith("MS ")


def test_stats_fixture(rttm, tmp_path, capsys):
    uem = tmp_path / "videos.uem"
    uem.write_text("rec1 1 0.000 20.000\n")
    assert main.main(["stats", "--ref", str(rttm), "--uem", str(uem), "--json"]) == 0
    captured = capsys.readouterr()
    stats = json.loads(captured.out)
    assert stats["speech_pct"]["mean"] == pytest.approx(75.0)
    assert stats["overlap_pct"]["mean"] == pytest.approx(33.333, abs=1e-3)
    assert "No UEM extent" not in captured.err

    assert main.main(["stats", "--ref", str(rttm), "--name", "fixture"]) == 0
    captured = capsys.readouterr()
    assert "No UEM extent for 1 recording(s) (rec1)" in captured.err
    row = captured.out.strip().splitlines()[-1]
    assert row.startswith("fixture | 1 |")
    assert row.endswith("100.0 / 100.0 / 100.0 | 33.3 / 33.3 / 33.3")
