import logging
import logging.handlers
from pathlib import Path

import pytest
import yaml

from config.settings import Settings
from diarization.diarizer import PipelineConfig
from utils.exceptions import ConfigurationError
from utils.logger import LOGGER_NAME, get_logger, setup_logger

ROOT = Path(__file__).resolve().parent.parent


def write(tmp_path, text, name="config.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults():
    settings = Settings()
    assert settings.pipeline_config() == PipelineConfig()
    assert settings.get("logging", "level") == "INFO"
    assert settings.get("processing", "max_workers") == 4
    with pytest.raises(KeyError):
        settings.get("scoring")
    with pytest.raises(KeyError):
        settings.get("logging", "nope")


def test_flat_pipeline_keys_and_nested_sections(tmp_path):
    path = write(
        tmp_path,
        "face_cluster_threshold: 0.25\nasd_mode: sync_only\nlogging:\n  level: debug\nprocessing:\n  max_workers: 2\n",
    )
    settings = Settings(path)
    cfg = settings.pipeline_config()
    assert cfg.face_cluster_threshold == 0.25
    assert cfg.asd_mode == "sync_only"
    assert cfg.speaker_id_threshold == 0.4
    assert settings.get("logging", "level") == "DEBUG"
    assert settings.get("processing", "max_workers") == 2
    assert settings.get("processing", "parallel") is True


def test_nested_pipeline_section_is_accepted(tmp_path):
    settings = Settings(write(tmp_path, "pipeline:\n  collar_ms: 100\n"))
    assert settings.pipeline_config().collar_ms == 100


@pytest.mark.parametrize(
    "text",
    [
        "face_cluster_threshold: 3.0\n",
        "threshold: 0.3\n",
        "logging:\n  colour: true\n",
        "logging:\n  level: LOUD\n",
        "processing:\n  max_workers: 0\n",
        "processing: 4\n",
        "- a\n- b\n",
        "key: [unclosed\n",
    ],
)
def test_bad_files(tmp_path, text):
    with pytest.raises(ConfigurationError):
        Settings(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="Failed to load"):
        Settings(tmp_path / "absent.yaml")


def test_empty_file_keeps_defaults(tmp_path):
    assert Settings(write(tmp_path, "")).pipeline_config() == PipelineConfig()


def test_dump_reads_back(tmp_path):
    settings = Settings()
    settings.set_pipeline_config(PipelineConfig(speaker_id_threshold=0.35, unknown_labeling="linked"))
    path = settings.dump(tmp_path / "out" / "best.yaml")
    document = yaml.safe_load(path.read_text())
    assert document["speaker_id_threshold"] == 0.35
    assert "pipeline" not in document
    assert Settings(path).pipeline_config() == settings.pipeline_config()


@pytest.mark.parametrize("name", ["config.yaml", "config/diarization_config.yaml"])
def test_shipped_configs_load(name):
    assert Settings(ROOT / name).pipeline_config() == PipelineConfig()


def test_logger_writes_to_rotating_file(tmp_path):
    log_file = tmp_path / "logs" / "run.log"
    logger = setup_logger(
        {
            "level": "INFO",
            "format": "%(levelname)s %(message)s",
            "file": str(log_file),
            "max_size": 1024,
            "backup_count": 1,
        }
    )
    try:
        get_logger("diarization.metrics").info("scored")
        for handler in logger.handlers:
            handler.flush()
        assert "INFO scored" in log_file.read_text()
        assert any(isinstance(h, logging.handlers.RotatingFileHandler) for h in logger.handlers)
        assert get_logger("diarization.metrics").name == f"{LOGGER_NAME}.metrics"
    finally:
        for handler in logger.handlers[:]:
            handler.close()
            logger.removeHandler(handler)
