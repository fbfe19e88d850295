from typing import Optional


class DiarizationError(Exception):
    """Base class for all diarization toolkit exceptions"""
    pass

class ConfigurationError(DiarizationError):
    """Exception raised for configuration errors"""
    pass

class ParseError(DiarizationError):
    """Exception raised for malformed input files"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)

class ValidationError(DiarizationError):
    """Exception raised when well-formed data breaks a domain rule"""
    pass

class DegenerateEmbeddingError(ValidationError):
    """Exception raised when an embedding cannot be normalized"""
    pass

class PipelineError(DiarizationError):
    """Exception raised when a pipeline stage fails"""

    def __init__(self, stage: str, message: str, recording_id: Optional[str] = None):
        self.stage = stage
        self.recording_id = recording_id
        where = f"{recording_id}: " if recording_id else ""
        super().__init__(f"{where}stage '{stage}' failed: {message}")

class ScoringError(DiarizationError):
    """Exception raised for errors during scoring"""
    pass

class SimulationError(DiarizationError):
    """Exception raised when a synthetic scenario cannot be generated"""
    pass
