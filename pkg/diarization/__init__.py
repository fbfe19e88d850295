"""Audio-visual speaker diarisation toolkit: pipeline stages, scorer and simulator."""
