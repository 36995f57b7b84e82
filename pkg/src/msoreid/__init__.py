"""Two-stream cross-modality person re-identification with perceptual edge and
cross-modality center losses."""

__version__ = "0.1.0"
