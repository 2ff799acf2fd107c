"""Speech-to-code encoder-decoder pre-training for end-to-end ASR, at desk scale."""

__version__ = "0.1.0"
