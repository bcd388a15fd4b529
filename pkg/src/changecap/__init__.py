"""Joint change captioning and text-to-image-pair retrieval on synthetic
bi-temporal scenes, with false-negative-aware contrastive training."""

__version__ = "0.1.0"
