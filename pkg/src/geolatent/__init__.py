"""Geometry-aware latent representations for images of articulated subjects.

Subpackages cover rotation/camera geometry, a synthetic multi-view capture
studio, triplet data pipelines, the encoder/decoder networks, training
objectives, pose metrics, and the two-stage semi-supervised training
protocol.  All randomness is seeded; runs are reproducible end to end.
"""

__version__ = "0.1.0"
