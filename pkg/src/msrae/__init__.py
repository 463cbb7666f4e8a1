"""Sparse denoising autoencoders with mixed-structure input corruption.

A numpy library (plus a small CLI) for unsupervised anomaly detection
experiments on synthetic vessel phantoms: hand-derived convolutional
autoencoder training with four regularization variants, reconstruction-
error abnormality grading, and a cross-validated evaluation protocol
with rank-based metrics and significance tests.
"""

from . import corrupt, detect, experiment, metrics, model, nn, phantom, tensor, train

__all__ = [
    "corrupt", "detect", "experiment", "metrics", "model", "nn",
    "phantom", "tensor", "train",
]

__version__ = "0.1.0"
