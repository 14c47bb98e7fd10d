"""Desk-scale weakly-supervised video anomaly detection.

Three collaborative branches over precomputed frame features: MIL
detection, self-guided normality modeling (training only), and
contrastive vision-text classification, plus a synthetic benchmark,
training/inference tooling, and evaluation metrics.
"""

__version__ = "0.1.0"

from .datamodel import (
    DatasetManifest,
    FeatureSequence,
    SynthSpec,
    VideoRecord,
    load_features,
    load_manifest,
    synthesize_dataset,
)
from .model import DSANet, ModelConfig
from .training import RunConfig, gradcheck, resolve_config, total_loss, train

__all__ = [
    "DatasetManifest",
    "DSANet",
    "FeatureSequence",
    "ModelConfig",
    "RunConfig",
    "SynthSpec",
    "VideoRecord",
    "gradcheck",
    "load_features",
    "load_manifest",
    "resolve_config",
    "synthesize_dataset",
    "total_loss",
    "train",
]
