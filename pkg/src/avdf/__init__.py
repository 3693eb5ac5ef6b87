"""Modality-agnostic audio-visual deepfake detection.

CTC speech-recognition pretraining on synthetic correlated audio-visual
pairs, then dual-label detection finetuning with a modality compensation
adapter and a token-based dual-label classifier, evaluated under full and
missing-modality scenarios.
"""

from .corpus import (
    AVSample,
    CorpusManifest,
    CorpusSpec,
    DualLabel,
    PhonemeSeq,
    generate_corpus,
    read_sample,
    synthesize_sample,
    write_sample,
)
from .estimator import DeepfakeDetector
from .model import (
    DetectionOutput,
    DetectorModel,
    ModelConfig,
    PresenceMask,
)
from .train import TrainConfig, finetune_detection, pretrain_avsr

__version__ = "0.1.0"

__all__ = [
    "AVSample",
    "CorpusManifest",
    "CorpusSpec",
    "DeepfakeDetector",
    "DetectionOutput",
    "DetectorModel",
    "DualLabel",
    "ModelConfig",
    "PhonemeSeq",
    "PresenceMask",
    "TrainConfig",
    "finetune_detection",
    "generate_corpus",
    "pretrain_avsr",
    "read_sample",
    "synthesize_sample",
    "write_sample",
    "__version__",
]
