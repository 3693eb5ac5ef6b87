"""Scikit-learn style facade over the two-stage detector.

``DeepfakeDetector.fit`` runs CTC pretraining on the real pairs in X (when
``pretrain`` is set) followed by dual-label finetuning on all of X; predict
methods score per-sample fake probabilities. X is a sequence of AVSample
objects, so the estimator composes with sklearn tooling (clone, Pipeline,
grid search over its hyperparameters) while the heavy lifting stays in the
train module.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .errors import DataError
from .model import PRESENCE_AV, ModelConfig, PresenceMask
from .train import (
    TrainConfig,
    evaluate_model,
    finetune_detection,
    prepare_samples,
    pretrain_avsr,
    save_checkpoint,
    load_checkpoint,
    build_model_from_checkpoint,
    Checkpoint,
)
from .validation import check_labels, check_samples


class DeepfakeDetector(BaseEstimator):
    """Dual-label audio-visual deepfake detector.

    Parameters mirror the model and training configs; fitted state lives in
    ``model_`` and ``model_config_``.
    """

    def __init__(
        self,
        d_model: int = 64,
        n_heads: int = 4,
        layers_audio_enc: int = 2,
        layers_video_enc: int = 2,
        layers_joint_dec: int = 2,
        layers_fcd: int = 1,
        layers_tam: int = 1,
        n_phonemes: int = 40,
        dropout_rate: float = 0.1,
        mca_mode: str = "audio",
        pretrain: bool = True,
        pretrain_steps: int = 400,
        finetune_steps: int = 800,
        batch_size: int = 8,
        learning_rate: float = 1e-3,
        modality_dropout_prob: float = 0.2,
        threshold: float = 0.5,
        random_state: int = 0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.layers_audio_enc = layers_audio_enc
        self.layers_video_enc = layers_video_enc
        self.layers_joint_dec = layers_joint_dec
        self.layers_fcd = layers_fcd
        self.layers_tam = layers_tam
        self.n_phonemes = n_phonemes
        self.dropout_rate = dropout_rate
        self.mca_mode = mca_mode
        self.pretrain = pretrain
        self.pretrain_steps = pretrain_steps
        self.finetune_steps = finetune_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.modality_dropout_prob = modality_dropout_prob
        self.threshold = threshold
        self.random_state = random_state

    def _model_config(self, video_in_dim: int) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            layers_audio_enc=self.layers_audio_enc,
            layers_video_enc=self.layers_video_enc,
            layers_joint_dec=self.layers_joint_dec,
            layers_fcd=self.layers_fcd,
            layers_tam=self.layers_tam,
            n_phonemes=self.n_phonemes,
            dropout_rate=self.dropout_rate,
            mca_mode=self.mca_mode,
            video_in_dim=video_in_dim,
        )

    def _train_config(self, max_steps: int) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            max_steps=max_steps,
            modality_dropout_prob=self.modality_dropout_prob,
            seed=self.random_state,
            eval_every=0,
            early_stop_patience=0,
        )

    def fit(self, X, y=None):
        """Run both training stages on the given samples.

        y optionally overrides the labels carried by the samples with an
        (n, 2) binary array (audio_fake, video_fake).
        """
        samples = check_samples(X)
        if y is not None:
            labels = check_labels(y, len(samples))
            from .corpus import DualLabel
            from dataclasses import replace as _replace

            samples = [
                _replace(s, label=DualLabel(int(a), int(v)))
                for s, (a, v) in zip(samples, labels)
            ]
        video_in_dim = samples[0].video_rows.shape[1]
        config = self._model_config(video_in_dim)

        init = None
        if self.pretrain:
            outcome = pretrain_avsr(
                samples, config, self._train_config(self.pretrain_steps)
            )
            init = _checkpoint_in_memory(outcome)
        outcome = finetune_detection(
            samples, config, self._train_config(self.finetune_steps), init=init
        )
        self.model_ = outcome.model
        self.model_config_ = config
        self.n_features_in_ = video_in_dim
        return self

    def _scores(self, X, presence: PresenceMask) -> np.ndarray:
        check_is_fitted(self, "model_")
        samples = check_samples(X)
        prepared = prepare_samples(samples, self._train_config(1))
        self.model_.eval()
        rows = []
        with torch.no_grad():
            for item in prepared:
                out = self.model_.detect(item.audio, item.video, presence)
                rows.append(
                    [out.p_audio_fake, out.p_video_fake, out.fused_real_score]
                    + list(out.embedding)
                )
        return np.asarray(rows)

    def predict_proba(self, X, presence: PresenceMask = PRESENCE_AV) -> np.ndarray:
        """(n, 2) per-modality fake probabilities, audio first."""
        return self._scores(X, presence)[:, :2]

    def predict(self, X, presence: PresenceMask = PRESENCE_AV) -> np.ndarray:
        """(n, 2) binary fake flags at the configured threshold."""
        return (self.predict_proba(X, presence) >= self.threshold).astype(np.int64)

    def transform(self, X, presence: PresenceMask = PRESENCE_AV) -> np.ndarray:
        """(n, d_model) temporal-token embeddings, e.g. for t-SNE export."""
        return self._scores(X, presence)[:, 3:]

    def score(self, X, y=None, presence: PresenceMask = PRESENCE_AV) -> float:
        """Micro-averaged F1 over both label slots (OF1)."""
        samples = check_samples(X)
        if y is None:
            labels = np.array([s.label.as_tuple() for s in samples])
        else:
            labels = check_labels(y, len(samples))
        preds = self.predict(samples, presence)
        return metrics.f1_suite(preds, labels)["OF1"]

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, "detect", 0)

    @classmethod
    def from_checkpoint(cls, path) -> "DeepfakeDetector":
        ckpt = load_checkpoint(path)
        est = cls()
        est.model_ = build_model_from_checkpoint(ckpt)
        est.model_config_ = ckpt.model_config
        est.n_features_in_ = ckpt.model_config.video_in_dim
        return est


def _checkpoint_in_memory(outcome) -> Checkpoint:
    """Round-trip-free checkpoint view of a training outcome."""
    tensors = {
        f"model.{k}": v.detach().cpu().numpy()
        for k, v in outcome.model.state_dict().items()
    }
    return Checkpoint(
        model_config=outcome.model_config,
        stage="avsr",
        step=outcome.step,
        tensors=tensors,
        optimizer_steps={},
        train_config=None,
        numpy_rng=None,
        header={},
    )
