"""sklearn-style estimator facade over the training loops.

`AudioVisualPretrainer` is fit/transform shaped (self-supervised fit on
triplets, transform to retrieval embeddings); `AudioVisualClassifier` is
fit/predict shaped (supervised fine-tune from a pretrained backbone). Both
follow the sklearn parameter contract (constructor args stored verbatim,
`get_params`/`set_params`/`clone` work), so they compose with pipelines and
parameter searches.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .adapters import resolve_text_encoder
from .data import FrameImage, Spectrogram
from .model import ModelConfig, TriModalAutoencoder, load_checkpoint
from .training import (
    LabeledPair,
    Task,
    TrainConfig,
    TrainMode,
    TrainingTriplet,
    encode_pairs,
    evaluate_retrieval,
    finetune,
    predict_scores,
    pretrain,
)
from .validation import ValidationError, require


def _as_triplet(item) -> TrainingTriplet:
    if isinstance(item, TrainingTriplet):
        return item
    if isinstance(item, (tuple, list)) and len(item) in (3, 4):
        audio, frame, caption = item[0], item[1], item[2]
        sample_id = item[3] if len(item) == 4 else ""
        if not isinstance(audio, Spectrogram):
            audio = Spectrogram(values=audio, sample_id=sample_id)
        if not isinstance(frame, FrameImage):
            frame = FrameImage(values=frame, sample_id=sample_id)
        return TrainingTriplet(sample_id=sample_id or audio.sample_id, audio=audio, frame=frame, caption=caption)
    raise ValidationError(
        "expected TrainingTriplet or (audio, frame, caption[, sample_id]) tuples"
    )


def _as_pair(item, index: int):
    if hasattr(item, "audio") and hasattr(item, "frame"):
        return item
    if isinstance(item, (tuple, list)) and len(item) >= 2:
        audio, frame = item[0], item[1]
        sid = f"sample{index:05d}"
        if not isinstance(audio, Spectrogram):
            audio = Spectrogram(values=audio, sample_id=sid)
        if not isinstance(frame, FrameImage):
            frame = FrameImage(values=frame, sample_id=sid)
        return LabeledPair(sample_id=audio.sample_id or sid, audio=audio, frame=frame, label=0)
    raise ValidationError("expected objects with .audio/.frame or (audio, frame) tuples")


class AudioVisualPretrainer(BaseEstimator, TransformerMixin):
    """Self-supervised tri-modal pretrainer with an estimator interface.

    Parameters mirror the model and training configs; `fit(X)` expects an
    iterable of triplets (TrainingTriplet objects or (audio, frame, caption)
    tuples), `transform(X)` returns the concatenated unit-norm audio and
    visual embeddings, shape (N, 2*d).

    Attributes set by fit: `model_`, `log_`, `text_encoder_`.
    """

    def __init__(
        self,
        d: int = 64,
        d_t: int = 32,
        encoder_depth: int = 2,
        cross_depth: int = 1,
        decoder_depth: int = 1,
        heads: int = 4,
        audio_shape: tuple[int, int] = (1024, 128),
        frame_shape: tuple[int, int, int] = (224, 224, 3),
        audio_patch: tuple[int, int] = (16, 16),
        visual_patch: tuple[int, int] = (16, 16),
        mask_ratio_audio: float = 0.75,
        mask_ratio_visual: float = 0.75,
        learning_rate: float = 0.0005,
        batch_size: int = 8,
        steps: int = 200,
        lambda1: float = 0.01,
        lambda2: float = 0.01,
        tau: float = 0.05,
        include_text: bool = True,
        text_encoder: str = "hash",
        seed: int = 0,
    ):
        self.d = d
        self.d_t = d_t
        self.encoder_depth = encoder_depth
        self.cross_depth = cross_depth
        self.decoder_depth = decoder_depth
        self.heads = heads
        self.audio_shape = audio_shape
        self.frame_shape = frame_shape
        self.audio_patch = audio_patch
        self.visual_patch = visual_patch
        self.mask_ratio_audio = mask_ratio_audio
        self.mask_ratio_visual = mask_ratio_visual
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.steps = steps
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.tau = tau
        self.include_text = include_text
        self.text_encoder = text_encoder
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            d_t=self.d_t,
            encoder_depth=self.encoder_depth,
            cross_depth=self.cross_depth,
            decoder_depth=self.decoder_depth,
            heads=self.heads,
            audio_shape=tuple(self.audio_shape),
            frame_shape=tuple(self.frame_shape),
            audio_patch=tuple(self.audio_patch),
            visual_patch=tuple(self.visual_patch),
            mask_ratio_audio=self.mask_ratio_audio,
            mask_ratio_visual=self.mask_ratio_visual,
            seed=self.seed,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            steps=self.steps,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            tau=self.tau,
            seed=self.seed,
            mode=TrainMode.PRETRAIN_AVT if self.include_text else TrainMode.PRETRAIN_AV,
        )

    def fit(self, X, y=None):
        triplets = [_as_triplet(item) for item in X]
        require(len(triplets) >= 2, "AudioVisualPretrainer.fit: need at least 2 triplets")
        self.text_encoder_ = resolve_text_encoder(self.text_encoder, dim=self.d_t) if self.include_text else None
        self.model_ = TriModalAutoencoder(self._model_config())
        self.log_ = pretrain(self.model_, triplets, self._train_config(), text_encoder=self.text_encoder_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ValidationError("AudioVisualPretrainer: call fit before transform/encode")

    def encode(self, X):
        """Unit-norm (audio, visual) embedding lists for aligned pairs."""
        self._check_fitted()
        pairs = [_as_pair(item, i) for i, item in enumerate(X)]
        return encode_pairs(self.model_, pairs)

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        audio_embs, visual_embs = self.encode(X)
        return np.hstack([np.stack([e.numpy() for e in audio_embs]), np.stack([e.numpy() for e in visual_embs])])

    def score_retrieval(self, X, ks=(1, 5, 10)) -> dict:
        """Recall@K in both directions on aligned pairs."""
        self._check_fitted()
        pairs = [_as_pair(item, i) for i, item in enumerate(X)]
        return evaluate_retrieval(self.model_, pairs, ks)


class AudioVisualClassifier(BaseEstimator, ClassifierMixin):
    """Supervised fine-tuning head over a (pre)trained backbone.

    `pretrained` may be a checkpoint path, a fitted AudioVisualPretrainer, a
    TriModalAutoencoder, or None (random init). `fit(X, y)` fine-tunes all
    non-text parameters; `predict` returns class indices (multiclass) or
    binary indicator matrices (multilabel).
    """

    def __init__(
        self,
        pretrained=None,
        task: str = "multiclass",
        n_classes: int | None = None,
        learning_rate: float = 0.0005,
        batch_size: int = 8,
        steps: int = 100,
        seed: int = 0,
    ):
        self.pretrained = pretrained
        self.task = task
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed

    def _resolve_model(self) -> TriModalAutoencoder:
        src = self.pretrained
        if src is None:
            return TriModalAutoencoder(ModelConfig(seed=self.seed))
        if isinstance(src, TriModalAutoencoder):
            return src
        if isinstance(src, AudioVisualPretrainer):
            src._check_fitted()
            return src.model_
        model, _ = load_checkpoint(src)
        return model

    def fit(self, X, y):
        task = Task(self.task)
        pairs = []
        y_arr = np.asarray(y)
        for i, item in enumerate(X):
            base = _as_pair(item, i)
            label = y_arr[i] if task is Task.MULTILABEL else int(y_arr[i])
            pairs.append(LabeledPair(sample_id=base.sample_id, audio=base.audio, frame=base.frame, label=label))
        if task is Task.MULTICLASS:
            self.classes_ = np.unique(y_arr)
            n_classes = self.n_classes or int(self.classes_.max()) + 1
        else:
            if y_arr.ndim != 2:
                raise ValidationError("AudioVisualClassifier: multilabel y must be (N, C) binary")
            n_classes = self.n_classes or y_arr.shape[1]
            self.classes_ = np.arange(n_classes)
        self.model_ = self._resolve_model()
        config = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            steps=self.steps,
            seed=self.seed,
            mode=TrainMode.FINETUNE,
        )
        self.losses_ = finetune(self.model_, pairs, config, task, n_classes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ValidationError("AudioVisualClassifier: call fit before predict")

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        pairs = [_as_pair(item, i) for i, item in enumerate(X)]
        return predict_scores(self.model_, pairs)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        if Task(self.task) is Task.MULTICLASS:
            return scores.argmax(axis=1)
        return (scores > 0.0).astype(int)
