"""scikit-learn style front door: fit on raw utterances, predict converted audio."""

from __future__ import annotations

import logging
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .audio import SAMPLE_RATE, TOKEN_HOP, Waveform, compute_mel
from .discriminators import DiscriminatorConfig
from .exceptions import CheckpointError, ConfigError, ModeError
from .losses import LossWeights
from .model import Backbone, ModelConfig
from .tokenizer import Codebook, FeatureMatrix, KMeansCodebook, ToyFeatureExtractor, quantize
from .trainer import TrainConfig, Trainer, Utterance, read_container

log = logging.getLogger(__name__)

SHORT_REFERENCE_S = 0.5


def _check_waveforms(X) -> list[Waveform]:
    if isinstance(X, Waveform):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("no waveforms given")
    for w in X:
        if not isinstance(w, Waveform):
            raise TypeError(f"expected Waveform, got {type(w).__name__}")
    return X


def convert_tokens(
    backbone: Backbone,
    tokens: np.ndarray,
    reference: Waveform | None = None,
    shuffle_reference: bool = False,
    seed: int = 0,
    speaker_embedding: np.ndarray | None = None,
) -> np.ndarray:
    """Render ``tokens`` in the voice of ``reference``; returns ``320 * len(tokens)`` samples."""
    backbone.eval()
    tok = torch.as_tensor(np.asarray(tokens), dtype=torch.long).unsqueeze(0)
    with torch.no_grad():
        if backbone.cfg.speaker_mode == "embedding":
            if speaker_embedding is None:
                raise ModeError("speaker-embedding model needs a speaker vector")
            spk = torch.as_tensor(np.asarray(speaker_embedding, dtype=np.float32)).reshape(1, -1)
            return backbone(tok, speaker_embedding=spk).waveform[0].numpy()
        if reference is None:
            raise ModeError("cross-attention model needs a reference waveform")
        if reference.duration < SHORT_REFERENCE_S:
            warnings.warn(f"reference is only {reference.duration:.2f}s; similarity degrades on short references", stacklevel=2)
        mel = torch.from_numpy(compute_mel(reference, 10, backbone.cfg.n_mels).values).unsqueeze(0)
        memory = backbone.encode_reference(mel)
        if shuffle_reference:
            gen = torch.Generator().manual_seed(seed)
            memory = memory.permute(torch.randperm(memory.values.shape[1], generator=gen))
        return backbone(tok, memory).waveform[0].numpy()


class VoiceConverter(BaseEstimator):
    """Zero-shot voice converter.

    ``fit`` takes plain utterances: it extracts frame features (the toy
    extractor unless ``features`` are supplied), fits the token codebook,
    then trains the generator/discriminator pair on two-segment samples.
    ``predict`` converts a source into the timbre of a reference.

    Parameters
    ----------
    model_config, disc_config, train_config, loss_weights :
        Architecture, optimisation and objective settings. ``None`` selects
        the defaults.
    feature_extractor :
        Transformer mapping a :class:`Waveform` to a ``(frames, dim)`` matrix.
    codebook :
        Pre-fitted :class:`Codebook`; fitted from the training features when
        ``None``.
    """

    def __init__(
        self,
        model_config: ModelConfig | None = None,
        disc_config: DiscriminatorConfig | None = None,
        train_config: TrainConfig | None = None,
        loss_weights: LossWeights | None = None,
        feature_extractor=None,
        codebook: Codebook | None = None,
    ):
        self.model_config = model_config
        self.disc_config = disc_config
        self.train_config = train_config
        self.loss_weights = loss_weights
        self.feature_extractor = feature_extractor
        self.codebook = codebook

    def _extractor(self):
        return self.feature_extractor if self.feature_extractor is not None else ToyFeatureExtractor()

    def fit(self, X: Sequence[Waveform], y=None, features: Sequence[FeatureMatrix] | None = None,
            speaker_embeddings=None, n_steps: int | None = None, metrics_path=None, checkpoint_dir=None, callback=None):
        waves = _check_waveforms(X)
        mc = self.model_config or ModelConfig()
        if features is None:
            fx = self._extractor()
            features = [FeatureMatrix(fx.transform(w), w.source_id) for w in waves]
        if len(features) != len(waves):
            raise ValueError("features and waveforms differ in count")
        if self.codebook is not None:
            cb = self.codebook
        else:
            cb = KMeansCodebook(n_clusters=mc.vocab_size, random_state=(self.train_config or TrainConfig()).seed).fit(features).to_codebook()
        if cb.k != mc.vocab_size:
            raise ConfigError(f"codebook has {cb.k} centroids but vocab_size is {mc.vocab_size}")
        if speaker_embeddings is None:
            speaker_embeddings = [None] * len(waves)
        utts = [Utterance.from_waveform(w, quantize(f, cb), s) for w, f, s in zip(waves, features, speaker_embeddings)]
        trainer = Trainer(mc, self.disc_config, self.train_config, self.loss_weights)
        self._attach_codebook(trainer, cb)
        self.history_ = trainer.fit(utts, n_steps, metrics_path=metrics_path, checkpoint_dir=checkpoint_dir, callback=callback)
        self.trainer_ = trainer
        self.codebook_ = cb
        self.utterances_ = utts
        return self

    def _attach_codebook(self, trainer: Trainer, cb: Codebook) -> None:
        trainer.extra_tensors = {"codebook/centroids": cb.centroids}
        trainer.extra_meta = {"codebook_meta": cb.header(), "feature_extractor": self._feature_meta()}

    def _feature_meta(self) -> dict:
        fx = self._extractor()
        if isinstance(fx, ToyFeatureExtractor):
            return {"kind": "toy", **fx.get_params()}
        return {"kind": "external"}

    @property
    def backbone_(self) -> Backbone:
        check_is_fitted(self, "trainer_")
        return self.trainer_.generator

    def tokenize(self, source: Waveform | FeatureMatrix) -> np.ndarray:
        check_is_fitted(self, "codebook_")
        if isinstance(source, Waveform):
            fx = self._extractor()
            feats = FeatureMatrix(fx.transform(source), source.source_id)
            n = len(source) // TOKEN_HOP
            return quantize(feats, self.codebook_)[:n]
        return quantize(source, self.codebook_)

    def predict(self, source, reference: Waveform | None = None, shuffle_reference: bool = False, seed: int = 0,
                speaker_embedding=None) -> Waveform:
        tokens = self.tokenize(source)
        samples = convert_tokens(self.backbone_, tokens, reference, shuffle_reference, seed, speaker_embedding)
        sid = getattr(source, "source_id", "")
        return Waveform(samples, SAMPLE_RATE, f"{sid}->{reference.source_id if reference is not None else 'spk'}")

    def save(self, path) -> None:
        check_is_fitted(self, "trainer_")
        self.trainer_.save(path)

    @classmethod
    def load(cls, path, expected_hash: str | None = None) -> "VoiceConverter":
        trainer = Trainer.load(path, expected_hash)
        if "codebook/centroids" not in trainer.extra_tensors:
            raise CheckpointError(f"{path} carries no codebook")
        meta = trainer.extra_meta.get("codebook_meta", {})
        cb = Codebook(trainer.extra_tensors["codebook/centroids"], int(meta.get("seed", 0)), float(meta.get("inertia", 0.0)), int(meta.get("n_iter", 0)))
        fmeta = trainer.extra_meta.get("feature_extractor", {"kind": "toy"})
        fx = None
        if fmeta.get("kind") == "toy":
            fx = ToyFeatureExtractor(**{k: v for k, v in fmeta.items() if k != "kind"})
        est = cls(trainer.model_config, trainer.disc_config, trainer.cfg, trainer.weights, fx, cb)
        est.trainer_ = trainer
        est.codebook_ = cb
        est.external_features_ = fx is None
        return est
