"""Scikit-learn style wrappers so the normalizers and embedding models
compose with the wider ecosystem (pipelines, clone, get_params).

X is always a list of GaitSequence.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import EmptyDataset
from .evaluation import EmbeddingRecord, embed_dataset, identify
from .models import SinglePoseEncoderConfig, TemporalBaselineConfig
from .normalization import apply_scheme, compute_stats, scheme_needs_stats
from .poses import FrameGeometry
from .training import TrainConfig, train


def _check_sequences(X):
    X = list(X)
    if not X:
        raise EmptyDataset("X must contain at least one GaitSequence")
    return X


class SequenceNormalizer(BaseEstimator, TransformerMixin):
    """Apply a normalization scheme (or comma-joined composition) to sequences.

    fit() computes training-set statistics when the scheme needs them
    (global-avg-skeleton, global-coord-std); otherwise it is a no-op.
    """

    def __init__(self, scheme="none", frame_width=1.0, frame_height=1.0):
        self.scheme = scheme
        self.frame_width = frame_width
        self.frame_height = frame_height

    def fit(self, X, y=None):
        X = _check_sequences(X)
        geom = FrameGeometry(self.frame_width, self.frame_height)
        self.geometry_ = geom
        self.stats_ = compute_stats(X, geom) if scheme_needs_stats(self.scheme) else None
        return self

    def transform(self, X):
        check_is_fitted(self, "geometry_")
        return [apply_scheme(self.scheme, seq, stats=self.stats_, geom=self.geometry_)
                for seq in _check_sequences(X)]


class GaitEmbedder(BaseEstimator):
    """Metric-learned identity embedder over gait sequences.

    fit(X) trains the selected model with triplet loss on the sequences'
    subject_id labels. transform(X) returns unit-norm embeddings, and
    predict(X) nearest-neighbor subject ids against the fit-time gallery.
    """

    def __init__(self, model="spe", scheme="none", epochs=30, seq_len=60,
                 margin=0.2, p_identities=8, k_samples=4, base_lr=1e-5,
                 max_lr=1e-3, noise_sigma=0.01, frames_per_sequence=1,
                 seed=0, frame_width=1.0, frame_height=1.0):
        self.model = model
        self.scheme = scheme
        self.epochs = epochs
        self.seq_len = seq_len
        self.margin = margin
        self.p_identities = p_identities
        self.k_samples = k_samples
        self.base_lr = base_lr
        self.max_lr = max_lr
        self.noise_sigma = noise_sigma
        self.frames_per_sequence = frames_per_sequence
        self.seed = seed
        self.frame_width = frame_width
        self.frame_height = frame_height

    def _model_config(self):
        if self.model == "spe":
            return SinglePoseEncoderConfig()
        if self.model == "temporal":
            return TemporalBaselineConfig(seq_len=self.seq_len)
        raise ValueError(f"unknown model {self.model!r}")

    def fit(self, X, y=None):
        X = _check_sequences(X)
        geom = FrameGeometry(self.frame_width, self.frame_height)
        cfg = TrainConfig(
            margin=self.margin, p_identities=self.p_identities,
            k_samples=self.k_samples, epochs=self.epochs, base_lr=self.base_lr,
            max_lr=self.max_lr, seed=self.seed, noise_sigma=self.noise_sigma,
            seq_len=self.seq_len, frames_per_sequence=self.frames_per_sequence)
        model_config = self._model_config()
        result = train(self.model, X, self.scheme, model_config, cfg, geom=geom)
        self.store_ = result.store
        self.model_config_ = model_config
        self.stats_ = result.stats
        self.geometry_ = geom
        self.gallery_ = self._embed(X)
        return self

    def _embed(self, X):
        return embed_dataset(self.model, self.store_, self.model_config_, X,
                             self.scheme, stats=self.stats_, geom=self.geometry_,
                             seq_len=self.seq_len)

    def transform(self, X):
        check_is_fitted(self, "store_")
        records = self._embed(_check_sequences(X))
        return np.stack([r.embedding for r in records])

    def predict(self, X):
        check_is_fitted(self, "store_")
        records = self._embed(_check_sequences(X))
        return np.array([identify(r, self.gallery_)[0] for r in records])
