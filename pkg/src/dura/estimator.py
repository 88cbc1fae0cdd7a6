"""scikit-learn shaped front end over the functional trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import EvidenceSplitter, NoisyPairedDataset
from .losses import LossConfig
from .metrics import EvalReport
from .trainer import (
    EncoderParams,
    TrainConfig,
    embed_dataset,
    evaluate_params,
    pair_scores,
    train,
)

__all__ = ["DuraRetriever", "EvidenceSplitter"]

_LOSS_KEYS = ("gamma", "tau_h", "tau_t", "tau_e", "lambda2_max", "lambda2_anneal_epochs")


def _check_dataset(X) -> NoisyPairedDataset:
    if not isinstance(X, NoisyPairedDataset):
        raise TypeError(f"expected a NoisyPairedDataset, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("dataset is empty")
    return X


class DuraRetriever(BaseEstimator):
    """Dual linear encoders trained with the evidential robust ranking loss.

    ``fit`` takes a :class:`NoisyPairedDataset`; ``transform`` returns the
    unit-norm image and text embeddings; ``predict`` returns, for each text
    query, the identity of the top-ranked gallery image.

    Parameters mirror :class:`TrainConfig` and the loss temperatures, so
    ``get_params``/``set_params``/``clone`` work as for any estimator.
    """

    def __init__(
        self,
        method="dura",
        epochs=60,
        batch_size=64,
        base_lr=3e-3,
        warmup_epochs=2,
        emb_dim=32,
        kfs_hidden=32,
        k_ratio=0.5,
        dsh_eta=0.05,
        dsh_mu=8,
        split_warmup_epochs=5,
        gamma=0.1,
        tau_h=0.05,
        tau_t=0.015,
        tau_e=0.1,
        lambda2_max=0.1,
        lambda2_anneal_epochs=10,
        seed=0,
    ):
        self.method = method
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup_epochs = warmup_epochs
        self.emb_dim = emb_dim
        self.kfs_hidden = kfs_hidden
        self.k_ratio = k_ratio
        self.dsh_eta = dsh_eta
        self.dsh_mu = dsh_mu
        self.split_warmup_epochs = split_warmup_epochs
        self.gamma = gamma
        self.tau_h = tau_h
        self.tau_t = tau_t
        self.tau_e = tau_e
        self.lambda2_max = lambda2_max
        self.lambda2_anneal_epochs = lambda2_anneal_epochs
        self.seed = seed

    def to_config(self) -> TrainConfig:
        p = self.get_params()
        lk = {k: p.pop(k) for k in _LOSS_KEYS}
        return TrainConfig(**p, loss=LossConfig(**lk, lambda2=lk["lambda2_max"]))

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "DuraRetriever":
        keys = cls._get_param_names()
        flat = {k: v for k, v in cfg.to_dict().items() if k in keys}
        flat.update({k: getattr(cfg.loss, k) for k in _LOSS_KEYS})
        return cls(**flat)

    def fit(self, X, y=None, eval_set=None, checkpoint_dir=None):
        """Train on ``X``; ``eval_set`` (a clean dataset) is scored each epoch."""
        X = _check_dataset(X)
        if eval_set is not None:
            _check_dataset(eval_set)
        self.config_ = self.to_config()
        self.params_, self.logs_ = train(self.config_, X, eval_set, checkpoint_dir=checkpoint_dir)
        self.n_features_in_ = X.img_global.shape[1]
        return self

    def _fitted_params(self) -> EncoderParams:
        check_is_fitted(self, "params_")
        return self.params_

    def transform(self, X):
        """``(image_embeddings, text_embeddings)``, one unit row per pair."""
        X = _check_dataset(X)
        params = self._fitted_params()
        if X.img_global.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.img_global.shape[1]} features, expected {self.n_features_in_}")
        return embed_dataset(params, X)

    def encode_images(self, X):
        return self.transform(X)[0]

    def encode_texts(self, X):
        return self.transform(X)[1]

    def similarity(self, X):
        """Text-query by gallery-image cosine matrix and the gallery indices."""
        x, y = self.transform(X)
        g = X.gallery()
        return y @ x[g].T, g

    def predict(self, X):
        """Identity of the top-ranked gallery image for every text query."""
        sim, g = self.similarity(X)
        top = np.argmax(sim, axis=1)  # first maximum, matching the ranking tie rule
        return X.image_identity[g][top]

    def evaluate(self, X) -> EvalReport:
        return evaluate_params(self._fitted_params(), _check_dataset(X))

    def score(self, X, y=None) -> float:
        """Rank-1 (percent) of text -> image retrieval on ``X``."""
        return self.evaluate(X).rank1

    def pair_evidence(self, X):
        """Matched-pair evidence for every pair of ``X``."""
        return pair_scores(self._fitted_params(), _check_dataset(X), self.tau_e)
