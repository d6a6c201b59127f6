"""scikit-learn compatible wrapper around the frozen-backbone classifier."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .backbone import EncoderState, ModelConfig, attach_downstream, classify, encode, init_encoder
from .bench.data import Dataset
from .numkernel import make_rng, softmax_rows
from .training import TrainConfig, train

__all__ = ["AdapterTuneClassifier"]


class AdapterTuneClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Train adapters and a linear head on top of a frozen encoder.

    Parameters
    ----------
    backbone : EncoderState, optional
        Pretrained encoder to adapt. Its geometry (``d``, ``L``, ``heads``,
        ``n_tokens``, ``input_dim``) overrides the matching arguments below.
        When omitted a randomly initialised encoder is used, which turns the
        model into a random-feature classifier.
    regime : {"adaptertune", "head_only", "full_ft"}
    rank, alpha, every_k, init
        Adapter geometry; ``init`` is ``"zero"`` or ``"small_random:<sigma>"``.
    d, L, heads, n_tokens, mlp_ratio
        Encoder geometry, used only without ``backbone``. ``n_features`` must
        split evenly into ``n_tokens - 1`` patches.
    epochs, warmup_epochs, base_lr, weight_decay, batch_size, clip_norm
        Optimiser recipe.
    random_state : int
        Seeds head/adapter initialisation and the shuffle order.

    Attributes
    ----------
    classes_ : ndarray
    n_features_in_ : int
    state_ : EncoderState
        Trained parameters.
    history_ : list of MetricsRow
    """

    def __init__(
        self,
        backbone: EncoderState | None = None,
        regime: str = "adaptertune",
        rank: int = 16,
        alpha: float = 1.0,
        every_k: int = 1,
        init: str = "zero",
        d: int = 64,
        L: int = 2,
        heads: int = 4,
        n_tokens: int = 3,
        mlp_ratio: float = 4.0,
        epochs: int = 20,
        warmup_epochs: int = 5,
        base_lr: float = 1e-3,
        weight_decay: float = 0.05,
        batch_size: int = 32,
        clip_norm: float = 1.0,
        random_state: int = 0,
    ):
        self.backbone = backbone
        self.regime = regime
        self.rank = rank
        self.alpha = alpha
        self.every_k = every_k
        self.init = init
        self.d = d
        self.L = L
        self.heads = heads
        self.n_tokens = n_tokens
        self.mlp_ratio = mlp_ratio
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _model_config(self, n_features, n_classes) -> ModelConfig:
        if self.backbone is not None:
            geo = self.backbone.cfg
            if geo.input_dim != n_features:
                raise ValueError(f"backbone expects {geo.input_dim} features, X has {n_features}")
            base = dict(d=geo.d, L=geo.L, heads=geo.heads, n_tokens=geo.n_tokens, mlp_ratio=geo.mlp_ratio)
        else:
            if n_features % (self.n_tokens - 1):
                raise ValueError(
                    f"{n_features} features do not split into {self.n_tokens - 1} equal patches"
                )
            base = dict(d=self.d, L=self.L, heads=self.heads, n_tokens=self.n_tokens, mlp_ratio=self.mlp_ratio)
        return ModelConfig(
            **base, input_dim=n_features, C=n_classes, rank=self.rank, alpha=self.alpha,
            every_k=self.every_k, init=self.init, regime=self.regime,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        cfg = self._model_config(X.shape[1], self.classes_.size)
        backbone = self.backbone
        if backbone is None:
            backbone = init_encoder(replace(cfg, regime="full_ft"), make_rng(self.random_state, 0x5EED))
        state = attach_downstream(backbone, cfg, make_rng(self.random_state, 0x1A17))
        tcfg = TrainConfig(
            base_lr=self.base_lr, weight_decay=self.weight_decay, epochs=self.epochs,
            warmup_epochs=self.warmup_epochs, clip_norm=self.clip_norm,
            batch_size=self.batch_size, seed=self.random_state,
        )
        data = Dataset("estimator", X, self._le.transform(y), int(self.classes_.size))
        self.state_, self.history_ = train(state, data, tcfg, run_id="estimator")
        return self

    def _check(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fitted with {self.n_features_in_}")
        return X

    def decision_function(self, X):
        X = self._check(X)
        return classify(self.state_, X)

    def predict_proba(self, X):
        return softmax_rows(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        """CLS features ``(n_samples, d)`` of the adapted encoder."""
        X = self._check(X)
        feat, _ = encode(self.state_, X)
        return feat
