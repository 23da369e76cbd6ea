"""scikit-learn style front end.

``X`` is a sequence of per-video ``T x D1`` feature matrices (or a 3-d array
of equal-length videos) and ``Y`` the matching ``T x C`` binary label
matrices. Outputs follow the input form: a list in, a list out.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .metrics import per_frame_map
from .model import CTRN, CtrnConfig
from .training import fit as fit_model
from .training import predict_logits


def check_sequences(X, Y=None, n_features: int | None = None, n_classes: int | None = None):
    """Validate a batch of videos and return them as lists of 2-d arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("X must be a sequence of T x D1 matrices, got a single 2-d array; wrap it in a list")
    Xs = [check_array(x, dtype=np.float64, ensure_min_samples=1) for x in X]
    if not Xs:
        raise ValueError("X holds no videos")
    widths = {x.shape[1] for x in Xs}
    if len(widths) != 1:
        raise ValueError(f"videos have different feature widths: {sorted(widths)}")
    if n_features is not None and Xs[0].shape[1] != n_features:
        raise ValueError(f"X has {Xs[0].shape[1]} features per snippet, expected {n_features}")
    if Y is None:
        return Xs, None
    Ys = [check_array(y, dtype=None, ensure_min_samples=1) for y in Y]
    if len(Ys) != len(Xs):
        raise ValueError(f"X has {len(Xs)} videos but Y has {len(Ys)}")
    for k, (x, y) in enumerate(zip(Xs, Ys)):
        if y.shape[0] != x.shape[0]:
            raise ValueError(f"video {k}: {x.shape[0]} feature rows but {y.shape[0]} label rows")
        if not np.isin(y, (0, 1)).all():
            raise ValueError(f"video {k}: labels must be binary")
    classes = {y.shape[1] for y in Ys}
    if len(classes) != 1:
        raise ValueError(f"label matrices have different class counts: {sorted(classes)}")
    if n_classes is not None and Ys[0].shape[1] != n_classes:
        raise ValueError(f"Y has {Ys[0].shape[1]} classes, expected {n_classes}")
    return Xs, [y.astype(np.int8) for y in Ys]


class CTRNDetector(BaseEstimator):
    """Dense per-snippet multi-label action detector."""

    def __init__(self, D2=64, L=5, K=9, dropout_p=0.3, attention_bottleneck=None, alpha=1.2,
                 theta=0.05, reweight_p=0.2, use_rtm_mlp=True, use_cgcn=True, use_tcn=True,
                 use_gclassifier=True, head_init_std=0.01, epochs=300, batch_size=8, lr=1e-3,
                 lr_factor=0.3, patience=10, clip_norm=None, seed=0, dtype="float64"):
        self.D2 = D2
        self.L = L
        self.K = K
        self.dropout_p = dropout_p
        self.attention_bottleneck = attention_bottleneck
        self.alpha = alpha
        self.theta = theta
        self.reweight_p = reweight_p
        self.use_rtm_mlp = use_rtm_mlp
        self.use_cgcn = use_cgcn
        self.use_tcn = use_tcn
        self.use_gclassifier = use_gclassifier
        self.head_init_std = head_init_std
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_factor = lr_factor
        self.patience = patience
        self.clip_norm = clip_norm
        self.seed = seed
        self.dtype = dtype

    def _config(self, D1: int, C: int) -> CtrnConfig:
        return CtrnConfig(
            D1=D1, D2=self.D2, C=C, L=self.L, K=self.K, dropout_p=self.dropout_p,
            attention_bottleneck=self.attention_bottleneck, alpha=self.alpha, theta=self.theta,
            reweight_p=self.reweight_p, use_rtm_mlp=self.use_rtm_mlp, use_cgcn=self.use_cgcn,
            use_tcn=self.use_tcn, use_gclassifier=self.use_gclassifier,
            head_init_std=self.head_init_std, dtype=self.dtype)

    def fit(self, X, Y, X_val=None, Y_val=None):
        Xs, Ys = check_sequences(X, Y)
        val = None
        if X_val is not None:
            Xv, Yv = check_sequences(X_val, Y_val, Xs[0].shape[1], Ys[0].shape[1])
            val = list(zip(Xv, Yv))
        self.n_features_in_ = Xs[0].shape[1]
        self.n_classes_ = Ys[0].shape[1]
        self.model_ = CTRN(self._config(self.n_features_in_, self.n_classes_), seed=self.seed)
        result = fit_model(self.model_, list(zip(Xs, Ys)), val, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed, lr=self.lr,
                           factor=self.lr_factor, patience=self.patience, clip_norm=self.clip_norm)
        self.history_ = result.log
        self.best_epoch_ = result.best_epoch
        self.cooccurrence_ = result.cooccurrence
        return self

    def _wrap(self, X, outs):
        if isinstance(X, np.ndarray) and X.ndim == 3:
            return np.stack(outs)
        return outs

    def decision_function(self, X):
        """Pre-sigmoid scores per video."""
        check_is_fitted(self, "model_")
        Xs, _ = check_sequences(X, n_features=self.n_features_in_)
        return self._wrap(X, predict_logits(self.model_, Xs, self.batch_size))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        if isinstance(logits, np.ndarray):
            return 1.0 / (1.0 + np.exp(-logits))
        return [1.0 / (1.0 + np.exp(-z)) for z in logits]

    def predict(self, X, threshold: float = 0.5):
        probs = self.predict_proba(X)
        if isinstance(probs, np.ndarray):
            return (probs >= threshold).astype(np.int8)
        return [(p >= threshold).astype(np.int8) for p in probs]

    def score(self, X, Y):
        """Per-frame mAP."""
        check_is_fitted(self, "model_")
        Xs, Ys = check_sequences(X, Y, self.n_features_in_, self.n_classes_)
        probs = [1.0 / (1.0 + np.exp(-z)) for z in predict_logits(self.model_, Xs, self.batch_size)]
        return per_frame_map(probs, Ys).map
