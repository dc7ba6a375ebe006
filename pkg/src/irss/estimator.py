"""scikit-learn style wrapper around :func:`irss.trainer.train`.

``IRSSClassifier`` accepts flat ``(n, D)`` inputs (an MLP extractor is built)
or image batches ``(n, C, H, W)`` (a conv extractor is built). ``transform``
returns the learned features, so the estimator can sit in a pipeline in front
of any downstream model.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .diffcore import conv_architecture, mlp_architecture
from .synthdata import Dataset
from .trainer import METHODS, PRESETS, TrainConfig, features_of, method_config, predict_proba, train


def _check_input(X, n_dims=None):
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim not in (2, 4):
        raise ValueError(f"expected a 2-D (n, D) or 4-D (n, C, H, W) array, got {X.ndim}-D")
    if n_dims is not None and X.shape[1:] != n_dims:
        raise ValueError(f"X has per-sample shape {X.shape[1:]}, estimator was fitted on {n_dims}")
    return X


class IRSSClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Classifier trained with the style-aligned invariant objective.

    Parameters
    ----------
    method : str, default="irss-irmv1"
        One of ``erm``, ``irm``, ``adv-only``, ``irss-irmv1``, ``irss-birm``.
        Sets the loss weights unless they are given explicitly.
    lambda_adv, lambda_ent, lambda_irm : float or None
        Override the preset weight of the chosen method.
    k_env, n_styles : int
        Number of clustered environments and pseudo styles.
    feature_dim : int
        Width of the learned representation.
    hidden : tuple of int
        Hidden widths of the MLP extractor (flat inputs only).
    bounded : bool
        Append a tanh to the conv extractor (image inputs only).
    bigsteps, steps, batch_size, lr, disc_lr, optimizer
        Training schedule, passed to :class:`irss.trainer.TrainConfig`.
    random_state : int
        Seed for initialisation, shuffling and clustering.
    """

    def __init__(self, method="irss-irmv1", lambda_adv=None, lambda_ent=None, lambda_irm=None,
                 k_env=None, n_styles=2, feature_dim=8, hidden=(16,), bounded=True,
                 bigsteps=4, steps=100, batch_size=64, lr=1e-3, disc_lr=None,
                 optimizer="adam", random_state=0):
        self.method = method
        self.lambda_adv = lambda_adv
        self.lambda_ent = lambda_ent
        self.lambda_irm = lambda_irm
        self.k_env = k_env
        self.n_styles = n_styles
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.bounded = bounded
        self.bigsteps = bigsteps
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.disc_lr = disc_lr
        self.optimizer = optimizer
        self.random_state = random_state

    def _config(self):
        if self.method not in PRESETS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        overrides = {k: getattr(self, k) for k in ("lambda_adv", "lambda_ent", "lambda_irm", "k_env", "disc_lr")
                     if getattr(self, k) is not None}
        base = TrainConfig(S=self.n_styles, bigsteps=self.bigsteps, steps=self.steps,
                           batch_size=self.batch_size, lr=self.lr, optimizer=self.optimizer,
                           seed=int(self.random_state), log_every=10**9)
        return method_config(self.method, base, **overrides)

    def _architecture(self, sample_shape, n_classes):
        if len(sample_shape) == 1:
            return mlp_architecture(sample_shape[0], tuple(self.hidden), self.feature_dim,
                                    n_classes, self.n_styles)
        return conv_architecture(sample_shape, feature_dim=self.feature_dim, n_classes=n_classes,
                                 n_styles=self.n_styles, bounded=self.bounded)

    def fit(self, X, y):
        X = _check_input(X)
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        codes = self.label_encoder_.transform(y)
        n = len(codes)
        data = Dataset(X, codes, np.full(n, -1), np.zeros(n, np.int64), n_classes=len(self.classes_))
        self.config_ = self._config()
        self.arch_ = self._architecture(X.shape[1:], len(self.classes_))
        self.state_ = train(data, self.arch_, self.config_, probe=False)
        self.params_ = self.state_.params
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = X.shape[1:]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return predict_proba(self.params_, self.arch_, _check_input(X, self.input_shape_))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def transform(self, X):
        """Learned features, shape ``(n, feature_dim)``."""
        check_is_fitted(self, "params_")
        return features_of(self.params_, self.arch_, _check_input(X, self.input_shape_))
