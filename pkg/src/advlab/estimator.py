"""scikit-learn style wrappers around training and distillation.

Attacks and analysis stay plain functions; only the two fit/transform-shaped
pieces get estimator classes.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attacks import AttackSpec
from .datasets import Dataset
from .distill import DistillConfig, build_robust_dataset
from .models import ARCHITECTURES, Model, build_model, mlp
from .training import TrainConfig, train_adversarial, train_regular


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class DeskClassifier(BaseEstimator, ClassifierMixin):
    """Regular or adversarially trained classifier.

    ``arch`` is a registered architecture id or ``"mlp"`` (one hidden layer of
    ``hidden`` units, sized from the data). ``attack`` is an AttackSpec or its
    dict form; when given, training is adversarial. ``transform`` returns the
    representation at the model's tap.
    """

    def __init__(self, arch="conv-small", hidden=64, epochs=10, batch_size=64, lr=0.01, momentum=0.9,
                 attack=None, seed=0):
        self.arch = arch
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.attack = attack
        self.seed = seed

    def _build(self, X, n_classes):
        if self.arch == "mlp":
            return mlp(int(np.prod(X.shape[1:])), (self.hidden,), n_classes, self.seed)
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        return build_model(self.arch, self.seed, n_classes)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        model = self._build(X, len(self.classes_))
        X = model.prepare(X)
        data = Dataset(X if X.ndim == 4 else X.reshape(len(X), 1, 1, -1), codes)
        attack = self.attack
        if isinstance(attack, dict):
            attack = AttackSpec.from_dict(attack)
        cfg = TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum, attack, self.seed)
        train = train_regular if attack is None else train_adversarial
        self.model_, self.loss_curve_ = train(model, data, cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _prepared(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        return self.model_.prepare(X)

    def decision_function(self, X):
        return self.model_.forward_logits(self._prepared(X))

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        X = self._prepared(X)
        return self.classes_[self.model_.predict(X)]

    def transform(self, X):
        return self.model_.representation(self._prepared(X))


class RobustFeatureDistiller(BaseEstimator, TransformerMixin):
    """Maps images to their robust-feature reconstructions under ``robust_model``.

    ``robust_model`` is a :class:`Model` or a fitted :class:`DeskClassifier`.
    ``fit`` only validates and records the model; ``transform`` distils.
    """

    def __init__(self, robust_model=None, steps=1000, lr=0.1, init="noise", seed=0):
        self.robust_model = robust_model
        self.steps = steps
        self.lr = lr
        self.init = init
        self.seed = seed

    def fit(self, X, y=None):
        model = self.robust_model
        if isinstance(model, DeskClassifier):
            check_is_fitted(model, "model_")
            model = model.model_
        if not isinstance(model, Model):
            raise TypeError("robust_model must be a Model or a fitted DeskClassifier")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        model.prepare(X[:1])
        self.model_ = model
        self.config_ = DistillConfig(self.steps, self.lr, self.init, self.seed)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        imgs = self.model_.prepare(X)
        flat = imgs.reshape(len(imgs), 1, 1, -1) if imgs.ndim == 2 else imgs
        robust = build_robust_dataset(Dataset(flat, np.zeros(len(X), np.int64)), self.model_, self.config_)
        self.distances_ = robust.distances
        self.failed_ = robust.failed
        return robust.images.reshape(X.shape)
