"""scikit-learn compatible wrapper around :class:`PViGNet` and :func:`train`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .backbone import ModelConfig
from .data import ArrayDataset
from .exceptions import ShapeError
from .model import PViGNet
from .tensor import precision as precision_mode
from .training import TrainConfig, run_inference, train


class PViGClassifier(ClassifierMixin, BaseEstimator):
    """Pyramid vision GNN image classifier.

    ``X`` holds normalised images shaped n×C×H×W with H and W multiples of
    32.  Architecture comes from ``preset`` with the class count, input size
    and channel count taken from the data.

    Attributes set by :meth:`fit`: ``classes_``, ``model_``, ``history_``,
    ``n_features_in_`` (pixels per image).
    """

    def __init__(self, preset="micro", head="capsule", epochs=300, batch_size=32, lr=2e-3,
                 warmup_epochs=0, weight_decay=0.05, augment=True, precision="f64", random_state=0):
        self.preset = preset
        self.head = head
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.augment = augment
        self.precision = precision
        self.random_state = random_state

    def _images(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 4:
            raise ShapeError(f"expected images shaped n×C×H×W, got {X.shape}")
        return X

    def fit(self, X, y):
        X = self._images(X)
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        encoder = LabelEncoder().fit(y)
        self.classes_ = encoder.classes_
        codes = encoder.transform(y)
        _, C, H, W = X.shape
        self.n_features_in_ = C * H * W
        config = ModelConfig.preset(self.preset, head=self.head, num_classes=len(self.classes_),
                                    height=H, width=W, in_channels=C)
        train_config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                                   warmup_epochs=self.warmup_epochs, weight_decay=self.weight_decay,
                                   augment=self.augment, seed=self.random_state, precision=self.precision)
        seed = 0 if self.random_state is None else int(self.random_state)
        with precision_mode(self.precision):
            self.model_ = PViGNet(config.validate(), seed)
            result = train(self.model_, ArrayDataset(X, codes), None, train_config)
        self.history_ = result.history
        return self

    def decision_function(self, X) -> np.ndarray:
        """Per-class scores: capsule lengths or logits."""
        check_is_fitted(self, "model_")
        X = self._images(X)
        if X.shape[1] * X.shape[2] * X.shape[3] != self.n_features_in_:
            raise ShapeError(f"model was fitted on {self.n_features_in_} values per image, got {X.shape[1:]}")
        with precision_mode(self.precision):
            scores, _ = run_inference(self.model_, ArrayDataset(X, np.zeros(len(X), dtype=np.int64)),
                                      self.batch_size)
        return scores

    def predict_proba(self, X) -> np.ndarray:
        """Softmax of the logits, or capsule lengths rescaled to sum to one."""
        scores = self.decision_function(X)
        if self.model_.config.head == "capsule":
            return scores / scores.sum(axis=1, keepdims=True)
        z = np.exp(scores - scores.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
