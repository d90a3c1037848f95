"""scikit-learn style wrappers around the quantizers and the QAT pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .data import Dataset
from .intinfer import export_int_model, int_infer
from .layers import ModelConfig, QuantPolicy, build_model
from .quantizers import (IntRange, init_alpha, make_levels, quant_dequant_uniform,
                         quantize_to_levels, step_init)
from .trainer import TrainConfig, predict_logits, train


class UniformQuantizer(TransformerMixin, BaseEstimator):
    """Fake-quantize arrays with a step fitted to the data (``2*mean|x|/sqrt(p)``)."""

    def __init__(self, bits: int = 4, signed: bool = True):
        self.bits = bits
        self.signed = signed

    def fit(self, X, y=None):
        X = check_array(X, ensure_2d=False, allow_nd=True)
        self.range_ = IntRange.for_bits(self.bits, self.signed)
        self.step_ = step_init(X, self.range_)
        return self

    def transform(self, X):
        check_is_fitted(self, "step_")
        X = check_array(X, ensure_2d=False, allow_nd=True)
        return quant_dequant_uniform(X, self.step_, self.range_)[1]

    def codes(self, X) -> np.ndarray:
        check_is_fitted(self, "step_")
        X = check_array(X, ensure_2d=False, allow_nd=True)
        return quant_dequant_uniform(X, self.step_, self.range_)[0].astype(np.int64)


class LevelQuantizer(TransformerMixin, BaseEstimator):
    """Project arrays onto the POT or POST level set with a fitted clipping threshold."""

    def __init__(self, bits: int = 4, scheme: str = "post", full_levels: bool = False):
        self.bits = bits
        self.scheme = scheme
        self.full_levels = full_levels

    def fit(self, X, y=None):
        X = check_array(X, ensure_2d=False, allow_nd=True)
        self.alpha_ = init_alpha(X)
        self.levels_ = make_levels(self.scheme, self.alpha_, self.bits, self.full_levels)
        return self

    def transform(self, X):
        check_is_fitted(self, "levels_")
        X = check_array(X, ensure_2d=False, allow_nd=True)
        return quantize_to_levels(X, self.levels_)[1]


class QATClassifier(ClassifierMixin, BaseEstimator):
    """Float pre-training followed by quantization-aware fine-tuning.

    ``X`` is ``(N, C, H, W)`` or flat ``(N, C*H*W)`` with ``image_shape`` given.
    With ``scheme="float"`` only the first stage runs.
    """

    def __init__(self, model: str = "tinynet", width: int = 16, scheme: str = "scheme2",
                 bits: int = 4, dequant_mode: str = "base", float_epochs: int = 5,
                 qat_epochs: int = 3, batch_size: int = 64, lr_float: float = 0.05,
                 lr_qat: float = 0.01, weight_decay: float = 1e-4, image_shape=None,
                 seed: int = 0):
        self.model = model
        self.width = width
        self.scheme = scheme
        self.bits = bits
        self.dequant_mode = dequant_mode
        self.float_epochs = float_epochs
        self.qat_epochs = qat_epochs
        self.batch_size = batch_size
        self.lr_float = lr_float
        self.lr_qat = lr_qat
        self.weight_decay = weight_decay
        self.image_shape = image_shape
        self.seed = seed

    def _images(self, X) -> np.ndarray:
        X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64)
        if X.ndim == 2:
            if self.image_shape is None:
                raise ValueError("flat input needs image_shape=(C, H, W)")
            X = X.reshape((len(X),) + tuple(self.image_shape))
        if X.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) images, got shape {X.shape}")
        if X.shape[2] != X.shape[3]:
            raise ValueError("images must be square")
        return X

    def fit(self, X, y):
        X = self._images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} samples but {len(y)} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        data = Dataset(X, y_idx.astype(np.int64), len(self.classes_))
        self.model_config_ = ModelConfig(self.model, len(self.classes_), X.shape[1], self.width,
                                         X.shape[2])
        net = build_model(self.model_config_, None, seed=self.seed)
        self.history_ = train(net, data, None, TrainConfig(
            epochs=self.float_epochs, batch_size=self.batch_size, lr0=self.lr_float,
            weight_decay=self.weight_decay, seed=self.seed, scheme="float"))
        self.policy_ = None
        if self.scheme != "float":
            self.policy_ = QuantPolicy(self.bits, self.scheme, dequant_mode=self.dequant_mode)
            net = build_model(self.model_config_, self.policy_, net.state_dict(), seed=self.seed)
            self.history_ += train(net, data, None, TrainConfig(
                epochs=self.qat_epochs, batch_size=self.batch_size, lr0=self.lr_qat,
                weight_decay=self.weight_decay, seed=self.seed, scheme=self.scheme,
                bits=self.bits, dequant_mode=self.dequant_mode))
        self.net_ = net
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return predict_logits(self.net_, self._images(X), self.batch_size)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return np.exp(T.log_softmax(logits))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def export_int(self):
        """Integer-coded model (scheme-2 style policies only)."""
        check_is_fitted(self, "net_")
        return export_int_model(self.net_, self.model_config_, self.policy_ or QuantPolicy(
            scheme="float"))

    def predict_int(self, X) -> np.ndarray:
        logits = int_infer(self.export_int(), self._images(X), self.batch_size, model=self.net_)
        return self.classes_[np.argmax(logits, axis=1)]
