"""Affine input/output transforms fitted on training data."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class InputScaler:
    """Maps each hyperparameter dimension onto [0, 1] using training min/max.

    Dimensions with zero range are constant in the training data and map to 0.
    Test points are not clamped.
    """

    minimum: np.ndarray
    span: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] < 1:
            raise TransformError("need at least one configuration")
        lo = X.min(axis=0)
        return cls(lo, X.max(axis=0) - lo)

    def _safe_span(self):
        return np.where(self.span > 0, self.span, 1.0)

    def transform(self, X):
        Z = (np.atleast_2d(np.asarray(X, dtype=float)) - self.minimum) / self._safe_span()
        Z[:, self.span == 0] = 0.0
        return Z

    def inverse_transform(self, Z):
        return np.atleast_2d(np.asarray(Z, dtype=float)) * self._safe_span() + self.minimum


@dataclass(frozen=True)
class ProgressionScaler:
    """``(log t - log t_1) / (log t_m - log t_1)``: first step 0, last step 1."""

    log_t1: float
    log_span: float

    @staticmethod
    def validate(t):
        t = np.asarray(t, dtype=float).ravel()
        if t.size < 2:
            raise TransformError("progression grid needs at least two steps")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise TransformError("progression steps must be finite and strictly positive")
        if np.any(np.diff(t) <= 0):
            raise TransformError("progression steps must be strictly increasing")
        return t

    @classmethod
    def fit(cls, t):
        t = cls.validate(t)
        log_t1 = math.log(t[0])
        return cls(log_t1, math.log(t[-1]) - log_t1)

    def transform(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise TransformError("progression steps must be strictly positive")
        return (np.log(t) - self.log_t1) / self.log_span

    def inverse_transform(self, s):
        return np.exp(np.asarray(s, dtype=float) * self.log_span + self.log_t1)


@dataclass(frozen=True)
class OutputScaler:
    """Subtract the largest observed value, divide by the population std."""

    y_max: float
    y_std: float

    @classmethod
    def fit(cls, Y, mask=None):
        Y = np.asarray(Y, dtype=float)
        values = Y[np.asarray(mask, dtype=bool)] if mask is not None else Y.ravel()
        if values.size < 2:
            raise TransformError("need at least two observed values")
        y_std = float(np.std(values))
        if not y_std > 0:
            raise TransformError("observed values have zero variance")
        return cls(float(np.max(values)), y_std)

    def transform(self, y):
        return (np.asarray(y, dtype=float) - self.y_max) / self.y_std

    def inverse_transform(self, y):
        return np.asarray(y, dtype=float) * self.y_std + self.y_max

    def inverse_mean_var(self, mean, var):
        return self.inverse_transform(mean), np.asarray(var, dtype=float) * self.y_std**2


@dataclass(frozen=True)
class Scalers:
    inputs: InputScaler
    progression: ProgressionScaler
    outputs: OutputScaler
