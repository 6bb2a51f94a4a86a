"""Kernel ridge regression head with adaptive ridge, Platt and MSE losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError
from .tensor import Tensor


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def adaptive_lambda(K_SS, lambda0: float) -> float:
    """lambda0 times the mean diagonal entry of K_SS."""
    k = _data(K_SS)
    return float(lambda0 * np.trace(k) / k.shape[0])


@dataclass
class KrrSolution:
    alpha: Tensor
    lambda_effective: float
    support_labels: np.ndarray


def krr_fit(K_SS, y_S, lambda0: float) -> KrrSolution:
    """Dual coefficients (K_SS + lambda I)^-1 y_S, solved in float64.

    Differentiable in ``K_SS`` and ``y_S`` (including through the adaptive
    ridge, which depends on the diagonal of ``K_SS``).
    """
    K = T.as_tensor(K_SS).astype(np.float64)
    y = T.as_tensor(y_S).astype(np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionError(f"K_SS must be square, got {K.shape}")
    if y.shape[0] != K.shape[0]:
        raise DimensionError(f"label rows {y.shape[0]} do not match support size {K.shape[0]}")
    lam = T.diag_mean(K) * float(lambda0)
    alpha = T.solve_spd(T.add_diag(K, lam), y)
    return KrrSolution(alpha, float(lam.data), np.array(y.data, copy=True))


def krr_predict(K_BS, sol: KrrSolution) -> Tensor:
    K = T.as_tensor(K_BS).astype(np.float64)
    if K.ndim != 2 or K.shape[1] != sol.alpha.shape[0]:
        raise DimensionError(f"K_BS column axis has {K.shape[-1]} entries, support size is {sol.alpha.shape[0]}")
    return T.matmul(K, sol.alpha)


class PlattHead:
    """Learned temperature, stored as log tau so tau stays positive."""

    def __init__(self, log_tau: float = 0.0):
        self.log_tau = Tensor(np.asarray(log_tau, dtype=np.float64), requires_grad=True)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    def inverse_tau(self) -> Tensor:
        return T.exp(-self.log_tau)


def hard_targets(y) -> np.ndarray:
    """One-hot rows at argmax(y); ties go to the lowest class index."""
    y = _data(y)
    out = np.zeros(y.shape, dtype=np.float64)
    out[np.arange(y.shape[0]), np.argmax(y, axis=1)] = 1.0
    return out


def platt_loss(preds, y, head: PlattHead) -> Tensor:
    preds = T.as_tensor(preds)
    if not np.all(np.isfinite(preds.data)):
        raise NumericError("platt_loss: non-finite predictions")
    logits = T.scale(preds, head.inverse_tau().astype(preds.dtype))
    return T.softmax_cross_entropy(logits, Tensor(hard_targets(y), dtype=preds.dtype))


def mse_loss(preds, y) -> Tensor:
    preds = T.as_tensor(preds)
    y = T.as_tensor(y).astype(preds.dtype)
    if preds.shape != y.shape:
        raise DimensionError(f"mse_loss: prediction shape {preds.shape} vs label shape {y.shape}")
    diff = preds - y
    return (diff * diff).mean()


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(preds, head: PlattHead | float) -> np.ndarray:
    tau = head.tau if isinstance(head, PlattHead) else float(head)
    return softmax_rows(np.asarray(_data(preds), dtype=np.float64) / tau)


def accuracy(preds, labels) -> float:
    return float(np.mean(np.argmax(_data(preds), axis=1) == np.asarray(labels)))
