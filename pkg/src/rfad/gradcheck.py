"""Central finite-difference checks for the autodiff tape."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], leaf: Tensor, eps: float = 1e-5,
                   symmetric: bool = False) -> np.ndarray:
    """d fn() / d leaf by central differences, perturbing ``leaf.data`` in place.

    With ``symmetric`` the (i, j) and (j, i) entries of a square leaf are moved
    together and the result split evenly, matching a symmetrised analytic grad.
    """
    x = leaf.data
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        if symmetric:
            i, j = idx
            if j < i:
                continue
            pairs = {(i, j), (j, i)}
        else:
            pairs = {idx}
        orig = {p: x[p] for p in pairs}
        for p in pairs:
            x[p] = orig[p] + eps
        fp = float(fn().data)
        for p in pairs:
            x[p] = orig[p] - eps
        fm = float(fn().data)
        for p in pairs:
            x[p] = orig[p]
        d = (fp - fm) / (2 * eps)
        if symmetric and len(pairs) == 2:
            grad[i, j] = grad[j, i] = d / 2
        else:
            grad[idx] = d
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    den = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), 1e-12)
    return float(num / den)


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5,
                    symmetric: Sequence[bool] | None = None) -> list[float]:
    """Relative error between tape gradients and finite differences, per leaf."""
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    out.backward()
    symmetric = symmetric or [False] * len(leaves)
    errors = []
    for leaf, sym in zip(leaves, symmetric):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numerical_grad(fn, leaf, eps=eps, symmetric=sym)
        errors.append(relative_error(analytic, numeric))
    return errors
