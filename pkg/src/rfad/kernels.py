"""Empirical NNGP kernels from random features, and exact FC NNGP/NTK oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, NumericError, ProvenanceError
from .networks import NetworkEnsemble, forward_features
from .tensor import Tensor, no_grad

_COS_OVERSHOOT = 1e-6


@dataclass
class FeatureMatrix:
    values: Tensor  # [sum of per-network M, B]
    ensemble_id: str
    batch_id: str | None = None
    stop_gradient: bool = False

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def n_points(self) -> int:
        return self.values.shape[1]


def random_feature_map(ensemble: NetworkEnsemble, X, stop_gradient: bool = False,
                       chunk_size: int | None = None, batch_id: str | None = None) -> FeatureMatrix:
    """Stack every member's features and scale by 1/sqrt(N).

    With ``stop_gradient`` the forward runs without a tape, optionally in
    chunks of ``chunk_size`` inputs, and the result is detached.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    scale = 1.0 / math.sqrt(ensemble.n)
    if stop_gradient:
        n = X.shape[0]
        step = chunk_size or n
        with no_grad():
            cols = []
            for start in range(0, n, step):
                xb = Tensor(X.data[start : start + step], dtype=X.dtype)
                per_net = [forward_features(p, xb, ensemble.spec).data for p in ensemble.members]
                cols.append(np.concatenate(per_net, axis=0))
            vals = np.concatenate(cols, axis=1) * np.asarray(scale, dtype=cols[0].dtype)
        out = Tensor(vals, dtype=vals.dtype).detach()
        return FeatureMatrix(out, ensemble.ensemble_id, batch_id, stop_gradient=True)
    per_net = [forward_features(p, X, ensemble.spec) for p in ensemble.members]
    stacked = per_net[0] if len(per_net) == 1 else T.concat(per_net, axis=0)
    return FeatureMatrix(stacked * scale, ensemble.ensemble_id, batch_id, stop_gradient=False)


def gram(phi_a: FeatureMatrix, phi_b: FeatureMatrix) -> Tensor:
    """phi_a^T phi_b; exactly symmetric when both operands are the same matrix."""
    if phi_a.ensemble_id != phi_b.ensemble_id:
        raise ProvenanceError(
            f"feature matrices come from different ensembles ({phi_a.ensemble_id} vs {phi_b.ensemble_id})"
        )
    if phi_a.n_features != phi_b.n_features:
        raise ProvenanceError(f"feature counts differ: {phi_a.n_features} vs {phi_b.n_features}")
    a = phi_a.values
    b = phi_b.values
    if a.dtype != b.dtype:
        a, b = a.astype(np.float64), b.astype(np.float64)
    k = T.matmul(a.T, b)
    if phi_a is phi_b:
        k = (k + k.T) * 0.5
    return k


def _cos_angle(k_xx, k_yy, k_xy):
    k_xx = np.asarray(k_xx, dtype=np.float64)
    k_yy = np.asarray(k_yy, dtype=np.float64)
    if np.any(k_xx <= 0) or np.any(k_yy <= 0):
        raise DomainError("arc-cosine step needs strictly positive diagonal kernel values")
    norm = np.sqrt(k_xx * k_yy)
    cos = np.asarray(k_xy, dtype=np.float64) / norm
    if np.any(np.abs(cos) > 1 + _COS_OVERSHOOT):
        raise NumericError(f"|cos theta| = {np.abs(cos).max():.9f} exceeds 1 beyond round-off")
    return np.clip(cos, -1.0, 1.0), norm


def relu_arccos_step(k_xx, k_yy, k_xy, sigma_w2: float, sigma_b2: float):
    """One ReLU + affine layer of the NNGP recursion.

    Returns ``(k_next, k_dot)`` where ``k_dot = sigma_w2 * E[relu'(u) relu'(v)]``.
    Works elementwise on scalars or broadcastable arrays.
    """
    cos, norm = _cos_angle(k_xx, k_yy, k_xy)
    theta = np.arccos(cos)
    sin = np.sqrt(np.maximum(1.0 - cos * cos, 0.0))
    k_next = sigma_b2 + sigma_w2 * norm * (sin + (np.pi - theta) * cos) / (2 * np.pi)
    k_dot = sigma_w2 * (np.pi - theta) / (2 * np.pi)
    if np.ndim(k_next) == 0:
        return float(k_next), float(k_dot)
    return k_next, k_dot


def _flatten(X) -> np.ndarray:
    X = X.data if isinstance(X, Tensor) else np.asarray(X)
    return np.asarray(X, dtype=np.float64).reshape(X.shape[0], -1)


def fc_kernels(Xa, Xb, depth: int, sigma_w2: float, sigma_b2: float):
    """Exact (NNGP, NTK) cross-kernels between the rows of Xa and Xb."""
    if depth < 1:
        raise DomainError("depth must be >= 1")
    a, b = _flatten(Xa), _flatten(Xb)
    d = a.shape[1]
    k = sigma_b2 + sigma_w2 * (a @ b.T) / d
    ka = sigma_b2 + sigma_w2 * np.einsum("ij,ij->i", a, a) / d
    kb = sigma_b2 + sigma_w2 * np.einsum("ij,ij->i", b, b) / d
    ntk = k.copy()
    for _ in range(depth - 1):
        k_new, k_dot = relu_arccos_step(ka[:, None], kb[None, :], k, sigma_w2, sigma_b2)
        ntk = k_new + k_dot * ntk
        k = k_new
        ka = sigma_b2 + sigma_w2 * ka / 2
        kb = sigma_b2 + sigma_w2 * kb / 2
    return k, ntk


def exact_nngp_fc(X, depth: int, sigma_w2: float = 2.0, sigma_b2: float = 0.1, Y=None) -> np.ndarray:
    k, _ = fc_kernels(X, X if Y is None else Y, depth, sigma_w2, sigma_b2)
    return _symmetrize(k) if Y is None else k


def exact_ntk_fc(X, depth: int, sigma_w2: float = 2.0, sigma_b2: float = 0.1, Y=None) -> np.ndarray:
    _, ntk = fc_kernels(X, X if Y is None else Y, depth, sigma_w2, sigma_b2)
    return _symmetrize(ntk) if Y is None else ntk


def _symmetrize(k: np.ndarray) -> np.ndarray:
    return 0.5 * (k + k.T)


# -- kernel functions used for evaluation and influence queries ----------------------------


class EmpiricalKernel:
    """Empirical NNGP kernel from a fixed ensemble sampled once at construction.

    Feature matrices of arrays seen before are cached by content hash, so
    a test set evaluated against several coresets is featurised only once.
    """

    kind = "empirical"

    def __init__(self, spec, n_networks: int, seed: int, chunk_size: int = 256, cache: bool = True):
        from .networks import sample_ensemble

        self.spec = spec
        self.n_networks = n_networks
        self.seed = seed
        self.chunk_size = chunk_size
        self.ensemble = sample_ensemble(spec, n_networks, seed)
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def describe(self) -> dict:
        return {"kind": self.kind, "spec": self.spec.to_dict(), "n_networks": self.n_networks, "seed": self.seed}

    def features(self, X) -> np.ndarray:
        from .utils import hash_arrays

        X = np.asarray(X.data if isinstance(X, Tensor) else X)
        key = hash_arrays(X) if self._cache is not None else None
        if key is not None and key in self._cache:
            return self._cache[key]
        fm = random_feature_map(self.ensemble, X.astype(self.spec.dtype), stop_gradient=True, chunk_size=self.chunk_size)
        vals = fm.values.data
        if key is not None:
            self._cache[key] = vals
        return vals

    def __call__(self, Xa, Xb) -> np.ndarray:
        fa, fb = self.features(Xa), self.features(Xb)
        return (fa.T.astype(np.float64) @ fb.astype(np.float64))


class ExactFCKernel:
    """Closed-form NNGP or NTK of a fully-connected ReLU network."""

    def __init__(self, kind: str, depth: int, sigma_w2: float = 2.0, sigma_b2: float = 0.1):
        if kind not in ("nngp", "ntk"):
            raise ValueError(f"kind must be 'nngp' or 'ntk', got {kind!r}")
        self.kind = f"exact_fc_{kind}"
        self.which = kind
        self.depth = depth
        self.sigma_w2 = sigma_w2
        self.sigma_b2 = sigma_b2

    def describe(self) -> dict:
        return {"kind": self.kind, "depth": self.depth, "sigma_w2": self.sigma_w2, "sigma_b2": self.sigma_b2}

    def __call__(self, Xa, Xb) -> np.ndarray:
        k, ntk = fc_kernels(Xa, Xb, self.depth, self.sigma_w2, self.sigma_b2)
        return k if self.which == "nngp" else ntk
