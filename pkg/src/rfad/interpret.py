"""Leave-one-out influence over coreset elements and influence-embedding search."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distill import Coreset
from .errors import BadMagicError, DegenerateSupportError, StaleCacheError, TruncatedFileError, VersionMismatchError
from .krr import krr_fit, predict_proba
from .tensor import Tensor
from .utils import hash_arrays, stable_hash

CACHE_MAGIC = b"RFADINFL"
CACHE_VERSION = 1


def kernel_hash(kernel) -> str:
    return stable_hash(kernel.describe())[:16]


class InfluenceModel:
    """Full and leave-one-out KRR solutions for one coreset under one kernel.

    The S leave-one-out systems are solved once at construction and reused
    for every query. ``solve_count`` and ``predict_count`` count linear
    solves and per-point KRR predictions.
    """

    def __init__(self, coreset: Coreset, kernel, lambda0: float = 5e-3):
        if coreset.size < 2:
            raise DegenerateSupportError("leave-one-out needs at least two coreset elements")
        self.coreset = coreset
        self.kernel = kernel
        self.lambda0 = lambda0
        self.tau = float(np.exp(coreset.log_tau))
        self.support = coreset.effective_images()
        self.labels = np.asarray(coreset.labels, dtype=np.float64)
        self.K_SS = np.asarray(kernel(self.support, self.support), dtype=np.float64)
        self.solve_count = 0
        self.predict_count = 0
        self.alpha = self._solve(np.arange(coreset.size))
        self.loo_alpha = []
        for i in range(coreset.size):
            keep = np.delete(np.arange(coreset.size), i)
            self.loo_alpha.append((keep, self._solve(keep)))

    @property
    def size(self) -> int:
        return self.coreset.size

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def _solve(self, keep: np.ndarray) -> np.ndarray:
        self.solve_count += 1
        k = self.K_SS[np.ix_(keep, keep)]
        return krr_fit(Tensor(k), Tensor(self.labels[keep]), self.lambda0).alpha.data

    def key(self, points_hash: str = "") -> dict:
        return {"coreset": self.coreset.content_hash(), "kernel": kernel_hash(self.kernel),
                "lambda0": self.lambda0, "points": points_hash}

    def query_kernel(self, X) -> np.ndarray:
        return np.asarray(self.kernel(np.asarray(X), self.support), dtype=np.float64)

    def proba_full(self, k_xs: np.ndarray) -> np.ndarray:
        self.predict_count += k_xs.shape[0]
        return predict_proba(k_xs @ self.alpha, self.tau)

    def proba_loo(self, k_xs: np.ndarray, i: int) -> np.ndarray:
        keep, alpha = self.loo_alpha[i]
        self.predict_count += k_xs.shape[0]
        return predict_proba(k_xs[:, keep] @ alpha, self.tau)

    def embeddings(self, X) -> np.ndarray:
        """z[n, i, c] = p(c | S) - p(c | S without i) for each query row n."""
        k_xs = self.query_kernel(X)
        full = self.proba_full(k_xs)
        z = np.empty((k_xs.shape[0], self.size, self.num_classes))
        for i in range(self.size):
            z[:, i, :] = full - self.proba_loo(k_xs, i)
        return z


def _model(coreset_or_model, kernel, lambda0) -> InfluenceModel:
    if isinstance(coreset_or_model, InfluenceModel):
        return coreset_or_model
    return InfluenceModel(coreset_or_model, kernel, lambda0)


def loo_predict(coreset, kernel, x, i: int, lambda0: float = 5e-3) -> np.ndarray:
    """Class probabilities at ``x`` (one image) with coreset element ``i`` deleted."""
    model = _model(coreset, kernel, lambda0)
    if not 0 <= i < model.size:
        raise IndexError(f"support index {i} outside [0, {model.size})")
    k_xs = model.query_kernel(np.asarray(x)[None])
    return model.proba_loo(k_xs, i)[0]


def influence_scores(coreset, kernel, x_test, lambda0: float = 5e-3) -> np.ndarray:
    """I_i = sum_c |p(c|S) - p(c|S without i)| for one test image."""
    z = _model(coreset, kernel, lambda0).embeddings(np.asarray(x_test)[None])[0]
    return np.abs(z).sum(axis=1)


@dataclass
class InfluenceTable:
    embeddings: np.ndarray  # [n_points, S, C]
    key: dict

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def flat(self) -> np.ndarray:
        return self.embeddings.reshape(len(self), -1)


def influence_embedding_table(coreset, kernel, points, lambda0: float = 5e-3, chunk_size: int = 1000,
                              cache_path=None) -> InfluenceTable:
    """Embeddings for every point; reuses a matching cache file when given one."""
    images = points.images if hasattr(points, "images") else np.asarray(points)
    model = _model(coreset, kernel, lambda0)
    key = model.key(hash_arrays(images)[:16])
    if cache_path is not None and Path(cache_path).exists():
        try:
            return load_table(cache_path, key)
        except StaleCacheError:
            pass
    parts = [model.embeddings(images[s : s + chunk_size]) for s in range(0, len(images), chunk_size)]
    table = InfluenceTable(np.concatenate(parts, axis=0), key)
    if cache_path is not None:
        save_table(cache_path, table)
    return table


def cosine_similarity(z: np.ndarray, table: np.ndarray) -> np.ndarray:
    z = np.ravel(z)
    zn = np.linalg.norm(z)
    tn = np.linalg.norm(table, axis=1)
    denom = zn * tn
    dots = table @ z
    out = np.zeros(len(table))
    ok = denom > 0
    out[ok] = dots[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def similar_training_points(z_test: np.ndarray, table: InfluenceTable | np.ndarray, k: int):
    """Top-k table rows by cosine similarity J; ties go to the lower index."""
    flat = table.flat() if isinstance(table, InfluenceTable) else np.asarray(table).reshape(len(table), -1)
    if not 1 <= k <= len(flat):
        raise ValueError(f"k must lie in [1, {len(flat)}], got {k}")
    j = cosine_similarity(z_test, flat)
    order = np.lexsort((np.arange(len(j)), -j))[:k]
    return order, j[order]


def top_influence(scores: np.ndarray, k: int):
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    return order, scores[order]


# -- cache file --------------------------------------------------------------------------


def save_table(path, table: InfluenceTable) -> None:
    header = json.dumps({"key": table.key, "shape": list(table.embeddings.shape)}, sort_keys=True).encode()
    body = np.ascontiguousarray(table.embeddings, dtype="<f8").tobytes()
    Path(path).write_bytes(CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, len(header)) + header + body)


def load_table(path, expected_key: dict | None = None) -> InfluenceTable:
    raw = Path(path).read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise BadMagicError(f"{path}: not an influence cache")
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: expected 16 header bytes, got {len(raw)}")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CACHE_VERSION:
        raise VersionMismatchError(f"{path}: cache version {version}, this build reads {CACHE_VERSION}")
    header = json.loads(raw[16 : 16 + hlen].decode())
    if expected_key is not None and header["key"] != expected_key:
        raise StaleCacheError(f"{path}: cache was built for {header['key']}, not {expected_key}")
    shape = header["shape"]
    n = int(np.prod(shape))
    off = 16 + hlen
    if len(raw) < off + 8 * n:
        raise TruncatedFileError(f"{path}: expected {off + 8 * n} bytes, got {len(raw)}")
    emb = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
    return InfluenceTable(emb, header["key"])
