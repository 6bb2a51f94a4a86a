"""Finite random networks used as NNGP feature samplers.

Weights use the standard parameterisation: ``W ~ N(0, sigma_w^2 / fan_in)``
and ``b ~ N(0, sigma_b^2)``. With ``use_final_fc=False`` the readout layer is
replaced by the feature augmentation ``[sigma_w * phi / sqrt(dim), sigma_b]``,
whose inner products reproduce that layer's kernel exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor
from .utils import derive_seed, stable_hash

ARCHITECTURES = ("convnet3", "fc")


@dataclass(frozen=True)
class NetworkSpec:
    architecture: str = "convnet3"
    depth: int = 3
    channels: int = 256
    input_shape: tuple[int, int, int] = (1, 28, 28)
    sigma_w2: float = 2.0
    sigma_b2: float = 0.1
    use_final_fc: bool = False
    num_outputs: int = 10
    dtype: str = "float32"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.depth < 1 or self.channels < 1:
            raise ConfigError("depth and channels must be positive")
        if self.sigma_w2 <= 0 or self.sigma_b2 < 0:
            raise ConfigError("need sigma_w2 > 0 and sigma_b2 >= 0")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.architecture == "convnet3":
            h, w = self.input_shape[1:]
            for _ in range(self.depth):
                if h < 2 or w < 2:
                    raise ConfigError(f"input {self.input_shape} too small for {self.depth} pooling stages")
                h, w = h // 2, w // 2

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def repr_dim(self) -> int:
        """Size of the flattened representation fed to the (removed) readout."""
        if self.architecture == "fc":
            return self.input_dim if self.depth == 1 else self.channels
        _, h, w = self.input_shape
        for _ in range(self.depth):
            h, w = h // 2, w // 2
        return self.channels * h * w

    @property
    def feature_dim(self) -> int:
        return self.num_outputs if self.use_final_fc else self.repr_dim + 1

    def layer_shapes(self) -> list[tuple[tuple[int, ...], int]]:
        """(weight shape, fan_in) for every layer including any readout."""
        shapes = []
        if self.architecture == "convnet3":
            c_in = self.input_shape[0]
            for _ in range(self.depth):
                shapes.append(((self.channels, c_in, 3, 3), 9 * c_in))
                c_in = self.channels
        else:
            d = self.input_dim
            for _ in range(self.depth - 1):
                shapes.append(((self.channels, d), d))
                d = self.channels
        if self.use_final_fc:
            shapes.append(((self.num_outputs, self.repr_dim), self.repr_dim))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


@dataclass(frozen=True)
class NetworkParams:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int


def sample_network(spec: NetworkSpec, seed: int) -> NetworkParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    sb = np.sqrt(spec.sigma_b2)
    for shape, fan_in in spec.layer_shapes():
        weights.append(rng.standard_normal(shape) * np.sqrt(spec.sigma_w2 / fan_in))
        b = rng.standard_normal(shape[0])
        biases.append(b * sb if spec.sigma_b2 > 0 else np.zeros(shape[0]))
    return NetworkParams(tuple(weights), tuple(biases), int(seed))


def params_as_tensors(params: NetworkParams, dtype, requires_grad: bool = False):
    ws = [Tensor(w, dtype=dtype, requires_grad=requires_grad) for w in params.weights]
    bs = [Tensor(b, dtype=dtype, requires_grad=requires_grad) for b in params.biases]
    return ws, bs


def _check_input(spec: NetworkSpec, X: Tensor) -> None:
    if tuple(X.shape[1:]) != spec.input_shape:
        raise DimensionError(f"input shape {tuple(X.shape[1:])} does not match network input {spec.input_shape}")


def representation(spec: NetworkSpec, ws, bs, X: Tensor) -> Tensor:
    """Flattened post-ReLU representation [B, repr_dim] (readout excluded)."""
    _check_input(spec, X)
    b = X.shape[0]
    if spec.architecture == "convnet3":
        h = X.transpose(0, 2, 3, 1)
        for w, bias in zip(ws[: spec.depth], bs[: spec.depth]):
            h = T.avgpool2(T.relu(T.conv2d(h, w, bias, channels_last=True)), channels_last=True)
        return h.reshape(b, -1)
    h = X.reshape(b, -1)
    for w, bias in zip(ws[: spec.depth - 1], bs[: spec.depth - 1]):
        h = T.relu(T.add_bias(T.matmul(h, w.T), bias))
    return h


def apply_network(spec: NetworkSpec, ws, bs, X: Tensor) -> Tensor:
    """Output [B, feature_dim]: readout logits or augmented representation."""
    phi = representation(spec, ws, bs, X)
    dim = phi.shape[1]
    if spec.use_final_fc:
        return T.add_bias(T.matmul(phi, ws[-1].T), bs[-1])
    scaled = phi * float(np.sqrt(spec.sigma_w2 / dim))
    bias_col = Tensor(np.full((phi.shape[0], 1), np.sqrt(spec.sigma_b2)), dtype=phi.dtype)
    return T.concat([scaled, bias_col], axis=1)


def forward_features(params: NetworkParams, X: Tensor, spec: NetworkSpec) -> Tensor:
    """Per-network feature matrix [M, B]."""
    X = X.astype(spec.dtype)
    ws, bs = params_as_tensors(params, spec.dtype)
    return apply_network(spec, ws, bs, X).T


@dataclass(frozen=True)
class NetworkEnsemble:
    spec: NetworkSpec
    members: tuple[NetworkParams, ...] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def ensemble_id(self) -> str:
        return stable_hash({"spec": self.spec.to_dict(), "seeds": [m.seed for m in self.members]})[:16]


def sample_ensemble(spec: NetworkSpec, n: int, seed: int) -> NetworkEnsemble:
    members = tuple(sample_network(spec, derive_seed(seed, k)) for k in range(n))
    return NetworkEnsemble(spec, members)
