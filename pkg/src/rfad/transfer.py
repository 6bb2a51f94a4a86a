"""Finite-width network training on a distilled coreset.

Supports output centering (train f_theta - f_theta0), label scaling by alpha
with the loss divided by alpha^2, and weight decay anchored at theta0.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergenceError
from .networks import NetworkSpec, apply_network, sample_network
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TransferConfig:
    architecture: str | None = None  # None: same as the coreset
    channels: int = 1024
    learning_rates: tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4)
    weight_decays: tuple[float, ...] = (0.0, 1e-3)
    alphas: tuple[float, ...] = (1.0, 2.0, 8.0, 16.0)
    momentum: float = 0.9
    centering: bool = True
    steps: int = 3000
    patience: int = 300
    eval_every: int = 25
    batch_size: int = 500
    dtype: str = "float64"

    def __post_init__(self):
        self.learning_rates = tuple(float(v) for v in self.learning_rates)
        self.weight_decays = tuple(float(v) for v in self.weight_decays)
        self.alphas = tuple(float(v) for v in self.alphas)
        if not (self.learning_rates and self.weight_decays and self.alphas):
            raise ConfigError("transfer grids must be nonempty")
        if min(self.alphas) < 1:
            raise ConfigError("label scale alpha must be >= 1")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be positive, steps non-negative")

    def grid(self) -> list[tuple[float, float, float]]:
        return list(itertools.product(self.learning_rates, self.weight_decays, self.alphas))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FiniteModel:
    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    weights0: list[np.ndarray] = field(repr=False)
    biases0: list[np.ndarray] = field(repr=False)
    centered: bool = True
    alpha: float = 1.0

    @classmethod
    def initialise(cls, spec: NetworkSpec, seed: int, centered: bool = True, alpha: float = 1.0) -> "FiniteModel":
        p = sample_network(spec, seed)
        ws = [w.astype(spec.dtype) for w in p.weights]
        bs = [b.astype(spec.dtype) for b in p.biases]
        return cls(spec, [w.copy() for w in ws], [b.copy() for b in bs], ws, bs, centered, alpha)

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def params0(self) -> list[np.ndarray]:
        return self.weights0 + self.biases0

    def raw_output(self, X, ws=None, bs=None) -> np.ndarray:
        with no_grad():
            ws = [Tensor(w) for w in (ws or self.weights)]
            bs = [Tensor(b) for b in (bs or self.biases)]
            return apply_network(self.spec, ws, bs, Tensor(np.asarray(X), dtype=self.spec.dtype)).data

    def output(self, X) -> np.ndarray:
        """Network output in training units (centred if trained centred, not divided by alpha)."""
        out = self.raw_output(X)
        if self.centered:
            out = out - self.raw_output(X, self.weights0, self.biases0)
        return out

    def predict(self, X, chunk_size: int = 1000) -> np.ndarray:
        X = np.asarray(X)
        parts = [self.output(X[s : s + chunk_size]) for s in range(0, len(X), chunk_size)]
        return np.concatenate(parts, axis=0) / self.alpha


def modified_weight_decay(params, params0, wd: float) -> float:
    return float(wd * sum(np.sum((p - p0) ** 2) for p, p0 in zip(params, params0)))


def modified_weight_decay_grad(params, params0, wd: float) -> list[np.ndarray]:
    return [2.0 * wd * (p - p0) for p, p0 in zip(params, params0)]


def scaled_label_loss(out: Tensor, y: np.ndarray, alpha: float) -> Tensor:
    """||f - alpha y||^2 / alpha^2, averaged over rows (summed over classes)."""
    diff = out - Tensor(alpha * np.asarray(y, dtype=out.dtype), dtype=out.dtype)
    return (diff * diff).sum() * (1.0 / (alpha * alpha * out.shape[0]))


def _loss_and_grads(model: FiniteModel, X: np.ndarray, y: np.ndarray, f0: np.ndarray | None):
    ws = [Tensor(w, requires_grad=True) for w in model.weights]
    bs = [Tensor(b, requires_grad=True) for b in model.biases]
    out = apply_network(model.spec, ws, bs, Tensor(X, dtype=model.spec.dtype))
    if f0 is not None:
        out = out - Tensor(f0, dtype=out.dtype)
    loss = scaled_label_loss(out, y, model.alpha)
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ws + bs]
    return float(loss.data), grads


def eval_finite(model: FiniteModel, images, labels) -> float:
    """Top-1 accuracy of the (centred, alpha-divided) outputs; ties go to class 0 upward."""
    preds = model.predict(images)
    return float(np.mean(np.argmax(preds, axis=1) == np.asarray(labels)))


@dataclass
class TransferResult:
    lr: float
    weight_decay: float
    alpha: float
    centering: bool
    seed: int
    val_accuracy: float
    steps: int
    diverged: bool = False
    test_accuracy: float | None = None
    model: FiniteModel | None = field(default=None, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("model")
        return d


def finite_spec(coreset, cfg: TransferConfig) -> NetworkSpec:
    base = coreset.network_spec
    return replace(base, architecture=cfg.architecture or base.architecture, channels=cfg.channels,
                   use_final_fc=True, num_outputs=coreset.num_classes, dtype=cfg.dtype)


def train_finite(coreset, cfg: TransferConfig, seed: int, lr: float, weight_decay: float, alpha: float,
                 val_images=None, val_labels=None) -> TransferResult:
    """Momentum SGD on the coreset; keeps the best-validation weights.

    Raises DivergenceError naming the hyperparameter point if the loss
    becomes non-finite.
    """
    spec = finite_spec(coreset, cfg)
    model = FiniteModel.initialise(spec, seed, cfg.centering, alpha)
    X = coreset.effective_images().astype(spec.dtype)
    y = np.asarray(coreset.labels, dtype=np.float64)
    f0_all = model.raw_output(X) if cfg.centering else None
    rng = np.random.default_rng(seed)
    velocity = [np.zeros_like(p) for p in model.params()]
    n_w = len(model.weights)
    has_val = val_images is not None
    best = (-1.0, 0, [p.copy() for p in model.params()])
    if has_val:
        best = (eval_finite(model, val_images, val_labels), 0, best[2])
    step = 0
    for step in range(1, cfg.steps + 1):
        if len(X) <= cfg.batch_size:
            idx = slice(None)
        else:
            idx = rng.choice(len(X), size=cfg.batch_size, replace=False)
        f0 = None if f0_all is None else f0_all[idx]
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = _loss_and_grads(model, X[idx], y[idx], f0)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step} (lr={lr}, wd={weight_decay}, alpha={alpha})")
        if weight_decay:
            wd_grads = modified_weight_decay_grad(model.params(), model.params0(), weight_decay)
            grads = [g + gw for g, gw in zip(grads, wd_grads)]
        params = model.params()
        for k, (p, g) in enumerate(zip(params, grads)):
            velocity[k] = cfg.momentum * velocity[k] + g
            params[k] = p - lr * velocity[k]
        if not all(np.all(np.isfinite(p)) for p in params):
            raise DivergenceError(f"non-finite weights at step {step} (lr={lr}, wd={weight_decay}, alpha={alpha})")
        model.weights, model.biases = params[:n_w], params[n_w:]
        if has_val and step % cfg.eval_every == 0:
            acc = eval_finite(model, val_images, val_labels)
            if acc > best[0]:
                best = (acc, step, [p.copy() for p in model.params()])
            elif step - best[1] >= cfg.patience:
                break
    if has_val:
        model.weights, model.biases = best[2][:n_w], best[2][n_w:]
    val_acc = best[0] if has_val else float("nan")
    return TransferResult(lr, weight_decay, alpha, cfg.centering, seed, val_acc, step, model=model)


def grid_search(coreset, cfg: TransferConfig, val_images, val_labels, seed: int = 0,
                grid=None) -> tuple[TransferResult, list[TransferResult]]:
    """Evaluate every grid point; best by validation accuracy, first in grid order on ties.

    A diverged point is recorded with accuracy -inf and never selected unless
    every point diverged.
    """
    results = []
    for lr, wd, alpha in grid or cfg.grid():
        try:
            res = train_finite(coreset, cfg, seed, lr, wd, alpha, val_images, val_labels)
        except DivergenceError as exc:
            log.warning("%s", exc)
            res = TransferResult(lr, wd, alpha, cfg.centering, seed, float("-inf"), 0, diverged=True)
        results.append(res)
    best = results[0]
    for r in results[1:]:
        if r.val_accuracy > best.val_accuracy:
            best = r
    return best, results


CSV_FIELDS = ["lr", "weight_decay", "alpha", "centering", "seed", "val_accuracy", "test_accuracy", "steps", "diverged"]


def write_results_csv(path_or_file, results) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in results:
            w.writerow(r.row())
    finally:
        if own:
            fh.close()
