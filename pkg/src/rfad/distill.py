"""Coreset distillation through KRR on random-feature NNGP kernels."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import Dataset, ZcaTransform, class_balanced_indices
from .errors import ConfigError, DataError, IncompatibleKernelError, NumericError, SingularMatrixError
from .kernels import EmpiricalKernel, ExactFCKernel, gram, random_feature_map
from .krr import PlattHead, accuracy, krr_fit, krr_predict, mse_loss, platt_loss
from .networks import NetworkEnsemble, NetworkSpec, sample_ensemble
from .optim import OptimizerState
from .tensor import Tensor, no_grad
from .utils import derive_seed, hash_arrays, one_hot_centered, stable_hash

log = logging.getLogger(__name__)

# seed streams derived from the master seed
STREAM_INIT, STREAM_BATCH, STREAM_ENSEMBLE, STREAM_VALIDATION = 1, 2, 3, 4


@dataclass
class DistillConfig:
    dataset: str = "mnist"
    img_per_class: int = 10
    architecture: str = "convnet3"
    depth: int = 3
    n_networks: int = 8
    channels: int = 256
    sigma_w2: float = 2.0
    sigma_b2: float = 0.1
    batch_size: int = 5120
    chunk_size: int = 1280
    lambda0: float = 5e-3
    lr_coreset: float = 1e-3
    lr_transform: float = 5e-5
    lr_log_tau: float = 1e-2
    lr_labels: float = 1e-3
    eps: float = 1e-16
    beta1: float = 0.9
    beta2: float = 0.999
    loss: str = "platt"
    learn_labels: bool = False
    learn_transform: bool = True
    rho: float = 0.0
    patience: int = 1000
    val_period: int = 40
    val_size: int = 1000
    val_networks: int = 16
    max_iterations: int = 20000
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr_coreset", "lr_transform", "lr_log_tau", "lr_labels"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.loss not in ("platt", "mse"):
            raise ConfigError(f"loss must be 'platt' or 'mse', got {self.loss!r}")
        if self.val_period <= 0 or self.patience % self.val_period:
            raise ConfigError("patience must be a positive multiple of val_period")
        if self.img_per_class < 1 or self.n_networks < 1 or self.batch_size < 1:
            raise ConfigError("img_per_class, n_networks and batch_size must be positive")

    def network_spec(self, input_shape, num_classes: int = 10) -> NetworkSpec:
        return NetworkSpec(self.architecture, self.depth, self.channels, tuple(input_shape),
                           self.sigma_w2, self.sigma_b2, False, num_classes, self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())[:16]


@dataclass
class Coreset:
    """Learnable synthetic support set.

    The kernel sees ``effective_images``: base images mapped through the
    learned linear transform (and, for pixel-space corrupted runs, through
    the dataset's whitening).
    """

    base_images: np.ndarray  # [S, C, H, W] float64
    transform: np.ndarray  # [d, d]
    labels: np.ndarray  # [S, num_classes]
    mask: np.ndarray  # bool, like base_images; True = frozen
    frozen_values: np.ndarray  # base_images[mask] at init
    log_tau: float
    num_classes: int
    class_ids: np.ndarray  # class each element was initialised for
    source_indices: np.ndarray  # training indices used at init (-1 for noise)
    network_spec: NetworkSpec
    learn_labels: bool = False
    learn_transform: bool = True
    whiten: ZcaTransform | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.base_images.shape[0]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.base_images.shape[1:])

    def effective_tensor(self, base: Tensor, transform: Tensor) -> Tensor:
        s = base.shape[0]
        flat = T.matmul(base.reshape(s, -1), transform.T)
        if self.whiten is not None:
            flat = T.matmul(flat - Tensor(np.broadcast_to(self.whiten.mean, flat.shape)), Tensor(self.whiten.W))
        return flat.reshape((s,) + self.image_shape)

    def effective_images(self) -> np.ndarray:
        with no_grad():
            return self.effective_tensor(Tensor(self.base_images), Tensor(self.transform)).data

    def apply_mask(self) -> None:
        if self.mask.any():
            self.base_images[self.mask] = self.frozen_values

    def frozen_count(self) -> int:
        return int(self.mask.sum())

    def content_hash(self) -> str:
        return hash_arrays(self.base_images, self.transform, self.labels, self.mask.astype(np.uint8),
                           np.asarray([self.log_tau]))[:16]

    def copy(self) -> "Coreset":
        return copy.deepcopy(self)


def init_coreset(train: Dataset, cfg: DistillConfig, seed: int | None = None) -> Coreset:
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(derive_seed(seed, STREAM_INIT))
    c = train.num_classes
    shape = train.image_shape
    spec = cfg.network_spec(shape, c)
    class_ids = np.repeat(np.arange(c), cfg.img_per_class)
    whiten = None
    if cfg.rho == 0:
        idx = class_balanced_indices(train.labels, cfg.img_per_class, c, rng)
        base = train.images[idx].astype(np.float64)
        class_ids = train.labels[idx]
    else:
        idx = np.full(len(class_ids), -1)
        noise = rng.standard_normal((len(class_ids),) + shape)
        if isinstance(train.preprocessing, ZcaTransform):
            # corrupted runs keep the buffer in pixel space; whitening moves into the kernel path
            whiten = train.preprocessing
            base = whiten.mean.reshape(shape) + whiten.pixel_std * noise
        else:
            base = noise
    n_entries = base.size
    n_frozen = int(math.floor(cfg.rho * n_entries + 1e-9))
    mask = np.zeros(n_entries, dtype=bool)
    mask[rng.permutation(n_entries)[:n_frozen]] = True
    mask = mask.reshape(base.shape)
    d = int(np.prod(shape))
    return Coreset(
        base_images=base,
        transform=np.eye(d),
        labels=one_hot_centered(class_ids, c),
        mask=mask,
        frozen_values=base[mask].copy(),
        log_tau=0.0,
        num_classes=c,
        class_ids=np.asarray(class_ids),
        source_indices=np.asarray(idx),
        network_spec=spec,
        learn_labels=cfg.learn_labels,
        learn_transform=cfg.learn_transform and cfg.rho == 0,
        whiten=whiten,
    )


@dataclass
class SupportGraph:
    """Tape leaves and outputs for one forward pass over the support set."""

    base: Tensor
    transform: Tensor
    labels: Tensor
    head: PlattHead
    loss: Tensor
    preds: Tensor


def support_loss(coreset: Coreset, phi_query, y_query: np.ndarray, ensemble: NetworkEnsemble,
                 cfg: DistillConfig, track: bool = True) -> SupportGraph:
    frozen_all = coreset.mask.all()
    base = Tensor(coreset.base_images, requires_grad=track and not frozen_all and cfg.lr_coreset > 0)
    transform = Tensor(coreset.transform, requires_grad=track and coreset.learn_transform and cfg.lr_transform > 0)
    labels = Tensor(coreset.labels, requires_grad=track and coreset.learn_labels and cfg.lr_labels > 0)
    head = PlattHead(coreset.log_tau)
    head.log_tau.requires_grad = track and cfg.loss == "platt" and cfg.lr_log_tau > 0
    x_s = coreset.effective_tensor(base, transform).astype(ensemble.spec.dtype)
    phi_s = random_feature_map(ensemble, x_s)
    k_qs = gram(phi_query, phi_s)
    k_ss = gram(phi_s, phi_s)
    sol = krr_fit(k_ss, labels, cfg.lambda0)
    preds = krr_predict(k_qs, sol)
    y = Tensor(y_query)
    loss = platt_loss(preds, y, head) if cfg.loss == "platt" else mse_loss(preds, y)
    return SupportGraph(base, transform, labels, head, loss, preds)


def distill_step(coreset: Coreset, batch: tuple[np.ndarray, np.ndarray], ensemble: NetworkEnsemble,
                 opt: OptimizerState, cfg: DistillConfig, iteration: int = 0) -> float:
    """One iteration: KRR loss on the batch, backward, AdaBelief update, re-freeze.

    ``batch`` is ``(images, centred one-hot labels)``. Mutates ``coreset`` and
    ``opt`` in place and returns the loss value.
    """
    x_b, y_b = batch
    phi_b = random_feature_map(ensemble, np.asarray(x_b, dtype=ensemble.spec.dtype), stop_gradient=True,
                               chunk_size=cfg.chunk_size)
    try:
        g = support_loss(coreset, phi_b, y_b, ensemble, cfg)
    except SingularMatrixError as exc:
        raise SingularMatrixError(exc.pivot, f"iteration {iteration}: {exc}") from exc
    loss = float(g.loss.data)
    if not math.isfinite(loss):
        raise NumericError(f"iteration {iteration}: non-finite loss")
    if g.loss.requires_grad:
        g.loss.backward()
    if g.base.grad is not None:
        grad = np.where(coreset.mask, 0.0, g.base.grad)
        coreset.base_images = opt.step("base_images", coreset.base_images, grad, cfg.lr_coreset)
    if g.transform.grad is not None:
        coreset.transform = opt.step("transform", coreset.transform, g.transform.grad, cfg.lr_transform)
    if g.labels.grad is not None:
        coreset.labels = opt.step("labels", coreset.labels, g.labels.grad, cfg.lr_labels)
    if g.head.log_tau.grad is not None:
        coreset.log_tau = float(opt.step("log_tau", np.asarray(coreset.log_tau), g.head.log_tau.grad, cfg.lr_log_tau))
    coreset.apply_mask()
    return loss


def validation_loss(coreset: Coreset, phi_val, y_val: np.ndarray, ensemble: NetworkEnsemble,
                    cfg: DistillConfig) -> float:
    with no_grad():
        return float(support_loss(coreset, phi_val, y_val, ensemble, cfg, track=False).loss.data)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    iteration_seconds: list[float] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)
    best_iteration: int = 0
    stopped_at: int = 0
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def distill_run(train: Dataset, cfg: DistillConfig, callback=None) -> tuple[Coreset, History]:
    """Run the distillation loop with validation-based early stopping.

    Returns the best-validation checkpoint, which under the patience rule is
    the state ``patience`` iterations before the stop trigger.
    """
    if len(train) < cfg.val_size:
        raise ConfigError(f"training set has {len(train)} examples, fewer than val_size={cfg.val_size}")
    coreset = init_coreset(train, cfg)
    spec = coreset.network_spec
    c = train.num_classes
    y_all = one_hot_centered(train.labels, c)

    val_rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_VALIDATION))
    val_idx = np.sort(val_rng.choice(len(train), size=cfg.val_size, replace=False))
    val_ensemble = sample_ensemble(spec, cfg.val_networks, derive_seed(cfg.seed, STREAM_VALIDATION, 1))
    phi_val = random_feature_map(val_ensemble, train.images[val_idx].astype(spec.dtype), stop_gradient=True,
                                 chunk_size=cfg.chunk_size)
    y_val = y_all[val_idx]

    opt = OptimizerState(cfg.eps, cfg.beta1, cfg.beta2)
    history = History()
    best = (math.inf, 0, coreset.copy())
    batch_size = min(cfg.batch_size, len(train))

    for it in range(cfg.max_iterations + 1):
        if it % cfg.val_period == 0:
            v = validation_loss(coreset, phi_val, y_val, val_ensemble, cfg)
            history.validation.append((it, v))
            if v < best[0]:
                best = (v, it, coreset.copy())
            elif it - best[1] >= cfg.patience:
                history.stop_reason = "patience"
                break
            log.info("iter %d val_loss %.5f best %.5f@%d", it, v, best[0], best[1])
        if it == cfg.max_iterations:
            history.stop_reason = "max_iterations"
            break
        t0 = time.perf_counter()
        rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_BATCH, it))
        idx = rng.choice(len(train), size=batch_size, replace=False)
        ensemble = sample_ensemble(spec, cfg.n_networks, derive_seed(cfg.seed, STREAM_ENSEMBLE, it))
        loss = distill_step(coreset, (train.images[idx], y_all[idx]), ensemble, opt, cfg, iteration=it)
        history.train_loss.append(loss)
        history.iteration_seconds.append(time.perf_counter() - t0)
        if callback is not None:
            callback(it, loss, coreset)
    history.stopped_at = it
    history.best_iteration = best[1]
    return best[2], history


def kernel_for(coreset: Coreset, kind: str, n_networks: int = 16, channels: int | None = None,
               seed: int = 0, chunk_size: int = 256):
    """Build an evaluation kernel compatible with the coreset's architecture."""
    spec = coreset.network_spec
    if kind == "empirical":
        from dataclasses import replace

        eval_spec = replace(spec, channels=channels or spec.channels)
        return EmpiricalKernel(eval_spec, n_networks, seed, chunk_size=chunk_size)
    if kind in ("exact_fc_nngp", "exact_fc_ntk", "exact-fc-nngp", "exact-fc-ntk"):
        if spec.architecture != "fc":
            raise IncompatibleKernelError(
                f"kernel {kind} needs a fully-connected coreset; this one was distilled with {spec.architecture}"
            )
        return ExactFCKernel("nngp" if kind.endswith("nngp") else "ntk", spec.depth, spec.sigma_w2, spec.sigma_b2)
    raise ConfigError(f"unknown kernel {kind!r}")


def krr_test_predictions(coreset: Coreset, images: np.ndarray, kernel, lambda0: float = 5e-3) -> np.ndarray:
    x_s = coreset.effective_images()
    k_ss = kernel(x_s, x_s)
    k_ts = kernel(images, x_s)
    sol = krr_fit(Tensor(k_ss), Tensor(coreset.labels), lambda0)
    return krr_predict(Tensor(k_ts), sol).data


def evaluate_coreset(coreset: Coreset, test: Dataset, kernel, lambda0: float = 5e-3) -> float:
    """Top-1 accuracy of KRR on ``test`` with the coreset as support."""
    if isinstance(kernel, ExactFCKernel) and coreset.network_spec.architecture != "fc":
        raise IncompatibleKernelError("exact FC kernels need a fully-connected coreset")
    if isinstance(kernel, EmpiricalKernel) and kernel.spec.input_shape != coreset.image_shape:
        raise DataError(f"kernel input {kernel.spec.input_shape} does not match coreset {coreset.image_shape}")
    preds = krr_test_predictions(coreset, test.images, kernel, lambda0)
    return accuracy(preds, test.labels)
