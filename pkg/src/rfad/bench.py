"""Per-iteration timing of the distillation step and the KIP cost overlay.

The overlay models an exact-kernel method as c * |B| * |S| seconds per
iteration, with c measured by timing one exact ConvNet NNGP kernel entry
(full spatial cross-covariance, recomputed per pair).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .distill import DistillConfig, distill_step, init_coreset
from .networks import NetworkSpec, sample_ensemble
from .optim import OptimizerState
from .utils import derive_seed, one_hot_centered

# -- exact ConvNet3 NNGP ------------------------------------------------------------------


def _relu_expectation(cov, var_a, var_b):
    """E[relu(u) relu(v)] for (u, v) Gaussian with the given covariances."""
    norm = np.sqrt(var_a * var_b)
    cos = np.clip(np.divide(cov, norm, out=np.zeros_like(cov), where=norm > 0), -1.0, 1.0)
    theta = np.arccos(cos)
    return norm * (np.sin(theta) + (math.pi - theta) * cos) / (2 * math.pi)


def _conv_sum(cov):
    """Sum of cov[p + d, q + d] over the nine 3x3 offsets d, zero outside the image."""
    h, w = cov.shape[:2]
    padded = np.pad(cov, 1)
    out = np.zeros_like(cov)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + h, dx : dx + w, dy : dy + h, dx : dx + w]
    return out


def _pool(cov):
    h, w = cov.shape[0] // 2, cov.shape[1] // 2
    c = cov[: 2 * h, : 2 * w, : 2 * h, : 2 * w]
    return c.reshape(h, 2, w, 2, h, 2, w, 2).mean(axis=(1, 3, 5, 7))


def _diag(cov):
    h, w = cov.shape[:2]
    return np.einsum("ijij->ij", cov).reshape(h, w)


def conv_nngp_layers(xa: np.ndarray, xb: np.ndarray, spec: NetworkSpec, self_a=None, self_b=None):
    """Pre-activation cross-covariances [H, W, H, W] of every conv layer.

    ``self_a`` / ``self_b`` are the outputs of this function for (xa, xa) and
    (xb, xb); only their diagonals are read. Returns (list of covariances,
    final pooled covariance).
    """
    c_in = xa.shape[0]
    sw, sb = spec.sigma_w2, spec.sigma_b2
    inner = np.einsum("cij,ckl->ijkl", xa.astype(np.float64), xb.astype(np.float64)) / c_in
    layers = []
    for layer in range(spec.depth):
        cov = sb + sw / 9.0 * _conv_sum(inner)
        layers.append(cov)
        if self_a is None:  # self-covariance pass: the diagonal is our own
            va = vb = _diag(cov)
        else:
            va, vb = _diag(self_a[0][layer]), _diag(self_b[0][layer])
        h, w = va.shape
        r = _relu_expectation(cov, va.reshape(h, w, 1, 1), vb.reshape(1, 1, h, w))
        inner = _pool(r)
    return layers, inner


def exact_conv_nngp(xa: np.ndarray, xb: np.ndarray, spec: NetworkSpec, self_a=None, self_b=None) -> float:
    """Exact NNGP kernel entry of the augmented ConvNet3 feature map."""
    if self_a is None:
        self_a = conv_nngp_layers(xa, xa, spec)
    if self_b is None:
        self_b = conv_nngp_layers(xb, xb, spec)
    _, pooled = conv_nngp_layers(xa, xb, spec, self_a, self_b)
    return float(spec.sigma_b2 + spec.sigma_w2 * np.mean(_diag(pooled)))


def calibrate_kip_entry(spec: NetworkSpec, repeats: int = 5, seed: int = 0) -> float:
    """Median seconds for one exact cross-kernel entry (self terms precomputed)."""
    rng = np.random.default_rng(seed)
    xa, xb = rng.standard_normal((2,) + spec.input_shape)
    sa, sbb = conv_nngp_layers(xa, xa, spec), conv_nngp_layers(xb, xb, spec)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        exact_conv_nngp(xa, xb, spec, sa, sbb)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


# -- RFAD timing ------------------------------------------------------------------------


@dataclass
class TimingRow:
    support_size: int
    n_networks: int
    mean_seconds: float
    std_seconds: float
    repeats: int


def synthetic_dataset(n: int, shape=(1, 28, 28), num_classes: int = 10, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((n,) + tuple(shape)).astype(np.float32)
    return Dataset(images, np.arange(n) % num_classes, num_classes, None, "synthetic")


class _IterationTimer:
    """One (|S|, N) configuration with its own coreset and optimizer state."""

    def __init__(self, support_size: int, n_networks: int, channels: int, batch_size: int, chunk_size: int,
                 shape, num_classes: int, seed: int):
        ipc = math.ceil(support_size / num_classes)
        self.train = synthetic_dataset(max(batch_size, ipc * num_classes), shape, num_classes, seed)
        self.cfg = DistillConfig(img_per_class=ipc, n_networks=n_networks, channels=channels,
                                 batch_size=batch_size, chunk_size=chunk_size, seed=seed, val_size=1, patience=40)
        coreset = init_coreset(self.train, self.cfg)
        if coreset.size > support_size:
            keep = np.arange(support_size)
            for name in ("base_images", "labels", "mask", "class_ids", "source_indices"):
                setattr(coreset, name, getattr(coreset, name)[keep])
        self.coreset = coreset
        self.y_all = one_hot_centered(self.train.labels, num_classes)
        self.opt = OptimizerState(self.cfg.eps, self.cfg.beta1, self.cfg.beta2)
        self.support_size, self.n_networks, self.seed = support_size, n_networks, seed
        self.iteration = 0
        self.times: list[float] = []

    def step(self, record: bool) -> None:
        it, cfg = self.iteration, self.cfg
        t0 = time.perf_counter()
        rng = np.random.default_rng(derive_seed(self.seed, 2, it))
        idx = rng.choice(len(self.train), size=cfg.batch_size, replace=False)
        ens = sample_ensemble(self.coreset.network_spec, self.n_networks, derive_seed(self.seed, 3, it))
        distill_step(self.coreset, (self.train.images[idx], self.y_all[idx]), ens, self.opt, cfg, iteration=it)
        if record:
            self.times.append(time.perf_counter() - t0)
        self.iteration += 1

    def row(self) -> TimingRow:
        t = np.asarray(self.times)
        return TimingRow(self.support_size, self.n_networks, float(t.mean()), float(t.std()), len(t))


def time_iterations(support_size: int, n_networks: int, channels: int = 32, batch_size: int = 1280,
                    repeats: int = 200, warmup: int = 5, chunk_size: int = 1280, shape=(1, 28, 28),
                    num_classes: int = 10, seed: int = 0) -> TimingRow:
    """Wall time of full distillation iterations (ensemble sampling included)."""
    timer = _IterationTimer(support_size, n_networks, channels, batch_size, chunk_size, shape, num_classes, seed)
    for it in range(warmup + repeats):
        timer.step(record=it >= warmup)
    return timer.row()


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares (slope, intercept, R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


@dataclass
class ScalingReport:
    rows: list[TimingRow]
    fits_by_size: dict[int, tuple[float, float, float]]  # N -> fit of time vs |S|
    fits_by_networks: dict[int, tuple[float, float, float]]  # |S| -> fit of time vs N
    kip_entry_seconds: float
    batch_size: int

    def kip_seconds(self, support_size: int, batch_size: int | None = None) -> float:
        return self.kip_entry_seconds * (batch_size or self.batch_size) * support_size

    def crossover(self, n_networks: int) -> float:
        """|S| where the KIP overlay meets the fitted RFAD line (inf if it never does)."""
        slope, intercept, _ = self.fits_by_size[n_networks]
        rate = self.kip_entry_seconds * self.batch_size - slope
        return intercept / rate if rate > 0 else math.inf


def run_scaling(sizes=(10, 20, 50, 100, 200, 500), networks=(1, 2, 4, 8), channels: int = 32,
                batch_size: int = 1280, repeats: int = 200, warmup: int = 5, seed: int = 0,
                shape=(1, 28, 28), kip_repeats: int = 5, progress=None) -> ScalingReport:
    # Repeats are interleaved round-robin over configurations so that slow drift
    # in machine speed is shared by every point instead of biasing some of them.
    timers = [_IterationTimer(s, n, channels, batch_size, batch_size, shape, 10, seed)
              for n in networks for s in sizes]
    for r in range(warmup + repeats):
        for timer in timers:
            timer.step(record=r >= warmup)
    rows = [t.row() for t in timers]
    if progress is not None:
        for row in rows:
            progress(row)
    table = {(r.support_size, r.n_networks): r.mean_seconds for r in rows}
    by_size = {n: linear_fit(sizes, [table[s, n] for s in sizes]) for n in networks}
    by_nets = {s: linear_fit(networks, [table[s, n] for n in networks]) for s in sizes}
    spec = NetworkSpec("convnet3", 3, channels, tuple(shape))
    c = calibrate_kip_entry(spec, kip_repeats, seed)
    return ScalingReport(rows, by_size, by_nets, c, batch_size)
