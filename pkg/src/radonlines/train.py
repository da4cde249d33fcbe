"""SSIM loss, its gradient, and the unsupervised training loop.

The network is trained to maximise structural similarity between its
fused reconstruction and the input image, i.e. loss = 1 - SSIM.  SSIM is
computed on fully-overlapping (valid) windows with a separable Gaussian
or uniform window; the gradient with respect to the first image is
derived by hand and verified against finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import time

import numpy as np

from . import unfold
from .unfold import ModelGradients, UnfoldedModel, float32_grid


class TrainingError(RuntimeError):
    """Training aborted (bad configuration or non-finite loss)."""


# --------------------------------------------------------------------------
# SSIM.


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    kind: str = "gaussian"  # or "uniform"
    sigma: float = 1.5
    dynamic_range: float = 1.0
    c1: float | None = None  # defaults to (0.01 * L)^2
    c2: float | None = None  # defaults to (0.03 * L)^2

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and at least 3")
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if self.c1 is None:
            object.__setattr__(self, "c1", (0.01 * self.dynamic_range) ** 2)
        if self.c2 is None:
            object.__setattr__(self, "c2", (0.03 * self.dynamic_range) ** 2)
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("stabilizers must be positive")

    def kernel1d(self) -> np.ndarray:
        if self.kind == "uniform":
            k = np.ones(self.window)
        else:
            r = np.arange(self.window) - (self.window - 1) / 2.0
            k = np.exp(-0.5 * (r / self.sigma) ** 2)
        return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation (both axes)."""
    w = k.size
    h_out = img.shape[0] - w + 1
    w_out = img.shape[1] - w + 1
    tmp = np.zeros((h_out, img.shape[1]))
    for t in range(w):
        tmp += k[t] * img[t:t + h_out, :]
    out = np.zeros((h_out, w_out))
    for t in range(w):
        out += k[t] * tmp[:, t:t + w_out]
    return out


def _filter_valid_adjoint(grad: np.ndarray, k: np.ndarray, shape) -> np.ndarray:
    """Exact transpose of :func:`_filter_valid` back to the image shape."""
    w = k.size
    h_out, w_out = grad.shape
    tmp = np.zeros((h_out, shape[1]))
    for t in range(w):
        tmp[:, t:t + w_out] += k[t] * grad
    out = np.zeros(shape)
    for t in range(w):
        out[t:t + h_out, :] += k[t] * tmp
    return out


def _ssim_maps(a, b, cfg):
    k = cfg.kernel1d()
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a ** 2
    var_b = _filter_valid(b * b, k) - mu_b ** 2
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + cfg.c1
    a2 = 2 * cov + cfg.c2
    b1 = mu_a ** 2 + mu_b ** 2 + cfg.c1
    b2 = var_a + var_b + cfg.c2
    return k, mu_a, mu_b, a1, a2, b1, b2


def ssim(a: np.ndarray, b: np.ndarray, cfg: SsimConfig | None = None) -> float:
    """Mean structural similarity over valid windows; symmetric in (a, b)."""
    if cfg is None:
        cfg = SsimConfig()
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < cfg.window:
        raise ValueError("images smaller than the SSIM window")
    _, _, _, a1, a2, b1, b2 = _ssim_maps(a, b, cfg)
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_and_grad(a: np.ndarray, b: np.ndarray, cfg: SsimConfig | None = None):
    """SSIM value and its exact gradient with respect to ``a``."""
    if cfg is None:
        cfg = SsimConfig()
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < cfg.window:
        raise ValueError("images smaller than the SSIM window")
    k, mu_a, mu_b, a1, a2, b1, b2 = _ssim_maps(a, b, cfg)
    s_map = (a1 * a2) / (b1 * b2)
    value = float(np.mean(s_map))

    n = s_map.size
    # partials of S with respect to (mu_a, var_a, cov)
    d_mu = (2 * mu_b * a2) / (b1 * b2) - s_map * (2 * mu_a) / b1
    d_var = -s_map / b2
    d_cov = (2 * a1) / (b1 * b2)
    # chain through mu_a = F a, var_a = F a^2 - mu_a^2, cov = F ab - mu_a mu_b
    adj = lambda m: _filter_valid_adjoint(m, k, a.shape)
    grad = (adj(d_mu - 2 * mu_a * d_var - mu_b * d_cov)
            + 2 * a * adj(d_var) + b * adj(d_cov)) / n
    return value, grad


# --------------------------------------------------------------------------
# Loss on the unfolded model.


def loss_and_grad(model: UnfoldedModel, op, y: np.ndarray,
                  ssim_cfg: SsimConfig | None = None):
    """loss = 1 - SSIM(fused reconstruction, y) and its weight gradients."""
    trace = unfold.forward(model, op, y)
    value, g_fused = ssim_and_grad(trace.fused, np.asarray(y, dtype=float),
                                   ssim_cfg)
    loss = 1.0 - value
    grads = unfold.backward(model, trace, -g_fused)
    return loss, grads


# --------------------------------------------------------------------------
# Optimizer and training loop.


@dataclass
class TrainConfig:
    epochs: int = 20
    initial_lr: float = 1e-4
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.5
    batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not (0 < self.lr_decay_factor <= 1):
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.initial_lr <= 0 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("invalid optimizer hyperparameters")

    def lr_at_epoch(self, epoch: int) -> float:
        return self.initial_lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class TrainReport:
    epoch_loss: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    checkpoint_path: str | None = None

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i, (loss, lr, wt) in enumerate(zip(
                    self.epoch_loss, self.learning_rate, self.wall_time)):
                fh.write(json.dumps({"epoch": i, "mean_loss": loss,
                                     "lr": lr, "wall_time": wt}) + "\n")


class AdamOptimizer:
    """Adaptive moment estimation over the model's parameter list."""

    def __init__(self, model: UnfoldedModel, cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in model.parameters()]
        self.v = [np.zeros_like(p) for p in model.parameters()]

    def step(self, model: UnfoldedModel, grads: ModelGradients, lr: float):
        self.step_count += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        new_params = []
        for i, (p, g) in enumerate(zip(model.parameters(), grads.tensors())):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        model.set_parameters(new_params)


def train(model: UnfoldedModel, op, dataset, cfg: TrainConfig | None = None,
          ssim_cfg: SsimConfig | None = None, log=None) -> TrainReport:
    """Train in place on a list of images; deterministic given cfg.seed."""
    if cfg is None:
        cfg = TrainConfig()
    dataset = [np.asarray(img, dtype=float) for img in dataset]
    if not dataset:
        raise TrainingError("empty training dataset")
    for img in dataset:
        if img.shape != op.image_shape:
            raise TrainingError(
                f"dataset image shape {img.shape} does not match operator "
                f"{op.image_shape}")

    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamOptimizer(model, cfg)
    report = TrainReport()
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at_epoch(epoch)
        order = rng.permutation(len(dataset))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            total = None
            for idx in batch:
                loss, grads = loss_and_grad(model, op, dataset[idx], ssim_cfg)
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, image {idx}")
                losses.append(loss)
                total = grads if total is None else total.add_(grads)
            optimizer.step(model, total.scaled(1.0 / len(batch)), lr)
        report.epoch_loss.append(float(np.mean(losses)))
        report.learning_rate.append(lr)
        report.wall_time.append(time.perf_counter() - start)
        if log is not None:
            log(f"epoch {epoch}: mean loss {report.epoch_loss[-1]:.5f} lr {lr:g}")
    return report
