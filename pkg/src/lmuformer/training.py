"""Optimization: Adam, step-decay schedule, the training loop, and
finite-difference gradient verification."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff, numerics
from .errors import ConfigError, DataError
from .model import Model, save


@dataclass(frozen=True)
class OptimConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"      # constant | step_decay
    decay_every: int = 5
    decay_factor: float = 0.85
    grad_clip: float = 0.0          # 0 disables

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError("decay factor must lie in (0, 1]")
        if self.schedule not in ("constant", "step_decay"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def schedule_lr(cfg: OptimConfig, epoch: int) -> float:
    """lr(epoch) = lr0 * factor^floor(epoch / every); epoch is 0-based."""
    if cfg.schedule == "constant":
        return cfg.lr
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: OptimConfig,
              lr: float | None = None) -> None:
    """One Adam update in place. L2 regularization enters through the
    gradient (grad + weight_decay * param), not as decoupled decay."""
    lr = cfg.lr if lr is None else lr
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        if cfg.grad_clip:
            norm = float(np.linalg.norm(g))
            if norm > cfg.grad_clip:
                g = g * (cfg.grad_clip / norm)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (lr / c1) * m / (np.sqrt(v / c2) + cfg.eps)
        p.data = p.data - update.astype(p.data.dtype)


def cross_entropy_loss(model: Model, X: np.ndarray, y: np.ndarray,
                       mode: str = "train", smooth: bool = False):
    logits = model.forward(X, mode=mode, smooth=smooth)
    loss, probs = autodiff.softmax_cross_entropy(logits, y)
    return loss, probs


def evaluate(model: Model, X: np.ndarray, y: np.ndarray,
             batch_size: int = 256) -> float:
    """Accuracy of the batched eval forward."""
    correct = 0
    with autodiff.no_grad():
        for i in range(0, len(X), batch_size):
            logits = model.forward(X[i:i + batch_size], mode="eval")
            correct += int((logits.data.argmax(axis=1) == y[i:i + batch_size]).sum())
    return correct / len(X)


def train(model: Model, data: tuple, optim: OptimConfig, epochs: int,
          batch_size: int, rng, val_data: tuple | None = None,
          checkpoint_path=None, history_path=None, log=None) -> list:
    """Minibatch training with per-epoch history rows
    (epoch, lr, train_loss, train_acc, val_acc); keeps the best-validation
    checkpoint when a path is given."""
    X, y = data
    X = np.asarray(X, dtype=numerics.default_dtype())
    y = np.asarray(y)
    if len(X) == 0:
        raise DataError("empty training set")
    if y.min() < 0 or y.max() >= model.cfg.num_classes:
        raise DataError("label out of range")
    if isinstance(rng, (int, np.integer)):
        rng = numerics.RngSpec(int(rng)).generator()
    elif isinstance(rng, numerics.RngSpec):
        rng = rng.generator()

    state = AdamState()
    history = []
    best_val = -1.0
    for epoch in range(epochs):
        lr = schedule_lr(optim, epoch)
        model.training = True
        order = rng.permutation(len(X))
        total_loss, total_correct = 0.0, 0
        for i in range(0, len(X), batch_size):
            idx = order[i:i + batch_size]
            xb, yb = X[idx], y[idx]
            params = model.named_params()
            loss, probs = cross_entropy_loss(model, xb, yb, mode="train")
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, optim, lr)
            model.step += 1
            for p in params.values():
                p.zero_grad()
            total_loss += float(loss.data) * len(idx)
            total_correct += int((probs.argmax(axis=1) == yb).sum())
        model.training = False
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total_loss / len(X),
            "train_acc": total_correct / len(X),
            "val_acc": float("nan"),
        }
        if val_data is not None:
            row["val_acc"] = evaluate(model, val_data[0], val_data[1],
                                      batch_size=max(batch_size, 128))
            if checkpoint_path is not None and row["val_acc"] >= best_val:
                best_val = row["val_acc"]
                save(model, checkpoint_path)
        history.append(row)
        if log is not None:
            log("epoch %d lr %.3g loss %.4f acc %.4f val %.4f"
                % (epoch, lr, row["train_loss"], row["train_acc"], row["val_acc"]))
    if checkpoint_path is not None and val_data is None:
        save(model, checkpoint_path)
    if history_path is not None:
        write_history(history_path, history)
    return history


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


def write_history(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row[c] for c in HISTORY_COLUMNS])


def read_history(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(r[k]) if k == "epoch" else float(r[k]))
                 for k in HISTORY_COLUMNS} for r in reader]


def finite_diff_check(model: Model, batch: tuple, eps: float = 1e-3,
                      n_coords: int = 50, rng=None, smooth: bool = False) -> float:
    """Max relative error between tape gradients and central differences over
    a random subset of parameter coordinates. Run in 64-bit precision;
    spiking models must use smooth=True so the loss is differentiable."""
    X, y = batch
    rng = rng or np.random.default_rng(0)
    params = model.named_params()

    def loss_value():
        with autodiff.no_grad():
            loss, _ = cross_entropy_loss(model, X, y, mode="train", smooth=smooth)
        return float(loss.data)

    loss, _ = cross_entropy_loss(model, X, y, mode="train", smooth=smooth)
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for k, p in params.items()}
    for p in params.values():
        p.zero_grad()

    names = sorted(params)
    sizes = np.array([params[n].data.size for n in names])
    total = int(sizes.sum())
    count = min(n_coords, total)
    chosen = rng.choice(total, size=count, replace=False)
    worst = 0.0
    bounds = np.cumsum(sizes)
    for flat in chosen:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[pi - 1] if pi else 0))
        p = params[names[pi]]
        orig = p.data.flat[offset]
        p.data.flat[offset] = orig + eps
        up = loss_value()
        p.data.flat[offset] = orig - eps
        down = loss_value()
        p.data.flat[offset] = orig
        fd = (up - down) / (2.0 * eps)
        g = float(grads[names[pi]].flat[offset])
        err = abs(fd - g) / max(abs(fd) + abs(g), 1e-8)
        worst = max(worst, err)
    return worst
