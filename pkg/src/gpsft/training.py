"""Masked fine-tuning: optimizer steps gated by a selection mask.

The trainable set is the mask's ones plus the classification head;
everything else is never written, so frozen parameters stay bitwise
identical to the base model by construction, not by tolerance.
Optimizer moments exist only at masked-in positions. The schedule is
cosine decay with a linear warm-up prefix.
"""

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, InputError, NumericError
from .models import FLAG_HEAD
from .rng import substream

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

OPTIMIZERS = ("sgd", "adam")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    base_lr: float = 0.01
    weight_decay: float = 0.0
    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} must lie in [0, epochs={self.epochs}]"
            )
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def lr_at(step, total_steps, config):
    """Learning rate at a global step: linear warm-up, then cosine decay."""
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    warmup_steps = total_steps * config.warmup_epochs // config.epochs
    if step < warmup_steps:
        return config.base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_state(optimizer, mask):
    """Optimizer state for one tensor, allocated only at mask==1 slots."""
    idx = np.flatnonzero(np.asarray(mask).ravel())
    if optimizer == "sgd":
        return {"kind": "sgd", "idx": idx}
    if optimizer == "adam":
        return {
            "kind": "adam",
            "idx": idx,
            "m": np.zeros(idx.shape[0]),
            "v": np.zeros(idx.shape[0]),
            "t": 0,
        }
    raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {optimizer!r}")


def masked_step(w, grad, mask, state, lr, weight_decay=0.0):
    """One masked optimizer step, in place; mask==0 entries untouched."""
    if w.shape != grad.shape or w.shape != np.asarray(mask).shape:
        raise ContractError(
            f"weight {w.shape}, grad {grad.shape}, mask {np.asarray(mask).shape} must agree"
        )
    idx = state["idx"]
    if idx.shape[0] == 0:
        return w
    flat = w.reshape(-1)
    wv = flat[idx]
    g = grad.reshape(-1)[idx]
    if state["kind"] == "sgd":
        new = wv - lr * g
    else:
        state["t"] += 1
        t = state["t"]
        m, v = state["m"], state["v"]
        m[:] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v[:] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        mhat = m / (1.0 - ADAM_BETA1**t)
        vhat = v / (1.0 - ADAM_BETA2**t)
        new = wv - lr * (mhat / (np.sqrt(vhat) + ADAM_EPS))
    if weight_decay:
        new = new - lr * weight_decay * wv
    flat[idx] = new
    return w


def evaluate(model, dataset, batch_size=256):
    """Top-1 accuracy and mean cross-entropy over a dataset."""
    if dataset is None or dataset.n < 1:
        raise InputError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    with ad.no_grad():
        for start in range(0, dataset.n, batch_size):
            xb = dataset.x[start : start + batch_size]
            yb = dataset.y[start : start + batch_size]
            logits, _ = model.forward(xb)
            loss_sum += ad.softmax_cross_entropy(logits, yb, reduction="sum").item()
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
    return correct / dataset.n, loss_sum / dataset.n


def _trainable_entries(model, mask, freeze_head):
    entries = []
    for name, buf in mask.buffers.items():
        if name not in model.params:
            raise ContractError(f"mask names unknown parameter {name!r}")
        p = model.params[name]
        if buf.shape != p.data.shape:
            raise ContractError(
                f"mask shape {buf.shape} does not match {name} {p.data.shape}"
            )
        if buf.any():
            entries.append((name, p, buf))
    if not freeze_head:
        for name, f in model.flags.items():
            if f & FLAG_HEAD:
                p = model.params[name]
                entries.append((name, p, np.ones(p.data.shape, dtype=np.uint8)))
    return entries


def finetune(model, mask, train_set, val_set, config, freeze_head=False):
    """Masked fine-tuning with cross-entropy; returns (tuned model, history).

    The base model is left untouched. History carries one record per
    epoch: {"epoch", "train_loss", "val_acc", "lr"}.
    """
    tuned = model.clone()
    if config.epochs == 0:
        return tuned, []
    entries = _trainable_entries(tuned, mask, freeze_head)
    states = [make_state(config.optimizer, buf) for _, _, buf in entries]
    leaves = [p for _, p, _ in entries]

    n = train_set.n
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    order = list(range(n))
    shuffler = substream(config.seed, "shuffle")

    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        shuffler.shuffle(order)
        loss_sum = 0.0
        lr = config.base_lr
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = train_set.x[idx], train_set.y[idx]
            tuned.zero_grad()
            logits, _ = tuned.forward(xb)
            loss = ad.softmax_cross_entropy(logits, yb, reduction="mean")
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"loss became non-finite in epoch {epoch}; last good epoch {epoch - 1}"
                )
            ad.backward(loss, leaves=leaves)
            lr = lr_at(step, total_steps, config)
            for (name, p, buf), state in zip(entries, states):
                masked_step(p.data, p.grad, buf, state, lr, config.weight_decay)
            step += 1
            loss_sum += loss.item() * len(idx)
        tuned.zero_grad()
        val_acc, _ = evaluate(tuned, val_set)
        history.append(
            {"epoch": epoch, "train_loss": loss_sum / n, "val_acc": val_acc, "lr": lr}
        )
    return tuned, history
