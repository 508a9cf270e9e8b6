"""Mini-batch training loop for the TDNN."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, NonFiniteLoss
from . import layers as L
from .optim import AdamW
from .tdnn import TdnnModel, average_posterior, backward, forward_logits

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 512
    epochs: int = 15
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for batch statistics")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def make_optimizer(model: TdnnModel, cfg: TrainConfig) -> AdamW:
    return AdamW(model.params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                 weight_decay=cfg.weight_decay, decay_mask=model.decay_mask())


def batch_order(n: int, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; a trailing singleton joins the previous batch."""
    perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    batches = [perm[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train_step(model: TdnnModel, optimizer: AdamW, x: np.ndarray, y: np.ndarray,
               cfg: TrainConfig, batch_id=0) -> float:
    logits, _, caches = forward_logits(model, x, train=True, momentum=cfg.bn_momentum, keep_cache=True)
    loss, dlogits = L.softmax_cross_entropy(logits, y)
    grads = backward(model, dlogits.astype(logits.dtype, copy=False), caches)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        # NaN entries are skipped; an all-NaN gradient reports NaN
        max_grad = max((float(np.abs(g[~np.isnan(g)]).max(initial=0.0)) for g in grads.values()), default=0.0)
        if all(np.isnan(g).all() for g in grads.values()):
            max_grad = float("nan")
        raise NonFiniteLoss(batch_id, loss, max_grad)
    optimizer.step(grads)
    return loss


def train_epoch(model: TdnnModel, optimizer: AdamW, features: np.ndarray, labels: np.ndarray,
                cfg: TrainConfig, epoch: int = 0) -> float:
    """One pass over (N, T, D) features; returns the sample-weighted mean loss.

    The model and optimizer state are updated in place.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    if len(features) < 2:
        raise ConfigError("need at least two training segments")
    total, count = 0.0, 0
    for b, idx in enumerate(batch_order(len(features), cfg, epoch)):
        x = features[idx].astype(model.dtype, copy=False)
        loss = train_step(model, optimizer, x, labels[idx], cfg, batch_id=(epoch, b))
        total += loss * len(idx)
        count += len(idx)
    return total / count


def predict_posteriors(model: TdnnModel, features: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Time-averaged eval-mode posteriors, one row per segment."""
    out = []
    for i in range(0, len(features), chunk):
        x = np.asarray(features[i:i + chunk], dtype=model.dtype)
        logits, _, _ = forward_logits(model, x, train=False)
        post = L.softmax(logits.astype(np.float64))
        out.extend(average_posterior(p) for p in post)
    return np.array(out).reshape(len(out), -1)


def evaluate(model: TdnnModel, features: np.ndarray, labels: np.ndarray, chunk: int = 32) -> dict:
    """Frame-level loss and segment-level accuracy in eval mode."""
    losses, correct = [], 0
    for i in range(0, len(features), chunk):
        x = np.asarray(features[i:i + chunk], dtype=model.dtype)
        y = np.asarray(labels[i:i + chunk])
        logits, _, _ = forward_logits(model, x, train=False)
        loss, _ = L.softmax_cross_entropy(logits.astype(np.float64), y)
        losses.append(loss * len(y))
        seg_post = L.softmax(logits.astype(np.float64)).mean(axis=1)
        correct += int((seg_post.argmax(axis=1) == y).sum())
    n = len(features)
    return {"loss": float(sum(losses) / n), "accuracy": correct / n}


def train(model: TdnnModel, features, labels, cfg: TrainConfig, val_features=None, val_labels=None,
          on_epoch=None) -> list[dict]:
    """Run ``cfg.epochs`` epochs; returns one record per epoch.

    ``on_epoch(record, model)`` is called after each epoch (checkpointing).
    """
    optimizer = make_optimizer(model, cfg)
    history = []
    for epoch in range(cfg.epochs):
        train_loss = train_epoch(model, optimizer, features, labels, cfg, epoch)
        record = {"epoch": epoch + 1, "train_loss": train_loss}
        if val_features is not None and len(val_features):
            val = evaluate(model, val_features, val_labels)
            record["val_loss"] = val["loss"]
            record["val_accuracy"] = val["accuracy"]
        history.append(record)
        log.info("epoch %d: %s", epoch + 1, record)
        if on_epoch is not None:
            on_epoch(record, model)
    return history
