"""Fine-tuning with statistics-aware dynamic weight masks.

Each masked layer keeps its full dense weights.  The forward pass uses
``W * mask``; the SGD update is applied to the dense ``W``; the mask is then
recomputed from the updated dense weights, so a pruned weight whose
magnitude grows back above the layer threshold is spliced back in.

The threshold of a layer is ``mean(|W|) + sigma * std(|W|)`` (population
std).  Weights with ``|W| < t`` are masked, ``|W| >= t`` survive.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .data import BatchIterator
from .errors import DivergenceError, ShapeError
from .model_graph import backward, forward, predict
from .tensor_core import abs_mean_std, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class PruneConfig:
    sigma: float = 0.0
    mask_update_every: int = 1
    layers: Optional[tuple] = None  # None: every layer flagged prunable_weights
    # True: masked positions get the gradient computed at W*mask (straight-through);
    # False: only momentum and weight decay move them
    grad_through_mask: bool = True

    def __post_init__(self):
        if self.mask_update_every < 1:
            raise ValueError("mask_update_every must be >= 1")


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    decay_masked: bool = True
    lr_decay: float = 0.1
    lr_decay_epochs: tuple = field(default_factory=tuple)
    flip: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch):
        steps = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.learning_rate * self.lr_decay**steps


def compute_threshold(weights, sigma):
    mean, std = abs_mean_std(weights)
    return mean + std * sigma


def update_mask(weights, sigma):
    """Boolean keep-mask of ``weights`` for sparsity factor ``sigma``."""
    t = compute_threshold(weights, sigma)
    return np.abs(weights) >= t


def maskable_layers(model, prune_cfg):
    if prune_cfg.layers is not None:
        return [model.node(lid) for lid in prune_cfg.layers]
    return [n for n in model.nodes if n.prunable_weights and n.kind in ("conv", "fc")]


def init_masks(model, prune_cfg):
    return {n.id: update_mask(n.params["weight"], prune_cfg.sigma) for n in maskable_layers(model, prune_cfg)}


def mask_overrides(model, masks):
    """Forward overrides that substitute ``W * mask`` for each masked layer."""
    if not masks:
        return None
    out = {}
    for lid, bits in masks.items():
        w = model.node(lid).params["weight"]
        if bits.shape != w.shape:
            raise ShapeError(f"mask for {lid} has shape {bits.shape}, weights have {w.shape}", dim=lid)
        out[(lid, "weight")] = w * bits
    return out


def apply_masks(model, masks):
    """Bake masks into the stored weights (in place)."""
    for lid, bits in (masks or {}).items():
        node = model.node(lid)
        node.params["weight"] = (node.params["weight"] * bits).astype(np.float32)
    return model


def mask_sparsity(masks):
    total = sum(m.size for m in masks.values())
    return 100.0 * (1 - sum(int(m.sum()) for m in masks.values()) / total) if total else 0.0


class SGD:
    """SGD with momentum and L2 weight decay, updating dense weights in place."""

    def __init__(self, train_cfg):
        self.cfg = train_cfg
        self.velocity = {}

    def step(self, model, grads, lr, masks=None, prune_cfg=None):
        cfg = self.cfg
        masks = masks or {}
        through = prune_cfg.grad_through_mask if prune_cfg is not None else True
        for lid, pg in grads.items():
            node = model.node(lid)
            for name, g in pg.items():
                w = node.params[name]
                bits = masks.get(lid) if name == "weight" else None
                if bits is not None and not through:
                    g = g * bits
                decay = cfg.weight_decay * w
                if bits is not None and not cfg.decay_masked:
                    decay = decay * bits
                g = (g + decay).astype(np.float32)
                key = (lid, name)
                v = self.velocity.get(key)
                if v is None or v.shape != g.shape:
                    v = g
                else:
                    v = cfg.momentum * v + g
                self.velocity[key] = v
                w -= np.float32(lr) * v


def train_step(model, masks, batch, prune_cfg, train_cfg, iteration, optimizer=None, lr=None):
    """One sparse-forward / dense-update iteration.  Returns ``(loss, masks)``.

    Mutates ``model`` (dense weights, batchnorm running stats).  When
    ``iteration`` is a multiple of ``prune_cfg.mask_update_every`` the masks
    are recomputed from the updated dense weights.
    """
    x, y = batch
    optimizer = optimizer or SGD(train_cfg)
    overrides = mask_overrides(model, masks)
    logits, cache = forward(model, x, training=True, overrides=overrides, keep_cache=True)
    loss, grad = softmax_cross_entropy(logits, y)
    if not math.isfinite(loss):
        raise DivergenceError(f"loss became {loss} at iteration {iteration}")
    grads = backward(model, cache, grad)
    optimizer.step(model, grads, train_cfg.learning_rate if lr is None else lr, masks, prune_cfg)
    if masks and prune_cfg is not None and iteration % prune_cfg.mask_update_every == 0:
        masks = {lid: update_mask(model.node(lid).params["weight"], prune_cfg.sigma) for lid in masks}
    return loss, masks


class Accuracy(NamedTuple):
    top1: float
    top5: Optional[float]


def accuracy_from_logits(logits, labels):
    labels = np.asarray(labels)
    top1 = float(np.mean(np.argmax(logits, axis=1) == labels))
    top5 = None
    if logits.shape[1] >= 5:
        # stable sort on -logits: ties favour the lower class index, like argmax
        top = np.argsort(-logits, axis=1, kind="stable")[:, :5]
        top5 = float(np.mean((top == labels[:, None]).any(axis=1)))
    return Accuracy(top1, top5)


def evaluate(model, dataset, masks=None, batch_size=256):
    """Top-1 (and top-5 when there are at least 5 classes) accuracy."""
    logits = predict(model, dataset.images, batch_size, overrides=mask_overrides(model, masks))
    return accuracy_from_logits(logits, dataset.labels)


def fine_tune(model, train, val, prune_cfg, train_cfg):
    """Train a copy of ``model``; returns ``(best_model, masks, history)``.

    With ``prune_cfg=None`` this is plain dense fine-tuning and ``masks`` is
    None.  Otherwise the returned model stores ``W * mask`` for every masked
    layer.  The best epoch by validation top-1 is kept (later epochs win ties).
    """
    model = model.copy()
    masks = init_masks(model, prune_cfg) if prune_cfg is not None else None
    opt = SGD(train_cfg)
    batches = BatchIterator(train, train_cfg.batch_size, shuffle_seed=train_cfg.seed, flip=train_cfg.flip)
    history = []
    best = None
    iteration = 0
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        losses = []
        for batch in batches:
            iteration += 1
            loss, masks = train_step(model, masks, batch, prune_cfg, train_cfg, iteration, opt, lr)
            losses.append(loss)
        acc = evaluate(model, val, masks)
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "val_top1": acc.top1}
        if masks:
            row["mask_sparsity"] = mask_sparsity(masks)
        history.append(row)
        log.info("epoch %d loss %.4f val_top1 %.4f", epoch + 1, row["loss"], acc.top1)
        if best is None or acc.top1 >= best[0]:
            best = (acc.top1, model.copy(), None if masks is None else {k: v.copy() for k, v in masks.items()})
    if best is None:
        best = (None, model, masks)
    _, model, masks = best
    if masks is not None:
        apply_masks(model, masks)
    return model, masks, history


def write_history_csv(history, path):
    fields = ["epoch", "loss", "val_top1"] + (["mask_sparsity"] if history and "mask_sparsity" in history[0] else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(history)
