"""Supervised finetuning of the teacher backbone on labeled frames."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint
from .distill import LossLog, TrainingError, json_safe
from .encoder import EncoderConfig, VisionTransformer, extract_features
from .numerics import Linear, Module, ShapeError

log = logging.getLogger(__name__)

NUM_CLASSES = 3


@dataclass
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 5e-5
    min_lr: float = 1e-7
    warmup_epochs: int = 0
    weight_decay: float = 0.001
    class_weights: bool = False  # inverse-frequency loss weights


class FramePredictor(Module):
    """Backbone features -> linear classifier over the three severity levels."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, num_classes: int = NUM_CLASSES):
        self.cfg = cfg
        self.backbone = VisionTransformer(cfg, rng)
        self.classifier = Linear(cfg.embed_dim, num_classes, rng)

    def forward(self, frames):
        return self.classifier(self.backbone(frames))

    def predict(self, frames, batch_size: int = 128) -> np.ndarray:
        return predict_frame(self, frames, batch_size)

    def features(self, frames, batch_size: int = 128) -> np.ndarray:
        return extract_features(self.backbone, frames, batch_size)


def cross_entropy(logits, labels: np.ndarray, weights: np.ndarray | None = None):
    labels = np.asarray(labels, dtype=np.int64)
    logp = nx.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    if weights is None:
        return -picked.mean()
    w = np.asarray(weights, dtype=logp.dtype)[labels]
    return -(picked * (w / w.sum())).sum()


def _check_labels(labels: np.ndarray, num_classes: int):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise TrainingError("empty labeled set")
    if labels.dtype.kind not in "iu" and not np.all(labels == np.round(labels)):
        raise ValueError("labels must be integers")
    bad = labels[(labels < 0) | (labels >= num_classes)]
    if bad.size:
        raise ValueError(f"labels must lie in 0..{num_classes - 1}, got {sorted(set(bad.tolist()))[:5]}")
    return labels.astype(np.int64)


def predictor_from_checkpoint(ckpt: Checkpoint, seed: int = 0) -> FramePredictor:
    """Teacher backbone plus the stored classifier (freshly drawn if absent)."""
    cfg = EncoderConfig(**ckpt.encoder)
    model = FramePredictor(cfg, np.random.default_rng(seed))
    which = ckpt.meta.get("feature_network", "teacher")
    backbone = ckpt.subset(f"{which}.backbone")
    if not backbone:
        raise KeyError(f"checkpoint has no {which} backbone")
    model.backbone.load_state_dict(backbone)
    clf = ckpt.subset("classifier")
    if clf:
        model.classifier.load_state_dict(clf)
    return model


def finetune(ckpt: Checkpoint, frames: np.ndarray, labels: np.ndarray, cfg: FinetuneConfig | None = None,
             seed: int = 0, log_path=None, eval_fn=None) -> Checkpoint:
    """Full-network cross-entropy training; returns a new checkpoint tagged ``finetuned``.

    ``eval_fn(model, epoch)`` is called after every epoch when given.
    """
    cfg = cfg or FinetuneConfig()
    labels = _check_labels(labels, NUM_CLASSES)
    frames = np.asarray(frames, dtype=np.float32)
    if len(frames) != len(labels):
        raise ValueError(f"{len(frames)} frames but {len(labels)} labels")
    rng = np.random.default_rng(seed)
    model = predictor_from_checkpoint(ckpt)
    model.classifier = Linear(model.cfg.embed_dim, NUM_CLASSES, rng)
    if frames.shape[1:] != (model.cfg.image_size, model.cfg.image_size):
        raise ShapeError("finetune", frames.shape[1:], (model.cfg.image_size,) * 2)

    weights = None
    if cfg.class_weights:
        counts = np.bincount(labels, minlength=NUM_CLASSES).astype(np.float64)
        weights = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / NUM_CLASSES, 0.0)

    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = nx.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, no_decay=nx.decay_mask(named))
    steps_per_epoch = math.ceil(len(frames) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    lr_sched = nx.cosine_schedule(cfg.lr, cfg.min_lr, total, cfg.warmup_epochs * steps_per_epoch)
    losses = LossLog(log_path)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for start in range(0, len(frames), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = cross_entropy(model(frames[idx]), labels[idx], weights)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite finetuning loss at epoch {epoch} step {step}")
            loss.backward()
            opt.lr = float(lr_sched[step])
            opt.step()
            losses.add(epoch, step, value)
            step += 1
        if eval_fn is not None:
            eval_fn(model, epoch)
        log.info("finetune epoch %d mean loss %.5f", epoch, losses.epoch_means()[-1])

    out = ckpt.copy()
    which = out.meta.get("feature_network", "teacher")
    out.put(f"{which}.backbone", model.backbone.state_dict())
    out.put("classifier", model.classifier.state_dict())
    out.add_tag("finetuned")
    out.meta["finetune"] = json_safe(asdict(cfg))
    out.meta["finetune_loss_history"] = [[e, s, l] for e, s, l in losses.rows]
    out.meta["finetune_seed"] = seed
    return out


def predict_frame(model: FramePredictor, frames, batch_size: int = 128) -> np.ndarray:
    """Class probabilities for one frame (S, S) or a stack (B, S, S)."""
    arr = np.asarray(frames, dtype=nx.default_dtype())
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    size = model.cfg.image_size
    if arr.ndim != 3 or arr.shape[1:] != (size, size):
        raise ShapeError("predict_frame", arr.shape, (size, size))
    out = []
    with nx.no_grad():
        for start in range(0, len(arr), batch_size):
            out.append(nx.softmax(model(arr[start:start + batch_size]), axis=-1).data)
    probs = np.concatenate(out)
    return probs[0] if single else probs
