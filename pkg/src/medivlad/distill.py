"""Label-free self-distillation of a student encoder against an EMA teacher."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import numerics as nx
from .checkpoint import Checkpoint
from .data.preprocess import resize_bilinear
from .encoder import Encoder, EncoderConfig, build_encoder
from .numerics import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class MultiCropConfig:
    m: int = 2
    n: int = 1
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    local_size: int | None = None  # defaults to image_size / 2 on a patch multiple
    augment: bool = True
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    blur_p: tuple[float, float] = (1.0, 0.1)  # first global, remaining views
    local_blur_p: float = 0.5

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("need at least one global and one local crop")
        for label, (lo, hi) in (("global", self.global_scale), ("local", self.local_scale)):
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"{label}_scale must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        if self.local_scale[1] > self.global_scale[1] or self.local_scale[0] > self.global_scale[0]:
            raise ValueError("local crops must cover a smaller area fraction than global crops")

    def resolved_local_size(self, image_size: int, patch_size: int) -> int:
        if self.local_size is not None:
            return self.local_size
        return max(patch_size, int(round(image_size / 2 / patch_size)) * patch_size)


@dataclass
class Crops:
    globals: list[np.ndarray]
    locals: list[np.ndarray]
    boxes: list[tuple[int, int, int, int]]  # (top, left, height, width), globals then locals


def _sample_box(h: int, w: int, scale, rng, ratio=(3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def _augment(img: np.ndarray, cfg: MultiCropConfig, blur_p: float, rng) -> np.ndarray:
    if not cfg.augment:
        return img
    if rng.random() < cfg.flip_p:
        img = img[:, ::-1]
    if rng.random() < cfg.jitter_p:
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        mu = img.mean()
        img = (img * b - mu * b) * c + mu * b
    if rng.random() < blur_p:
        img = gaussian_filter(img, sigma=rng.uniform(0.1, 1.5), mode="reflect")
    return np.clip(img, 0.0, 1.0)


def multi_crop(frame: np.ndarray, cfg: MultiCropConfig, rng: np.random.Generator,
               image_size: int, patch_size: int = 8) -> Crops:
    """m global crops at ``image_size`` and n local crops at the local size."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape
    local_size = cfg.resolved_local_size(image_size, patch_size)
    globals_, locals_, boxes = [], [], []
    for i in range(cfg.m + cfg.n):
        is_global = i < cfg.m
        top, left, ch, cw = _sample_box(h, w, cfg.global_scale if is_global else cfg.local_scale, rng)
        boxes.append((top, left, ch, cw))
        size = image_size if is_global else local_size
        view = resize_bilinear(frame[top:top + ch, left:left + cw], size, size)
        if is_global:
            p = cfg.blur_p[0] if i == 0 else cfg.blur_p[1]
        else:
            p = cfg.local_blur_p
        view = _augment(view, cfg, p, rng).astype(np.float32)
        (globals_ if is_global else locals_).append(view)
    return Crops(globals_, locals_, boxes)


def sharpen(logits, tau: float, center=None) -> Tensor:
    """softmax((z - c) / tau) over the last axis."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    if center is not None:
        z = z - np.asarray(center, dtype=z.dtype)
    return nx.softmax(z, axis=-1, temperature=tau)


def dino_loss(teacher_logits: Sequence, student_logits: Sequence[Tensor], tau_t: float, tau_s: float,
              center=None, skip_same_view: bool = False) -> Tensor:
    """Mean over (teacher view, student view) pairs of H(P_t, P_s), batch-averaged.

    Teacher logits are treated as constants. With ``skip_same_view`` the pair
    (i, i) is dropped, for the conventional recipe where the student also sees
    the global views (in the same order).
    """
    if tau_t <= 0 or tau_s <= 0:
        raise ValueError("temperatures must be positive")
    if not teacher_logits or not student_logits:
        raise ValueError("need at least one teacher and one student view")
    t_probs = []
    for z in teacher_logits:
        arr = np.asarray(z.data if isinstance(z, Tensor) else z)
        t_probs.append(sharpen(arr, tau_t, center).data)
    k = t_probs[0].shape[-1]
    s_logp = []
    for z in student_logits:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
        if z.shape[-1] != k:
            raise nx.ShapeError("dino_loss", t_probs[0].shape, z.shape)
        s_logp.append(nx.log_softmax(z, axis=-1, temperature=tau_s))
    total, pairs = None, 0
    for i, pt in enumerate(t_probs):
        for j, lp in enumerate(s_logp):
            if skip_same_view and i == j:
                continue
            if pt.shape != lp.shape:
                raise nx.ShapeError("dino_loss", pt.shape, lp.shape)
            ce = -(lp * pt).sum(axis=-1).mean()
            total = ce if total is None else total + ce
            pairs += 1
    if total is None:
        raise ValueError("no (teacher, student) pairs to compare")
    return total * (1.0 / pairs)


def ema_update(teacher_params: Sequence, student_params: Sequence, lam: float):
    """In-place teacher <- lam * teacher + (1 - lam) * student."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {lam}")
    teacher_params, student_params = list(teacher_params), list(student_params)
    if len(teacher_params) != len(student_params):
        raise ValueError("teacher and student parameter lists differ in length")
    for t, s in zip(teacher_params, student_params):
        if t.shape != s.shape:
            raise nx.ShapeError("ema_update", t.shape, s.shape)
        if lam == 1.0:
            continue
        if lam == 0.0:
            t.data = s.data.copy()
            continue
        dt = t.data.dtype.type
        t.data = (dt(lam) * t.data + dt(1.0 - lam) * s.data).astype(t.data.dtype, copy=False)


def update_center(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    """Running mean of the batch-averaged teacher logits."""
    batch = np.asarray(teacher_logits).reshape(-1, center.shape[-1]).mean(axis=0)
    return (momentum * center + (1 - momentum) * batch).astype(center.dtype)


@dataclass
class DistillConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1.25e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 0
    weight_decay: tuple[float, float] = (0.1, 0.5)
    momentum: float = 0.996
    tau_t: float = 0.5
    tau_s: float = 0.1
    centering: bool = True
    center_momentum: float = 0.9
    pairing: str = "eq1"  # "eq1": teacher globals x student locals; "conventional": DINO pairs
    clip_grad: float | None = 3.0
    crops: MultiCropConfig = field(default_factory=MultiCropConfig)

    def __post_init__(self):
        if self.tau_t <= 0 or self.tau_s <= 0:
            raise ValueError("temperatures must be positive")
        if not 0 <= self.momentum <= 1 or not 0 <= self.center_momentum <= 1:
            raise ValueError("momenta must lie in [0, 1]")
        if self.pairing not in ("eq1", "conventional"):
            raise ValueError(f"unknown pairing {self.pairing!r}")


def _clip(params, max_norm: float | None):
    if not max_norm:
        return
    # per-parameter clipping, as in the reference DINO trainer
    for p in params:
        if p.grad is None:
            continue
        norm = float(np.sqrt((p.grad.astype(np.float64) ** 2).sum()))
        if norm > max_norm:
            p.grad *= p.grad.dtype.type(max_norm / (norm + 1e-6))


class LossLog:
    """Appends ``epoch,step,loss`` rows to a CSV file (header written once)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[tuple[int, int, float]] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                fh.write("epoch,step,loss\n")

    def add(self, epoch: int, step: int, loss: float):
        self.rows.append((epoch, step, loss))
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([epoch, step, repr(loss)])

    def epoch_means(self) -> list[float]:
        by: dict[int, list[float]] = {}
        for e, _, l in self.rows:
            by.setdefault(e, []).append(l)
        return [float(np.mean(by[e])) for e in sorted(by)]


def pretrain(frames: np.ndarray, cfg: DistillConfig | None = None, enc_cfg: EncoderConfig | str = "tiny",
             seed: int = 0, log_path=None) -> Checkpoint:
    """Self-distillation over unlabeled frames; returns student and teacher weights."""
    cfg = cfg or DistillConfig()
    enc_cfg = EncoderConfig.from_profile(enc_cfg) if isinstance(enc_cfg, str) else enc_cfg
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 3 or len(frames) == 0:
        raise TrainingError("pretraining needs a non-empty (F, H, W) stack of frames")
    rng = np.random.default_rng(seed)
    student = build_encoder(enc_cfg, rng)
    teacher = build_encoder(enc_cfg, np.random.default_rng(0))
    teacher.load_state_dict(student.state_dict())
    for p in teacher.parameters():
        p.requires_grad = False

    named = list(student.named_parameters())
    params = [p for _, p in named]
    opt = nx.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay[0], no_decay=nx.decay_mask(named))
    steps_per_epoch = math.ceil(len(frames) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    lr_sched = nx.cosine_schedule(cfg.lr, cfg.min_lr, total, cfg.warmup_epochs * steps_per_epoch)
    wd_sched = nx.linear_schedule(cfg.weight_decay[0], cfg.weight_decay[1], total)
    center = np.zeros(enc_cfg.head_output_dim, dtype=np.float32)
    losses = LossLog(log_path)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for start in range(0, len(frames), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            crops = [multi_crop(frames[i], cfg.crops, rng, enc_cfg.image_size, enc_cfg.patch_size)
                     for i in batch]
            g_views = [np.stack([c.globals[v] for c in crops]) for v in range(cfg.crops.m)]
            l_views = [np.stack([c.locals[v] for c in crops]) for v in range(cfg.crops.n)]
            with nx.no_grad():
                t_all = teacher(np.concatenate(g_views))[1].data
            t_logits = np.split(t_all, cfg.crops.m)
            if cfg.pairing == "eq1":
                s_logits = _split_out(student(np.concatenate(l_views))[1], cfg.crops.n)
                skip = False
            else:
                s_logits = (_split_out(student(np.concatenate(g_views))[1], cfg.crops.m)
                            + _split_out(student(np.concatenate(l_views))[1], cfg.crops.n))
                skip = True
            loss = dino_loss(t_logits, s_logits, cfg.tau_t, cfg.tau_s,
                             center if cfg.centering else None, skip_same_view=skip)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite distillation loss at epoch {epoch} step {step}")
            loss.backward()
            _clip(params, cfg.clip_grad)
            opt.lr = float(lr_sched[step])
            opt.weight_decay = float(wd_sched[step])
            opt.step()
            ema_update(teacher.parameters(), student.parameters(), cfg.momentum)
            if cfg.centering:
                center = update_center(center, t_all, cfg.center_momentum)
            losses.add(epoch, step, value)
            step += 1
        log.info("pretrain epoch %d mean loss %.5f", epoch, losses.epoch_means()[-1])

    ckpt = Checkpoint(profile=enc_cfg.profile, encoder=enc_cfg.to_dict(), tags=["pretrained"])
    ckpt.put("student", student.state_dict())
    ckpt.put("teacher", teacher.state_dict())
    ckpt.meta.update({
        "feature_network": "teacher",
        "seed": seed,
        "pretrain": _config_meta(cfg),
        "loss_history": [[e, s, l] for e, s, l in losses.rows],
        "center": [float(c) for c in center],
    })
    return ckpt


def init_checkpoint(enc_cfg: EncoderConfig | str = "tiny", seed: int = 0) -> Checkpoint:
    """Randomly initialized student/teacher pair, the "scratch" starting point."""
    enc_cfg = EncoderConfig.from_profile(enc_cfg) if isinstance(enc_cfg, str) else enc_cfg
    enc = build_encoder(enc_cfg, np.random.default_rng(seed))
    ckpt = Checkpoint(profile=enc_cfg.profile, encoder=enc_cfg.to_dict(), tags=["scratch"])
    ckpt.put("student", enc.state_dict())
    ckpt.put("teacher", enc.state_dict())
    ckpt.meta.update({"feature_network": "teacher", "seed": seed})
    return ckpt


def _split_out(out: Tensor, parts: int) -> list[Tensor]:
    size = out.shape[0] // parts
    return [out[i * size:(i + 1) * size] for i in range(parts)]


def _config_meta(cfg) -> dict:
    d = asdict(cfg)
    return json_safe(d)


def json_safe(obj):
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def load_encoder(ckpt: Checkpoint, which: str | None = None) -> Encoder:
    """Rebuild the student or teacher encoder stored in a checkpoint."""
    which = which or ckpt.meta.get("feature_network", "teacher")
    cfg = EncoderConfig(**ckpt.encoder)
    enc = build_encoder(cfg, 0)
    state = ckpt.subset(which)
    if not state:
        raise KeyError(f"checkpoint has no {which!r} network")
    enc.load_state_dict(state)
    return enc
