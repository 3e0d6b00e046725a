"""Dual-level VLAD pooling of frame features into video scores, plus baselines.

Shapes used throughout: frame features ``(..., D)``, per-frame descriptors
``(..., Y*D)`` laid out as Y contiguous blocks of length D, videos batched as
``(B, N, ...)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from . import numerics as nx
from .checkpoint import Checkpoint
from .distill import LossLog, TrainingError, json_safe
from .numerics import Linear, Module, Parameter, ShapeError, Tensor

log = logging.getLogger(__name__)

MODES = ("dual", "netvlad", "globmax")
DEFAULT_TAU = 0.1
TAU_GRID = (0.05, 0.1, 0.5, 1.0)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


class Centroids(Module):
    """Cluster centres c_j (Y, D) and the affine soft-assignment (w: D x Y, b: Y)."""

    def __init__(self, num_clusters: int, dim: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.centers = Parameter(nx.trunc_normal(rng, (num_clusters, dim), std=1.0))
        self.weight = Parameter(np.zeros((dim, num_clusters)))
        self.bias = Parameter(np.zeros(num_clusters))

    @property
    def num_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def init_from(self, centers: np.ndarray, scale: float):
        """NetVLAD warm start: w_j = 2 c_j / s^2, b_j = -|c_j|^2 / s^2."""
        centers = np.asarray(centers, dtype=np.float64)
        s2 = float(scale) ** 2
        dt = self.centers.data.dtype
        self.centers.data = centers.astype(dt)
        self.weight.data = (2.0 * centers.T / s2).astype(dt)
        self.bias.data = (-(centers ** 2).sum(axis=1) / s2).astype(dt)


def cluster_assign(f, cents: Centroids) -> Tensor:
    """alpha_c(f, j) = softmax_j(w_j . f + b_j)."""
    f = _t(f)
    if f.shape[-1] != cents.dim:
        raise ShapeError("cluster_assign", f.shape, cents.centers.shape)
    if f.ndim == 1:
        return cluster_assign(f.reshape(1, -1), cents).reshape(cents.num_clusters)
    return nx.softmax(f @ cents.weight + cents.bias, axis=-1)


def vlad_encode(f, cents: Centroids) -> Tensor:
    """Per-frame descriptor: blocks alpha_c(f, j) * (f - c_j) concatenated over j."""
    f = _t(f)
    if f.shape[-1] != cents.dim:
        raise ShapeError("vlad_encode", f.shape, cents.centers.shape)
    alpha = cluster_assign(f, cents)
    lead = f.shape[:-1]
    y, d = cents.centers.shape
    resid = f.reshape(*lead, 1, d) - cents.centers           # (..., Y, D)
    blocks = alpha.reshape(*lead, y, 1) * resid
    return blocks.reshape(*lead, y * d)


class FrameAssigner(Module):
    """Scalar informativeness score per descriptor: Linear -> tanh -> Linear."""

    def __init__(self, desc_dim: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or math.ceil(desc_dim / 4)
        self.fc1 = Linear(desc_dim, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def forward(self, desc) -> Tensor:
        s = self.fc2(nx.tanh(self.fc1(_t(desc))))
        return s.reshape(*s.shape[:-1])


def frame_assign(desc, assigner: FrameAssigner, tau: float = DEFAULT_TAU) -> Tensor:
    """alpha_f over the frame axis (second to last of ``desc``) at temperature tau."""
    if not tau > 0:
        raise ValueError(f"frame temperature must be positive, got {tau}")
    desc = _t(desc)
    if desc.ndim < 2 or desc.shape[-2] < 1:
        raise ShapeError("frame_assign", desc.shape, ("N>=1", "Y*D"))
    return nx.softmax(assigner(desc), axis=-1, temperature=tau)


def intra_normalize(v, num_clusters: int, final_norm: bool = True) -> Tensor:
    """sigma: L2 per D-block (zero blocks stay zero), then optionally over the whole vector."""
    v = _t(v)
    lead, total = v.shape[:-1], v.shape[-1]
    if total % num_clusters:
        raise ShapeError("intra_normalize", v.shape, (num_clusters, "D"))
    blocks = nx.l2_normalize(v.reshape(*lead, num_clusters, total // num_clusters), axis=-1)
    out = blocks.reshape(*lead, total)
    return nx.l2_normalize(out, axis=-1) if final_norm else out


def aggregate_video(desc, weights, num_clusters: int, final_norm: bool = True) -> Tensor:
    """v = sigma(sum_i alpha_f,i f'_i) for desc (..., N, Y*D) and weights (..., N)."""
    desc, weights = _t(desc), _t(weights)
    if desc.shape[:-1] != weights.shape:
        raise ShapeError("aggregate_video", desc.shape, weights.shape)
    pooled = (weights.reshape(*weights.shape, 1) * desc).sum(axis=-2)
    return intra_normalize(pooled, num_clusters, final_norm)


def classify_video(v, classifier: Linear) -> Tensor:
    v = _t(v)
    if v.shape[-1] != classifier.d_in:
        raise ShapeError("classify_video", v.shape, classifier.weight.shape)
    return nx.softmax(classifier(v), axis=-1)


def uniform_weights(n: int, lead=()) -> np.ndarray:
    return np.full((*lead, n), 1.0 / n, dtype=nx.default_dtype())


def netvlad_baseline(features, cents: Centroids, final_norm: bool = True) -> Tensor:
    """Dual-level pooling with alpha_f fixed to uniform (the plain NetVLAD sum)."""
    desc = vlad_encode(features, cents)
    if desc.ndim < 2:
        raise ShapeError("netvlad_baseline", desc.shape, ("N", "Y*D"))
    w = uniform_weights(desc.shape[-2], desc.shape[:-2])
    return aggregate_video(desc, w, cents.num_clusters, final_norm)


def globmax_baseline(frame_probs) -> tuple[np.ndarray, int]:
    """Per-class max over frames, renormalized; prediction favours higher severity on ties."""
    p = np.asarray(frame_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError(f"globmax needs a non-empty (N, Y) array of frame probabilities, got {p.shape}")
    scores = p.max(axis=0)
    pred = int(np.flatnonzero(scores == scores.max())[-1])
    total = scores.sum()
    probs = scores / total if total > 0 else np.full_like(scores, 1.0 / len(scores))
    return probs, pred


def globmax_predict(frame_probs) -> np.ndarray:
    """Vectorised globmax over videos (V, N, Y) -> predicted classes (V,)."""
    return np.array([globmax_baseline(p)[1] for p in np.asarray(frame_probs)], dtype=np.int64)


class VideoModel(Module):
    """Centroids + frame assigner + linear classifier over the pooled embedding."""

    def __init__(self, dim: int, num_classes: int = 3, rng: np.random.Generator | None = None,
                 mode: str = "dual", tau: float = DEFAULT_TAU, final_norm: bool = True):
        if mode not in ("dual", "netvlad"):
            raise ValueError(f"VideoModel mode must be 'dual' or 'netvlad', got {mode!r}")
        rng = rng or np.random.default_rng(0)
        self.mode, self.tau, self.final_norm = mode, tau, final_norm
        self.centroids = Centroids(num_classes, dim, rng)
        self.assigner = FrameAssigner(num_classes * dim, rng)
        self.classifier = Linear(num_classes * dim, num_classes, rng)

    def embed(self, features):
        """(B, N, D) frame features -> (video embedding, frame weights)."""
        desc = vlad_encode(features, self.centroids)
        if self.mode == "dual":
            w = frame_assign(desc, self.assigner, self.tau)
        else:
            w = Tensor(uniform_weights(desc.shape[-2], desc.shape[:-2]))
        return aggregate_video(desc, w, self.centroids.num_clusters, self.final_norm), w

    def forward(self, features) -> Tensor:
        """Classifier logits for a batch of videos."""
        return self.classifier(self.embed(features)[0])

    def predict(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=nx.default_dtype())
        single = x.ndim == 2
        with nx.no_grad():
            p = nx.softmax(self(x[None] if single else x), axis=-1).data
        return p[0] if single else p


def kmeans(x: np.ndarray, k: int, restarts: int = 10, seed: int = 0, iters: int = 50) -> np.ndarray:
    """Best-of-``restarts`` k-means++ centres (lowest inertia)."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        raise ValueError(f"k-means needs at least {k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    best, best_cost = None, np.inf
    for _ in range(restarts):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # empty-cluster notices
            centers, lab = kmeans2(x, k, iter=iters, minit="++", rng=rng)
        cost = float(((x - centers[lab]) ** 2).sum())
        if cost < best_cost:
            best, best_cost = centers, cost
    return best


@dataclass
class VideoClsConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    min_lr: float = 1e-6
    weight_decay: float = 1e-5
    mode: str = "dual"
    tau: float = DEFAULT_TAU
    tau_grid: tuple = TAU_GRID
    grid_search: bool = False
    val_fraction: float = 0.25
    final_norm: bool = True
    kmeans_restarts: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown aggregation mode {self.mode!r}; choose from {MODES}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def init_video_model(features: np.ndarray, cfg: VideoClsConfig, seed: int = 0,
                     num_classes: int = 3) -> VideoModel:
    rng = np.random.default_rng(seed)
    d = features.shape[-1]
    model = VideoModel(d, num_classes, rng, cfg.mode, cfg.tau, cfg.final_norm)
    flat = features.reshape(-1, d)
    centers = kmeans(flat, num_classes, cfg.kmeans_restarts, seed)
    model.centroids.init_from(centers, np.linalg.norm(flat, axis=1).mean())
    return model


def _check_video_inputs(features, labels, num_classes):
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels)
    if features.ndim != 3:
        raise ShapeError("videocls", features.shape, ("V", "N", "D"))
    if len(features) == 0:
        raise TrainingError("no training videos")
    if len(features) != len(labels):
        raise ValueError(f"{len(features)} videos but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"video labels must lie in 0..{num_classes - 1}")
    return features, labels.astype(np.int64)


def fit_video_model(features, labels, cfg: VideoClsConfig | None = None, seed: int = 0,
                    log_path=None, num_classes: int = 3) -> tuple[VideoModel, LossLog]:
    """Joint training of centroids, frame assigner and classifier on frozen features."""
    from .finetune import cross_entropy

    cfg = cfg or VideoClsConfig()
    if cfg.mode == "globmax":
        raise ValueError("globmax has no trainable parameters")
    features, labels = _check_video_inputs(features, labels, num_classes)
    model = init_video_model(features, cfg, seed, num_classes)
    rng = np.random.default_rng(seed + 1)
    named = list(model.named_parameters())
    opt = nx.AdamW([p for _, p in named], lr=cfg.lr, weight_decay=cfg.weight_decay,
                   no_decay=nx.decay_mask(named))
    steps_per_epoch = math.ceil(len(features) / cfg.batch_size)
    lr_sched = nx.cosine_schedule(cfg.lr, cfg.min_lr, steps_per_epoch * cfg.epochs)
    losses = LossLog(log_path)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(features))
        for start in range(0, len(features), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = cross_entropy(model(features[idx]), labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite video loss at epoch {epoch} step {step}")
            loss.backward()
            opt.lr = float(lr_sched[step])
            opt.step()
            losses.add(epoch, step, value)
            step += 1
    return model, losses


def select_tau(features, labels, cfg: VideoClsConfig, seed: int = 0, num_classes: int = 3) -> float:
    """Grid search of the frame temperature on a seeded hold-out split of the training videos."""
    features, labels = _check_video_inputs(features, labels, num_classes)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(features))
    n_val = max(1, int(round(cfg.val_fraction * len(features))))
    val, tr = order[:n_val], order[n_val:]
    if len(tr) == 0:
        return cfg.tau
    best_tau, best_acc = cfg.tau, -1.0
    # the default is tried first so it wins ties
    for tau in sorted(cfg.tau_grid, key=lambda t: t != cfg.tau):
        sub = VideoClsConfig(**{**asdict(cfg), "tau": tau, "grid_search": False})
        model, _ = fit_video_model(features[tr], labels[tr], sub, seed, num_classes=num_classes)
        acc = float((model.predict(features[val]).argmax(1) == labels[val]).mean())
        log.info("tau %.3g validation accuracy %.4f", tau, acc)
        if acc > best_acc:
            best_tau, best_acc = tau, acc
    return best_tau


def train_videocls(features, labels, cfg: VideoClsConfig | None = None, seed: int = 0,
                   base: Checkpoint | None = None, log_path=None) -> tuple[VideoModel, Checkpoint]:
    """Fit the aggregator (with optional tau grid search) and store it under ``aggregator.*``."""
    cfg = cfg or VideoClsConfig()
    if cfg.mode == "dual" and cfg.grid_search:
        cfg = VideoClsConfig(**{**asdict(cfg), "tau": select_tau(features, labels, cfg, seed)})
    model, losses = fit_video_model(features, labels, cfg, seed, log_path)
    if base is not None:
        ckpt = base.copy()
        ckpt.drop("aggregator")
    else:
        ckpt = Checkpoint(profile="features", encoder={})
    ckpt.put("aggregator", model.state_dict())
    ckpt.add_tag("videocls")
    ckpt.meta["videocls"] = json_safe(asdict(cfg))
    ckpt.meta["videocls_loss_history"] = [[e, s, l] for e, s, l in losses.rows]
    ckpt.meta["videocls_seed"] = seed
    return model, ckpt


def video_model_from_checkpoint(ckpt: Checkpoint) -> VideoModel:
    state = ckpt.subset("aggregator")
    if not state:
        raise KeyError("checkpoint has no aggregator")
    meta = ckpt.meta.get("videocls", {})
    y, d = state["centroids.centers"].shape
    model = VideoModel(d, y, mode=meta.get("mode", "dual"), tau=meta.get("tau", DEFAULT_TAU),
                       final_norm=meta.get("final_norm", True))
    model.load_state_dict(state)
    return model


@dataclass
class VideoFeatures:
    """Frozen per-frame features of a set of videos, exportable without the encoder."""

    features: np.ndarray            # (V, N, D)
    labels: np.ndarray              # (V,)
    frame_probs: np.ndarray | None = None  # (V, N, Y) from the frame classifier, for globmax
    video_ids: list[str] = field(default_factory=list)

    def to_checkpoint(self, profile: str = "features", encoder: dict | None = None) -> Checkpoint:
        ckpt = Checkpoint(profile=profile, encoder=dict(encoder or {}), tags=["features"])
        ckpt.tensors["features.frames"] = np.asarray(self.features, dtype=np.float32)
        ckpt.tensors["labels.video"] = np.asarray(self.labels, dtype=np.float32)
        if self.frame_probs is not None:
            ckpt.tensors["features.frame_probs"] = np.asarray(self.frame_probs, dtype=np.float32)
        ckpt.meta["video_ids"] = list(self.video_ids)
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "VideoFeatures":
        try:
            feats = ckpt.tensors["features.frames"]
            labels = ckpt.tensors["labels.video"]
        except KeyError:
            raise KeyError("not a feature file: needs features.frames and labels.video") from None
        return cls(feats, np.rint(labels).astype(np.int64), ckpt.tensors.get("features.frame_probs"),
                   list(ckpt.meta.get("video_ids", [])))


def video_features(predictor, videos: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Backbone features and frame probabilities for videos (V, N, S, S)."""
    from .finetune import predict_frame

    videos = np.asarray(videos, dtype=np.float32)
    v, n = videos.shape[:2]
    flat = videos.reshape(v * n, *videos.shape[2:])
    feats = predictor.features(flat, batch_size)
    probs = predict_frame(predictor, flat, batch_size)
    return feats.reshape(v, n, -1), probs.reshape(v, n, -1)
