"""Frozen-feature evaluation, accuracy / one-vs-all AUC reports, attention export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.stats import rankdata

from . import numerics as nx
from .checkpoint import Checkpoint
from .encoder import AttentionMap, attention_map
from .numerics import Linear

NUM_CLASSES = 3


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    per_class_accuracy: list      # recall per class, None where the class is absent
    accuracy: float               # percent
    per_class_auc: list           # None for classes skipped (no positives or no negatives)
    macro_auc: float | None
    confusion: list               # confusion[true][pred]
    split: str = ""
    provenance: str = ""          # knn | linear | finetuned | dual | netvlad | globmax
    n: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def to_csv(self, path) -> Path:
        """One row per class plus an ``all`` row; columns suit plotting."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "provenance", "class", "count", "accuracy", "auc"])
            for c, acc in enumerate(self.per_class_accuracy):
                w.writerow([self.split, self.provenance, c, sum(self.confusion[c]),
                            _fmt(acc), _fmt(self.per_class_auc[c])])
            w.writerow([self.split, self.provenance, "all", self.n, _fmt(self.accuracy / 100.0),
                        _fmt(self.macro_auc)])
        return path


def _fmt(x):
    return "" if x is None else repr(float(x))


def confusion_matrix(labels, preds, num_classes: int = NUM_CLASSES) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def roc_auc_ova(scores, labels, num_classes: int | None = None) -> tuple[list, float]:
    """Per-class one-vs-all AUC via the rank-sum identity (ties count one half) and their macro mean.

    Classes with no positive (or no negative) samples are skipped and reported as None.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise EvalError(f"scores {scores.shape} do not match {len(labels)} labels")
    num_classes = num_classes or scores.shape[1]
    if len(np.unique(labels)) < 2:
        raise EvalError("AUC needs at least two classes among the labels")
    out = []
    for c in range(num_classes):
        pos = labels == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            out.append(None)
            continue
        ranks = rankdata(scores[:, c])  # average ranks handle ties
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        out.append(float(u / (n_pos * n_neg)))
    valid = [a for a in out if a is not None]
    return out, float(np.mean(valid))


def severity_argmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; exact ties go to the highest class index (most severe)."""
    scores = np.asarray(scores)
    flipped = scores[:, ::-1]
    return scores.shape[1] - 1 - flipped.argmax(axis=1)


def build_report(labels, scores, preds=None, split: str = "", provenance: str = "",
                 num_classes: int = NUM_CLASSES) -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(labels) == 0:
        raise EvalError("nothing to evaluate")
    preds = severity_argmax(scores) if preds is None else np.asarray(preds, dtype=np.int64)
    cm = confusion_matrix(labels, preds, num_classes)
    counts = cm.sum(axis=1)
    per_class = [float(cm[c, c] / counts[c]) if counts[c] else None for c in range(num_classes)]
    notes = []
    try:
        aucs, macro = roc_auc_ova(scores, labels, num_classes)
        skipped = [c for c, a in enumerate(aucs) if a is None]
        if skipped:
            notes.append(f"AUC skipped for classes without positives: {skipped}")
    except EvalError as exc:
        aucs, macro = [None] * num_classes, None
        notes.append(str(exc))
    acc = 100.0 * float(np.trace(cm)) / float(cm.sum())
    return EvalReport(per_class, acc, aucs, macro, cm.tolist(), split, provenance, int(len(labels)), notes)


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), nx.EPS)


def knn_scores(train_x, train_y, test_x, k: int = 20, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Per-class sums of cosine similarity over the k most similar training points."""
    train_x, test_x = np.asarray(train_x), np.asarray(test_x)
    train_y = np.asarray(train_y, dtype=np.int64)
    if k < 1:
        raise EvalError("k must be at least 1")
    if k > len(train_x):
        raise EvalError(f"k={k} exceeds the {len(train_x)} training points")
    sim = _unit(test_x) @ _unit(train_x).T
    # stable sort: equal similarities keep training order
    idx = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sim, idx, axis=1)
    scores = np.zeros((len(test_x), num_classes))
    for c in range(num_classes):
        scores[:, c] = np.where(train_y[idx] == c, top, 0.0).sum(axis=1)
    return scores


def knn_eval(train_x, train_y, test_x, test_y, k: int = 20, split: str = "",
             num_classes: int = NUM_CLASSES) -> EvalReport:
    scores = knn_scores(train_x, train_y, test_x, k, num_classes)
    return build_report(test_y, scores, split=split, provenance="knn", num_classes=num_classes)


@dataclass
class ProbeConfig:
    steps: int = 500
    lr: float = 0.05
    weight_decay: float = 0.0


def fit_linear_probe(train_x, train_y, cfg: ProbeConfig | None = None, seed: int = 0,
                     num_classes: int = NUM_CLASSES):
    """Full-batch AdamW cross-entropy on standardized features; returns a predict-proba closure."""
    from .finetune import cross_entropy

    cfg = cfg or ProbeConfig()
    x = np.asarray(train_x, dtype=np.float64)
    y = np.asarray(train_y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise EvalError("linear probe needs at least two classes in the training set")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    with nx.precision(np.float64):
        clf = Linear(x.shape[1], num_classes, np.random.default_rng(seed))
        opt = nx.AdamW(clf.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        xs = nx.Tensor((x - mu) / sd)
        for _ in range(cfg.steps):
            loss = cross_entropy(clf(xs), y)
            loss.backward()
            opt.step()

    def predict_proba(feats):
        with nx.precision(np.float64), nx.no_grad():
            z = clf(nx.Tensor((np.asarray(feats, dtype=np.float64) - mu) / sd))
            return nx.softmax(z, axis=-1).data

    return predict_proba


def linear_probe(train_x, train_y, test_x, test_y, cfg: ProbeConfig | None = None, seed: int = 0,
                 split: str = "", num_classes: int = NUM_CLASSES) -> EvalReport:
    proba = fit_linear_probe(train_x, train_y, cfg, seed, num_classes)
    return build_report(test_y, proba(test_x), split=split, provenance="linear", num_classes=num_classes)


def upsample_nearest(grid: np.ndarray, size: int) -> np.ndarray:
    g = grid.shape[-1]
    if size % g:
        raise ValueError(f"cannot upsample a {g}x{g} grid to {size} by an integer factor")
    f = size // g
    return np.repeat(np.repeat(grid, f, axis=-2), f, axis=-1)


def to_gray(m: np.ndarray) -> np.ndarray:
    """Min-max to 0..255, with the range floored at the map mean.

    A map whose spread is small next to its level (near-uniform attention) stays
    near-flat instead of having its rounding noise stretched to full contrast.
    """
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    span = max(hi - lo, abs(m.mean()), nx.EPS)
    return np.clip(np.rint(255.0 * (m - lo) / span), 0, 255).astype(np.uint8)


def region_mass_ratio(patch_attn: np.ndarray, mask: np.ndarray) -> float:
    """Attention mass inside a pixel mask divided by the mask's area share.

    ``patch_attn`` is a (G, G) CLS-to-patch map; it is renormalized over
    patches and spread evenly over the pixels of each patch.
    """
    a = np.asarray(patch_attn, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty region mask")
    a = a / a.sum()
    s = mask.shape[-1]
    pix = upsample_nearest(a, s) / (s // a.shape[-1]) ** 2
    return float(pix[mask].sum() / mask.mean())


def export_attention(frame, ckpt: Checkpoint, out_path, block_index: int = -1, fmt: str = "png",
                     which: str | None = None) -> list[Path]:
    """Write per-head and head-mean attention images for one frame.

    ``out_path`` is a directory, or a file stem whose suffix picks the format.
    Returns the written paths, heads first and the mean map last.
    """
    from .finetune import predictor_from_checkpoint

    out_path = Path(out_path)
    if out_path.suffix.lower() in (".png", ".pgm"):
        fmt, stem, folder = out_path.suffix[1:].lower(), out_path.stem, out_path.parent
    else:
        stem, folder = "attention", out_path
    if fmt not in ("png", "pgm"):
        raise ValueError(f"unsupported image format {fmt!r}")
    model = predictor_from_checkpoint(ckpt)
    amap: AttentionMap = attention_map(model.backbone, frame, block_index)
    size = model.cfg.image_size
    images = [upsample_nearest(h, size) for h in amap.patches] + [upsample_nearest(amap.mean, size)]
    names = [f"{stem}_head{i}.{fmt}" for i in range(len(amap.patches))] + [f"{stem}_mean.{fmt}"]
    try:
        folder.mkdir(parents=True, exist_ok=True)
        paths = []
        for img, name in zip(images, names):
            p = folder / name
            Image.fromarray(to_gray(img)).save(p, format="PNG" if fmt == "png" else "PPM")
            paths.append(p)
    except OSError as exc:
        raise OSError(f"cannot write attention maps to {folder}: {exc.strerror or exc}") from None
    return paths


def fold_average(reports: list[EvalReport], split: str = "fold-average") -> EvalReport:
    """Mean of accuracy and AUC figures across folds; confusion matrices are summed."""
    if not reports:
        raise EvalError("no fold reports to average")

    def avg(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    k = len(reports[0].per_class_accuracy)
    cm = np.sum([np.asarray(r.confusion) for r in reports], axis=0)
    return EvalReport(
        per_class_accuracy=[avg([r.per_class_accuracy[c] for r in reports]) for c in range(k)],
        accuracy=float(np.mean([r.accuracy for r in reports])),
        per_class_auc=[avg([r.per_class_auc[c] for r in reports]) for c in range(k)],
        macro_auc=avg([r.macro_auc for r in reports]),
        confusion=cm.tolist(), split=split, provenance=reports[0].provenance,
        n=int(sum(r.n for r in reports)),
        notes=[n for r in reports for n in r.notes],
    )


def accuracy(labels, preds) -> float:
    labels, preds = np.asarray(labels), np.asarray(preds)
    return float((labels == preds).mean()) if len(labels) else math.nan
