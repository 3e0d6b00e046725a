"""Synthetic lung-ultrasound-like frames and videos.

Every frame has a bright pleural line near the top. On top of that:

* class 0: horizontal bands at multiples of the pleural depth (A-lines)
* class 1: vertical streaks from the pleura to the bottom edge (B-lines)
* class 2: filled elliptical blobs in the mid field (consolidation)

A video of class c shows its pattern in exactly ``k`` of its frames and the
class-0 pattern in the rest; its label is the maximum frame label.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import ManifestRow, write_manifest
from .preprocess import N_FRAMES

BACKGROUND = 0.1


@dataclass(frozen=True)
class SynthSpec:
    videos_per_class: int = 20
    image_size: int = 64
    k: int = N_FRAMES
    noise: float = 0.1
    n_frames: int = N_FRAMES
    sources: int = 4
    patients_per_source: int = 5

    def __post_init__(self):
        if self.k > self.n_frames:
            raise ValueError(f"k={self.k} informative frames exceeds n_frames={self.n_frames}")
        if self.k < 1 or self.n_frames < 1:
            raise ValueError("k and n_frames must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class SynthDataset:
    videos: np.ndarray        # (V, N, S, S) float32 in [0, 1]
    frame_labels: np.ndarray  # (V, N) int
    video_labels: np.ndarray  # (V,) int
    masks: np.ndarray         # (V, N, S, S) bool, pixels of each frame's pattern
    sources: list[str]
    patients: list[str]

    def __len__(self):
        return len(self.video_labels)


def _pleura_row(s: int, rng) -> int:
    return int(round(0.15 * s)) + int(rng.integers(-1, 2))


def _thickness(s: int) -> int:
    return max(1, s // 32)


def draw_pattern(label: int, s: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free frame of one class plus the mask of its class pattern."""
    img = np.full((s, s), BACKGROUND)
    mask = np.zeros((s, s), dtype=bool)
    th = _thickness(s)
    p = _pleura_row(s, rng)
    img[p:p + th, :] = 0.8
    if label == 0:
        for i, mult in enumerate((2, 3, 4)):
            r = mult * p + int(rng.integers(-1, 2))
            if r + th > s:
                break
            img[r:r + th, :] = 0.7 * 0.85 ** i
            mask[r:r + th, :] = True
    elif label == 1:
        width = max(2, s // 24)
        count = int(rng.integers(2, 5))
        cols = rng.choice(np.arange(s // 8, 7 * s // 8 - width), size=count, replace=False)
        fade = np.linspace(0.7, 0.5, s - p - th)[:, None]
        for c in cols:
            img[p + th:, c:c + width] = np.maximum(img[p + th:, c:c + width], fade)
            mask[p + th:, c:c + width] = True
    elif label == 2:
        yy, xx = np.mgrid[0:s, 0:s]
        for _ in range(int(rng.integers(1, 3))):
            cy = rng.uniform(0.4 * s, 0.7 * s)
            cx = rng.uniform(0.25 * s, 0.75 * s)
            ry = rng.uniform(s / 8, s / 5)
            rx = rng.uniform(s / 8, s / 5)
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            img[inside] = 0.75
            mask |= inside
    else:
        raise ValueError(f"label must be 0, 1 or 2, got {label}")
    return img, mask


def _noisy(img: np.ndarray, noise: float, rng) -> np.ndarray:
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_frames(n_per_class: int, image_size: int = 64, noise: float = 0.1, seed: int = 0):
    """Balanced labeled frames -> (frames (F,S,S), labels (F,), masks (F,S,S)), class-interleaved."""
    rng = np.random.default_rng(seed)
    frames, labels, masks = [], [], []
    for i in range(n_per_class * 3):
        label = i % 3
        img, m = draw_pattern(label, image_size, rng)
        frames.append(_noisy(img, noise, rng))
        labels.append(label)
        masks.append(m)
    return np.stack(frames), np.asarray(labels, dtype=np.int64), np.stack(masks)


def synth_dataset(spec: SynthSpec, seed: int = 0) -> SynthDataset:
    rng = np.random.default_rng(seed)
    n, s = spec.n_frames, spec.image_size
    total = spec.videos_per_class * 3
    videos = np.empty((total, n, s, s), dtype=np.float32)
    masks = np.zeros((total, n, s, s), dtype=bool)
    frame_labels = np.zeros((total, n), dtype=np.int64)
    video_labels = np.zeros(total, dtype=np.int64)
    sources, patients = [], []
    for v in range(total):
        label = v % 3
        informative = np.arange(n) if label == 0 else np.sort(rng.choice(n, spec.k, replace=False))
        chosen = np.zeros(n, dtype=bool)
        chosen[informative] = True
        for f in range(n):
            fl = label if chosen[f] else 0
            img, m = draw_pattern(fl, s, rng)
            videos[v, f] = _noisy(img, spec.noise, rng)
            masks[v, f] = m
            frame_labels[v, f] = fl
        video_labels[v] = frame_labels[v].max()
        src = int(rng.integers(spec.sources))
        sources.append(f"synth{src}")
        patients.append(f"synth{src}-p{int(rng.integers(spec.patients_per_source))}")
    return SynthDataset(videos, frame_labels, video_labels, masks, sources, patients)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_dataset(ds: SynthDataset, out_dir, seed: int = 0, labeled_per_video: int = 3) -> Path:
    """Write the manifest layout; each video gets a few frame-level labels.

    Labels are stored on the i-LUS scale: level 1 is written as 1 or 2 at
    random so both merge back to 1.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed + 7919)
    to_ilus = lambda lab: {0: 0, 1: int(rng.integers(1, 3)), 2: 3}[int(lab)]
    rows, frame_labels = [], {}
    width = max(3, len(str(len(ds) - 1)))
    for v in range(len(ds)):
        vid = f"video_{v:0{width}d}"
        vdir = out / vid
        (vdir / "masks").mkdir(parents=True, exist_ok=True)
        for f in range(ds.videos.shape[1]):
            Image.fromarray(_to_u8(ds.videos[v, f])).save(vdir / f"frame_{f:03d}.png")
            Image.fromarray(ds.masks[v, f].astype(np.uint8) * 255).save(vdir / "masks" / f"mask_{f:03d}.png")
        rows.append(ManifestRow(vid, ds.sources[v], ds.patients[v], vid, to_ilus(ds.video_labels[v])))
        # label the informative frames first, then fill with others
        order = np.argsort(-ds.frame_labels[v], kind="stable")
        for f in order[:labeled_per_video]:
            frame_labels[(vid, int(f))] = to_ilus(ds.frame_labels[v, f])
    write_manifest(out, rows, frame_labels)
    return out
