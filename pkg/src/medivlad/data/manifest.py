"""On-disk dataset layout: a CSV manifest plus one directory of frames per video.

    root/
      manifest.csv          video_id,source,patient,dir,label[,split]
      frame_labels.csv      video_id,frame,label      (optional, i-LUS scale)
      <dir>/frame_000.png   zero-padded frame files (PNG or PGM)
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import N_FRAMES, map_label, preprocess_frame, temporal_resample

MANIFEST_FIELDS = ["video_id", "source", "patient", "dir", "label"]
FRAME_LABEL_FIELDS = ["video_id", "frame", "label"]
IMAGE_SUFFIXES = (".png", ".pgm")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    video_id: str
    source: str
    patient: str
    dir: str
    label: int | None = None  # i-LUS score 0..3
    split: str = ""


@dataclass
class Manifest:
    root: Path
    rows: list[ManifestRow]
    frame_labels: dict[tuple[str, int], int] = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.video_id for r in self.rows]
        dup = sorted({v for v in ids if ids.count(v) > 1})
        if dup:
            raise ManifestError(f"duplicate video_id values: {dup[:5]}")
        known = set(ids)
        for vid, idx in self.frame_labels:
            if vid not in known:
                raise ManifestError(f"frame label references unknown video {vid!r}")

    def __len__(self):
        return len(self.rows)

    def by_id(self, video_id: str) -> ManifestRow:
        for row in self.rows:
            if row.video_id == video_id:
                return row
        raise KeyError(video_id)

    def frame_files(self, row: ManifestRow) -> list[Path]:
        d = self.root / row.dir
        if not d.is_dir():
            raise ManifestError(f"frame directory missing for {row.video_id}: {d}")
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ManifestError(f"no frames in {d}")
        return files


def _parse_label(text: str, where: str) -> int | None:
    text = text.strip()
    if text == "":
        return None
    try:
        value = int(text)
    except ValueError:
        raise ManifestError(f"{where}: label {text!r} is not an integer") from None
    if value not in (0, 1, 2, 3):
        raise ManifestError(f"{where}: i-LUS label must be 0..3, got {value}")
    return value


def load_manifest(root) -> Manifest:
    root = Path(root)
    path = root / "manifest.csv" if root.is_dir() else root
    root = path.parent
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_FIELDS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        rows = [
            ManifestRow(
                video_id=r["video_id"], source=r["source"], patient=r["patient"], dir=r["dir"],
                label=_parse_label(r["label"], f"{path}:{n + 2}"), split=(r.get("split") or ""),
            )
            for n, r in enumerate(reader)
        ]
    frame_labels = {}
    flpath = root / "frame_labels.csv"
    if flpath.is_file():
        with open(flpath, newline="") as fh:
            for n, r in enumerate(csv.DictReader(fh)):
                lab = _parse_label(r["label"], f"{flpath}:{n + 2}")
                if lab is not None:
                    frame_labels[(r["video_id"], int(r["frame"]))] = lab
    man = Manifest(root=root, rows=rows, frame_labels=frame_labels)
    for row in man.rows:
        man.frame_files(row)
    for vid, idx in man.frame_labels:
        files = man.frame_files(man.by_id(vid))
        if not 0 <= idx < len(files):
            raise ManifestError(f"frame label {vid}:{idx} points past the last frame")
    return man


def write_manifest(root, rows: list[ManifestRow], frame_labels: dict[tuple[str, int], int] | None = None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        with_split = any(r.split for r in rows)
        w.writerow(MANIFEST_FIELDS + (["split"] if with_split else []))
        for r in rows:
            row = [r.video_id, r.source, r.patient, r.dir, "" if r.label is None else r.label]
            w.writerow(row + ([r.split] if with_split else []))
    if frame_labels:
        with open(root / "frame_labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FRAME_LABEL_FIELDS)
            for (vid, idx), lab in sorted(frame_labels.items()):
                w.writerow([vid, idx, lab])


@dataclass
class VideoSample:
    video_id: str
    frames: np.ndarray  # (N, S, S) float32 in [0, 1]
    label: int | None   # 3-level


def load_video(man: Manifest, row: ManifestRow, image_size: int, n_frames: int = N_FRAMES) -> VideoSample:
    files = temporal_resample(man.frame_files(row), n_frames)
    frames = np.stack([preprocess_frame(f, image_size) for f in files])
    label = None if row.label is None else map_label(row.label)
    return VideoSample(row.video_id, frames, label)


def load_labeled_frames(man: Manifest, image_size: int, video_ids=None):
    """All frames carrying a frame-level label -> (frames, 3-level labels, video ids)."""
    keep = None if video_ids is None else set(video_ids)
    frames, labels, owners = [], [], []
    for (vid, idx), lab in sorted(man.frame_labels.items()):
        if keep is not None and vid not in keep:
            continue
        files = man.frame_files(man.by_id(vid))
        frames.append(preprocess_frame(files[idx], image_size))
        labels.append(map_label(lab))
        owners.append(vid)
    if not frames:
        return np.zeros((0, image_size, image_size), np.float32), np.zeros(0, np.int64), []
    return np.stack(frames), np.asarray(labels, dtype=np.int64), owners


def load_unlabeled_frames(man: Manifest, image_size: int, video_ids=None) -> np.ndarray:
    keep = None if video_ids is None else set(video_ids)
    out = []
    for row in man.rows:
        if keep is not None and row.video_id not in keep:
            continue
        out.extend(preprocess_frame(f, image_size) for f in man.frame_files(row))
    if not out:
        return np.zeros((0, image_size, image_size), np.float32)
    return np.stack(out)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def make_folds(rows: list[ManifestRow] | Manifest, fold_count: int = 2, seed: int = 0) -> dict[str, int]:
    """Group-aware fold assignment {video_id: fold}.

    Videos sharing a source tag or a patient id are merged into one group;
    groups go, largest first, to the fold with the fewest videos so far.
    """
    rows = rows.rows if isinstance(rows, Manifest) else list(rows)
    if fold_count < 1:
        raise ValueError("fold_count must be >= 1")
    uf = _UnionFind(len(rows))
    first: dict[tuple[str, str], int] = {}
    for i, r in enumerate(rows):
        if not r.source:
            raise ManifestError(f"video {r.video_id} has no source tag")
        keys = [("source", r.source)] + ([("patient", r.patient)] if r.patient else [])
        for key in keys:
            if key in first:
                uf.union(i, first[key])
            else:
                first[key] = i
    groups: dict[int, list[int]] = {}
    for i in range(len(rows)):
        groups.setdefault(uf.find(i), []).append(i)
    members = list(groups.values())
    if len(members) < fold_count:
        raise ManifestError(f"{len(members)} source groups cannot fill {fold_count} folds")
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(len(members))
    order = sorted(range(len(members)), key=lambda g: (-len(members[g]), tiebreak[g]))
    load = [0] * fold_count
    out: dict[str, int] = {}
    for g in order:
        fold = min(range(fold_count), key=lambda f: (load[f], f))
        load[fold] += len(members[g])
        for i in members[g]:
            out[rows[i].video_id] = fold
    return out
