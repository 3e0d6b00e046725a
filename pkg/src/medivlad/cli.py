"""``medivlad`` command-line driver.

Stages: synth, pretrain, finetune, videocls, eval, attention. Stage settings
come from profile defaults, then a JSON config of flat dotted keys
(``{"pretrain.lr": 1e-4}``), then ``--pretrain.lr`` style flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import aggregate as ag
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (FrameDecodeError, ManifestError, SynthSpec, load_labeled_frames, load_manifest,
                   load_unlabeled_frames, load_video, make_folds, preprocess_frame, synth_dataset,
                   write_dataset)
from .distill import DistillConfig, MultiCropConfig, TrainingError, init_checkpoint, load_encoder, pretrain
from .encoder import EncoderConfig, PROFILES
from .eval import (EvalError, ProbeConfig, build_report, export_attention, knn_eval, linear_probe,
                   upsample_nearest)
from .finetune import FinetuneConfig, finetune, predict_frame, predictor_from_checkpoint

log = logging.getLogger("medivlad")

STAGES = ("synth", "pretrain", "finetune", "videocls", "eval", "attention")
CROP_KEYS = ("m", "n", "global_scale", "local_scale", "local_size", "augment")
NULLABLE = ("clip_grad", "local_size")


@dataclasses.dataclass
class EvalConfig:
    method: str = "auto"  # auto | knn | linear | finetuned | video
    split: str = "test"
    k: int = 20
    probe_steps: int = 500
    probe_lr: float = 0.05


@dataclasses.dataclass
class SynthConfig:
    videos_per_class: int = 20
    k: int = 15
    noise: float = 0.1
    n_frames: int = 15
    sources: int = 4
    patients_per_source: int = 5
    labeled_per_video: int = 3


# Paper profile: the published recipe.
PAPER_DEFAULTS = {
    "pretrain": DistillConfig(),
    "finetune": FinetuneConfig(),
    "videocls": ag.VideoClsConfig(),
    "eval": EvalConfig(),
    "synth": SynthConfig(),
}

# Desk-scale schedule for the tiny encoder on CPU.
TINY_DEFAULTS = {
    "pretrain": DistillConfig(epochs=5),
    "finetune": FinetuneConfig(epochs=30, batch_size=32, lr=3e-4, warmup_epochs=3),
    "videocls": ag.VideoClsConfig(),
    "eval": EvalConfig(),
    "synth": SynthConfig(),
}

DEFAULTS = {"paper": PAPER_DEFAULTS, "tiny": TINY_DEFAULTS}


class UsageError(Exception):
    pass


def stage_defaults(profile: str, section: str):
    """Fresh copy of the default config object for a profile and section."""
    return dataclasses.replace(DEFAULTS[profile][section])


def _fields(section: str) -> dict[str, object]:
    """Flag name -> default value, for every tunable key of a section."""
    base = PAPER_DEFAULTS[section]
    out = {f.name: getattr(base, f.name) for f in dataclasses.fields(base) if f.name != "crops"}
    if section == "pretrain":
        crops = MultiCropConfig()
        out.update({k: getattr(crops, k) for k in CROP_KEYS})
    return out


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(value, like, key: str):
    """Convert a flag string or JSON value to the type of the default ``like``."""
    try:
        if isinstance(like, bool):
            return value if isinstance(value, bool) else _parse_bool(value)
        if isinstance(like, tuple):
            items = value if isinstance(value, (list, tuple)) else str(value).split(",")
            return tuple(type(like[0])(v) for v in items) if like else tuple(items)
        if value is None or str(value).lower() == "none":
            if like is None or key.endswith(NULLABLE):
                return None
            raise ValueError("a value is required")
        if like is None:
            return int(value) if key.endswith("local_size") else float(value)
        if isinstance(like, int):
            f = float(value)
            if f != int(f):
                raise ValueError(f"{value!r} is not an integer")
            return int(f)
        if isinstance(like, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {exc}") from None


def _flatten(obj: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def read_config(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return _flatten(raw)


def resolve(section: str, profile: str, file_values: dict, flag_values: dict):
    """Profile defaults < config file < flags, for one section."""
    cfg = stage_defaults(profile, section)
    known = _fields(section)
    merged = {}
    for source in (file_values, flag_values):
        for key, val in source.items():
            sec, _, name = key.partition(".")
            if sec != section or val is None:
                continue
            if name not in known:
                raise UsageError(f"unknown setting {key!r}")
            merged[name] = _coerce(val, known[name], key)
    crop_kw = {k: merged.pop(k) for k in CROP_KEYS if k in merged}
    cfg = dataclasses.replace(cfg, **merged)
    if crop_kw:
        cfg = dataclasses.replace(cfg, crops=dataclasses.replace(cfg.crops, **crop_kw))
    return cfg


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 and print usage to stderr."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


SECTIONS = {
    "synth": ("synth",),
    "pretrain": ("pretrain",),
    "finetune": ("finetune",),
    "videocls": ("videocls",),
    "eval": ("eval",),
    "attention": (),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medivlad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="stage", metavar="stage", parser_class=_Parser)
    sub.required = True
    helps = {
        "synth": "write a synthetic dataset",
        "pretrain": "self-distillation pretraining on unlabeled frames",
        "finetune": "supervised finetuning on labeled frames",
        "videocls": "train the video-level aggregator",
        "eval": "evaluate a checkpoint on a split",
        "attention": "export attention maps for one frame",
    }
    for stage in STAGES:
        p = sub.add_parser(stage, help=helps[stage])
        p.add_argument("--profile", choices=sorted(PROFILES), default=None)
        p.add_argument("--seed", type=int, default=None, help="default: $MEDIVLAD_SEED, else 0")
        p.add_argument("--config", type=Path, default=None, help="JSON file of dotted keys")
        p.add_argument("-v", "--verbose", action="store_true")
        if stage == "synth":
            p.add_argument("--out", type=Path, required=True)
        else:
            p.add_argument("--checkpoint", type=Path, default=None,
                           required=stage in ("eval", "attention", "videocls"))
        if stage in ("pretrain", "finetune", "videocls", "eval"):
            p.add_argument("--data", type=Path, default=None)
            p.add_argument("--fold", type=int, default=0, help="held-out fold index (test split)")
            p.add_argument("--folds", type=int, default=2)
        if stage in ("pretrain", "finetune", "videocls"):
            p.add_argument("--out", type=Path, required=True, help="output checkpoint")
        if stage == "finetune":
            p.add_argument("--scratch", action="store_true", help="start from random weights")
        if stage == "videocls":
            p.add_argument("--features", type=Path, default=None, help="read frame features from a file")
            p.add_argument("--features-out", type=Path, default=None, help="also export training features")
        if stage == "eval":
            p.add_argument("--features", type=Path, default=None)
            p.add_argument("--report", type=Path, default=Path("report"), help="output directory")
        if stage == "attention":
            p.add_argument("--frame", type=Path, required=True, help="image file")
            p.add_argument("--out", type=Path, required=True, help="output directory")
            p.add_argument("--block", type=int, default=-1)
            p.add_argument("--format", choices=("png", "pgm"), default="png")
        for section in SECTIONS[stage]:
            for name, like in _fields(section).items():
                metavar = "LIST" if isinstance(like, tuple) else type(like).__name__.upper()
                p.add_argument(f"--{section}.{name}", dest=f"{section}.{name}", default=None,
                               metavar=metavar)
    return parser


def _seed(args, file_values) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in file_values:
        return int(file_values["seed"])
    env = os.environ.get("MEDIVLAD_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MEDIVLAD_SEED must be an integer, got {env!r}") from None
    return 0


def _need(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required for this stage")
    return value


def _splits(man, args, seed: int) -> tuple[list[str], list[str]]:
    """(train ids, test ids): manifest split hints when present, otherwise group folds."""
    hints = {r.video_id: r.split for r in man.rows}
    if all(hints.values()):
        train = [v for v, s in hints.items() if s != "test"]
        test = [v for v, s in hints.items() if s == "test"]
        return train, test
    folds = make_folds(man, args.folds, seed)
    if not 0 <= args.fold < args.folds:
        raise UsageError(f"--fold must lie in 0..{args.folds - 1}")
    train = [v for v, f in folds.items() if f != args.fold]
    test = [v for v, f in folds.items() if f == args.fold]
    return train, test


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def _plots():
    from . import plotting
    return plotting


def cmd_synth(args, ctx):
    cfg = ctx["synth"]
    spec = SynthSpec(videos_per_class=cfg.videos_per_class, image_size=ctx["enc"].image_size, k=cfg.k,
                     noise=cfg.noise, n_frames=cfg.n_frames, sources=cfg.sources,
                     patients_per_source=cfg.patients_per_source)
    ds = synth_dataset(spec, ctx["seed"])
    write_dataset(ds, args.out, ctx["seed"], cfg.labeled_per_video)
    print(f"wrote {len(ds)} videos to {args.out}")


def cmd_pretrain(args, ctx):
    man = load_manifest(_need(args.data, "--data"))
    train, _ = _splits(man, args, ctx["seed"])
    frames = load_unlabeled_frames(man, ctx["enc"].image_size, train)
    loss_csv = _sidecar(args.out, ".loss.csv")
    ckpt = pretrain(frames, ctx["pretrain"], ctx["enc"], ctx["seed"], loss_csv)
    ckpt.meta["train_videos"] = train
    save_checkpoint(ckpt, args.out)
    _plots().plot_loss(loss_csv, _sidecar(args.out, ".loss.png"), "pretraining loss")
    print(f"pretrained on {len(frames)} frames -> {args.out}")


def cmd_finetune(args, ctx):
    man = load_manifest(_need(args.data, "--data"))
    train, _ = _splits(man, args, ctx["seed"])
    frames, labels, _ = load_labeled_frames(man, ctx["enc"].image_size, train)
    if args.scratch:
        base = init_checkpoint(ctx["enc"], ctx["seed"])
    else:
        base = load_checkpoint(_need(args.checkpoint, "--checkpoint (or --scratch)"),
                               encoder=ctx["enc"].to_dict())
    loss_csv = _sidecar(args.out, ".loss.csv")
    ckpt = finetune(base, frames, labels, ctx["finetune"], ctx["seed"], loss_csv)
    save_checkpoint(ckpt, args.out)
    _plots().plot_loss(loss_csv, _sidecar(args.out, ".loss.png"), "finetuning loss")
    print(f"finetuned on {len(frames)} labeled frames -> {args.out}")


def _video_set(man, ids, ckpt, image_size) -> ag.VideoFeatures:
    predictor = predictor_from_checkpoint(ckpt)
    videos, labels, kept = [], [], []
    for vid in ids:
        sample = load_video(man, man.by_id(vid), image_size)
        if sample.label is None:
            continue
        videos.append(sample.frames)
        labels.append(sample.label)
        kept.append(vid)
    if not videos:
        raise ManifestError("no labeled videos in the selected split")
    feats, probs = ag.video_features(predictor, np.stack(videos))
    return ag.VideoFeatures(feats, np.asarray(labels), probs, kept)


def cmd_videocls(args, ctx):
    cfg = ctx["videocls"]
    ckpt = load_checkpoint(args.checkpoint)
    if args.features is not None:
        vf = ag.VideoFeatures.from_checkpoint(load_checkpoint(args.features))
    else:
        man = load_manifest(_need(args.data, "--data (or --features)"))
        train, _ = _splits(man, args, ctx["seed"])
        vf = _video_set(man, train, ckpt, EncoderConfig(**ckpt.encoder).image_size)
    if args.features_out is not None:
        save_checkpoint(vf.to_checkpoint(ckpt.profile, ckpt.encoder), args.features_out)
    if cfg.mode == "globmax":
        out = ckpt.copy()
        out.drop("aggregator")
        out.add_tag("videocls")
        out.meta["videocls"] = ag.json_safe(dataclasses.asdict(cfg))
        preds = ag.globmax_predict(_need(vf.frame_probs, "frame probabilities"))
        print(f"globmax train accuracy {100 * np.mean(preds == vf.labels):.2f}%")
    else:
        loss_csv = _sidecar(args.out, ".loss.csv")
        model, out = ag.train_videocls(vf.features, vf.labels, cfg, ctx["seed"], ckpt, loss_csv)
        _plots().plot_loss(loss_csv, _sidecar(args.out, ".loss.png"), f"video classifier ({cfg.mode})")
    save_checkpoint(out, args.out)
    print(f"video classifier ({cfg.mode}) on {len(vf.labels)} videos -> {args.out}")


def _pick_method(ckpt, requested: str) -> str:
    if requested != "auto":
        return requested
    if "videocls" in ckpt.tags:
        return "video"
    if ckpt.subset("classifier"):
        return "finetuned"
    return "knn"


def cmd_eval(args, ctx):
    cfg = ctx["eval"]
    ckpt = load_checkpoint(args.checkpoint)
    method = _pick_method(ckpt, cfg.method)
    if method not in ("knn", "linear", "finetuned", "video"):
        raise UsageError(f"unknown eval method {method!r}")
    if cfg.split not in ("train", "test"):
        raise UsageError("eval.split must be train or test")
    report_dir = args.report
    extra = {}
    if method == "video":
        if args.features is not None:
            vf = ag.VideoFeatures.from_checkpoint(load_checkpoint(args.features))
            split = f"features:{args.features}"
        else:
            man = load_manifest(_need(args.data, "--data (or --features)"))
            train, test = _splits(man, args, ctx["seed"])
            ids = test if cfg.split == "test" else train
            vf = _video_set(man, ids, ckpt, EncoderConfig(**ckpt.encoder).image_size)
            split = f"{cfg.split} (fold {args.fold} of {args.folds})"
        mode = ckpt.meta.get("videocls", {}).get("mode", "dual")
        if mode == "globmax":
            probs = np.stack([ag.globmax_baseline(p)[0] for p in vf.frame_probs])
            report = build_report(vf.labels, probs, ag.globmax_predict(vf.frame_probs), split, "globmax")
        else:
            model = ag.video_model_from_checkpoint(ckpt)
            with_weights = model.mode == "dual"
            from . import numerics as nx
            with nx.no_grad():
                emb, w = model.embed(vf.features)
                probs = nx.softmax(model.classifier(emb), axis=-1).data
            report = build_report(vf.labels, probs, split=split, provenance=mode)
            if with_weights:
                _plots().plot_video_weights(w.data, vf.labels, report_dir / "frame_weights.png")
    else:
        man = load_manifest(_need(args.data, "--data"))
        train, test = _splits(man, args, ctx["seed"])
        size = EncoderConfig(**ckpt.encoder).image_size
        split = f"{cfg.split} (fold {args.fold} of {args.folds})"
        te_x, te_y, _ = load_labeled_frames(man, size, test if cfg.split == "test" else train)
        if len(te_y) == 0:
            raise ManifestError("no labeled frames in the evaluation split")
        if method == "finetuned":
            model = predictor_from_checkpoint(ckpt)
            report = build_report(te_y, predict_frame(model, te_x), split=split, provenance="finetuned")
        else:
            tr_x, tr_y, _ = load_labeled_frames(man, size, train)
            if ckpt.subset("classifier"):
                backbone = predictor_from_checkpoint(ckpt)
            else:
                backbone = load_encoder(ckpt)
            a, b = backbone.features(tr_x), backbone.features(te_x)
            if method == "knn":
                report = knn_eval(a, tr_y, b, te_y, cfg.k, split)
            else:
                report = linear_probe(a, tr_y, b, te_y, ProbeConfig(cfg.probe_steps, cfg.probe_lr),
                                      ctx["seed"], split)
            extra["feature_network"] = ckpt.meta.get("feature_network", "teacher")
    report_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(report_dir / "report.json")
    report.to_csv(report_dir / "report.csv")
    _plots().plot_confusion(report.confusion, report_dir / "confusion.png", f"{report.provenance} confusion")
    _write_json(report_dir / "provenance.json", {"checkpoint": str(args.checkpoint), "method": method,
                                                 "tags": ckpt.tags, "seed": ctx["seed"], **extra})
    auc = "n/a" if report.macro_auc is None else f"{report.macro_auc:.4f}"
    print(f"{method}: accuracy {report.accuracy:.2f}% macro AUC {auc} -> {report_dir}")


def cmd_attention(args, ctx):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = EncoderConfig(**ckpt.encoder)
    frame = preprocess_frame(args.frame, cfg.image_size)
    paths = export_attention(frame, ckpt, args.out, args.block, args.format)
    from .encoder import attention_map
    amap = attention_map(predictor_from_checkpoint(ckpt).backbone, frame, args.block)
    maps = [upsample_nearest(h, cfg.image_size) for h in amap.patches]
    maps.append(upsample_nearest(amap.mean, cfg.image_size))
    _plots().plot_attention(frame, maps, Path(args.out) / "attention_overlay.png", args.frame.name)
    print(f"wrote {len(paths)} attention maps to {args.out}")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "videocls": cmd_videocls,
    "eval": cmd_eval,
    "attention": cmd_attention,
}

RUNTIME_ERRORS = (OSError, CheckpointError, ManifestError, FrameDecodeError, TrainingError, EvalError,
                  ValueError, KeyError)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config(args.config) if args.config else {}
        profile = args.profile or file_values.get("profile", "tiny")
        if profile not in PROFILES:
            raise UsageError(f"unknown profile {profile!r}")
        flags = {k: v for k, v in vars(args).items() if "." in k}
        allowed = set(SECTIONS[args.stage]) | {"seed", "profile"}
        for key in file_values:
            head, _, name = key.partition(".")
            if head not in allowed and head not in DEFAULTS["paper"]:
                raise UsageError(f"unknown config key {key!r}")
            # one file may configure every stage, so check all sections up front
            if head in DEFAULTS["paper"] and name not in _fields(head):
                raise UsageError(f"unknown config key {key!r}")
        ctx = {"seed": _seed(args, file_values), "enc": EncoderConfig.from_profile(profile)}
        for section in SECTIONS[args.stage]:
            ctx[section] = resolve(section, profile, file_values, flags)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"medivlad: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"medivlad: error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.stage](args, ctx)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"medivlad: error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"medivlad: error: {msg}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
