"""Vision-transformer frame encoder with a projection head and attention maps."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import numerics as nx
from .numerics import Linear, LayerNorm, Module, Parameter, ShapeError, Tensor
from .data.preprocess import bilinear_matrix

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    embed_dim: int = 96
    heads: int = 4
    mlp_ratio: int = 4
    head_hidden_dim: int = 512
    head_bottleneck_dim: int = 64
    head_output_dim: int = 256
    in_chans: int = 1
    profile: str = "tiny"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.in_chans not in (1, 3):
            raise ValueError("in_chans must be 1 or 3")

    @property
    def feature_dim(self) -> int:
        return self.embed_dim

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_profile(cls, name: str, **overrides) -> "EncoderConfig":
        try:
            base = PROFILES[name]
        except KeyError:
            raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
        return replace(base, **overrides) if overrides else base


# ViT-S/8 and a desk-scale reduction. Head widths follow the 2048/256 recipe,
# scaled by embed_dim / 384 for the tiny profile.
PROFILES = {
    "paper": EncoderConfig(image_size=224, patch_size=8, depth=12, embed_dim=384, heads=6,
                           head_hidden_dim=2048, head_bottleneck_dim=256, head_output_dim=4096,
                           profile="paper"),
    "tiny": EncoderConfig(image_size=64, patch_size=8, depth=4, embed_dim=96, heads=4,
                          head_hidden_dim=512, head_bottleneck_dim=64, head_output_dim=256,
                          profile="tiny"),
}


def patchify(frames: Tensor, patch_size: int) -> Tensor:
    """(B, C, H, W) -> (B, (H/p)*(W/p), C*p*p), row-major over the patch grid."""
    b, c, h, w = frames.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"frame {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = frames.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch_size * patch_size)


def _as_frames(frames, cfg: EncoderConfig) -> Tensor:
    t = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
    if t.ndim == 2:
        t = t.reshape(1, 1, *t.shape)
    elif t.ndim == 3:
        t = t.reshape(t.shape[0], 1, t.shape[1], t.shape[2])
    if t.ndim != 4:
        raise ShapeError("encode", t.shape, (cfg.in_chans, cfg.image_size, cfg.image_size))
    if t.shape[1] == 1 and cfg.in_chans == 3:
        t = nx.concat([t, t, t], axis=1)
    if t.shape[1] != cfg.in_chans:
        raise ShapeError("encode", t.shape, (cfg.in_chans, cfg.image_size, cfg.image_size))
    return t


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor, keep_attn: bool = False):
        b, t, d = x.shape
        h = self.heads
        dh = d // h

        def split(y):
            return y.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        attn = nx.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.proj(out), (attn.data if keep_attn else None)


class Block(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def forward(self, x: Tensor, keep_attn: bool = False):
        y, attn = self.attn(self.norm1(x), keep_attn)
        x = x + y
        x = x + self.fc2(nx.gelu(self.fc1(self.norm2(x))))
        return x, attn


class ProjectionHead(Module):
    """D -> hidden -> hidden -> bottleneck (L2-normalized) -> K, GELU between.

    The last map has no bias and unit-norm columns, so each logit is the
    cosine between the bottleneck vector and one of K prototypes.
    """

    def __init__(self, d_in: int, hidden: int, bottleneck: int, k: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, bottleneck, rng)
        self.last = Linear(bottleneck, k, rng, bias=False)

    def forward(self, feat: Tensor) -> Tensor:
        x = nx.gelu(self.fc1(feat))
        x = nx.gelu(self.fc2(x))
        x = nx.l2_normalize(self.fc3(x), axis=-1)
        return x @ nx.l2_normalize(self.last.weight, axis=0)


class VisionTransformer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(cfg.in_chans * cfg.patch_size ** 2, d, rng)
        self.cls_token = Parameter(nx.trunc_normal(rng, (1, 1, d)))
        self.pos_embed = Parameter(nx.trunc_normal(rng, (1, cfg.num_patches + 1, d)))
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)

    def _pos_for(self, grid: int) -> Tensor:
        if grid == self.cfg.grid:
            return self.pos_embed
        # bilinear resample of the patch-position grid for smaller crops
        r = bilinear_matrix(self.cfg.grid, grid)
        m = np.kron(r, r).astype(self.pos_embed.data.dtype)
        cls_pos = self.pos_embed[:, :1]
        patch_pos = Tensor(m, dtype=m.dtype) @ self.pos_embed[:, 1:]
        return nx.concat([cls_pos, patch_pos], axis=1)

    def tokens(self, frames) -> Tensor:
        x = _as_frames(frames, self.cfg)
        side = x.shape[-1]
        if x.shape[-2] != side or side > self.cfg.image_size:
            raise ShapeError("encode", x.shape, (self.cfg.in_chans, self.cfg.image_size, self.cfg.image_size))
        x = (x - PIXEL_MEAN) * (1.0 / PIXEL_STD)
        patches = self.patch_embed(patchify(x, self.cfg.patch_size))
        b = patches.shape[0]
        cls = self.cls_token + Tensor(np.zeros((b, 1, 1), dtype=patches.dtype))
        seq = nx.concat([cls, patches], axis=1)
        return seq + self._pos_for(side // self.cfg.patch_size)

    def forward(self, frames, keep_attn: bool = False):
        """Frames -> (B, D) CLS features (final layer norm), plus per-block attention."""
        x = self.tokens(frames)
        maps = []
        for blk in self.blocks:
            x, attn = blk(x, keep_attn)
            maps.append(attn)
        feat = self.norm(x)[:, 0]
        return (feat, maps) if keep_attn else feat


class Encoder(Module):
    """Backbone plus projection head; one instance per student or teacher."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone = VisionTransformer(cfg, rng)
        self.head = ProjectionHead(cfg.embed_dim, cfg.head_hidden_dim, cfg.head_bottleneck_dim,
                                   cfg.head_output_dim, rng)

    def forward(self, frames):
        feat = self.backbone(frames)
        return feat, self.head(feat)

    encode = forward

    def features(self, frames, batch_size: int = 128) -> np.ndarray:
        """Inference-only backbone features for a stack of frames (numpy in, numpy out)."""
        return extract_features(self.backbone, frames, batch_size)

    def attention_map(self, frame, block_index: int = -1) -> "AttentionMap":
        return attention_map(self.backbone, frame, block_index)


@dataclass
class AttentionMap:
    patches: np.ndarray  # (heads, G, G), CLS-to-patch attention
    cls: np.ndarray      # (heads,), CLS self-attention mass

    @property
    def mean(self) -> np.ndarray:
        return self.patches.mean(axis=0)


def attention_map(backbone: VisionTransformer, frame, block_index: int = -1) -> AttentionMap:
    depth = backbone.cfg.depth
    idx = block_index + depth if block_index < 0 else block_index
    if not 0 <= idx < depth:
        raise IndexError(f"block_index {block_index} out of range for depth {depth}")
    frame = np.asarray(frame.data if isinstance(frame, Tensor) else frame)
    if frame.shape[-2:] != (backbone.cfg.image_size, backbone.cfg.image_size):
        raise ShapeError("attention_map", frame.shape, (backbone.cfg.image_size,) * 2)
    with nx.no_grad():
        x = backbone.tokens(frame.reshape(1, *frame.shape[-2:]))
        for i, blk in enumerate(backbone.blocks[: idx + 1]):
            x, attn = blk(x, keep_attn=(i == idx))
    row = attn[0, :, 0, :].astype(np.float64)  # (heads, T)
    g = backbone.cfg.grid
    return AttentionMap(patches=row[:, 1:].reshape(-1, g, g), cls=row[:, 0])


def extract_features(backbone: VisionTransformer, frames, batch_size: int = 128) -> np.ndarray:
    frames = np.asarray(frames, dtype=nx.default_dtype())
    single = frames.ndim == 2
    if single:
        frames = frames[None]
    out = []
    with nx.no_grad():
        for start in range(0, len(frames), batch_size):
            out.append(backbone(frames[start:start + batch_size]).data)
    feats = np.concatenate(out, axis=0) if out else np.zeros((0, backbone.cfg.embed_dim), np.float32)
    return feats[0] if single else feats


def build_encoder(cfg: EncoderConfig | str = "tiny", seed: int | np.random.Generator = 0) -> Encoder:
    cfg = EncoderConfig.from_profile(cfg) if isinstance(cfg, str) else cfg
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Encoder(cfg, rng)
