"""Per-stream transformer encoder with pooled attention.

A clip is cut into spatio-temporal patches, linearly embedded with a
learned positional table, then passed through attention blocks whose
query path is strided mean-pooled so the token sequence shrinks through
the stack. The final tokens are projected to the stream output width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .video import ConfigError


@dataclass
class BackboneConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: tuple = (2, 4, 4)  # (t_p, h_p, w_p)
    embed_dim: int = 64
    heads: int = 4
    pool_strides: tuple = (2, 2, 2)  # one block per stride
    ffn_dim: int = 128
    dropout: float = 0.1
    out_dim: int = 128

    def __post_init__(self):
        for name, total, p in (
            ("frames", self.frames, self.patch[0]),
            ("height", self.height, self.patch[1]),
            ("width", self.width, self.patch[2]),
        ):
            if total % p != 0:
                raise ConfigError(f"{name}={total} not divisible by patch extent {p}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if any(s < 1 for s in self.pool_strides):
            raise ConfigError(f"pool strides must be >= 1, got {self.pool_strides}")

    @property
    def token_count(self) -> int:
        t, h, w = self.patch
        return (self.frames // t) * (self.height // h) * (self.width // w)

    @property
    def patch_values(self) -> int:
        t, h, w = self.patch
        return t * h * w * self.channels

    @property
    def output_tokens(self) -> int:
        n = self.token_count
        for s in self.pool_strides:
            n = -(-n // s)
        return n


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    scale = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-scale, scale, size=shape)


def extract_patches(clip: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """T x H x W x C (optionally batched) to [..., L, patch_values]."""
    batched = clip.ndim == 5
    if not batched:
        clip = clip[None]
    b = clip.shape[0]
    tp, hp, wp = cfg.patch
    nt, nh, nw = cfg.frames // tp, cfg.height // hp, cfg.width // wp
    x = clip.reshape(b, nt, tp, nh, hp, nw, wp, cfg.channels)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7).reshape(b, nt * nh * nw, cfg.patch_values)
    return x if batched else x[0]


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the key axis."""
    if q.shape[-1] != k.shape[-1]:
        raise T.ShapeMismatchError(
            f"attention: query dim {q.shape} vs key dim {k.shape}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise T.ShapeMismatchError(
            f"attention: key count {k.shape} vs value count {v.shape}"
        )
    d = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(d))
    return T.matmul(T.softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, d = x.shape
    x = T.reshape(x, (*lead, L, heads, d // heads))
    perm = list(range(x.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return T.transpose(x, perm)  # [..., heads, L, d/heads]


def _merge_heads(x: Tensor) -> Tensor:
    perm = list(range(x.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    x = T.transpose(x, perm)
    *lead, L, h, dh = x.shape
    return T.reshape(x, (*lead, L, h * dh))


class PooledAttentionBlock:
    """Multi-head attention with a mean-pooled query path plus feedforward."""

    def __init__(self, cfg: BackboneConfig, stride: int, rng: np.random.Generator, prefix: str):
        d, f = cfg.embed_dim, cfg.ffn_dim
        self.stride = stride
        self.heads = cfg.heads
        self.dropout = cfg.dropout
        self.prefix = prefix

        def p(shape, fan_in):
            return Tensor(uniform_init(rng, shape, fan_in), requires_grad=True)

        self.wq = p((d, d), d)
        self.wk = p((d, d), d)
        self.wv = p((d, d), d)
        self.wo = p((d, d), d)
        self.bo = Tensor(np.zeros(d), requires_grad=True)
        self.ln1_g = Tensor(np.ones(d), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d), requires_grad=True)
        self.w1 = p((d, f), d)
        self.b1 = Tensor(np.zeros(f), requires_grad=True)
        self.w2 = p((f, d), f)
        self.b2 = Tensor(np.zeros(d), requires_grad=True)
        self.ln2_g = Tensor(np.ones(d), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        names = ("wq", "wk", "wv", "wo", "bo", "ln1_g", "ln1_b",
                 "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")
        return {f"{self.prefix}.{n}": getattr(self, n) for n in names}

    def forward(self, x: Tensor, rng: np.random.Generator, training: bool) -> Tensor:
        pooled = T.pool_tokens(x, self.stride)
        q = _split_heads(T.matmul(pooled, self.wq), self.heads)
        k = _split_heads(T.matmul(x, self.wk), self.heads)
        v = _split_heads(T.matmul(x, self.wv), self.heads)
        attn = _merge_heads(attention(q, k, v))
        attn = T.linear(attn, self.wo, self.bo)
        attn = T.dropout(attn, self.dropout, rng, training)
        y = T.layer_norm(T.add(pooled, attn), self.ln1_g, self.ln1_b)
        ff = T.linear(T.gelu(T.linear(y, self.w1, self.b1)), self.w2, self.b2)
        ff = T.dropout(ff, self.dropout, rng, training)
        return T.layer_norm(T.add(y, ff), self.ln2_g, self.ln2_b)


class StreamBackbone:
    """Patch embedding + pooled attention stack + output projection."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone"):
        self.cfg = cfg
        self.prefix = prefix
        d = cfg.embed_dim
        pv = cfg.patch_values
        self.patch_w = Tensor(uniform_init(rng, (pv, d), pv), requires_grad=True)
        self.patch_b = Tensor(np.zeros(d), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(cfg.token_count, d)), requires_grad=True)
        self.blocks = [
            PooledAttentionBlock(cfg, s, rng, f"{prefix}.block{i}")
            for i, s in enumerate(cfg.pool_strides)
        ]
        self.out_w = Tensor(uniform_init(rng, (d, cfg.out_dim), d), requires_grad=True)
        self.out_b = Tensor(np.zeros(cfg.out_dim), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        params = {
            f"{self.prefix}.patch_w": self.patch_w,
            f"{self.prefix}.patch_b": self.patch_b,
            f"{self.prefix}.pos": self.pos,
            f"{self.prefix}.out_w": self.out_w,
            f"{self.prefix}.out_b": self.out_b,
        }
        for blk in self.blocks:
            params.update(blk.parameters())
        return params

    def patchify(self, clip: np.ndarray) -> Tensor:
        raw = Tensor(extract_patches(np.asarray(clip, dtype=np.float64), self.cfg))
        return T.add(T.linear(raw, self.patch_w, self.patch_b), self.pos)

    def forward(self, clip: np.ndarray, rng: np.random.Generator, training: bool = False) -> Tensor:
        x = self.patchify(clip)
        for blk in self.blocks:
            x = blk.forward(x, rng, training)
        return T.linear(x, self.out_w, self.out_b)
