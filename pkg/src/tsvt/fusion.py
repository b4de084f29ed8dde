"""Class-token fusion of the two stream encodings and the classifier head.

Each stream's token matrix is mean-pooled to a single vector, projected
by a shared matrix, stacked behind a learnable class token, and offset by
a 3-row positional table. A global multi-head-attention encoder mixes the
three positions and the classifier reads the class-token row.
"""

from __future__ import annotations


from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, StreamBackbone, attention, uniform_init
from .tensor import ShapeMismatchError, Tensor
from .video import ConfigError

N_STREAMS = 2  # RGB + flow


class FusionInput:
    """Learnable class token, shared stream projection, positional table."""

    def __init__(self, dim: int, rng: np.random.Generator, prefix: str = "fusion"):
        self.prefix = prefix
        self.x_class = Tensor(rng.normal(0.0, 0.02, size=(1, dim)), requires_grad=True)
        self.e = Tensor(uniform_init(rng, (dim, dim), dim), requires_grad=True)
        self.e_pos = Tensor(
            rng.normal(0.0, 0.02, size=(N_STREAMS + 1, dim)), requires_grad=True
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            f"{self.prefix}.x_class": self.x_class,
            f"{self.prefix}.e": self.e,
            f"{self.prefix}.e_pos": self.e_pos,
        }


def build_fusion_input(o_r: Tensor, o_f: Tensor, params: FusionInput) -> Tensor:
    """[class; pooled(O_r) E; pooled(O_f) E] + E_pos, one 3-row sequence per sample."""
    if o_r.shape != o_f.shape:
        raise ShapeMismatchError(f"stream shapes differ: {o_r.shape} vs {o_f.shape}")
    r = T.matmul(T.mean(o_r, axis=-2, keepdims=True), params.e)
    f = T.matmul(T.mean(o_f, axis=-2, keepdims=True), params.e)
    if o_r.ndim == 3:
        b = o_r.shape[0]
        cls = T.add(params.x_class, Tensor(np.zeros((b, 1, r.shape[-1]))))
    else:
        cls = params.x_class
    return T.add(T.concat([cls, r, f], axis=-2), params.e_pos)


class MHAParams:
    """Per-head query/key/value projections plus the output projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, prefix: str):
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.d_head = dim // heads
        self.prefix = prefix
        self.wq = [Tensor(uniform_init(rng, (dim, self.d_head), dim), requires_grad=True)
                   for _ in range(heads)]
        self.wk = [Tensor(uniform_init(rng, (dim, self.d_head), dim), requires_grad=True)
                   for _ in range(heads)]
        self.wv = [Tensor(uniform_init(rng, (dim, self.d_head), dim), requires_grad=True)
                   for _ in range(heads)]
        self.wo = Tensor(uniform_init(rng, (dim, dim), dim), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"{self.prefix}.wo": self.wo}
        for i in range(self.heads):
            out[f"{self.prefix}.wq{i}"] = self.wq[i]
            out[f"{self.prefix}.wk{i}"] = self.wk[i]
            out[f"{self.prefix}.wv{i}"] = self.wv[i]
        return out


def mha(x: Tensor, params: MHAParams) -> Tensor:
    """Self-attention: per-head projections, concatenation, output projection."""
    if x.shape[-1] != params.dim:
        raise ShapeMismatchError(f"mha: input dim {x.shape} vs params dim {params.dim}")
    heads = [
        attention(T.matmul(x, params.wq[i]), T.matmul(x, params.wk[i]),
                  T.matmul(x, params.wv[i]))
        for i in range(params.heads)
    ]
    return T.matmul(T.concat(heads, axis=-1), params.wo)


class EncoderLayer:
    """Pre-norm residual block: x + MHA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float,
                 rng: np.random.Generator, prefix: str):
        self.mha_params = MHAParams(dim, heads, rng, f"{prefix}.mha")
        self.dropout = dropout
        self.prefix = prefix
        self.ln1_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(dim), requires_grad=True)
        self.ln2_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(dim), requires_grad=True)
        self.w1 = Tensor(uniform_init(rng, (dim, ffn_dim), dim), requires_grad=True)
        self.b1 = Tensor(np.zeros(ffn_dim), requires_grad=True)
        self.w2 = Tensor(uniform_init(rng, (ffn_dim, dim), ffn_dim), requires_grad=True)
        self.b2 = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        out = self.mha_params.parameters()
        for n in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
            out[f"{self.prefix}.{n}"] = getattr(self, n)
        return out

    def forward(self, x: Tensor, rng: np.random.Generator, training: bool) -> Tensor:
        a = mha(T.layer_norm(x, self.ln1_g, self.ln1_b), self.mha_params)
        x = T.add(x, T.dropout(a, self.dropout, rng, training))
        h = T.layer_norm(x, self.ln2_g, self.ln2_b)
        ff = T.linear(T.gelu(T.linear(h, self.w1, self.b1)), self.w2, self.b2)
        return T.add(x, T.dropout(ff, self.dropout, rng, training))


class ClassifierHead:
    """Normalization, dropout, and the final linear classifier over the class token."""

    def __init__(self, dim: int, num_classes: int, dropout: float,
                 rng: np.random.Generator, prefix: str = "head"):
        if num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {num_classes}")
        self.dropout = dropout
        self.prefix = prefix
        self.ln_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln_b = Tensor(np.zeros(dim), requires_grad=True)
        self.w = Tensor(uniform_init(rng, (dim, num_classes), dim), requires_grad=True)
        self.b = Tensor(np.zeros(num_classes), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.{n}": getattr(self, n) for n in ("ln_g", "ln_b", "w", "b")}

    def forward(self, encoded: Tensor, rng: np.random.Generator, training: bool) -> Tensor:
        cls = T.take_token(encoded, 0)
        single = cls.ndim == 1
        if single:
            cls = T.reshape(cls, (1, cls.shape[0]))
        h = T.layer_norm(cls, self.ln_g, self.ln_b)
        h = T.dropout(h, self.dropout, rng, training)
        logits = T.linear(h, self.w, self.b)
        return T.reshape(logits, (logits.shape[-1],)) if single else logits


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 8
    fusion_heads: int = 8
    fusion_ffn_dim: int = 1024
    encoder_depth: int = 1
    encoder_dropout: float = 0.1
    head_dropout: float = 0.5

    def to_dict(self) -> dict:
        bb = self.backbone
        return {
            "backbone": {
                "frames": bb.frames, "height": bb.height, "width": bb.width,
                "channels": bb.channels, "patch": list(bb.patch),
                "embed_dim": bb.embed_dim, "heads": bb.heads,
                "pool_strides": list(bb.pool_strides), "ffn_dim": bb.ffn_dim,
                "dropout": bb.dropout, "out_dim": bb.out_dim,
            },
            "num_classes": self.num_classes,
            "fusion_heads": self.fusion_heads,
            "fusion_ffn_dim": self.fusion_ffn_dim,
            "encoder_depth": self.encoder_depth,
            "encoder_dropout": self.encoder_dropout,
            "head_dropout": self.head_dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = d.get("backbone", {})
        bb = BackboneConfig(
            **{**bb, "patch": tuple(bb.get("patch", (2, 4, 4))),
               "pool_strides": tuple(bb.get("pool_strides", (2, 2, 2)))}
        )
        rest = {k: v for k, v in d.items() if k != "backbone"}
        return cls(backbone=bb, **rest)


STREAM_MODES = ("both", "rgb_only", "flow_only")


class TwoStreamModel:
    """Two pooled-attention backbones, class-token fusion, encoder, classifier."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dim = cfg.backbone.out_dim
        self.rgb_backbone = StreamBackbone(cfg.backbone, rng, "rgb")
        self.flow_backbone = StreamBackbone(cfg.backbone, rng, "flow")
        self.fusion = FusionInput(dim, rng)
        self.encoder = [
            EncoderLayer(dim, cfg.fusion_heads, cfg.fusion_ffn_dim,
                         cfg.encoder_dropout, rng, f"encoder{i}")
            for i in range(cfg.encoder_depth)
        ]
        self.head = ClassifierHead(dim, cfg.num_classes, cfg.head_dropout, rng)

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.rgb_backbone.parameters())
        params.update(self.flow_backbone.parameters())
        params.update(self.fusion.parameters())
        for layer in self.encoder:
            params.update(layer.parameters())
        params.update(self.head.parameters())
        return params

    def forward(self, rgb: np.ndarray, flow_rgb: np.ndarray,
                rng: np.random.Generator | None = None, training: bool = False,
                stream_mode: str = "both") -> Tensor:
        """Logits for a normalized clip batch pair."""
        if stream_mode not in STREAM_MODES:
            raise ConfigError(f"unknown stream mode {stream_mode!r}")
        rng = rng or np.random.default_rng(0)
        o_r = self.rgb_backbone.forward(rgb, rng, training)
        o_f = self.flow_backbone.forward(flow_rgb, rng, training)
        if stream_mode == "rgb_only":
            o_f = T.scale(o_f, 0.0)
        elif stream_mode == "flow_only":
            o_r = T.scale(o_r, 0.0)
        x = build_fusion_input(o_r, o_f, self.fusion)
        for layer in self.encoder:
            x = layer.forward(x, rng, training)
        return self.head.forward(x, rng, training)
