"""
CrossFundus ViT stream
Patchify one modality, embed with class token and positions, run pre-norm Transformer blocks
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List

import numpy as np

import layers
import tensor as T
from errors import ConfigError, ShapeError
from layers import ParamDict
from tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class StreamConfig:
    """Geometry and width of one modality's encoder"""
    H: int = 32
    W: int = 32
    C_in: int = 1
    p: int = 8
    C_e: int = 8
    depth: int = 2
    n_heads_enc: int = 2
    mlp_ratio: int = 2

    def validate(self, name: str = "stream") -> "StreamConfig":
        for key in ("H", "W", "C_in", "p", "C_e", "n_heads_enc", "mlp_ratio"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{name}.{key} must be >= 1, got {getattr(self, key)}", f"{name}.{key}")
        if self.depth < 0:
            raise ConfigError(f"{name}.depth must be >= 0, got {self.depth}", f"{name}.depth")
        if self.H % self.p or self.W % self.p:
            raise ConfigError(f"{name}: image {self.H}x{self.W} is not divisible by patch size {self.p}", f"{name}.p")
        if self.C_e % self.n_heads_enc:
            raise ConfigError(f"{name}: C_e={self.C_e} is not divisible by n_heads_enc={self.n_heads_enc}",
                              f"{name}.n_heads_enc")
        return self

    @property
    def n_patches(self) -> int:
        return (self.H * self.W) // (self.p * self.p)

    @property
    def patch_dim(self) -> int:
        return self.p * self.p * self.C_in

    @property
    def grid(self):
        return self.H // self.p, self.W // self.p

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TokenSequence:
    """[B, N+1, C_e] tokens; position 0 is the class token"""
    tokens: Tensor
    n_patches: int


@dataclass
class EncoderOutput:
    cls_feat: Tensor
    patch_feats: Tensor
    attn_maps: List[np.ndarray] = field(default_factory=list)


def patchify(img: np.ndarray, p: int) -> np.ndarray:
    """[H, W, C] or [B, H, W, C] -> [N, p*p*C] or [B, N, p*p*C], row-major over the patch grid"""
    batched = img.ndim == 4
    x = img if batched else img[None]
    if x.ndim != 4:
        raise ShapeError("patchify", img.shape, detail="expected H x W x C")
    b, h, w, c = x.shape
    if h % p or w % p:
        raise ShapeError("patchify", img.shape, detail=f"extents not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = x.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * c)
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, p: int, h: int, w: int, c: int) -> np.ndarray:
    batched = patches.ndim == 3
    x = patches if batched else patches[None]
    b = x.shape[0]
    gh, gw = h // p, w // p
    if x.shape[1:] != (gh * gw, p * p * c):
        raise ShapeError("unpatchify", patches.shape, (gh * gw, p * p * c))
    out = x.reshape(b, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
    return out if batched else out[0]


def init_stream_params(params: ParamDict, rng: np.random.Generator, cfg: StreamConfig, prefix: str) -> None:
    layers.new_linear(params, rng, f"{prefix}.patch_embed", cfg.patch_dim, cfg.C_e)
    layers.new_embedding(params, rng, f"{prefix}.cls_token", (cfg.C_e,))
    layers.new_embedding(params, rng, f"{prefix}.pos_embed", (cfg.n_patches + 1, cfg.C_e))
    for i in range(cfg.depth):
        block = f"{prefix}.block{i}"
        layers.new_layer_norm(params, f"{block}.norm1", cfg.C_e)
        layers.new_attention(params, rng, f"{block}.attn", cfg.C_e, cfg.C_e, bias=True)
        layers.new_layer_norm(params, f"{block}.norm2", cfg.C_e)
        layers.new_feed_forward(params, rng, f"{block}.mlp", cfg.C_e, cfg.C_e * cfg.mlp_ratio)
    layers.new_layer_norm(params, f"{prefix}.norm", cfg.C_e)


def embed_tokens(patches: Tensor, cfg: StreamConfig, params: ParamDict, prefix: str) -> TokenSequence:
    """Linear patch embedding, class token prepended, learned positions added"""
    if patches.ndim != 3 or patches.shape[2] != cfg.patch_dim or patches.shape[1] != cfg.n_patches:
        raise ShapeError("embed_tokens", patches.shape, (cfg.n_patches, cfg.patch_dim))
    b = patches.shape[0]
    emb = layers.linear(patches, params, f"{prefix}.patch_embed")
    cls = T.add_bias(T.Tensor(np.zeros((b, 1, cfg.C_e), dtype=emb.dtype)), params[f"{prefix}.cls_token"])
    tokens = T.add_bias(T.concat([cls, emb], axis=1), params[f"{prefix}.pos_embed"])
    return TokenSequence(tokens=tokens, n_patches=cfg.n_patches)


def encoder_block(x: TokenSequence, params: ParamDict, prefix: str, n_heads: int):
    """x + MHA(LN(x)), then + FFN(LN(.)); returns the new sequence and the block's attention"""
    h = layers.norm(x.tokens, params, f"{prefix}.norm1")
    attn_out, weights = layers.multi_head_attention(h, h, params, f"{prefix}.attn", n_heads)
    y = T.add(x.tokens, attn_out)
    y = T.add(y, layers.feed_forward(layers.norm(y, params, f"{prefix}.norm2"), params, f"{prefix}.mlp"))
    return TokenSequence(tokens=y, n_patches=x.n_patches), weights


def encode(img: np.ndarray, cfg: StreamConfig, params: ParamDict, prefix: str) -> EncoderOutput:
    """Full stream: [B, H, W, C] images -> class feature, patch features, per-block attention"""
    if img.ndim == 3:
        img = img[None]
    if img.shape[1:] != (cfg.H, cfg.W, cfg.C_in):
        raise ShapeError("encode", img.shape[1:], (cfg.H, cfg.W, cfg.C_in))
    dtype = params[f"{prefix}.patch_embed.weight"].dtype
    patches = T.Tensor(patchify(np.asarray(img, dtype=dtype), cfg.p))
    seq = embed_tokens(patches, cfg, params, prefix)
    attn_maps = []
    for i in range(cfg.depth):
        seq, weights = encoder_block(seq, params, f"{prefix}.block{i}", cfg.n_heads_enc)
        attn_maps.append(weights)
    final = layers.norm(seq.tokens, params, f"{prefix}.norm")
    cls_feat = T.select(final, 1, 0)
    patch_feats = T.narrow(final, 1, 1, cfg.n_patches)
    return EncoderOutput(cls_feat=cls_feat, patch_feats=patch_feats, attn_maps=attn_maps)
