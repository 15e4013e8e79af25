"""
CrossFundus Cross-Fundus Attention
Projection blocks, CF/IF cross attention, stream fusion, fused classifier and MLP heads
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

import layers
import tensor as T
from errors import ConfigError, ShapeError
from layers import ParamDict
from tensor import Tensor

logger = logging.getLogger(__name__)

FUSIONS = ("max", "mean", "concat")
MODES = ("dual_cross", "cfp_cross_only", "ifp_cross_only", "self_attention", "feature_pool", "none")


@dataclass
class CfaConfig:
    """Width, heads, fusion and wiring of the CFA module"""
    L: int = 8
    d: Optional[int] = None
    n_heads: int = 2
    fusion: str = "max"
    mode: str = "dual_cross"
    use_projection: bool = True
    ffn_ratio: int = 2

    def __post_init__(self):
        if self.d is None:
            self.d = self.L

    def validate(self) -> "CfaConfig":
        if self.L < 1:
            raise ConfigError(f"cfa.L must be >= 1, got {self.L}", "cfa.L")
        if self.n_heads < 1 or self.d < 1 or self.d % self.n_heads:
            raise ConfigError(f"cfa.d={self.d} must be a positive multiple of cfa.n_heads={self.n_heads}",
                              "cfa.n_heads")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"cfa.fusion must be one of {list(FUSIONS)}, got {self.fusion!r}", "cfa.fusion")
        if self.mode not in MODES:
            raise ConfigError(f"cfa.mode must be one of {list(MODES)}, got {self.mode!r}", "cfa.mode")
        if self.ffn_ratio < 1:
            raise ConfigError(f"cfa.ffn_ratio must be >= 1, got {self.ffn_ratio}", "cfa.ffn_ratio")
        return self

    @property
    def scale(self) -> float:
        return layers.attention_scale(self.d, self.n_heads)

    def width(self, c_e: int) -> int:
        """Token width inside the attention blocks"""
        return self.L if self.use_projection else c_e

    def fused_dim(self, c_e: int, n_streams: int) -> int:
        w = self.width(c_e)
        return 2 * w if self.fusion == "concat" and n_streams == 2 else w

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class StreamFeatures:
    F: Tensor
    F_proj: Tensor


@dataclass
class CfaOutput:
    logits_fused: Optional[Tensor]
    z_cf: Optional[Tensor]
    z_if: Optional[Tensor]
    cross_attn_maps: Dict[str, np.ndarray] = field(default_factory=dict)
    features: Dict[str, StreamFeatures] = field(default_factory=dict)


def _attention_directions(cfg: CfaConfig, streams: Tuple[str, ...]) -> Tuple[str, ...]:
    if cfg.mode == "dual_cross":
        return ("cf", "if")
    if cfg.mode == "cfp_cross_only":
        return ("cf",)
    if cfg.mode == "ifp_cross_only":
        return ("if",)
    if cfg.mode == "self_attention":
        return tuple(streams)
    return ()


def check_streams(cfg: CfaConfig, streams: Tuple[str, ...]) -> None:
    if cfg.mode in ("dual_cross", "cfp_cross_only", "ifp_cross_only") and set(streams) != {"cf", "if"}:
        raise ConfigError(f"cfa.mode={cfg.mode} needs both streams, got {list(streams)}", "cfa.mode")


def init_cfa_params(params: ParamDict, rng: np.random.Generator, cfg: CfaConfig, c_e: int, k: int,
                    streams: Tuple[str, ...]) -> None:
    """Parameters for the CFA module; the two attention directions never share weights"""
    check_streams(cfg, streams)
    if cfg.mode == "none":
        return
    width = cfg.width(c_e)
    if cfg.use_projection:
        for s in streams:
            layers.new_linear(params, rng, f"cfa.proj_{s}.linear", c_e, cfg.L)
            layers.new_layer_norm(params, f"cfa.proj_{s}.norm", cfg.L)
    for s in _attention_directions(cfg, streams):
        name = f"cfa.{s}_attn"
        layers.new_attention(params, rng, f"{name}.mha", width, cfg.d, bias=False)
        layers.new_layer_norm(params, f"{name}.norm1", width)
        layers.new_feed_forward(params, rng, f"{name}.ffn", width, width * cfg.ffn_ratio)
        layers.new_layer_norm(params, f"{name}.norm2", width)
    n_fused = 1 if cfg.mode in ("cfp_cross_only", "ifp_cross_only") else len(streams)
    dim = cfg.fused_dim(c_e, n_fused)
    layers.new_layer_norm(params, "cfa.classifier.norm", dim)
    layers.new_linear(params, rng, "cfa.classifier.linear", dim, k)


def init_head_params(params: ParamDict, rng: np.random.Generator, c_e: int, k: int, stream: str) -> None:
    layers.new_linear(params, rng, f"head_{stream}.fc1", c_e, c_e)
    layers.new_linear(params, rng, f"head_{stream}.fc2", c_e, k)


def linear_project(F: Tensor, params: ParamDict, prefix: str) -> Tensor:
    """F' = ReLU(LN(F W + b))"""
    return T.relu(layers.norm(layers.linear(F, params, f"{prefix}.linear"), params, f"{prefix}.norm"))


def cross_attention(q_src: Tensor, kv_src: Tensor, params: ParamDict, prefix: str,
                    n_heads: int) -> Tuple[Tensor, np.ndarray]:
    """Queries from q_src, keys/values from kv_src; residual + LN, then FFN + residual + LN.

    Passing the same tensor twice gives the self-attention variant.
    """
    h, weights = layers.multi_head_attention(q_src, kv_src, params, f"{prefix}.mha", n_heads)
    x = layers.norm(T.add(q_src, h), params, f"{prefix}.norm1")
    y = layers.norm(T.add(x, layers.feed_forward(x, params, f"{prefix}.ffn")), params, f"{prefix}.norm2")
    return y, weights


def pool_tokens(z: Tensor) -> Tensor:
    """Mean over the token axis: [B, N, L] -> [B, L]"""
    if z.ndim != 3 or z.shape[1] == 0:
        raise ShapeError("pool_tokens", z.shape, detail="need a non-empty token axis")
    return T.mean_axis(z, 1)


def fuse_streams(z_cf: Optional[Tensor], z_if: Optional[Tensor], fusion: str,
                 mode: Optional[str] = None) -> Tensor:
    """Pool each present stream over its tokens, then combine across streams"""
    if mode == "cfp_cross_only":
        z_if = None
    elif mode == "ifp_cross_only":
        z_cf = None
    present = [z for z in (z_cf, z_if) if z is not None]
    if not present:
        raise ShapeError("fuse_streams", (0,), detail="no stream to fuse")
    pooled = [pool_tokens(z) for z in present]
    if len(pooled) == 1:
        return pooled[0]
    a, b = pooled
    if a.shape != b.shape:
        raise ShapeError("fuse_streams", a.shape, b.shape)
    if fusion == "max":
        return T.maximum(a, b)
    if fusion == "mean":
        return T.scale(T.add(a, b), 0.5)
    if fusion == "concat":
        return T.concat([a, b], axis=-1)
    raise ValueError(f"unknown fusion {fusion!r}")


def classify_fused(fused: Tensor, params: ParamDict, k: int) -> Tensor:
    """LN then linear to k logits"""
    expected = params["cfa.classifier.linear.weight"].shape[0]
    if fused.shape[-1] != expected:
        raise ShapeError("classify_fused", fused.shape, (expected,))
    logits = layers.linear(layers.norm(fused, params, "cfa.classifier.norm"), params, "cfa.classifier.linear")
    if logits.shape[-1] != k:
        raise ShapeError("classify_fused", logits.shape, (k,))
    return logits


def mlp_head(cls_feat: Tensor, params: ParamDict, stream: str, k: Optional[int] = None) -> Tensor:
    """C_e -> C_e, GELU, C_e -> k"""
    if cls_feat.shape[-1] != params[f"head_{stream}.fc1.weight"].shape[0]:
        raise ShapeError("mlp_head", cls_feat.shape, params[f"head_{stream}.fc1.weight"].shape)
    logits = layers.feed_forward(cls_feat, params, f"head_{stream}", kind="gelu")
    if k is not None and logits.shape[-1] != k:
        raise ShapeError("mlp_head", logits.shape, (k,))
    return logits


def cfa_forward(patch_cf: Optional[Tensor], patch_if: Optional[Tensor], cfg: CfaConfig,
                params: ParamDict, k: int) -> CfaOutput:
    """Run the configured CFA wiring over [B, N, C_e] patch features"""
    streams = tuple(s for s, f in (("cf", patch_cf), ("if", patch_if)) if f is not None)
    check_streams(cfg, streams)
    if cfg.mode == "none":
        return CfaOutput(logits_fused=None, z_cf=None, z_if=None)

    projected: Dict[str, Tensor] = {}
    features: Dict[str, StreamFeatures] = {}
    for s, F in (("cf", patch_cf), ("if", patch_if)):
        if F is not None:
            projected[s] = linear_project(F, params, f"cfa.proj_{s}") if cfg.use_projection else F
            features[s] = StreamFeatures(F=F, F_proj=projected[s])

    z: Dict[str, Optional[Tensor]] = {"cf": None, "if": None}
    maps: Dict[str, np.ndarray] = {}
    other = {"cf": "if", "if": "cf"}
    if cfg.mode == "feature_pool":
        z.update(projected)
    elif cfg.mode == "self_attention":
        for s, F in projected.items():
            z[s], maps[f"{s}_self"] = cross_attention(F, F, params, f"cfa.{s}_attn", cfg.n_heads)
    else:
        for s in _attention_directions(cfg, streams):
            z[s], maps[f"{s}_cross"] = cross_attention(projected[s], projected[other[s]], params,
                                                       f"cfa.{s}_attn", cfg.n_heads)

    fused = fuse_streams(z["cf"], z["if"], cfg.fusion, cfg.mode)
    logits = classify_fused(fused, params, k)
    return CfaOutput(logits_fused=logits, z_cf=z["cf"], z_if=z["if"], cross_attn_maps=maps, features=features)
