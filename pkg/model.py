"""
CrossFundus model
Dual-stream assembly: two ViT streams, their MLP heads and the CFA module
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import tensor as T
from cfa_fusion import CfaConfig, cfa_forward, check_streams, init_cfa_params, init_head_params, mlp_head
from errors import ConfigError, ShapeError
from layers import ParamDict
from tensor import Param, Tensor
from vit_encoder import StreamConfig, encode, init_stream_params

logger = logging.getLogger(__name__)

STREAMS = ("cf", "if")


@dataclass
class ModelConfig:
    """Architecture of the whole CFT"""
    cfp_stream: StreamConfig = field(default_factory=StreamConfig)
    ifp_stream: StreamConfig = field(default_factory=StreamConfig)
    cfa: CfaConfig = field(default_factory=CfaConfig)
    k: int = 5
    streams: Tuple[str, ...] = STREAMS

    def validate(self) -> "ModelConfig":
        self.cfp_stream.validate("cfp_stream")
        self.ifp_stream.validate("ifp_stream")
        self.cfa.validate()
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}", "data.k")
        if not self.streams or any(s not in STREAMS for s in self.streams) or len(set(self.streams)) != len(self.streams):
            raise ConfigError(f"streams must be a non-empty subset of {list(STREAMS)}, got {list(self.streams)}")
        check_streams(self.cfa, tuple(self.streams))
        if len(self.streams) == 2:
            a, b = self.cfp_stream, self.ifp_stream
            if (a.H, a.W, a.C_in) != (b.H, b.W, b.C_in):
                raise ConfigError("cfp_stream and ifp_stream must share image extents")
            if not self.cfa.use_projection and a.C_e != b.C_e and self.cfa.mode != "none":
                raise ConfigError("without linear projection both streams need the same C_e", "cfa.use_projection")
        return self

    def stream(self, s: str) -> StreamConfig:
        return self.cfp_stream if s == "cf" else self.ifp_stream

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cfp_stream": asdict(self.cfp_stream),
            "ifp_stream": asdict(self.ifp_stream),
            "cfa": asdict(self.cfa),
            "k": self.k,
            "streams": list(self.streams),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return cls(
            cfp_stream=StreamConfig(**data.get("cfp_stream", {})),
            ifp_stream=StreamConfig(**data.get("ifp_stream", {})),
            cfa=CfaConfig(**data.get("cfa", {})),
            k=int(data.get("k", 5)),
            streams=tuple(data.get("streams", STREAMS)),
        )


@dataclass
class ModelOutput:
    logits_cf: Optional[Tensor]
    logits_if: Optional[Tensor]
    logits_cls: Optional[Tensor]
    encoder_attn: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    cross_attn: Dict[str, np.ndarray] = field(default_factory=dict)


class CrossFundusTransformer:
    """Parameters plus the forward pass of the dual-stream classifier"""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg.validate()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params: ParamDict = {}
        for s in cfg.streams:
            sc = cfg.stream(s)
            init_stream_params(self.params, rng, sc, f"{s}.encoder")
            init_head_params(self.params, rng, sc.C_e, cfg.k, s)
        c_e = cfg.stream(cfg.streams[0]).C_e
        init_cfa_params(self.params, rng, cfg.cfa, c_e, cfg.k, tuple(cfg.streams))
        logger.debug("built model with %d parameter tensors (%d scalars)",
                     len(self.params), sum(p.data.size for p in self.params.values()))

    def parameters(self) -> List[Param]:
        return list(self.params.values())

    def group_names(self, group: str) -> List[str]:
        return [name for name in self.params if name == group or name.startswith(group + ".")]

    def forward(self, cfp: Optional[np.ndarray], ifp: Optional[np.ndarray]) -> ModelOutput:
        """[B, H, W, C] image batches -> head logits, fused logits and attention maps"""
        inputs = {"cf": cfp, "if": ifp}
        feats = {}
        out = ModelOutput(logits_cf=None, logits_if=None, logits_cls=None)
        for s in self.cfg.streams:
            if inputs[s] is None:
                raise ShapeError("forward", (0,), detail=f"stream {s} is configured but received no images")
            enc = encode(inputs[s], self.cfg.stream(s), self.params, f"{s}.encoder")
            feats[s] = enc.patch_feats
            out.encoder_attn[s] = enc.attn_maps
            logits = mlp_head(enc.cls_feat, self.params, s, self.cfg.k)
            if s == "cf":
                out.logits_cf = logits
            else:
                out.logits_if = logits
        cfa = cfa_forward(feats.get("cf"), feats.get("if"), self.cfg.cfa, self.params, self.cfg.k)
        out.logits_cls = cfa.logits_fused
        out.cross_attn = cfa.cross_attn_maps
        return out

    def infer(self, cfp: Optional[np.ndarray], ifp: Optional[np.ndarray]) -> ModelOutput:
        """Forward pass with no graph recording"""
        with T.no_record():
            return self.forward(cfp, ifp)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        unexpected = sorted(set(state) - set(self.params))
        if missing or unexpected:
            raise ShapeError("load_state_dict", (len(self.params),), (len(state),),
                             detail=f"missing={missing[:3]} unexpected={unexpected[:3]}")
        for name, value in state.items():
            self.params[name].assign(value)

    def zero_grads(self) -> None:
        T.zero_grads(self.params.values())
