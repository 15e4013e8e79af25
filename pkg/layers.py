"""
Parameter construction and the small building blocks shared by the encoder and CFA
"""

import math
from typing import Dict, Optional, Tuple

import numpy as np

import tensor as T
from errors import ShapeError
from tensor import Param, Tensor

ParamDict = Dict[str, Param]


def _add(params: ParamDict, name: str, value: np.ndarray) -> Param:
    if name in params:
        raise ValueError(f"duplicate parameter name: {name}")
    p = Param(value.astype(T.default_dtype()), name=name)
    params[name] = p
    return p


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def new_linear(params: ParamDict, rng: np.random.Generator, name: str,
               fan_in: int, fan_out: int, bias: bool = True) -> None:
    _add(params, f"{name}.weight", xavier_uniform(rng, fan_in, fan_out))
    if bias:
        _add(params, f"{name}.bias", np.zeros(fan_out))


def new_layer_norm(params: ParamDict, name: str, dim: int) -> None:
    _add(params, f"{name}.gamma", np.ones(dim))
    _add(params, f"{name}.beta", np.zeros(dim))


def new_embedding(params: ParamDict, rng: np.random.Generator, name: str,
                  shape: Tuple[int, ...], std: float = 0.02) -> None:
    _add(params, name, rng.normal(0.0, std, size=shape))


def new_attention(params: ParamDict, rng: np.random.Generator, name: str,
                  width: int, inner: int, bias: bool) -> None:
    for proj in ("wq", "wk", "wv"):
        new_linear(params, rng, f"{name}.{proj}", width, inner, bias=bias)
    new_linear(params, rng, f"{name}.wo", inner, width, bias=bias)


def new_feed_forward(params: ParamDict, rng: np.random.Generator, name: str,
                     width: int, hidden: int, out: Optional[int] = None) -> None:
    new_linear(params, rng, f"{name}.fc1", width, hidden)
    new_linear(params, rng, f"{name}.fc2", hidden, out if out is not None else width)


def linear(x: Tensor, params: ParamDict, name: str) -> Tensor:
    y = T.matmul(x, params[f"{name}.weight"])
    bias = params.get(f"{name}.bias")
    return T.add_bias(y, bias) if bias is not None else y


def norm(x: Tensor, params: ParamDict, name: str, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"], eps)


def feed_forward(x: Tensor, params: ParamDict, name: str, kind: str = "gelu") -> Tensor:
    return linear(T.activation(linear(x, params, f"{name}.fc1"), kind), params, f"{name}.fc2")


def attention_scale(d: int, n_heads: int) -> float:
    """Scaling factor sqrt(d / n_heads) dividing the query-key scores"""
    if n_heads < 1 or d % n_heads != 0:
        raise ShapeError("attention_scale", (d,), (n_heads,), detail="d must be divisible by the head count")
    return math.sqrt(d / n_heads)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return T.permute(T.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, t, h * dh))


def multi_head_attention(q_src: Tensor, kv_src: Tensor, params: ParamDict, name: str,
                         n_heads: int) -> Tuple[Tensor, np.ndarray]:
    """concat_n(softmax(Q_n K_n^T / sqrt(d/N)) V_n) W^O for [B, T, width] inputs.

    Returns the projected output and the attention weights [B, heads, Tq, Tkv].
    """
    if q_src.ndim != 3 or kv_src.ndim != 3 or q_src.shape[0] != kv_src.shape[0] \
            or q_src.shape[2] != kv_src.shape[2]:
        raise ShapeError("multi_head_attention", q_src.shape, kv_src.shape)
    inner = params[f"{name}.wq.weight"].shape[1]
    factor = attention_scale(inner, n_heads)

    q = _split_heads(linear(q_src, params, f"{name}.wq"), n_heads)
    k = _split_heads(linear(kv_src, params, f"{name}.wk"), n_heads)
    v = _split_heads(linear(kv_src, params, f"{name}.wv"), n_heads)

    scores = T.scale(T.bmm(q, T.transpose_last(k)), 1.0 / factor)
    weights = T.softmax_last_axis(scores)
    heads = T.bmm(weights, v)
    out = linear(_merge_heads(heads), params, f"{name}.wo")
    return out, weights.data
