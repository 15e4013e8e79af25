"""
CrossFundus objective
Cross entropy, the lambda-weighted total loss, inference combination and voting baselines
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

import tensor as T
from errors import ConfigError, ShapeError
from tensor import Tensor

VOTING_RULES = ("max", "average")


@dataclass
class LossWeights:
    lam: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}", "train.lambda")


@dataclass
class LossBundle:
    L_cf: Optional[Tensor]
    L_if: Optional[Tensor]
    L_cls: Optional[Tensor]
    L_total: Tensor

    def values(self) -> dict:
        def v(t):
            return None if t is None else t.item()
        return {"L_cf": v(self.L_cf), "L_if": v(self.L_if), "L_cls": v(self.L_cls), "L_total": v(self.L_total)}


def cross_entropy(logits: Tensor, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch; a 1-D logits vector is a batch of one"""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = logits.shape[-1]
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    picked = T.pick_last_axis(T.log_softmax_last_axis(logits), labels)
    return T.scale(T.sum_all(picked), -1.0 / labels.size)


def total_loss(l_cf: Optional[Tensor], l_if: Optional[Tensor], l_cls: Optional[Tensor],
               w: LossWeights) -> Tensor:
    """lam * L_cf + (1 - lam) * L_if + L_cls; absent terms contribute nothing"""
    if not 0.0 <= w.lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {w.lam}", "train.lambda")
    terms = []
    if l_cf is not None:
        terms.append(T.scale(l_cf, w.lam))
    if l_if is not None:
        terms.append(T.scale(l_if, 1.0 - w.lam))
    if l_cls is not None:
        terms.append(l_cls)
    if not terms:
        raise ConfigError("no loss term is enabled")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def compute_losses(output, labels: np.ndarray, w: LossWeights,
                   enable_l_cf: bool = True, enable_l_if: bool = True) -> LossBundle:
    """Loss bundle for a ModelOutput; disabled head losses are left off the graph entirely"""
    l_cf = cross_entropy(output.logits_cf, labels) if enable_l_cf and output.logits_cf is not None else None
    l_if = cross_entropy(output.logits_if, labels) if enable_l_if and output.logits_if is not None else None
    l_cls = cross_entropy(output.logits_cls, labels) if output.logits_cls is not None else None
    return LossBundle(L_cf=l_cf, L_if=l_if, L_cls=l_cls, L_total=total_loss(l_cf, l_if, l_cls, w))


def _as_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


def _finish(pred: np.ndarray, single: bool):
    return int(pred[0]) if single else pred


def combine_inference(logits_cf, logits_if, logits_cls):
    """argmax((cf + if) / 2 + cls); ties go to the lowest class index"""
    single = np.ndim(logits_cls) == 1
    a, b, c = _as_rows(logits_cf), _as_rows(logits_if), _as_rows(logits_cls)
    if not (a.shape == b.shape == c.shape):
        raise ShapeError("combine_inference", a.shape, b.shape, c.shape)
    score = (a + b) / 2.0 + c
    return _finish(np.argmax(score, axis=-1), single)


def voting_fuse(prob_cf, prob_if, rule: str):
    """Decision-level fusion of two probability vectors by elementwise max or mean"""
    single = np.ndim(prob_cf) == 1
    a, b = _as_rows(prob_cf), _as_rows(prob_if)
    if a.shape != b.shape:
        raise ShapeError("voting_fuse", a.shape, b.shape)
    for p in (a, b):
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError("voting_fuse expects probability vectors")
    if rule == "average":
        score = (a + b) / 2.0
    elif rule == "max":
        score = np.maximum(a, b)
    else:
        raise ValueError(f"unknown voting rule {rule!r}; expected one of {VOTING_RULES}")
    return _finish(np.argmax(score, axis=-1), single)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)
