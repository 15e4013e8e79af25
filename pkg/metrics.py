"""
CrossFundus metrics
Confusion matrix, quadratic weighted kappa, accuracy and macro-F1
"""

from dataclasses import dataclass
from typing import Any, Dict, Sequence, Tuple

import numpy as np

from errors import UndefinedMetricError


@dataclass
class ConfusionMatrix:
    """counts[i, j]: samples of true class i predicted as class j"""
    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self):
        return self.counts.astype(int).tolist()


def confusion_matrix(truths: Sequence[int], preds: Sequence[int], k: int) -> ConfusionMatrix:
    truths = np.asarray(truths, dtype=np.int64).reshape(-1)
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    if truths.shape != preds.shape:
        raise ValueError(f"truths and preds differ in length: {truths.size} vs {preds.size}")
    for name, arr in (("truth", truths), ("prediction", preds)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} class out of range [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts)


def quadratic_weighted_kappa(cm: ConfusionMatrix) -> float:
    """1 - sum(w O) / sum(w E), w_ij = (i - j)^2 / (k - 1)^2, E scaled to the total of O"""
    O = cm.counts.astype(np.float64)
    total = O.sum()
    if total <= 0:
        raise UndefinedMetricError("kappa is undefined for an empty confusion matrix")
    k = cm.k
    if k < 2:
        raise UndefinedMetricError("kappa needs at least two classes")
    idx = np.arange(k)
    w = (idx[:, None] - idx[None, :]) ** 2 / float((k - 1) ** 2)
    E = np.outer(O.sum(axis=1), O.sum(axis=0)) / total
    denom = (w * E).sum()
    if denom == 0:
        raise UndefinedMetricError("kappa is undefined when only one class occurs in truths and predictions")
    return float(1.0 - (w * O).sum() / denom)


def accuracy_and_macro_f1(cm: ConfusionMatrix) -> Tuple[float, float]:
    """trace / total, and the unweighted mean of per-class F1 (0/0 counts as 0)"""
    O = cm.counts.astype(np.float64)
    total = O.sum()
    if total <= 0:
        raise UndefinedMetricError("accuracy is undefined for an empty confusion matrix")
    tp = np.diag(O)
    denom = O.sum(axis=0) + O.sum(axis=1)
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(tp.sum() / total), float(f1.mean())


@dataclass
class EvalReport:
    kappa: float
    accuracy: float
    macro_f1: float
    confusion: ConfusionMatrix
    n_samples: int

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "EvalReport":
        accuracy, macro_f1 = accuracy_and_macro_f1(cm)
        return cls(kappa=quadratic_weighted_kappa(cm), accuracy=accuracy, macro_f1=macro_f1,
                   confusion=cm, n_samples=cm.total)

    @classmethod
    def from_predictions(cls, truths: Sequence[int], preds: Sequence[int], k: int) -> "EvalReport":
        return cls.from_confusion(confusion_matrix(truths, preds, k))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kappa": self.kappa,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.to_list(),
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        cm = ConfusionMatrix(np.asarray(data["confusion"], dtype=np.int64))
        return cls(kappa=float(data["kappa"]), accuracy=float(data["accuracy"]),
                   macro_f1=float(data["macro_f1"]), confusion=cm, n_samples=int(data["n_samples"]))

    def as_percentages(self) -> Dict[str, float]:
        """Presentation-layer view: metrics x 100"""
        return {"kappa": 100.0 * self.kappa, "accuracy": 100.0 * self.accuracy, "macro_f1": 100.0 * self.macro_f1}
