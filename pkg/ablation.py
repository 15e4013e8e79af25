"""
CrossFundus ablations
Comparison rows (single modality, voting, feature pooling, cross attention), loss-wiring rows and the lambda sweep
"""

import logging
import time
from dataclasses import dataclass, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from errors import ConfigError
from metrics import EvalReport
from model import ModelConfig
from synth_data import AugmentConfig, Dataset
from trainer import EpochRecord, TrainConfig, train

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class AblationRow:
    """One model variant: which streams, how they are wired, which losses train it"""
    name: str
    table: str
    streams: Tuple[str, ...] = ("cf", "if")
    mode: str = "dual_cross"
    fusion: str = "max"
    inference: str = "combine"
    enable_l_cf: bool = True
    enable_l_if: bool = True
    use_projection: bool = True
    lam: Optional[float] = None

    def apply(self, model_cfg: ModelConfig, train_cfg: TrainConfig) -> Tuple[ModelConfig, TrainConfig]:
        cfa = replace(model_cfg.cfa, mode=self.mode, fusion=self.fusion, use_projection=self.use_projection)
        model = replace(model_cfg, cfa=cfa, streams=self.streams)
        tcfg = replace(train_cfg, inference=self.inference, enable_l_cf=self.enable_l_cf,
                       enable_l_if=self.enable_l_if)
        if self.lam is not None:
            tcfg = replace(tcfg, lam=self.lam)
        return model.validate(), tcfg.validate()


COMPARISON_ROWS: Tuple[AblationRow, ...] = (
    AblationRow("cfp-only", "comparison", streams=("cf",), mode="none", inference="cf_head", enable_l_if=False,
                lam=1.0),
    AblationRow("ifp-only", "comparison", streams=("if",), mode="none", inference="if_head", enable_l_cf=False,
                lam=0.0),
    AblationRow("cfp-self-attn", "comparison", streams=("cf",), mode="self_attention",
                inference="stream_plus_classifier", enable_l_if=False, lam=1.0),
    AblationRow("ifp-self-attn", "comparison", streams=("if",), mode="self_attention",
                inference="stream_plus_classifier", enable_l_cf=False, lam=0.0),
    AblationRow("voting-max", "comparison", mode="none", inference="voting_max"),
    AblationRow("voting-average", "comparison", mode="none", inference="voting_average"),
    AblationRow("feat-max", "comparison", mode="feature_pool", fusion="max"),
    AblationRow("feat-mean", "comparison", mode="feature_pool", fusion="mean"),
    AblationRow("feat-concat", "comparison", mode="feature_pool", fusion="concat"),
    AblationRow("cfp-cross", "comparison", mode="cfp_cross_only"),
    AblationRow("ifp-cross", "comparison", mode="ifp_cross_only"),
    AblationRow("dual-cross", "comparison", mode="dual_cross"),
)

LOSS_ROWS: Tuple[AblationRow, ...] = (
    AblationRow("cls-only", "loss", enable_l_cf=False, enable_l_if=False, use_projection=False),
    AblationRow("cls-only+proj", "loss", enable_l_cf=False, enable_l_if=False),
    AblationRow("cf-head+proj", "loss", enable_l_if=False),
    AblationRow("if-head+proj", "loss", enable_l_cf=False),
    AblationRow("both-heads+proj mean", "loss", fusion="mean"),
    AblationRow("both-heads+proj concat", "loss", fusion="concat"),
    AblationRow("both-heads+proj max", "loss", fusion="max"),
)

TABLES = {"comparison": COMPARISON_ROWS, "loss": LOSS_ROWS}


@dataclass
class AblationResult:
    row: AblationRow
    report: EvalReport
    history: List[EpochRecord]
    seconds: float

    def to_dict(self) -> Dict[str, Any]:
        row = self.row
        return {
            "name": row.name,
            "table": row.table,
            "streams": list(row.streams),
            "mode": row.mode,
            "fusion": row.fusion,
            "inference": row.inference,
            "L_cf": row.enable_l_cf,
            "L_if": row.enable_l_if,
            "projection": row.use_projection,
            "kappa": self.report.kappa,
            "accuracy": self.report.accuracy,
            "macro_f1": self.report.macro_f1,
            "confusion": self.report.confusion.to_list(),
            "seconds": round(self.seconds, 3),
        }


def select_rows(table: str = "all", names: Optional[Iterable[str]] = None) -> List[AblationRow]:
    if table == "all":
        rows = list(COMPARISON_ROWS) + list(LOSS_ROWS)
    elif table in TABLES:
        rows = list(TABLES[table])
    else:
        raise ConfigError(f"unknown table {table!r}; expected 'comparison', 'loss' or 'all'")
    if names:
        wanted = set(names)
        unknown = wanted - {r.name for r in rows}
        if unknown:
            raise ConfigError(f"unknown ablation rows: {sorted(unknown)}")
        rows = [r for r in rows if r.name in wanted]
    return rows


def run_row(row: AblationRow, train_ds: Dataset, val_ds: Dataset, model_cfg: ModelConfig,
            train_cfg: TrainConfig, threads: int = 1,
            augment_cfg: Optional[AugmentConfig] = None) -> AblationResult:
    """Train one variant from scratch; the reported metrics are those of the final epoch"""
    mcfg, tcfg = row.apply(model_cfg, train_cfg)
    logger.info("ablation %s: streams=%s mode=%s fusion=%s rule=%s", row.name, ",".join(row.streams),
                row.mode, row.fusion, row.inference)
    t0 = time.perf_counter()
    _, history = train(train_ds, val_ds, mcfg, tcfg, threads=threads, augment_cfg=augment_cfg)
    return AblationResult(row=row, report=history[-1].report, history=history, seconds=time.perf_counter() - t0)


def run_ablation(rows: Sequence[AblationRow], train_ds: Dataset, val_ds: Dataset, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, threads: int = 1,
                 augment_cfg: Optional[AugmentConfig] = None) -> List[AblationResult]:
    results = []
    for row in rows:
        result = run_row(row, train_ds, val_ds, model_cfg, train_cfg, threads, augment_cfg)
        logger.info("ablation %s: kappa %.4f acc %.4f f1 %.4f (%.1fs)", row.name, result.report.kappa,
                    result.report.accuracy, result.report.macro_f1, result.seconds)
        results.append(result)
    return results


@dataclass
class SweepResult:
    points: List[Tuple[float, EvalReport]]

    @property
    def best_lambda(self) -> float:
        """Argmax of kappa; the first lambda wins ties"""
        best = max(range(len(self.points)), key=lambda i: (self.points[i][1].kappa, -i))
        return self.points[best][0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "points": [{"lambda": lam, **report.to_dict()} for lam, report in self.points],
            "best_lambda": self.best_lambda,
        }


def sweep_lambda(train_ds: Dataset, val_ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 lambdas: Sequence[float] = DEFAULT_LAMBDAS, threads: int = 1,
                 augment_cfg: Optional[AugmentConfig] = None) -> SweepResult:
    """Full dual-cross model trained once per lambda"""
    if not lambdas:
        raise ConfigError("lambda sweep needs at least one value")
    points = []
    for lam in lambdas:
        tcfg = replace(train_cfg, lam=float(lam)).validate()
        _, history = train(train_ds, val_ds, model_cfg, tcfg, threads=threads, augment_cfg=augment_cfg)
        report = history[-1].report
        logger.info("lambda %.2f: kappa %.4f acc %.4f f1 %.4f", lam, report.kappa, report.accuracy, report.macro_f1)
        points.append((float(lam), report))
    return SweepResult(points=points)
