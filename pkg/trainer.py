"""
CrossFundus trainer
Adam with decoupled weight decay, per-epoch cosine annealing, evaluation and the gradient check
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import tensor as T
from errors import ConfigError, GradientCheckError, NonFiniteError, ShapeError, UndefinedMetricError
from metrics import EvalReport
from model import CrossFundusTransformer, ModelConfig
from objective import LossWeights, combine_inference, compute_losses, softmax, voting_fuse
from synth_data import AugmentConfig, Dataset, PairedSample, augment
from tensor import Tensor

logger = logging.getLogger(__name__)

INFERENCE_RULES = ("combine", "cf_head", "if_head", "voting_max", "voting_average", "stream_plus_classifier")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 30
    base_lr: float = 2e-3
    weight_decay: float = 1e-5
    batch_size: int = 16
    lam: float = 0.6
    seed: int = 0
    precision: int = 32
    enable_l_cf: bool = True
    enable_l_if: bool = True
    inference: str = "combine"
    augment: bool = True
    train_frac: float = 0.8

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}", "train.epochs")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}", "train.batch_size")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("train.base_lr must be > 0 and train.weight_decay >= 0", "train.base_lr")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"train.lambda must lie in [0, 1], got {self.lam}", "train.lambda")
        if self.precision not in (32, 64):
            raise ConfigError(f"train.precision must be 32 or 64, got {self.precision}", "train.precision")
        if self.inference not in INFERENCE_RULES:
            raise ConfigError(f"train.inference must be one of {list(INFERENCE_RULES)}, got {self.inference!r}",
                              "train.inference")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError(f"train.train_frac must lie in (0, 1), got {self.train_frac}", "train.train_frac")
        return self

    @property
    def heads(self) -> Tuple[str, ...]:
        """Heads whose logits take part in combined inference"""
        return tuple(s for s, on in (("cf", self.enable_l_cf), ("if", self.enable_l_if)) if on)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["lambda"] = data.pop("lam")
        return data


@dataclass
class TrainState:
    """Everything needed to continue training bitwise: params, Adam moments, counters, RNG"""
    model: CrossFundusTransformer
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    best_kappa: Optional[float] = None
    best_epoch: int = -1
    best_params: Optional[Dict[str, np.ndarray]] = None

    @classmethod
    def fresh(cls, model: CrossFundusTransformer, seed: int) -> "TrainState":
        m = {name: np.zeros_like(p.data) for name, p in model.params.items()}
        v = {name: np.zeros_like(p.data) for name, p in model.params.items()}
        return cls(model=model, m=m, v=v, rng=np.random.default_rng([seed, 0x7A1]))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    report: EvalReport

    def to_dict(self) -> Dict[str, Any]:
        return {"epoch": self.epoch, "lr": self.lr, "mean_loss": self.mean_loss, **self.report.to_dict()}


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """base_lr * 0.5 * (1 + cos(pi * epoch / epochs))"""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def adam_step(state: TrainState, grads: Dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> TrainState:
    """theta -= lr * wd * theta, then the bias-corrected Adam update; missing grads count as zero"""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in state.model.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeError("adam_step", p.data.shape, g.shape, detail=name)
        theta = p.data
        if cfg.weight_decay:
            theta = theta - lr * cfg.weight_decay * theta
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        state.m[name] = m.astype(p.data.dtype)
        state.v[name] = v.astype(p.data.dtype)
        p.data = (theta - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# Gradients


def _batch_grads(model: CrossFundusTransformer, cfp: np.ndarray, ifp: np.ndarray, labels: np.ndarray,
                 cfg: TrainConfig) -> Tuple[Dict[str, np.ndarray], float]:
    grads: Dict[str, np.ndarray] = {}
    with T.Graph() as graph:
        out = model.forward(cfp, ifp)
        bundle = compute_losses(out, labels, LossWeights(cfg.lam), cfg.enable_l_cf, cfg.enable_l_if)
    loss = bundle.L_total.item()
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {bundle.values()} on a batch of {len(labels)} labels {labels.tolist()}")
    T.backward(graph, bundle.L_total, grads)
    return grads, loss


def compute_grads(model: CrossFundusTransformer, cfp: np.ndarray, ifp: np.ndarray, labels: np.ndarray,
                  cfg: TrainConfig, threads: int = 1) -> Tuple[Dict[str, np.ndarray], float]:
    """Mean-loss gradients for one batch.

    With threads > 1 the batch is cut into contiguous chunks, each run on its own graph;
    chunk gradients are weighted by chunk size and summed in chunk order.
    """
    n = len(labels)
    if threads <= 1 or n < 2:
        return _batch_grads(model, cfp, ifp, labels, cfg)
    bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)
    chunks = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]

    def run(chunk):
        lo, hi = chunk
        return _batch_grads(model, None if cfp is None else cfp[lo:hi], None if ifp is None else ifp[lo:hi],
                            labels[lo:hi], cfg)

    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        results = list(pool.map(run, chunks))
    total: Dict[str, np.ndarray] = {}
    loss = 0.0
    for (lo, hi), (grads, chunk_loss) in zip(chunks, results):
        w = (hi - lo) / n
        loss += w * chunk_loss
        for name, g in grads.items():
            total[name] = total[name] + w * g if name in total else w * g
    return total, loss


# ---------------------------------------------------------------------------
# Evaluation


def _logits(t) -> Optional[np.ndarray]:
    if t is None:
        return None
    return np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)


def predict(model, cfp: Optional[np.ndarray], ifp: Optional[np.ndarray], rule: str = "combine",
            heads: Sequence[str] = ("cf", "if")) -> np.ndarray:
    """Class predictions for a batch under one inference rule"""
    out = model.infer(cfp, ifp)
    cf, if_, cls = _logits(out.logits_cf), _logits(out.logits_if), _logits(out.logits_cls)
    if rule == "combine":
        if cls is None:
            raise ConfigError("the combine rule needs the fused classifier", "train.inference")
        zero = np.zeros_like(cls)
        cf = cf if cf is not None and "cf" in heads else zero
        if_ = if_ if if_ is not None and "if" in heads else zero
        return np.asarray(combine_inference(cf, if_, cls))
    if rule in ("cf_head", "if_head"):
        logits = cf if rule == "cf_head" else if_
        if logits is None:
            raise ConfigError(f"rule {rule} needs the {rule[:2]} stream", "train.inference")
        return np.argmax(logits, axis=-1)
    if rule in ("voting_max", "voting_average"):
        if cf is None or if_ is None:
            raise ConfigError(f"rule {rule} needs both streams", "train.inference")
        return np.asarray(voting_fuse(softmax(cf), softmax(if_), rule.split("_", 1)[1]))
    if rule == "stream_plus_classifier":
        head = cf if cf is not None else if_
        if head is None or cls is None:
            raise ConfigError("rule stream_plus_classifier needs one head and the fused classifier",
                              "train.inference")
        return np.argmax(head + cls, axis=-1)
    raise ConfigError(f"unknown inference rule {rule!r}", "train.inference")


def evaluate(model, ds: Dataset, rule: str = "combine", heads: Sequence[str] = ("cf", "if"),
             batch_size: int = 64) -> EvalReport:
    """Run one inference rule over every sample, no augmentation"""
    if len(ds) == 0:
        raise UndefinedMetricError("cannot evaluate an empty dataset")
    dtype = T.default_dtype()
    cfp, ifp, labels = ds.arrays(dtype)
    preds = []
    for lo in range(0, len(ds), batch_size):
        hi = min(lo + batch_size, len(ds))
        preds.append(predict(model, cfp[lo:hi], ifp[lo:hi], rule, heads))
    return EvalReport.from_predictions(labels, np.concatenate(preds), ds.k)


# ---------------------------------------------------------------------------
# Training loop


def _stream_inputs(model: CrossFundusTransformer, cfp: np.ndarray, ifp: np.ndarray):
    streams = model.cfg.streams
    return (cfp if "cf" in streams else None), (ifp if "if" in streams else None)


def train(train_ds: Dataset, val_ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
          state: Optional[TrainState] = None, threads: int = 1,
          augment_cfg: Optional[AugmentConfig] = None,
          on_epoch_end: Optional[Callable[[TrainState, EpochRecord], None]] = None
          ) -> Tuple[TrainState, List[EpochRecord]]:
    """Train from scratch, or continue from `state` at its recorded epoch"""
    cfg.validate()
    if len(train_ds) == 0:
        raise ConfigError("training set is empty", "data.n_samples")
    if state is None:
        state = TrainState.fresh(CrossFundusTransformer(model_cfg, seed=cfg.seed), cfg.seed)
    model = state.model
    dtype = model.params[next(iter(model.params))].dtype
    history: List[EpochRecord] = []
    n = len(train_ds)
    logger.info("training %d pairs for epochs %d..%d (batch %d, lambda %.2f, threads %d)",
                n, state.epoch, cfg.epochs - 1, cfg.batch_size, cfg.lam, threads)

    for epoch in range(state.epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = state.rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            batch = [train_ds.samples[i] for i in order[lo:lo + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, state.rng, augment_cfg) for s in batch]
            cfp = np.stack([s.cfp for s in batch]).astype(dtype)
            ifp = np.stack([s.ifp for s in batch]).astype(dtype)
            labels = np.array([s.label for s in batch], dtype=np.int64)
            cfp, ifp = _stream_inputs(model, cfp, ifp)
            grads, loss = compute_grads(model, cfp, ifp, labels, cfg, threads)
            adam_step(state, grads, lr, cfg)
            losses.append(loss)
            logger.debug("epoch %d step %d loss %.6f", epoch, state.step, loss)

        report = evaluate(model, val_ds, cfg.inference, cfg.heads)
        record = EpochRecord(epoch=epoch, lr=lr, mean_loss=float(np.mean(losses)), report=report)
        history.append(record)
        state.epoch = epoch + 1
        if state.best_kappa is None or report.kappa > state.best_kappa:
            state.best_kappa = report.kappa
            state.best_epoch = epoch
            state.best_params = model.state_dict()
        logger.info("epoch %d lr %.3e loss %.4f kappa %.4f acc %.4f f1 %.4f",
                    epoch, lr, record.mean_loss, report.kappa, report.accuracy, report.macro_f1)
        if on_epoch_end is not None:
            on_epoch_end(state, record)
    return state, history


# ---------------------------------------------------------------------------
# Gradient check


def relative_error(analytic: float, numeric: float) -> float:
    if analytic == 0.0 and numeric == 0.0:
        return 0.0
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def central_difference(fn: Callable[[], float], values: np.ndarray, index: Tuple[int, ...], h: float) -> float:
    """(f(x + h) - f(x - h)) / 2h for one coordinate of `values`, restored afterwards"""
    original = values[index]
    values[index] = original + h
    plus = fn()
    values[index] = original - h
    minus = fn()
    values[index] = original
    return (plus - minus) / (2.0 * h)


@dataclass
class GradCheckEntry:
    param: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: List[GradCheckEntry]
    n_skipped: int
    h: float

    @property
    def errors(self) -> np.ndarray:
        return np.array([e.rel_err for e in self.entries])

    @property
    def max_rel_err(self) -> float:
        return float(self.errors.max()) if self.entries else 0.0

    @property
    def median_rel_err(self) -> float:
        return float(np.median(self.errors)) if self.entries else 0.0

    def fraction_below(self, tol: float) -> float:
        return float((self.errors < tol).mean()) if self.entries else 1.0

    def worst(self) -> Optional[GradCheckEntry]:
        return max(self.entries, key=lambda e: e.rel_err) if self.entries else None

    def to_dict(self) -> Dict[str, Any]:
        worst = self.worst()
        return {
            "n_checked": len(self.entries),
            "n_skipped": self.n_skipped,
            "h": self.h,
            "max_rel_err": self.max_rel_err,
            "median_rel_err": self.median_rel_err,
            "fraction_below_1e-4": self.fraction_below(1e-4),
            "worst_param": worst.param if worst else None,
            "params_covered": len({e.param for e in self.entries}),
        }


def grad_check(model_cfg: ModelConfig, sample: PairedSample, lam: float = 0.6, seed: int = 0,
               n_coords: int = 200, h: float = 1e-4, enable_l_cf: bool = True, enable_l_if: bool = True,
               fail_above: Optional[float] = 1e-3, max_resample: int = 20) -> GradCheckReport:
    """Central differences of L_total against the analytic gradient, in 64-bit.

    Every parameter tensor gets at least one coordinate; the rest are drawn uniformly.
    Coordinates whose +-h evaluation flips a ReLU or max branch are resampled.
    """
    with T.precision(64):
        model = CrossFundusTransformer(model_cfg, seed=seed)
        weights = LossWeights(lam)
        cfp = sample.cfp[None].astype(np.float64) if "cf" in model_cfg.streams else None
        ifp = sample.ifp[None].astype(np.float64) if "if" in model_cfg.streams else None
        labels = np.array([sample.label])

        def evaluate_loss():
            with T.Graph() as graph:
                out = model.forward(cfp, ifp)
                bundle = compute_losses(out, labels, weights, enable_l_cf, enable_l_if)
            return bundle.L_total, graph

        loss, graph = evaluate_loss()
        grads: Dict[str, np.ndarray] = {}
        T.backward(graph, loss, grads)
        base_kinks = graph.kinks

        def kinks_match(g: T.Graph) -> bool:
            return len(g.kinks) == len(base_kinks) and all(np.array_equal(a, b) for a, b in zip(g.kinks, base_kinks))

        rng = np.random.default_rng([seed, 0x6C])
        names = list(model.params)
        sizes = np.array([model.params[n].data.size for n in names], dtype=np.float64)
        picks = list(names)
        extra = max(0, n_coords - len(names))
        picks += [names[i] for i in rng.choice(len(names), size=extra, p=sizes / sizes.sum())]

        entries: List[GradCheckEntry] = []
        skipped = 0
        for name in picks:
            p = model.params[name]
            for _ in range(max_resample):
                index = tuple(int(rng.integers(s)) for s in p.data.shape)
                flips = []

                def f():
                    value, g = evaluate_loss()
                    flips.append(not kinks_match(g))
                    return value.item()

                numeric = central_difference(f, p.data, index, h)
                if any(flips):
                    skipped += 1
                    continue
                analytic = float(grads[name][index]) if name in grads else 0.0
                entries.append(GradCheckEntry(name, index, analytic, numeric, relative_error(analytic, numeric)))
                break
            else:
                logger.warning("no kink-free coordinate found for %s after %d draws", name, max_resample)

    report = GradCheckReport(entries=entries, n_skipped=skipped, h=h)
    logger.info("gradient check: %d coordinates, %d skipped, max rel err %.3e, median %.3e",
                len(entries), skipped, report.max_rel_err, report.median_rel_err)
    if fail_above is not None and report.max_rel_err > fail_above:
        worst = report.worst()
        raise GradientCheckError(
            f"relative error {worst.rel_err:.3e} > {fail_above:g} at {worst.param}{list(worst.index)} "
            f"(analytic {worst.analytic:.6e}, numeric {worst.numeric:.6e})", worst.param)
    return report
