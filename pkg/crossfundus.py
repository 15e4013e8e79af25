#!/usr/bin/env python3
"""
CrossFundus command line
Data generation, training, evaluation, ablation tables, lambda sweep, gradient check and attention maps
"""

import os
import sys


def blas_threads(argv) -> str:
    """BLAS pool size: CFT_THREADS only when strict mode is switched off on the command line"""
    if "--no-strict" in argv:
        return os.environ.get("CFT_THREADS", "1")
    return "1"


# BLAS pools are sized before numpy is first imported
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, blas_threads(sys.argv[1:]))

import argparse
import json
import logging
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import tensor as T
from ablation import DEFAULT_LAMBDAS, run_ablation, select_rows, sweep_lambda
from checkpoint import load_checkpoint, save_checkpoint, write_tensor_blob
from config import CrossFundusConfig, parse_config
from errors import ConfigError, CrossFundusError
from model import CrossFundusTransformer
from report_generator import report_generator
from rollout_viz import attention_rollout, write_pgm
from synth_data import (Dataset, generate_dataset, generate_sample, linear_probe_accuracy, load_dataset,
                        save_dataset, stratified_split)
from trainer import INFERENCE_RULES, evaluate, grad_check, train

logger = logging.getLogger("crossfundus")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1)"""

    def error(self, message):
        raise ConfigError(message)


def _log_level(value: str) -> str:
    level = value.upper()
    if level not in LOG_LEVELS:
        raise argparse.ArgumentTypeError(f"unknown log level {value!r}, choose from {', '.join(LOG_LEVELS)}")
    return level


def _positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}")
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {number}")
    return number


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (defaults to crossfundus_config.json if present)")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--strict", action=argparse.BooleanOptionalAction, default=None,
                        help="single-threaded, bitwise-deterministic execution")
    common.add_argument("--precision", type=int, choices=(32, 64), help="float width")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, value parsed as JSON (repeatable)")
    common.add_argument("--data", help="read the dataset from a CFTD file instead of generating it")
    common.add_argument("--json", action="store_true", help="print the result document as JSON")
    common.add_argument("--log-level", type=_log_level, choices=LOG_LEVELS,
                        default=os.environ.get("CFT_LOG_LEVEL", "INFO"))

    parser = _Parser(prog="crossfundus", description="Dual-modality fundus classification experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic paired dataset")
    p.add_argument("--probe", action="store_true", help="also fit per-modality linear probes")

    p = sub.add_parser("train", parents=[common], help="train the model")
    p.add_argument("--resume", metavar="PREFIX", help="continue from a checkpoint")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the validation split")
    p.add_argument("--checkpoint", required=True, metavar="PREFIX")
    p.add_argument("--rule", choices=INFERENCE_RULES, help="inference rule (defaults to train.inference)")
    p.add_argument("--best", action="store_true", help="use the best-kappa parameters")

    p = sub.add_parser("ablate", parents=[common], help="run the ablation tables")
    p.add_argument("--table", choices=("comparison", "loss", "all"), default="all")
    p.add_argument("--rows", nargs="+", metavar="NAME", help="subset of row names")

    p = sub.add_parser("sweep-lambda", parents=[common], help="train once per loss weight")
    p.add_argument("--lambdas", nargs="+", type=float, default=list(DEFAULT_LAMBDAS))

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--label", type=int, default=2, help="grade of the checked sample")
    p.add_argument("--threshold", type=float, default=1e-3)

    p = sub.add_parser("visualize", parents=[common], help="attention rollout maps for one sample")
    p.add_argument("--checkpoint", metavar="PREFIX", help="trained model (fresh initialization if omitted)")
    p.add_argument("--index", type=int, default=0, help="sample index in the dataset")
    p.add_argument("--upscale", type=_positive_int, default=8, help="pixels per patch side in the PGM")
    return parser


def load_run_config(args: argparse.Namespace) -> CrossFundusConfig:
    cfg = parse_config(args.config)
    for assignment in args.overrides:
        cfg.apply_override(assignment)
    if args.seed is not None:
        cfg.set("data.seed", args.seed)
        cfg.set("train.seed", args.seed)
    if args.precision is not None:
        cfg.set("run.precision", args.precision)
    if args.strict is not None:
        cfg.set("run.strict", args.strict)
    if args.out:
        cfg.set("output.dir", args.out)
    return cfg


def _write_json(path: str, document: Dict[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(document, f, indent=2)
        f.write("\n")


def _dataset(cfg: CrossFundusConfig, args: argparse.Namespace) -> Dataset:
    ds = load_dataset(args.data) if args.data else generate_dataset(cfg.synth_config())
    data = cfg.config["data"]
    if (ds.H, ds.W, ds.C_in, ds.k) != (data["H"], data["W"], data["C_in"], data["k"]):
        raise ConfigError(f"dataset is {ds.H}x{ds.W}x{ds.C_in} with k={ds.k}, config expects "
                          f"{data['H']}x{data['W']}x{data['C_in']} with k={data['k']}", "data")
    return ds


def _split(cfg: CrossFundusConfig, ds: Dataset) -> Tuple[Dataset, Dataset]:
    tcfg = cfg.train_config()
    return stratified_split(ds, tcfg.train_frac, cfg.config["data"]["seed"])


def cmd_gen_data(cfg: CrossFundusConfig, args, out: str) -> Tuple[Dict[str, Any], str]:
    ds = generate_dataset(cfg.synth_config())
    path = os.path.join(out, cfg.get("output.dataset_file"))
    save_dataset(path, ds)
    result: Dict[str, Any] = {"command": "gen-data", "dataset": path, "n_samples": len(ds),
                              "label_histogram": ds.label_histogram()}
    text = f"✅ wrote {len(ds)} pairs to {path}\nlabel histogram: {ds.label_histogram()}\n"
    if args.probe:
        train_ds, val_ds = _split(cfg, ds)
        probes = {m: linear_probe_accuracy(train_ds, val_ds, m, cfg.config["data"]["seed"]) for m in ("cfp", "ifp")}
        result["linear_probe"] = probes
        text += f"linear probe accuracy: cfp {probes['cfp']:.4f}, ifp {probes['ifp']:.4f}\n"
    return result, text


def cmd_train(cfg: CrossFundusConfig, args, out: str) -> Tuple[Dict[str, Any], str]:
    train_ds, val_ds = _split(cfg, _dataset(cfg, args))
    prefix = os.path.join(out, cfg.get("output.checkpoint"))
    tcfg = cfg.train_config()
    state = None
    if args.resume:
        state, _ = load_checkpoint(args.resume)
    state, history = train(train_ds, val_ds, cfg.model_config(), tcfg, state=state, threads=cfg.threads,
                           augment_cfg=cfg.augment_config() if tcfg.augment else None,
                           on_epoch_end=lambda st, _: save_checkpoint(prefix, st, tcfg.to_dict()))
    result = {
        "command": "train",
        "checkpoint": prefix,
        "history": [r.to_dict() for r in history],
        "best_kappa": state.best_kappa,
        "best_epoch": state.best_epoch,
    }
    report_generator.generate_html_report(
        {"title": "Training run", "history": result["history"],
         "metadata": {"epochs": tcfg.epochs, "lambda": tcfg.lam, "mode": cfg.get("cfa.mode"),
                      "fusion": cfg.get("cfa.fusion"), "train_pairs": len(train_ds), "val_pairs": len(val_ds)}},
        os.path.join(out, cfg.get("output.report_file")))
    text = report_generator.history_table(result["history"])
    text += f"✅ best kappa {state.best_kappa:.4f} at epoch {state.best_epoch}; checkpoint {prefix}\n"
    return result, text


def cmd_eval(cfg: CrossFundusConfig, args, out: str) -> Tuple[Dict[str, Any], str]:
    state, manifest = load_checkpoint(args.checkpoint)
    model = state.model
    if args.best:
        if state.best_params is None:
            raise ConfigError("checkpoint holds no best-kappa parameters", "--best")
        model.load_state_dict(state.best_params)
    train_cfg = manifest.get("train_config", {})
    rule = args.rule or train_cfg.get("inference", cfg.train_config().inference)
    heads = tuple(s for s, key in (("cf", "enable_l_cf"), ("if", "enable_l_if")) if train_cfg.get(key, True))
    _, val_ds = _split(cfg, _dataset(cfg, args))
    with T.precision(manifest["precision"]):
        report = evaluate(model, val_ds, rule, heads)
    result = {"command": "eval", "checkpoint": args.checkpoint, "rule": rule, **report.to_dict()}
    return result, report_generator.eval_table(report.to_dict(), rule)


def cmd_ablate(cfg: CrossFundusConfig, args, out: str) -> Tuple[Dict[str, Any], str]:
    rows = select_rows(args.table, args.rows)
    train_ds, val_ds = _split(cfg, _dataset(cfg, args))
    tcfg = cfg.train_config()
    results = run_ablation(rows, train_ds, val_ds, cfg.model_config(), tcfg, cfg.threads,
                           cfg.augment_config() if tcfg.augment else None)
    result = {"command": "ablate", "results": [r.to_dict() for r in results]}
    report_generator.generate_html_report(
        dict(result, title="Ablation study", metadata={"epochs": tcfg.epochs, "lambda": tcfg.lam,
                                                       "complementarity": cfg.get("data.complementarity")}),
        os.path.join(out, cfg.get("output.report_file")))
    return result, report_generator.ablation_tables(result["results"])


def cmd_sweep(cfg: CrossFundusConfig, args, out: str) -> Tuple[Dict[str, Any], str]:
    train_ds, val_ds = _split(cfg, _dataset(cfg, args))
    tcfg = cfg.train_config()
    sweep = sweep_lambda(train_ds, val_ds, cfg.model_config(), tcfg, args.lambdas, cfg.threads,
                         cfg.augment_config() if tcfg.augment else None)
    result = {"command": "sweep-lambda", "sweep": sweep.to_dict()}
    report_generator.generate_html_report(
        dict(result, title="Loss weight sweep", metadata={"epochs": tcfg.epochs, "mode": cfg.get("cfa.mode")}),
        os.path.join(out, cfg.get("output.report_file")))
    return result, report_generator.sweep_table(result["sweep"])


def cmd_gradcheck(cfg: CrossFundusConfig, args, out: str) -> Tuple[Dict[str, Any], str]:
    synth = cfg.synth_config()
    if not 0 <= args.label < synth.k:
        raise ConfigError(f"--label must lie in [0, {synth.k}), got {args.label}", "--label")
    sample = generate_sample(synth, 0, args.label)
    tcfg = cfg.train_config()
    report = grad_check(cfg.model_config(), sample, lam=tcfg.lam, seed=tcfg.seed, n_coords=args.coords,
                        h=args.h, enable_l_cf=tcfg.enable_l_cf, enable_l_if=tcfg.enable_l_if,
                        fail_above=args.threshold)
    result = {"command": "gradcheck", **report.to_dict()}
    text = (f"✅ gradient check passed: {len(report.entries)} coordinates over "
            f"{result['params_covered']} parameter tensors, {report.n_skipped} skipped at kinks\n"
            f"max rel err {report.max_rel_err:.3e}, median {report.median_rel_err:.3e}, "
            f"{100.0 * report.fraction_below(1e-4):.1f}% below 1e-4\n")
    return result, text


def cmd_visualize(cfg: CrossFundusConfig, args, out: str) -> Tuple[Dict[str, Any], str]:
    ds = _dataset(cfg, args)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index must lie in [0, {len(ds)}), got {args.index}", "--index")
    if args.checkpoint:
        state, _ = load_checkpoint(args.checkpoint)
        model = state.model
    else:
        model = CrossFundusTransformer(cfg.model_config(), seed=cfg.train_config().seed)
    sample = ds.samples[args.index]
    output = model.infer(sample.cfp[None], sample.ifp[None])

    files: List[str] = []
    importance: Dict[str, List[float]] = {}
    tensors: Dict[str, np.ndarray] = {}
    for s, maps in output.encoder_attn.items():
        for i, weights in enumerate(maps):
            tensors[f"encoder/{s}/block{i}"] = weights[0]
        if not maps:
            continue
        rollout = attention_rollout(maps, stream=s)
        path = os.path.join(out, f"rollout_{s}.pgm")
        write_pgm(path, rollout, model.cfg.stream(s).grid, args.upscale)
        files.append(path)
        importance[s] = rollout.importance.tolist()
    for key, weights in output.cross_attn.items():
        tensors[f"cfa/{key}"] = weights[0]
    precision = 64 if next(iter(model.params.values())).dtype == np.float64 else 32
    write_tensor_blob(os.path.join(out, "attention"), tensors, precision,
                      {"kind": "attention", "sample_index": args.index, "label": sample.label,
                       "importance": importance})
    result = {"command": "visualize", "index": args.index, "label": sample.label, "files": files,
              "importance": importance}
    text = "".join(f"✅ wrote {f}\n" for f in files) + f"✅ wrote {os.path.join(out, 'attention.json')}\n"
    return result, text


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-lambda": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
}


def run_command(argv: Optional[List[str]] = None) -> int:
    """Parse, run one subcommand, write its artifacts; returns the exit status"""
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)
        cfg = load_run_config(args)
        out = cfg.get("output.dir")
        os.makedirs(out, exist_ok=True)
        cfg.save_config(os.path.join(out, "config.resolved.json"))
        logger.info("running %s into %s (precision %d, threads %d)", args.command, out,
                    cfg.train_config().precision, cfg.threads)
        with T.precision(cfg.train_config().precision):
            result, text = COMMANDS[args.command](cfg, args, out)
        _write_json(os.path.join(out, cfg.get("output.metrics_file")), result)
        print(json.dumps(result, indent=2) if args.json else text, end="" if not args.json else "\n")
        return 0
    except ConfigError as e:
        print(e.one_line(), file=sys.stderr)
        return 1
    except CrossFundusError as e:
        print(e.one_line(), file=sys.stderr)
        print(f"❌ {command} failed", file=sys.stdout)
        return 2
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError) as e:
        logger.debug("%s failed", command, exc_info=True)
        print(f"error: runtime: {' '.join(str(e).split())}", file=sys.stderr)
        print(f"❌ {command} failed", file=sys.stdout)
        return 2


def main() -> int:
    return run_command(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
