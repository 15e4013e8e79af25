"""
CrossFundus checkpoints
JSON manifest plus one raw little-endian blob, used for training state and exported attention maps
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import tensor as T
from errors import CheckpointError
from model import CrossFundusTransformer, ModelConfig
from trainer import TrainState

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_DTYPES = {32: "<f4", 64: "<f8"}


def _paths(prefix: str) -> Tuple[str, str]:
    return f"{prefix}.json", f"{prefix}.bin"


def write_tensor_blob(prefix: str, tensors: Dict[str, np.ndarray], precision: int,
                      meta: Optional[Dict[str, Any]] = None) -> Tuple[str, str]:
    """Write `prefix.json` (names, shapes, offsets) and `prefix.bin` (concatenated LE floats)"""
    if precision not in _DTYPES:
        raise CheckpointError(f"precision must be 32 or 64, got {precision}")
    dtype = np.dtype(_DTYPES[precision])
    entries: List[Dict[str, Any]] = []
    offset = 0
    manifest_path, blob_path = _paths(prefix)
    with open(blob_path, "wb") as f:
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value, dtype=dtype)
            f.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += arr.nbytes
    manifest = {
        "version": CHECKPOINT_VERSION,
        "precision": precision,
        "dtype": _DTYPES[precision],
        "blob": os.path.basename(blob_path),
        "blob_bytes": offset,
        "tensors": entries,
        **(meta or {}),
    }
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest_path, blob_path


def read_tensor_blob(prefix: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    manifest_path, _ = _paths(prefix)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise CheckpointError(f"manifest not found: {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')}, expected {CHECKPOINT_VERSION}")
    if manifest.get("precision") not in _DTYPES:
        raise CheckpointError(f"unsupported precision {manifest.get('precision')}")
    dtype = np.dtype(_DTYPES[manifest["precision"]])
    blob_path = os.path.join(os.path.dirname(manifest_path), manifest["blob"])
    try:
        with open(blob_path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise CheckpointError(f"blob not found: {blob_path}") from e
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    tensors: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count != entry["count"] or entry["offset"] + count * dtype.itemsize > len(blob):
            raise CheckpointError(f"tensor {entry['name']} does not fit the blob")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    return manifest, tensors


def save_checkpoint(prefix: str, state: TrainState, train_config: Optional[Dict[str, Any]] = None) -> None:
    model = state.model
    precision = 64 if next(iter(model.params.values())).dtype == np.float64 else 32
    tensors: Dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        tensors[f"param/{name}"] = p.data
        tensors[f"adam_m/{name}"] = state.m[name]
        tensors[f"adam_v/{name}"] = state.v[name]
    if state.best_params is not None:
        for name, value in state.best_params.items():
            tensors[f"best/{name}"] = value
    meta = {
        "kind": "train_state",
        "step": state.step,
        "epoch": state.epoch,
        "seed": model.seed,
        "best_kappa": state.best_kappa,
        "best_epoch": state.best_epoch,
        "rng_state": state.rng.bit_generator.state,
        "model_config": model.cfg.to_dict(),
        "train_config": train_config or {},
    }
    write_tensor_blob(prefix, tensors, precision, meta)
    logger.info("saved checkpoint %s (epoch %d, step %d)", prefix, state.epoch, state.step)


def load_checkpoint(prefix: str) -> Tuple[TrainState, Dict[str, Any]]:
    """Rebuild the model and its optimizer state; returns the state and the manifest"""
    manifest, tensors = read_tensor_blob(prefix)
    if manifest.get("kind") != "train_state":
        raise CheckpointError(f"{prefix} is not a training checkpoint (kind={manifest.get('kind')!r})")
    with T.precision(manifest["precision"]):
        model = CrossFundusTransformer(ModelConfig.from_dict(manifest["model_config"]), seed=manifest["seed"])

    def group(tag: str) -> Dict[str, np.ndarray]:
        return {name[len(tag) + 1:]: value for name, value in tensors.items() if name.startswith(tag + "/")}

    params = group("param")
    try:
        model.load_state_dict(params)
    except Exception as e:
        raise CheckpointError(f"parameters do not match the model config: {e}") from e
    m, v = group("adam_m"), group("adam_v")
    if set(m) != set(params) or set(v) != set(params):
        raise CheckpointError("Adam moments do not cover every parameter")
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    best = group("best") or None
    state = TrainState(model=model, m=m, v=v, step=manifest["step"], epoch=manifest["epoch"], rng=rng,
                       best_kappa=manifest["best_kappa"], best_epoch=manifest["best_epoch"], best_params=best)
    return state, manifest
