"""
CrossFundus attention rollout
Per-patch importance from a stream's encoder attention and PGM heatmap rendering
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from errors import ShapeError


@dataclass
class RolloutResult:
    importance: np.ndarray
    stream: str = ""

    @property
    def n_patches(self) -> int:
        return self.importance.shape[0]


def head_average(weights: np.ndarray) -> np.ndarray:
    """[B, h, T, T] or [h, T, T] attention -> [T, T] for the first sample"""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 4:
        w = w[0]
    if w.ndim == 3:
        w = w.mean(axis=0)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError("head_average", np.shape(weights), detail="expected square attention")
    return w


def attention_rollout(attn_maps: Sequence[np.ndarray], stream: str = "") -> RolloutResult:
    """Product of 0.5 A + 0.5 I (rows renormalized) over blocks; class-token row over patches"""
    if not attn_maps:
        raise ShapeError("attention_rollout", (0,), detail="need at least one block")
    mats = [head_average(a) for a in attn_maps]
    size = mats[0].shape
    for a in mats:
        if a.shape != size:
            raise ShapeError("attention_rollout", size, a.shape)
    if size[0] < 2:
        raise ShapeError("attention_rollout", size, detail="need a class token and at least one patch")
    eye = np.eye(size[0])
    rollout = eye
    for a in mats:
        a = 0.5 * a + 0.5 * eye
        a = a / a.sum(axis=-1, keepdims=True)
        rollout = a @ rollout
    row = rollout[0, 1:]
    total = row.sum()
    importance = row / total if total > 0 else np.full(row.shape, 1.0 / row.size)
    return RolloutResult(importance=importance, stream=stream)


def render_pgm(r: RolloutResult, grid: Tuple[int, int], upscale: int = 8) -> bytes:
    """Binary P5 greyscale, min-max normalized, nearest-neighbour upscaled; constant input renders 0"""
    gh, gw = grid
    if gh * gw != r.n_patches:
        raise ShapeError("render_pgm", (r.n_patches,), (gh, gw))
    if upscale < 1:
        raise ValueError(f"upscale must be >= 1, got {upscale}")
    values = np.asarray(r.importance, dtype=np.float64).reshape(gh, gw)
    lo, hi = values.min(), values.max()
    if hi > lo:
        pixels = np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros((gh, gw), dtype=np.uint8)
    pixels = np.repeat(np.repeat(pixels, upscale, axis=0), upscale, axis=1)
    header = f"P5\n{gw * upscale} {gh * upscale}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def write_pgm(path: str, r: RolloutResult, grid: Tuple[int, int], upscale: int = 8) -> None:
    with open(path, "wb") as f:
        f.write(render_pgm(r, grid, upscale))
