"""
CrossFundus synthetic data
Paired CFP/IFP images with planted lesions, stratified splitting, augmentation and CFTD file I/O
"""

import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from errors import (AugmentError, BadMagicError, ConfigError, DatasetFormatError, SplitError,
                    TruncatedFileError, VersionMismatchError)

logger = logging.getLogger(__name__)

MAGIC = b"CFTD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH")
_SHAPE = struct.Struct("<IIIIH")

# no DR, mild, moderate, severe NPDR, PDR
CIDR_COUNTS = (714, 123, 249, 267, 360)
LESION_KINDS = ("hemorrhage", "exudate", "detachment")

# amplitude in CFP, amplitude in IFP
_CONTRAST = {
    "hemorrhage": (-0.30, -0.32),
    "exudate": (0.32, 0.28),
    "detachment": (0.30, 0.15),
}


@dataclass
class SynthConfig:
    """Everything the generator depends on; generation is a pure function of this"""
    n_samples: int = 2000
    H: int = 32
    W: int = 32
    C_in: int = 1
    k: int = 5
    complementarity: float = 0.7
    occlusion: float = 1.5
    seed: int = 0
    label_distribution: str = "balanced"
    cfp_exclusive_share: float = 0.5
    noise: float = 0.03

    def validate(self) -> "SynthConfig":
        if self.n_samples < 0:
            raise ConfigError(f"data.n_samples must be >= 0, got {self.n_samples}", "data.n_samples")
        for key in ("H", "W", "C_in"):
            if getattr(self, key) < 1:
                raise ConfigError(f"data.{key} must be >= 1, got {getattr(self, key)}", f"data.{key}")
        if not 2 <= self.k <= 255:
            raise ConfigError(f"data.k must lie in [2, 255], got {self.k}", "data.k")
        for key in ("complementarity", "cfp_exclusive_share"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"data.{key} must lie in [0, 1], got {getattr(self, key)}", f"data.{key}")
        if self.occlusion < 0 or self.noise < 0:
            raise ConfigError("data.occlusion and data.noise must be >= 0", "data.occlusion")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"data.seed must be a 64-bit unsigned integer, got {self.seed}", "data.seed")
        if self.label_distribution not in ("balanced", "cidr"):
            raise ConfigError(f"data.label_distribution must be 'balanced' or 'cidr', got {self.label_distribution!r}",
                              "data.label_distribution")
        if self.label_distribution == "cidr" and self.k != len(CIDR_COUNTS):
            raise ConfigError("the cidr label distribution needs k = 5", "data.k")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class PairedSample:
    cfp: np.ndarray
    ifp: np.ndarray
    label: int


@dataclass
class Dataset:
    samples: List[PairedSample]
    H: int
    W: int
    C_in: int
    k: int
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def label_histogram(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.k).astype(int).tolist()

    def arrays(self, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        shape = (len(self.samples), self.H, self.W, self.C_in)
        if not self.samples:
            return np.zeros(shape, dtype), np.zeros(shape, dtype), np.zeros(0, np.int64)
        cfp = np.stack([s.cfp for s in self.samples]).astype(dtype)
        ifp = np.stack([s.ifp for s in self.samples]).astype(dtype)
        return cfp, ifp, self.labels

    def subset(self, indices: Sequence[int]) -> "Dataset":
        meta = dict(self.metadata)
        chosen = [self.samples[i] for i in indices]
        labels = np.array([s.label for s in chosen], dtype=np.int64)
        meta["label_histogram"] = np.bincount(labels, minlength=self.k).astype(int).tolist()
        return replace(self, samples=chosen, metadata=meta)

    def equals(self, other: "Dataset") -> bool:
        """Bitwise equality of extents, labels and pixels"""
        if (self.H, self.W, self.C_in, self.k, len(self)) != (other.H, other.W, other.C_in, other.k, len(other)):
            return False
        for a, b in zip(self.samples, other.samples):
            if a.label != b.label or a.cfp.tobytes() != b.cfp.tobytes() or a.ifp.tobytes() != b.ifp.tobytes():
                return False
        return True


# ---------------------------------------------------------------------------
# Generation


def _labels(cfg: SynthConfig) -> np.ndarray:
    if cfg.label_distribution == "balanced":
        return np.arange(cfg.n_samples, dtype=np.int64) % cfg.k
    props = np.asarray(CIDR_COUNTS, dtype=np.float64) / sum(CIDR_COUNTS)
    raw = props * cfg.n_samples
    counts = np.floor(raw).astype(np.int64)
    # largest remainders take the leftover samples, lowest class first on ties
    order = sorted(range(cfg.k), key=lambda c: (-(raw[c] - counts[c]), c))
    for c in order[: cfg.n_samples - int(counts.sum())]:
        counts[c] += 1
    labels = np.repeat(np.arange(cfg.k, dtype=np.int64), counts)
    return np.random.default_rng([cfg.seed, 0xC1D2]).permutation(labels)


def _fundus_base(rng: np.random.Generator, H: int, W: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    radius = 0.47 * min(H, W)
    r = np.hypot(yy - cy, xx - cx) / radius
    disk = (r <= 1.0).astype(np.float64)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=(H, W)), sigma=max(H, W) / 12.0)
    texture /= max(np.abs(texture).max(), 1e-12)
    base = disk * (0.5 - 0.12 * r ** 2 + 0.04 * texture) + (1.0 - disk) * 0.04
    return base, disk


def _lesion_mask(rng: np.random.Generator, kind: str, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    scale = min(H, W) / 32.0
    radius = 0.47 * min(H, W)
    rho = radius * 0.65 * math.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    cy = (H - 1) / 2.0 + rho * math.sin(phi)
    cx = (W - 1) / 2.0 + rho * math.cos(phi)
    dy, dx = yy - cy, xx - cx
    if kind == "detachment":
        r0 = rng.uniform(2.5, 4.5) * scale
        width = 0.9 * scale
        start = rng.uniform(0.0, 2.0 * math.pi)
        span = rng.uniform(0.5 * math.pi, math.pi)
        angle = np.mod(np.arctan2(dy, dx) - start, 2.0 * math.pi)
        return np.exp(-((np.hypot(dy, dx) - r0) / width) ** 2) * (angle <= span)
    theta = rng.uniform(0.0, math.pi)
    ry, rx = rng.uniform(1.2, 2.4, size=2) * scale
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return np.exp(-((u / rx) ** 2 + (v / ry) ** 2))


def _haze(img: np.ndarray, occlusion: float, disk: np.ndarray) -> np.ndarray:
    """Cataract model: Gaussian blur of strength `occlusion` plus an additive gray veil"""
    if occlusion <= 0:
        return img
    veil = min(0.6, 0.2 * occlusion)
    return (1.0 - veil) * ndimage.gaussian_filter(img, sigma=occlusion) + veil * 0.55 * disk


def _channels(img: np.ndarray, c: int, tint: Sequence[float]) -> np.ndarray:
    return np.stack([img * tint[i % len(tint)] for i in range(c)], axis=-1)


def generate_sample(cfg: SynthConfig, index: int, label: int) -> PairedSample:
    """One pair from its own RNG stream derived from (seed, index)"""
    rng = np.random.default_rng([cfg.seed, index])
    H, W = cfg.H, cfg.W
    base, disk = _fundus_base(rng, H, W)
    shared_cf = np.zeros((H, W))
    shared_if = np.zeros((H, W))
    only_cf = np.zeros((H, W))
    only_if = np.zeros((H, W))
    for _ in range(label):
        kind = LESION_KINDS[int(rng.integers(len(LESION_KINDS)))]
        mask = _lesion_mask(rng, kind, H, W) * disk
        amp_cf, amp_if = _CONTRAST[kind]
        if rng.uniform() < cfg.complementarity:
            if rng.uniform() < cfg.cfp_exclusive_share:
                only_cf += amp_cf * mask
            else:
                only_if += amp_if * mask
        else:
            shared_cf += amp_cf * mask
            shared_if += amp_if * mask

    cfp = _haze(base + shared_cf, cfg.occlusion, disk) + only_cf
    ifp = 0.85 * base + 0.06 * disk + shared_if + only_if
    cfp = cfp + rng.normal(0.0, cfg.noise, size=(H, W))
    ifp = ifp + rng.normal(0.0, cfg.noise, size=(H, W))
    cfp = np.clip(_channels(cfp, cfg.C_in, (1.0, 0.8, 0.6)), 0.0, 1.0).astype(np.float32)
    ifp = np.clip(_channels(ifp, cfg.C_in, (1.0,)), 0.0, 1.0).astype(np.float32)
    return PairedSample(cfp=cfp, ifp=ifp, label=int(label))


def generate_dataset(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    labels = _labels(cfg)
    samples = [generate_sample(cfg, i, int(labels[i])) for i in range(cfg.n_samples)]
    ds = Dataset(samples=samples, H=cfg.H, W=cfg.W, C_in=cfg.C_in, k=cfg.k)
    ds.metadata = {"config": cfg.to_dict(), "format_version": FORMAT_VERSION,
                   "label_histogram": ds.label_histogram()}
    logger.info("generated %d pairs (%dx%dx%d), label histogram %s",
                len(ds), cfg.H, cfg.W, cfg.C_in, ds.metadata["label_histogram"])
    return ds


# ---------------------------------------------------------------------------
# Splitting


def stratified_split(ds: Dataset, train_frac: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Per-class proportional split; every class keeps at least one validation sample"""
    if not 0.0 < train_frac < 1.0:
        raise SplitError(f"train_frac must lie in (0, 1), got {train_frac}")
    labels = ds.labels
    train_idx: List[int] = []
    val_idx: List[int] = []
    for c in range(ds.k):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        if members.size < 2:
            raise SplitError(f"class {c} has {members.size} sample; at least 2 are needed to split")
        members = np.random.default_rng([seed, c]).permutation(members)
        n_val = int(math.floor((1.0 - train_frac) * members.size + 0.5))
        n_val = min(max(1, n_val), members.size - 1)
        val_idx.extend(members[:n_val].tolist())
        train_idx.extend(members[n_val:].tolist())
    return ds.subset(sorted(train_idx)), ds.subset(sorted(val_idx))


# ---------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    crop_min: float = 0.85
    max_rotation_deg: float = 10.0
    max_shift: float = 1.5
    scale_range: float = 0.05
    brightness: float = 0.05
    contrast: float = 0.1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class AugmentParams:
    """One concrete draw; geometric fields apply to both modalities, jitter per modality"""
    hflip: bool
    vflip: bool
    crop_top: int
    crop_left: int
    crop_h: int
    crop_w: int
    angle_deg: float
    shift_y: float
    shift_x: float
    scale: float
    jitter_cf: Tuple[float, float]
    jitter_if: Tuple[float, float]

    @classmethod
    def identity(cls, H: int, W: int) -> "AugmentParams":
        return cls(False, False, 0, 0, H, W, 0.0, 0.0, 0.0, 1.0, (0.0, 1.0), (0.0, 1.0))


def draw_augment_params(rng: np.random.Generator, H: int, W: int,
                        cfg: Optional[AugmentConfig] = None) -> AugmentParams:
    cfg = cfg or AugmentConfig()
    frac = rng.uniform(cfg.crop_min, 1.0)
    crop_h = max(1, min(H, int(round(H * frac))))
    crop_w = max(1, min(W, int(round(W * frac))))
    return AugmentParams(
        hflip=bool(rng.uniform() < cfg.flip_p),
        vflip=bool(rng.uniform() < cfg.flip_p),
        crop_top=int(rng.integers(0, H - crop_h + 1)),
        crop_left=int(rng.integers(0, W - crop_w + 1)),
        crop_h=crop_h,
        crop_w=crop_w,
        angle_deg=float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)),
        shift_y=float(rng.uniform(-cfg.max_shift, cfg.max_shift)),
        shift_x=float(rng.uniform(-cfg.max_shift, cfg.max_shift)),
        scale=float(1.0 + rng.uniform(-cfg.scale_range, cfg.scale_range)),
        jitter_cf=(float(rng.uniform(-cfg.brightness, cfg.brightness)),
                   float(1.0 + rng.uniform(-cfg.contrast, cfg.contrast))),
        jitter_if=(float(rng.uniform(-cfg.brightness, cfg.brightness)),
                   float(1.0 + rng.uniform(-cfg.contrast, cfg.contrast))),
    )


def _geometric(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    H, W = img.shape[:2]
    out = img
    if p.hflip:
        out = out[:, ::-1]
    if p.vflip:
        out = out[::-1, :]
    if (p.crop_top, p.crop_left, p.crop_h, p.crop_w) != (0, 0, H, W):
        if p.crop_h > H or p.crop_w > W or p.crop_top + p.crop_h > H or p.crop_left + p.crop_w > W:
            raise AugmentError(f"crop {p.crop_h}x{p.crop_w} at ({p.crop_top}, {p.crop_left}) exceeds image {H}x{W}")
        window = out[p.crop_top:p.crop_top + p.crop_h, p.crop_left:p.crop_left + p.crop_w]
        rows = np.minimum((np.arange(H) * p.crop_h) // H, p.crop_h - 1)
        cols = np.minimum((np.arange(W) * p.crop_w) // W, p.crop_w - 1)
        out = window[rows][:, cols]
    if p.angle_deg != 0.0 or p.shift_y != 0.0 or p.shift_x != 0.0 or p.scale != 1.0:
        a = math.radians(p.angle_deg)
        # maps output coordinates back to input coordinates
        inv = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]]) / p.scale
        center = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
        offset = center - inv @ (center + np.array([p.shift_y, p.shift_x]))
        out = np.stack([ndimage.affine_transform(out[..., c], inv, offset=offset, order=0, mode="nearest")
                        for c in range(out.shape[-1])], axis=-1)
    return np.ascontiguousarray(out)


def _jitter(img: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    if brightness == 0.0 and contrast == 1.0:
        return img
    return (img - 0.5) * contrast + 0.5 + brightness


def apply_augment(s: PairedSample, p: AugmentParams) -> PairedSample:
    """Same geometric transform on both images, independent colour jitter, clamp to [0, 1]"""
    if s.cfp.shape != s.ifp.shape:
        raise AugmentError(f"modalities differ in shape: {s.cfp.shape} vs {s.ifp.shape}")
    cfp = _jitter(_geometric(s.cfp, p), *p.jitter_cf)
    ifp = _jitter(_geometric(s.ifp, p), *p.jitter_if)
    return PairedSample(cfp=np.clip(cfp, 0.0, 1.0).astype(s.cfp.dtype),
                        ifp=np.clip(ifp, 0.0, 1.0).astype(s.ifp.dtype), label=s.label)


def augment(s: PairedSample, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None) -> PairedSample:
    H, W = s.cfp.shape[:2]
    return apply_augment(s, draw_augment_params(rng, H, W, cfg))


# ---------------------------------------------------------------------------
# CFTD file format


def encode_dataset(ds: Dataset) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION), _SHAPE.pack(len(ds), ds.H, ds.W, ds.C_in, ds.k)]
    for s in ds.samples:
        parts.append(struct.pack("<B", s.label))
        parts.append(np.ascontiguousarray(s.cfp, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.ifp, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_dataset(blob: bytes) -> Dataset:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _HEADER.size + _SHAPE.size:
        raise TruncatedFileError(f"header needs {_HEADER.size + _SHAPE.size} bytes, file has {len(blob)}")
    _, version = _HEADER.unpack_from(blob, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this build reads {FORMAT_VERSION}")
    n, H, W, C, k = _SHAPE.unpack_from(blob, _HEADER.size)
    if k < 2:
        raise DatasetFormatError(f"header declares k={k} classes, at least 2 are needed")
    pixels = H * W * C
    record = 1 + 8 * pixels
    offset = _HEADER.size + _SHAPE.size
    expected = offset + n * record
    if len(blob) < expected:
        raise TruncatedFileError(f"{n} samples need {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise DatasetFormatError(f"{len(blob) - expected} trailing bytes after {n} samples")
    samples = []
    for i in range(n):
        label = blob[offset]
        if label >= k:
            raise DatasetFormatError(f"sample {i} has label {label}, outside [0, {k})")
        cfp = np.frombuffer(blob, dtype="<f4", count=pixels, offset=offset + 1).reshape(H, W, C)
        ifp = np.frombuffer(blob, dtype="<f4", count=pixels, offset=offset + 1 + 4 * pixels).reshape(H, W, C)
        samples.append(PairedSample(cfp=cfp.astype(np.float32), ifp=ifp.astype(np.float32), label=int(label)))
        offset += record
    ds = Dataset(samples=samples, H=H, W=W, C_in=C, k=k)
    ds.metadata = {"format_version": version, "label_histogram": ds.label_histogram()}
    return ds


def save_dataset(path: str, ds: Dataset) -> None:
    with open(path, "wb") as f:
        f.write(encode_dataset(ds))
    logger.info("wrote %d pairs to %s", len(ds), path)


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        return decode_dataset(f.read())


# ---------------------------------------------------------------------------
# Pilot probe


def linear_probe_accuracy(train: Dataset, val: Dataset, modality: str, seed: int = 0) -> float:
    """Validation accuracy of a logistic-regression probe on one modality's flattened pixels"""
    if modality not in ("cfp", "ifp"):
        raise ValueError(f"modality must be 'cfp' or 'ifp', got {modality!r}")
    pick = 0 if modality == "cfp" else 1
    x_train = train.arrays(np.float64)[pick].reshape(len(train), -1)
    x_val = val.arrays(np.float64)[pick].reshape(len(val), -1)
    probe = make_pipeline(StandardScaler(), LogisticRegression(C=0.05, max_iter=2000, random_state=seed))
    probe.fit(x_train, train.labels)
    return float((probe.predict(x_val) == val.labels).mean())
