"""Procedural toy-face generator with known identity, yaw and expression factors.

Every image is a pure function of its :class:`FactorTuple`; datasets are pure
functions of a :class:`GeneratorConfig`.

Dataset file layout (all integers and floats little-endian)::

    magic          8 bytes   b"IPDFDS\\x00\\x01"
    header_len     uint32
    header         header_len bytes of UTF-8 JSON (sorted keys): version,
                   shape [H, W, C], K, K_P, seed, n_samples, n_folds,
                   config, folds {identity_id: fold}
    records        n_samples x RECORD_DTYPE:
                     identity_id     int32
                     yaw_deg         float64
                     expression_id   int32
                     y_e             int32
                     y_p             int32
                     fold            int32
                     identity_params 4 x float32
                     pixels          H*W*C x float32 (row-major H, W, C)
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GENERATOR_VERSION = 1
MAGIC = b"IPDFDS\x00\x01"
NEUTRAL = 0
NUM_POSE_BUCKETS = 5
MAX_YAW = 50.0
# bucket edges in degrees; bucket k covers [edge[k-1], edge[k])
POSE_EDGES = (10.0, 20.0, 30.0, 40.0)
EXPRESSION_NAMES = ("neutral", "happy", "sad", "surprise")

_ID_SALT = 0x1D5EED
_CHANNEL_GAINS = (1.0, 0.85, 0.7)


class DomainError(ValueError):
    """A factor lies outside the generator's domain."""


class ConfigError(ValueError):
    """Invalid generator configuration."""


def identity_params(identity_id: int) -> np.ndarray:
    """(aspect, eye_spacing, feature_scale, intensity) for an identity."""
    if identity_id < 0:
        raise DomainError(f"identity_id must be >= 0, got {identity_id}")
    rng = np.random.default_rng([_ID_SALT, identity_id])
    lo = np.array([0.68, 0.20, 0.80, 0.40])
    hi = np.array([0.98, 0.42, 1.20, 0.95])
    return (lo + (hi - lo) * rng.random(4)).astype(np.float32)


@dataclass(frozen=True)
class FactorTuple:
    identity_id: int
    yaw_deg: float
    expression_id: int

    @property
    def identity_params(self) -> np.ndarray:
        return identity_params(self.identity_id)


@dataclass
class LabeledSample:
    image: np.ndarray
    y_e: int
    y_p: int
    identity_id: int


def pose_bucket(yaw_deg: float) -> int:
    """Map |yaw| in degrees to a pose label 0..4 using half-open 10 degree bins."""
    if not np.isfinite(yaw_deg) or yaw_deg < 0:
        raise DomainError(f"yaw must be a finite value >= 0, got {yaw_deg}")
    return int(np.searchsorted(POSE_EDGES, yaw_deg, side="right"))


def _coverage(sd: np.ndarray, pixel: float) -> np.ndarray:
    # linear ramp one pixel wide around the zero level set
    return np.clip(0.5 - sd / pixel, 0.0, 1.0)


def _ellipse_sd(u, v, cu, cv, ru, rv):
    r = np.sqrt(((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2)
    return (r - 1.0) * min(ru, rv)


def render(factors: FactorTuple, shape: tuple[int, int, int] = (32, 32, 1),
           n_expressions: int = 4) -> np.ndarray:
    """Rasterize one face as an (H, W, C) float32 array in [0, 1].

    Yaw turns the face toward +u (shifting features and narrowing the head);
    odd identities are mirrored so they turn the other way. Expression sets
    mouth curvature/opening and eye size.
    """
    h, w, c = shape
    if not 0.0 <= factors.yaw_deg <= MAX_YAW:
        raise DomainError(f"yaw_deg must be in [0, {MAX_YAW}], got {factors.yaw_deg}")
    if not 0 <= factors.expression_id < n_expressions:
        raise DomainError(f"unknown expression_id {factors.expression_id}")
    if factors.expression_id >= len(EXPRESSION_NAMES):
        raise DomainError(f"no drawing rule for expression_id {factors.expression_id}")
    if c not in (1, 3):
        raise DomainError(f"channels must be 1 or 3, got {c}")

    aspect, spacing, scale, intensity = (float(p) for p in factors.identity_params)
    t = np.deg2rad(factors.yaw_deg)
    st, ct = np.sin(t), np.cos(t)
    expr = factors.expression_id

    # pixel centres, symmetric about 0 so that u -> -u is an exact mirror
    u = ((np.arange(w) + 0.5) / (w / 2.0) - 1.0)[None, :]
    v = ((np.arange(h) + 0.5) / (h / 2.0) - 1.0)[:, None]
    pixel = 2.0 / w

    head_ru = 0.82 * aspect * (0.85 + 0.15 * ct)
    head = _coverage(_ellipse_sd(u, v, 0.08 * st, 0.0, head_ru, 0.86), pixel)

    fu = 0.6 * head_ru * st
    eye_r = 0.085 * scale * (1.5 if expr == 3 else 1.0)
    eye_ru = eye_r * (0.6 + 0.4 * ct)
    eye_du = spacing * (0.7 + 0.3 * ct)
    eyes = np.maximum(
        _coverage(_ellipse_sd(u, v, fu - eye_du, -0.25, eye_ru, eye_r), pixel),
        _coverage(_ellipse_sd(u, v, fu + eye_du, -0.25, eye_ru, eye_r), pixel),
    )

    nose_u = 1.35 * fu
    nose_sd = np.maximum(np.abs(u - nose_u) - 0.035 * scale, np.abs(v - 0.05) - 0.14)
    nose = _coverage(nose_sd, pixel)

    mouth_hw = 0.3 * scale * (0.7 + 0.3 * ct)
    if expr == 3:
        mouth = _coverage(_ellipse_sd(u, v, fu, 0.45, 0.13 * scale, 0.15 * scale), pixel)
    else:
        bend = {0: 0.0, 1: 0.2, 2: -0.2}[expr]
        r = (u - fu) / mouth_hw
        curve = 0.45 - bend * r ** 2 + 0.25 * bend
        mouth_sd = np.maximum(np.abs(v - curve) - 0.05 * scale, np.abs(u - fu) - mouth_hw)
        mouth = _coverage(mouth_sd, pixel)

    features = np.maximum(np.maximum(eyes, nose), mouth)
    gray = head * intensity * (1.0 - 0.8 * features)
    if factors.identity_id % 2 == 1:
        gray = gray[:, ::-1]
    img = np.stack([gray * _CHANNEL_GAINS[k] for k in range(c)], axis=-1)
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0), dtype=np.float32)


def mirror(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


@dataclass
class GeneratorConfig:
    n_identities: int = 20
    yaws: tuple[float, ...] = (0.0, 15.0, 25.0, 35.0, 45.0)
    n_expressions: int = 4
    height: int = 32
    width: int = 32
    channels: int = 1
    n_folds: int = 5
    noise_std: float = 0.0
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def validate(self) -> None:
        if self.n_identities < 2:
            raise ConfigError("n_identities must be >= 2")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.n_identities < self.n_folds:
            raise ConfigError(
                f"n_identities ({self.n_identities}) < n_folds ({self.n_folds})")
        if not 2 <= self.n_expressions <= len(EXPRESSION_NAMES):
            raise ConfigError(
                f"n_expressions must be in [2, {len(EXPRESSION_NAMES)}] (class 0 is neutral)")
        if not self.yaws:
            raise ConfigError("yaw grid is empty")
        for y in self.yaws:
            if not 0.0 <= y <= MAX_YAW:
                raise ConfigError(f"yaw {y} outside [0, {MAX_YAW}]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def record_dtype(shape: tuple[int, int, int]) -> np.dtype:
    return np.dtype([
        ("identity_id", "<i4"),
        ("yaw_deg", "<f8"),
        ("expression_id", "<i4"),
        ("y_e", "<i4"),
        ("y_p", "<i4"),
        ("fold", "<i4"),
        ("identity_params", "<f4", (4,)),
        ("pixels", "<f4", (int(np.prod(shape)),)),
    ])


@dataclass
class Dataset:
    """Images plus factor labels, stored column-wise."""

    images: np.ndarray          # (N, H, W, C) float32
    identity_id: np.ndarray     # (N,) int
    yaw_deg: np.ndarray         # (N,) float
    expression_id: np.ndarray   # (N,) int
    y_p: np.ndarray             # (N,) int
    fold: np.ndarray            # (N,) int, test fold of the sample's identity
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.y_e[i]), int(self.y_p[i]),
                             int(self.identity_id[i]))

    @property
    def y_e(self) -> np.ndarray:
        return self.expression_id

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def n_expressions(self) -> int:
        return int(self.metadata.get("K", int(self.expression_id.max()) + 1))

    def factors(self, i: int) -> FactorTuple:
        return FactorTuple(int(self.identity_id[i]), float(self.yaw_deg[i]),
                           int(self.expression_id[i]))

    def subset(self, mask: np.ndarray) -> "Dataset":
        idx = np.flatnonzero(mask)
        return Dataset(self.images[idx], self.identity_id[idx], self.yaw_deg[idx],
                       self.expression_id[idx], self.y_p[idx], self.fold[idx],
                       dict(self.metadata))

    def split(self, test_fold: int = 0) -> tuple["Dataset", "Dataset"]:
        """Person-independent (train, test) split for one fold."""
        is_test = self.fold == test_fold
        return self.subset(~is_test), self.subset(is_test)

    def save(self, path: str | Path) -> None:
        shape = self.shape
        rec = np.zeros(len(self), dtype=record_dtype(shape))
        rec["identity_id"] = self.identity_id
        rec["yaw_deg"] = self.yaw_deg
        rec["expression_id"] = self.expression_id
        rec["y_e"] = self.expression_id
        rec["y_p"] = self.y_p
        rec["fold"] = self.fold
        rec["identity_params"] = np.stack([identity_params(int(i)) for i in self.identity_id])
        rec["pixels"] = self.images.reshape(len(self), -1)
        header = dict(self.metadata)
        header["n_samples"] = len(self)
        header["shape"] = list(shape)
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.uint32(len(blob)).astype("<u4").tobytes())
            fh.write(blob)
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        n = int(np.frombuffer(raw, "<u4", 1, 8)[0])
        header = json.loads(raw[12:12 + n].decode("utf-8"))
        shape = tuple(header["shape"])
        rec = np.frombuffer(raw, record_dtype(shape), header["n_samples"], 12 + n)
        if np.any(rec["y_e"] != rec["expression_id"]):
            raise ValueError(f"{path}: inconsistent expression labels")
        return cls(
            images=rec["pixels"].reshape((-1,) + shape).copy(),
            identity_id=rec["identity_id"].astype(np.int64),
            yaw_deg=rec["yaw_deg"].astype(np.float64),
            expression_id=rec["expression_id"].astype(np.int64),
            y_p=rec["y_p"].astype(np.int64),
            fold=rec["fold"].astype(np.int64),
            metadata=header,
        )


def assign_folds(n_identities: int, n_folds: int, seed: int) -> np.ndarray:
    """Shuffle identities with ``seed`` and deal them round-robin into folds."""
    order = np.random.default_rng([seed, 0xF01D]).permutation(n_identities)
    folds = np.empty(n_identities, dtype=np.int64)
    folds[order] = np.arange(n_identities) % n_folds
    return folds


def build_dataset(config: GeneratorConfig) -> Dataset:
    """Render the full identities x yaws x expressions factorial."""
    config.validate()
    folds = assign_folds(config.n_identities, config.n_folds, config.seed)
    grid = [(i, float(y), e)
            for i in range(config.n_identities)
            for y in config.yaws
            for e in range(config.n_expressions)]
    images = np.empty((len(grid),) + config.shape, dtype=np.float32)
    for k, (i, y, e) in enumerate(grid):
        img = render(FactorTuple(i, y, e), config.shape, config.n_expressions)
        if config.noise_std > 0:
            # counter-based stream per sample: order of rendering is irrelevant
            rng = np.random.default_rng([config.seed, k])
            img = np.clip(img + rng.normal(0.0, config.noise_std, img.shape), 0.0, 1.0)
        images[k] = img
    ids = np.array([g[0] for g in grid], dtype=np.int64)
    yaws = np.array([g[1] for g in grid], dtype=np.float64)
    meta = {
        "version": GENERATOR_VERSION,
        "shape": list(config.shape),
        "K": config.n_expressions,
        "K_P": NUM_POSE_BUCKETS,
        "seed": config.seed,
        "n_folds": config.n_folds,
        "config": dataclasses.asdict(config),
        "folds": {str(i): int(f) for i, f in enumerate(folds)},
    }
    return Dataset(
        images=images,
        identity_id=ids,
        yaw_deg=yaws,
        expression_id=np.array([g[2] for g in grid], dtype=np.int64),
        y_p=np.array([pose_bucket(y) for y in yaws], dtype=np.int64),
        fold=folds[ids],
        metadata=meta,
    )


def bucket_histogram(dataset: Dataset) -> np.ndarray:
    return np.bincount(dataset.y_p, minlength=NUM_POSE_BUCKETS)


def write_pnm(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, C) image in [0,1] as binary PGM (C=1) or PPM (C=3)."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"cannot write {c}-channel image as PNM")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    c = 1 if m.group(1) == b"P5" else 3
    data = np.frombuffer(raw, np.uint8, w * h * c, m.end()).reshape(h, w, c)
    return data.astype(np.float32) / maxval
