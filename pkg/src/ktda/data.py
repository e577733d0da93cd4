"""Synthetic fine-grained segmentation data and its on-disk formats.

Masks come from seeded value noise (a coarse random lattice upsampled with
the engine's bilinear kernel) quantile-thresholded into K coverage bands,
so class regions are spatially coherent with ambiguous boundaries. Images
color each band with a class base color plus smooth and per-pixel texture
noise. Everything is a pure function of (seed, index).

KSEG sample file layout (little-endian):
  magic "KSEG" | version u32 | H u32 | W u32 | K u32 | C u32 | ignore u32
  | image f32 CHW | mask u8 row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import IGNORE_INDEX
from .tensor import Tensor

KSEG_MAGIC = b"KSEG"
KSEG_VERSION = 1
_HEADER = struct.Struct("<4s6I")

MANIFEST_NAME = "manifest.tsv"

# base colors for the five coverage bands, sparse to dense vegetation;
# other K values interpolate along this ramp
_ANCHOR_COLORS = np.array(
    [
        [0.62, 0.54, 0.38],
        [0.55, 0.58, 0.33],
        [0.42, 0.58, 0.30],
        [0.28, 0.54, 0.26],
        [0.13, 0.45, 0.20],
    ]
)


class KsegError(IOError):
    """Base class for sample-format failures."""


class KsegMagicError(KsegError):
    pass


class KsegVersionError(KsegError):
    pass


class KsegTruncatedError(KsegError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # [3,H,W] float32 in [0,1]
    mask: np.ndarray  # [H,W] uint8 class ids
    id: str


@dataclass
class DatasetSpec:
    num_samples: int = 64
    patch: int = 256
    classes: int = 5
    class_weights: tuple | None = None  # target band proportions, default uniform
    train_fraction: float = 0.8
    seed: int = 0
    noise_cells: int | None = None  # lattice cells per axis; default patch // 8

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if not 64 <= self.patch <= 512 and self.patch not in (16, 32):
            raise ValueError(f"patch size {self.patch} outside supported range")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if len(w) != self.classes or (w <= 0).any():
                raise ValueError("class_weights must be positive, one per class")
            self.class_weights = tuple(float(x) for x in w / w.sum())

    @property
    def lattice_cells(self):
        if self.noise_cells is not None:
            return max(2, int(self.noise_cells))
        # default pitch ~8 px: regions stay coherent at the resolution the
        # 8-px-patch architecture resolves, so desk-scale runs can learn
        # boundaries rather than subsampling artifacts
        return max(2, self.patch // 8 - 1)

    @property
    def band_fractions(self):
        if self.class_weights is None:
            return np.full(self.classes, 1.0 / self.classes)
        return np.asarray(self.class_weights)


def sample_id(index):
    return f"s{index:06d}"


def value_noise(rng, cells, h, w):
    """Random lattice upsampled with the engine's bilinear kernel."""
    lattice = rng.standard_normal((cells + 1, cells + 1))
    with T.no_grad(), T.precision("float64"):
        field = T.bilinear_resize(Tensor(lattice[None, None]), h, w)
    return field.data[0, 0]


def class_colors(k):
    if k == len(_ANCHOR_COLORS):
        return _ANCHOR_COLORS.copy()
    pos = np.linspace(0, len(_ANCHOR_COLORS) - 1, k)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_ANCHOR_COLORS) - 1)
    frac = (pos - lo)[:, None]
    return _ANCHOR_COLORS[lo] * (1 - frac) + _ANCHOR_COLORS[hi] * frac


def generate_sample(spec: DatasetSpec, index) -> Sample:
    if not 0 <= index < spec.num_samples:
        raise IndexError(f"sample index {index} outside [0, {spec.num_samples})")
    h = w = spec.patch
    k = spec.classes
    rng = np.random.default_rng([spec.seed, index])

    field = value_noise(rng, spec.lattice_cells, h, w)
    cum = np.cumsum(spec.band_fractions)[:-1]
    thresholds = np.quantile(field, cum)
    mask = np.searchsorted(thresholds, field).astype(np.uint8)

    colors = class_colors(k)
    image = colors[mask].transpose(2, 0, 1)
    shade = value_noise(rng, max(2, spec.lattice_cells // 2), h, w)
    image = image + 0.05 * shade[None]
    image = image + 0.03 * rng.standard_normal((3, h, w))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, mask=mask, id=sample_id(index))


def split_ids(spec: DatasetSpec):
    """Seeded shuffle, floor(train_fraction * n) ids to the train side."""
    if spec.num_samples < 5:
        raise ValueError(f"too few samples to split: {spec.num_samples} < 5")
    rng = np.random.default_rng([spec.seed, 2**20])
    order = rng.permutation(spec.num_samples)
    n_train = int(spec.num_samples * spec.train_fraction)
    train = sorted(sample_id(i) for i in order[:n_train])
    test = sorted(sample_id(i) for i in order[n_train:])
    return train, test


def write_sample(path, sample: Sample, num_classes=None):
    image = np.ascontiguousarray(sample.image, dtype="<f4")
    mask = np.ascontiguousarray(sample.mask, dtype=np.uint8)
    c, h, w = image.shape
    if num_classes is None:  # informational header field, best effort
        num_classes = int(mask[mask != IGNORE_INDEX].max(initial=0)) + 1
    header = _HEADER.pack(KSEG_MAGIC, KSEG_VERSION, h, w, num_classes, c, IGNORE_INDEX)
    with open(path, "wb") as f:
        f.write(header)
        f.write(image.tobytes())
        f.write(mask.tobytes())


def read_sample(path) -> Sample:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise KsegTruncatedError(f"{path}: expected >= {_HEADER.size} header bytes, got {len(raw)}")
    magic, version, h, w, _k, c, _ignore = _HEADER.unpack_from(raw)
    if magic != KSEG_MAGIC:
        raise KsegMagicError(f"{path}: bad magic {magic!r}, expected {KSEG_MAGIC!r}")
    if version != KSEG_VERSION:
        raise KsegVersionError(f"{path}: version {version}, expected {KSEG_VERSION}")
    img_bytes = 4 * c * h * w
    expected = _HEADER.size + img_bytes + h * w
    if len(raw) != expected:
        raise KsegTruncatedError(f"{path}: expected {expected} bytes, got {len(raw)}")
    image = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=_HEADER.size).reshape(c, h, w)
    mask = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=_HEADER.size + img_bytes)
    stem = os.path.splitext(os.path.basename(path))[0]
    return Sample(image=image.copy(), mask=mask.reshape(h, w).copy(), id=stem)


def write_manifest(out_dir, train, test):
    lines = [f"{sid}\ttrain" for sid in train] + [f"{sid}\ttest" for sid in test]
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(data_dir):
    path = os.path.join(data_dir, MANIFEST_NAME)
    train, test = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            sid, part = line.split("\t")
            (train if part == "train" else test).append(sid)
    return train, test


def generate_dataset(spec: DatasetSpec, out_dir):
    """Materialize every sample as KSEG plus the train/test manifest."""
    os.makedirs(out_dir, exist_ok=True)
    train, test = split_ids(spec)
    for i in range(spec.num_samples):
        s = generate_sample(spec, i)
        write_sample(os.path.join(out_dir, s.id + ".kseg"), s, num_classes=spec.classes)
    write_manifest(out_dir, train, test)
    return train, test


class Dataset:
    """KSEG directory reader with an in-memory cache (desk-scale data)."""

    def __init__(self, data_dir):
        self.dir = data_dir
        self.train_ids, self.test_ids = read_manifest(data_dir)
        self._cache = {}

    def ids(self, part):
        if part == "train":
            return list(self.train_ids)
        if part == "test":
            return list(self.test_ids)
        raise ValueError(f"unknown split '{part}'")

    def load(self, sid) -> Sample:
        if sid not in self._cache:
            self._cache[sid] = read_sample(os.path.join(self.dir, sid + ".kseg"))
        return self._cache[sid]

    def batch_arrays(self, sids):
        images = np.stack([self.load(s).image for s in sids]).astype(T.default_dtype())
        masks = np.stack([self.load(s).mask for s in sids])
        return images, masks


def batch_iter(ids, batch_size, seed, epoch):
    """Seeded per-epoch shuffle; the final short batch is emitted."""
    if not ids:
        raise ValueError("batch_iter: empty id list")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, 2**21, epoch])
    order = rng.permutation(len(ids))
    for lo in range(0, len(ids), batch_size):
        yield [ids[i] for i in order[lo : lo + batch_size]]
