"""Datasets: containers, rotating synthetic shift, IDX/CSV io, and splits."""

from __future__ import annotations

import csv
import gzip
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidArgument

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MOONS_CENTER = np.array([0.5, 0.25])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """Feature rows with integer labels in ``[0, num_classes)``.

    ``raster`` marks rows that are flattened square images. ``angles`` holds the
    cumulative rotation (degrees) applied to each row, when known.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    raster: bool = False
    angles: Optional[np.ndarray] = None
    domain: str = ""

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] < 1:
            raise InvalidArgument(f"features must be a non-empty n x d matrix, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InvalidArgument("labels must be a vector with one entry per row")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise InvalidArgument("labels must be integers")
        y = y.astype(np.int64)
        if self.num_classes < 1:
            raise InvalidArgument("num_classes must be >= 1")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise InvalidArgument(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "labels", _frozen(y))
        if self.angles is not None:
            object.__setattr__(self, "angles", _frozen(np.asarray(self.angles, dtype=np.float64)))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx)
        return LabeledSet(
            self.features[idx],
            self.labels[idx],
            self.num_classes,
            raster=self.raster,
            angles=None if self.angles is None else self.angles[idx],
            domain=self.domain,
        )

    def unlabeled(self) -> "UnlabeledSet":
        return UnlabeledSet(self.features, raster=self.raster, angles=self.angles, domain=self.domain)


@dataclass(frozen=True, eq=False)
class UnlabeledSet:
    features: np.ndarray
    raster: bool = False
    angles: Optional[np.ndarray] = None
    domain: str = ""

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise InvalidArgument(f"features must be a non-empty n x d matrix, got shape {x.shape}")
        object.__setattr__(self, "features", _frozen(x))
        if self.angles is not None:
            object.__setattr__(self, "angles", _frozen(np.asarray(self.angles, dtype=np.float64)))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "UnlabeledSet":
        idx = np.asarray(idx)
        return UnlabeledSet(
            self.features[idx],
            raster=self.raster,
            angles=None if self.angles is None else self.angles[idx],
            domain=self.domain,
        )


AnySet = Union[LabeledSet, UnlabeledSet]


@dataclass(frozen=True)
class RotationSpec:
    angle_lo: float
    angle_hi: float
    seed: int = 0

    def __post_init__(self):
        if self.angle_lo > self.angle_hi:
            raise InvalidArgument(f"angle_lo {self.angle_lo} > angle_hi {self.angle_hi}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "RotationSpec":
        """Parse ``"lo:hi"`` (degrees)."""
        try:
            lo, hi = (float(v) for v in text.split(":"))
        except ValueError as exc:
            raise InvalidArgument(f"rotation must look like LO:HI, got {text!r}") from exc
        return cls(lo, hi, seed)


@dataclass(frozen=True, eq=False)
class SsdaSplit:
    labeled_target: LabeledSet
    unlabeled_target: Optional[UnlabeledSet]
    labels_per_class: int
    # held out for evaluation only; never passed to training
    unlabeled_labels: Optional[np.ndarray] = None
    labeled_indices: Optional[np.ndarray] = None
    unlabeled_indices: Optional[np.ndarray] = None


def make_two_moons(n: int, noise: float = 0.1, seed: int = 0, center: bool = True) -> LabeledSet:
    """Two interleaved unit crescents, ``n - n // 2`` samples in class 0.

    Class 0 lies on ``(cos t, sin t)`` and class 1 on ``(1 - cos t, 0.5 - sin t)``
    with ``t`` uniform on ``[0, pi]``, before isotropic Gaussian noise. With
    ``center`` the pair is translated by ``-MOONS_CENTER`` so that rotating about
    the origin turns the dataset about its middle.
    """
    if n < 2:
        raise InvalidArgument(f"need n >= 2, got {n}")
    if noise < 0:
        raise InvalidArgument(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    n0 = n - n // 2
    n1 = n // 2
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    if center:
        x = x - MOONS_CENTER
    perm = rng.permutation(n)
    return LabeledSet(x[perm], y[perm], 2, angles=np.zeros(n), domain="moons")


def rotate_points(x: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    """Rotate each 2-D row counter-clockwise about the origin."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    return np.column_stack([c * x[:, 0] - s * x[:, 1], s * x[:, 0] + c * x[:, 1]])


def rotate_raster(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a square image about its center, bilinear with zero fill."""
    out = ndimage.rotate(img, degrees, reshape=False, order=1, mode="constant", cval=0.0, prefilter=False)
    return np.clip(out, 0.0, 1.0)


def _side(d: int) -> int:
    side = math.isqrt(d)
    if side * side != d:
        raise InvalidArgument(f"raster mode needs a square feature count, got d={d}")
    return side


def rotate(data: AnySet, spec: RotationSpec) -> AnySet:
    """Rotate every sample by its own angle drawn from ``[angle_lo, angle_hi]``."""
    rng = np.random.default_rng(spec.seed)
    angles = rng.uniform(spec.angle_lo, spec.angle_hi, data.n)
    x = data.features
    if data.raster:
        side = _side(data.dim)
        out = np.empty_like(x)
        for i in range(data.n):
            if angles[i] == 0.0:
                out[i] = x[i]
            else:
                out[i] = rotate_raster(x[i].reshape(side, side), angles[i]).ravel()
    else:
        if data.dim != 2:
            raise InvalidArgument(f"point mode needs 2-D features, got d={data.dim}")
        out = rotate_points(x, angles)
    total = angles if data.angles is None else data.angles + angles
    if isinstance(data, LabeledSet):
        return LabeledSet(out, data.labels, data.num_classes, raster=data.raster, angles=total, domain=data.domain)
    return UnlabeledSet(out, raster=data.raster, angles=total, domain=data.domain)


def _open(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: file shorter than IDX header")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise FormatError(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise FormatError(f"{path}: header declares {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_images(images_path, labels_path, num_classes: int = 10) -> LabeledSet:
    """Read an MNIST-style IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"label {int(labels.max())} out of range for K={num_classes}")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledSet(x, labels.astype(np.int64), num_classes, raster=True,
                      angles=np.zeros(x.shape[0]), domain="idx")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(data: LabeledSet, fraction: float, seed: int = 0) -> tuple[LabeledSet, LabeledSet]:
    """Shuffle and cut into ``round(n * fraction)`` rows and the remainder."""
    if not 0.0 < fraction < 1.0:
        raise InvalidArgument(f"fraction must be in (0, 1), got {fraction}")
    first, second = split_indices(data.n, fraction, seed)
    return data.subset(first), data.subset(second)


def split_indices(n: int, fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    k = round_half_up(n * fraction)
    if k == 0 or k == n:
        raise InvalidArgument(f"split of n={n} at {fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:k], perm[k:]


def make_ssda_split(target: LabeledSet, labels_per_class: int, seed: int = 0) -> SsdaSplit:
    """Label ``labels_per_class`` random samples of every class; the rest stay unlabeled."""
    if labels_per_class < 1:
        raise InvalidArgument("labels_per_class must be >= 1 (use plain DA otherwise)")
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(target.num_classes):
        members = np.flatnonzero(target.labels == k)
        if members.size < labels_per_class:
            raise InvalidArgument(
                f"class {k} has {members.size} samples, fewer than labels_per_class={labels_per_class}"
            )
        chosen.append(rng.choice(members, size=labels_per_class, replace=False))
    labeled_idx = np.sort(np.concatenate(chosen))
    mask = np.ones(target.n, dtype=bool)
    mask[labeled_idx] = False
    rest = np.flatnonzero(mask)
    unlabeled = target.subset(rest).unlabeled() if rest.size else None
    return SsdaSplit(
        labeled_target=target.subset(labeled_idx),
        unlabeled_target=unlabeled,
        labels_per_class=labels_per_class,
        unlabeled_labels=_frozen(target.labels[rest]) if rest.size else None,
        labeled_indices=labeled_idx,
        unlabeled_indices=rest,
    )


def write_csv(data: AnySet, path) -> None:
    d = data.dim
    labels = data.labels if isinstance(data, LabeledSet) else np.full(data.n, -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(d)] + ["label"])
        for row, lab in zip(data.features, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def read_csv(path, num_classes: Optional[int] = None, raster: bool = False) -> AnySet:
    """Read the ``f0,...,f{d-1},label`` format; a label column of all -1 gives an UnlabeledSet."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = rows[0]
    d = len(header) - 1
    if d < 1 or header[-1] != "label" or header[:-1] != [f"f{j}" for j in range(d)]:
        raise FormatError(f"{path}:1: missing or malformed header")
    x = np.empty((len(rows) - 1, d))
    y = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != d + 1:
            raise FormatError(f"{path}:{line}: expected {d + 1} fields, got {len(row)}")
        try:
            x[i] = [float(v) for v in row[:-1]]
            lab = float(row[-1])
        except ValueError as exc:
            raise FormatError(f"{path}:{line}: non-numeric cell") from exc
        if lab != int(lab) or lab < -1:
            raise FormatError(f"{path}:{line}: bad label {row[-1]!r}")
        y[i] = int(lab)
    if x.shape[0] == 0:
        raise FormatError(f"{path}: no data rows")
    if np.all(y == -1):
        return UnlabeledSet(x, raster=raster, domain=path.stem)
    if np.any(y == -1):
        raise FormatError(f"{path}: mixes labeled and unlabeled rows")
    k = int(y.max()) + 1 if num_classes is None else num_classes
    if y.max() >= k:
        raise FormatError(f"{path}: label {int(y.max())} out of range for K={k}")
    return LabeledSet(x, y, k, raster=raster, domain=path.stem)
