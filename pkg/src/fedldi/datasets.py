"""Datasets, IDX I/O, and the three client partition regimes.

Regimes
-------
``IidRegime(delta)``
    every per-label count lies in ``[size/C * (1 - delta), size/C * (1 + delta)]``
``QuantityRegime(c_f)``
    samples are drawn only from a random subset of ``c_f`` classes
``DirichletRegime(alpha)``
    label proportions are drawn from ``Dir(alpha * 1_C)``
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import CapacityError, FormatError, ShapeError, ValidationError
from .numerics.rng import RngStream, as_generator

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    index: np.ndarray = None  # positions in the pool this was drawn from
    image_shape: tuple = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValidationError("features contain non-finite entries")
        self.features = feats
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError("labels length must equal the number of feature rows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")
        if self.index is not None:
            self.index = np.asarray(self.index, dtype=np.int64)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        base = self.index[idx] if self.index is not None else idx
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, base, self.image_shape)

    def class_indices(self) -> list:
        return [np.flatnonzero(self.labels == c) for c in range(self.n_classes)]


@dataclass(frozen=True, eq=False)
class LabelDistribution:
    p: np.ndarray
    counts: tuple = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).reshape(-1)
        if p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValidationError("label distribution entries must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError(f"label distribution sums to {p.sum()!r}, not 1")
        object.__setattr__(self, "p", p)

    def __eq__(self, other):
        if not isinstance(other, LabelDistribution):
            return NotImplemented
        return np.array_equal(self.p, other.p)

    def __hash__(self):
        return hash(self.p.tobytes())

    @classmethod
    def from_counts(cls, counts) -> "LabelDistribution":
        counts = np.asarray(counts, dtype=np.int64)
        total = int(counts.sum())
        if total <= 0:
            raise ValidationError("cannot build a distribution from zero counts")
        return cls(counts / total, tuple(int(c) for c in counts))

    @classmethod
    def uniform(cls, n_classes) -> "LabelDistribution":
        return cls(np.full(n_classes, 1.0 / n_classes))

    @property
    def n_classes(self) -> int:
        return self.p.size

    def fractions(self):
        """Exact per-class fractions (requires counts)."""
        total = sum(self.counts)
        return [Fraction(c, total) for c in self.counts]

    def to_list(self):
        return [float(x) for x in self.p]


# -- regimes -----------------------------------------------------------------

@dataclass(frozen=True)
class IidRegime:
    delta: float = 0.1
    kind: str = field(default="iid", init=False)

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValidationError("delta must lie in [0, 1)")

    def params(self):
        return {"delta": self.delta}


@dataclass(frozen=True)
class QuantityRegime:
    c_f: int = 3
    kind: str = field(default="quantity", init=False)

    def __post_init__(self):
        if int(self.c_f) != self.c_f or self.c_f < 1:
            raise ValidationError("c_f must be a positive integer")

    def params(self):
        return {"c_f": self.c_f}


@dataclass(frozen=True)
class DirichletRegime:
    alpha: float = 1.0
    kind: str = field(default="dirichlet", init=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")

    def params(self):
        return {"alpha": self.alpha}


def regime_from_dict(d: dict):
    kind = d.get("kind")
    rest = {k: v for k, v in d.items() if k != "kind"}
    if kind == "iid":
        return IidRegime(**rest)
    if kind == "quantity":
        return QuantityRegime(**rest)
    if kind == "dirichlet":
        return DirichletRegime(**rest)
    raise ValidationError(f"unknown regime kind {kind!r}")


def regime_to_dict(regime) -> dict:
    return {"kind": regime.kind, **regime.params()}


@dataclass
class PartitionSpec:
    regime: object
    client_count: int
    sizes: list

    def __post_init__(self):
        if len(self.sizes) != self.client_count:
            raise ValidationError("need one size per client")


# -- generation and IDX ------------------------------------------------------

def _class_means(C, d, sep, gen):
    if d >= C - 1:
        if d >= C:
            # scaled axes: pairwise distance exactly sep
            means = np.eye(C, d) * (sep / np.sqrt(2.0))
        else:
            # regular simplex with edge sep in C - 1 dims
            centred = np.eye(C) - 1.0 / C
            basis = np.linalg.svd(centred)[2][:C - 1]
            means = centred @ basis.T * (sep / np.sqrt(2.0))
        q, r = np.linalg.qr(gen.normal(size=(d, d)))
        q *= np.sign(np.diag(r))
        return means @ q
    side = sep * max(2.0, 2.0 * C ** (1.0 / d))
    for attempt in range(20000):
        if attempt and attempt % 1000 == 0:
            side *= 1.1
        means = gen.uniform(0.0, side, size=(C, d))
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= sep:
            return means
    raise ValidationError(f"could not place {C} means {sep} apart in {d} dimensions")


def gen_synthetic(C, d, per_class_pool, sep, rng, noise=1.0) -> Dataset:
    """Balanced Gaussian clusters mapped isotropically into [0, 1]^d.

    Class means sit at pairwise distance >= ``sep`` in a latent space with
    unit-variance noise; a single shift and scale (shared by all dimensions)
    maps means +/- 4 noise std into the unit cube, and the rest is clipped.
    """
    if C < 2:
        raise ValidationError("need at least two classes")
    if not sep > 0:
        raise ValidationError("sep must be positive")
    gen = as_generator(rng)
    means = _class_means(C, d, sep, gen)
    labels = np.repeat(np.arange(C), per_class_pool)
    latent = means[labels] + noise * gen.normal(size=(labels.size, d))
    lo = means.min() - 4.0 * noise
    hi = means.max() + 4.0 * noise
    feats = np.clip((latent - lo) / (hi - lo), 0.0, 1.0)
    perm = gen.permutation(labels.size)
    return Dataset(feats[perm], labels[perm], C)


def _read_exact(buf, offset, n, what):
    if offset + n > len(buf):
        raise FormatError(f"truncated file while reading {what}")
    return buf[offset:offset + n]


def load_idx(images_path, labels_path, n_classes=None) -> Dataset:
    """Parse an IDX image/label pair; pixels are scaled by 1/255."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    (magic,) = struct.unpack(">I", _read_exact(img, 0, 4, "image magic"))
    if magic != IMAGES_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}")
    n, rows, cols = struct.unpack(">III", _read_exact(img, 4, 12, "image dims"))
    (lmagic,) = struct.unpack(">I", _read_exact(lab, 0, 4, "label magic"))
    if lmagic != LABELS_MAGIC:
        raise FormatError(f"bad label magic 0x{lmagic:08x}")
    (ln,) = struct.unpack(">I", _read_exact(lab, 4, 4, "label count"))
    if ln != n:
        raise FormatError(f"{n} images but {ln} labels")
    pix = _read_exact(img, 16, n * rows * cols, "pixels")
    if len(img) != 16 + n * rows * cols:
        raise FormatError("trailing bytes after image data")
    lbl = _read_exact(lab, 8, n, "labels")
    if len(lab) != 8 + n:
        raise FormatError("trailing bytes after label data")
    feats = np.frombuffer(pix, dtype=np.uint8).reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl, dtype=np.uint8).astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n else 1
    return Dataset(feats, labels, n_classes, image_shape=(rows, cols))


def write_idx(dataset: Dataset, images_path, labels_path):
    n = len(dataset)
    rows, cols = dataset.image_shape or (1, dataset.dim)
    if rows * cols != dataset.dim:
        raise ShapeError("image_shape does not match feature width")
    if dataset.labels.size and dataset.labels.max() > 255:
        raise FormatError("labels do not fit in unsigned bytes")
    pix = np.rint(np.clip(dataset.features, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


# -- partitioning ------------------------------------------------------------

def largest_remainder(p, total) -> np.ndarray:
    """Integer counts proportional to ``p`` that sum exactly to ``total``."""
    raw = np.asarray(p, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = int(total - counts.sum())
    if short > 0:
        frac = raw - counts
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    return counts


def _draw_by_counts(pool: Dataset, counts, gen) -> Dataset:
    parts = []
    for c, idx in enumerate(pool.class_indices()):
        k = int(counts[c])
        if k > idx.size:
            raise CapacityError(f"class {c}: need {k} samples, pool has {idx.size}")
        if k:
            parts.append(gen.choice(idx, size=k, replace=False))
    chosen = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    chosen = chosen[gen.permutation(chosen.size)]
    return pool.subset(chosen)


def _check_size(pool, size):
    if size < pool.n_classes:
        raise ValidationError(f"client size must be at least C={pool.n_classes}, got {size}")


def iid_counts(size, C, delta, gen) -> np.ndarray:
    base = size / C
    lo, hi = int(np.ceil(base * (1 - delta) - 1e-9)), int(np.floor(base * (1 + delta) + 1e-9))
    if C * lo > size or C * hi < size:
        # band narrower than one sample: widen to the neighbouring integers
        lo, hi = int(np.floor(base * (1 - delta))), int(np.ceil(base * (1 + delta)))
    counts = gen.integers(lo, hi + 1, size=C)
    diff = size - int(counts.sum())
    while diff != 0:
        step = 1 if diff > 0 else -1
        room = np.flatnonzero(counts < hi) if step > 0 else np.flatnonzero(counts > lo)
        c = room[gen.integers(room.size)]
        counts[c] += step
        diff -= step
    return counts


def partition_iid(pool: Dataset, size, delta, rng):
    _check_size(pool, size)
    IidRegime(delta)
    gen = as_generator(rng)
    counts = iid_counts(size, pool.n_classes, delta, gen)
    ds = _draw_by_counts(pool, counts, gen)
    return ds, LabelDistribution.from_counts(ds.class_counts())


def partition_quantity(pool: Dataset, size, c_f, rng):
    _check_size(pool, size)
    if c_f > pool.n_classes:
        raise ValidationError(f"c_f={c_f} exceeds the class count {pool.n_classes}")
    QuantityRegime(c_f)
    gen = as_generator(rng)
    classes = np.sort(gen.choice(pool.n_classes, size=c_f, replace=False))
    eligible = np.flatnonzero(np.isin(pool.labels, classes))
    if eligible.size < size:
        raise CapacityError(f"{eligible.size} samples in the chosen classes, need {size}")
    for _ in range(100):
        chosen = gen.choice(eligible, size=size, replace=False)
        counts = np.bincount(pool.labels[chosen], minlength=pool.n_classes)
        if np.all(counts[classes] > 0):
            break
    else:
        raise CapacityError("could not cover every chosen class")
    ds = pool.subset(chosen)
    return ds, LabelDistribution.from_counts(ds.class_counts())


def dirichlet_proportions(alpha, C, rng) -> np.ndarray:
    DirichletRegime(alpha)
    return as_generator(rng).dirichlet(np.full(C, float(alpha)))


def partition_dirichlet(pool: Dataset, size, alpha, rng):
    _check_size(pool, size)
    gen = as_generator(rng)
    p = dirichlet_proportions(alpha, pool.n_classes, gen)
    counts = largest_remainder(p, size)
    ds = _draw_by_counts(pool, counts, gen)
    return ds, LabelDistribution.from_counts(ds.class_counts())


def partition(pool: Dataset, size, regime, rng):
    if regime.kind == "iid":
        return partition_iid(pool, size, regime.delta, rng)
    if regime.kind == "quantity":
        return partition_quantity(pool, size, regime.c_f, rng)
    if regime.kind == "dirichlet":
        return partition_dirichlet(pool, size, regime.alpha, rng)
    raise ValidationError(f"unknown regime {regime!r}")


def sample_auxiliary(pool: Dataset, spec, max_tries=50):
    """Draw one virtual client's dataset from the auxiliary pool.

    ``spec`` needs ``size``, ``regime`` and ``seed``. A Dirichlet draw that
    exceeds the pool's per-class capacity is redrawn from the next sub-stream.
    Returns ``(dataset, distribution)``.
    """
    _check_size(pool, spec.size)
    base = RngStream(spec.seed)
    last = None
    for attempt in range(max_tries):
        try:
            return partition(pool, spec.size, spec.regime, base.child("aux", attempt))
        except CapacityError as exc:
            if spec.regime.kind != "dirichlet":
                raise
            last = exc
    raise CapacityError(f"no feasible draw after {max_tries} tries: {last}")


def balanced_split(pool: Dataset, per_class, rng):
    """Take ``per_class`` samples of every class out of ``pool``.

    Returns ``(taken, rest)``; both keep pool-relative indices.
    """
    gen = as_generator(rng)
    take = []
    for c, idx in enumerate(pool.class_indices()):
        if idx.size < per_class:
            raise CapacityError(f"class {c} has {idx.size} samples, need {per_class}")
        take.append(gen.choice(idx, size=per_class, replace=False))
    take = np.sort(np.concatenate(take))
    mask = np.ones(len(pool), dtype=bool)
    mask[take] = False
    return pool.subset(take), pool.subset(np.flatnonzero(mask))


def partition_manifest(regime, datasets) -> dict:
    return {
        "regime": regime.kind,
        **regime.params(),
        "sizes": [len(d) for d in datasets],
        "label_counts": [d.class_counts().tolist() for d in datasets],
    }


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
