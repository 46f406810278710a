import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp

from fedldi.datasets import (Dataset, DirichletRegime, IidRegime, LabelDistribution,
                             QuantityRegime, balanced_split, dirichlet_proportions, gen_synthetic,
                             largest_remainder, load_idx, partition, partition_dirichlet,
                             partition_iid, partition_quantity, regime_from_dict, regime_to_dict,
                             sample_auxiliary, write_idx)
from fedldi.errors import CapacityError, FormatError, ValidationError
from fedldi.numerics.rng import RngStream
from fedldi.vclients import VirtualClientSpec


# -- synthetic generation ---------------------------------------------------------

def test_synthetic_balanced():
    ds = gen_synthetic(2, 4, 10, 3.0, RngStream(0))
    assert len(ds) == 20
    assert ds.class_counts().tolist() == [10, 10]
    assert ds.features.min() >= 0 and ds.features.max() <= 1


def test_synthetic_deterministic():
    a = gen_synthetic(5, 6, 20, 3.0, RngStream(4))
    b = gen_synthetic(5, 6, 20, 3.0, RngStream(4))
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_synthetic_well_separated_is_nearly_perfect_for_1nn():
    ds = gen_synthetic(5, 2, 200, 10.0, RngStream(1))
    train, test = ds.subset(np.arange(500)), ds.subset(np.arange(500, 1000))
    d2 = ((test.features[:, None, :] - train.features[None, :, :]) ** 2).sum(-1)
    pred = train.labels[np.argmin(d2, axis=1)]
    assert np.mean(pred == test.labels) >= 0.99


def test_synthetic_means_more_classes_than_dims():
    ds = gen_synthetic(6, 2, 5, 2.0, RngStream(2))
    assert ds.class_counts().tolist() == [5] * 6


# -- IDX -------------------------------------------------------------------------

def _idx_files(tmp_path, img_bytes, lab_bytes):
    i, l = tmp_path / "img.idx", tmp_path / "lab.idx"
    i.write_bytes(img_bytes)
    l.write_bytes(lab_bytes)
    return i, l


def test_idx_minimal(tmp_path):
    i, l = _idx_files(tmp_path, struct.pack(">IIII", 0x803, 1, 1, 1) + b"\xff",
                      struct.pack(">II", 0x801, 1) + b"\x00")
    ds = load_idx(i, l)
    assert ds.features.tolist() == [[1.0]]
    assert ds.labels.tolist() == [0]
    assert ds.image_shape == (1, 1)


def test_idx_count_mismatch(tmp_path):
    i, l = _idx_files(tmp_path, struct.pack(">IIII", 0x803, 2, 1, 1) + b"\x01\x02",
                      struct.pack(">II", 0x801, 3) + b"\x00\x01\x02")
    with pytest.raises(FormatError):
        load_idx(i, l)


@pytest.mark.parametrize("img,lab", [
    (struct.pack(">IIII", 0x801, 1, 1, 1) + b"\x00", struct.pack(">II", 0x801, 1) + b"\x00"),
    (struct.pack(">IIII", 0x803, 1, 1, 1) + b"\x00", struct.pack(">II", 0x803, 1) + b"\x00"),
    (struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00", struct.pack(">II", 0x801, 2) + b"\x00\x00"),
    (struct.pack(">II", 0x803, 2), struct.pack(">II", 0x801, 2) + b"\x00\x00"),
    (struct.pack(">IIII", 0x803, 1, 1, 1) + b"\x00\x00", struct.pack(">II", 0x801, 1) + b"\x00"),
    (struct.pack(">IIII", 0x803, 1, 1, 1) + b"\x00", struct.pack(">II", 0x801, 1)),
])
def test_idx_malformed(tmp_path, img, lab):
    i, l = _idx_files(tmp_path, img, lab)
    with pytest.raises(FormatError):
        load_idx(i, l)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_idx_roundtrip_bytes(tmp_path_factory, n, rows, cols, seed):
    tmp = tmp_path_factory.mktemp("idx")
    gen = np.random.default_rng(seed)
    img = struct.pack(">IIII", 0x803, n, rows, cols) + gen.integers(0, 256, n * rows * cols,
                                                                     dtype=np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, n) + gen.integers(0, 10, n, dtype=np.uint8).tobytes()
    i, l = _idx_files(tmp, img, lab)
    ds = load_idx(i, l, n_classes=10)
    i2, l2 = tmp / "img2.idx", tmp / "lab2.idx"
    write_idx(ds, i2, l2)
    assert i2.read_bytes() == img and l2.read_bytes() == lab


# -- distributions and regimes ---------------------------------------------------

def test_label_distribution_validation():
    with pytest.raises(ValidationError):
        LabelDistribution([0.5, 0.6])
    with pytest.raises(ValidationError):
        LabelDistribution([1.5, -0.5])
    d = LabelDistribution.from_counts([1, 3])
    assert d.fractions() == [Fraction(1, 4), Fraction(3, 4)]


def test_regime_dict_roundtrip():
    for r in (IidRegime(0.2), QuantityRegime(3), DirichletRegime(0.5)):
        assert regime_from_dict(regime_to_dict(r)) == r
    with pytest.raises(ValidationError):
        regime_from_dict({"kind": "zipf"})
    with pytest.raises(ValidationError):
        DirichletRegime(-1.0)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=12).filter(lambda v: sum(v) > 0),
       st.integers(0, 5000))
def test_largest_remainder_sums_and_stays_close(weights, total):
    p = np.array(weights) / sum(weights)
    counts = largest_remainder(p, total)
    assert counts.sum() == total
    assert np.all(np.abs(counts - p * total) < 1 + 1e-9)


# -- partitions ------------------------------------------------------------------------

def _exact(ds, dist):
    counts = ds.class_counts()
    return dist.fractions() == [Fraction(int(c), len(ds)) for c in counts]


def test_iid_zero_delta_exact(small_pool):
    ds, dist = partition_iid(small_pool, 100, 0.0, RngStream(0))
    assert ds.class_counts().tolist() == [10] * 10
    assert _exact(ds, dist)


@pytest.mark.parametrize("seed", range(20))
def test_iid_band(small_pool, seed):
    ds, dist = partition_iid(small_pool, 100, 0.1, RngStream(seed))
    counts = ds.class_counts()
    assert counts.sum() == 100 and counts.min() >= 9 and counts.max() <= 11
    assert dist.p.sum() == pytest.approx(1.0, abs=1e-12)


def test_quantity_examples(small_pool):
    ds, dist = partition_quantity(small_pool, 300, 3, RngStream(1))
    assert int(np.sum(dist.p == 0)) == 7
    ds, dist = partition_quantity(small_pool, 50, 1, RngStream(2))
    assert sorted(dist.p.tolist()) == [0.0] * 9 + [1.0]
    ds, dist = partition_quantity(small_pool, 500, 10, RngStream(3))
    assert len(ds) == 500 and _exact(ds, dist)
    with pytest.raises(ValidationError):
        partition_quantity(small_pool, 100, 11, RngStream(0))


def test_dirichlet_mean_uniform():
    gen = RngStream(9).generator()
    draws = np.array([dirichlet_proportions(1.0, 10, gen) for _ in range(10000)])
    assert np.all(np.abs(draws.mean(axis=0) - 0.1) < 0.01)


def test_dirichlet_concentrates():
    gen = RngStream(10).generator()
    for _ in range(100):
        assert np.all(np.abs(dirichlet_proportions(1000.0, 10, gen) - 0.1) < 0.05)


def test_dirichlet_coordinates_exchangeable():
    gen = RngStream(11).generator()
    draws = np.array([dirichlet_proportions(1.0, 3, gen) for _ in range(5000)])
    for a, b in ((0, 1), (0, 2), (1, 2)):
        assert ks_2samp(draws[:, a], draws[:, b]).statistic < 0.05


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_dirichlet_partition_accepted(small_pool, alpha):
    ds, dist = partition_dirichlet(small_pool, 200, alpha, RngStream(5))
    assert len(ds) == 200 and _exact(ds, dist)


def test_capacity_error(small_pool):
    with pytest.raises(CapacityError):
        partition_iid(small_pool, 5000, 0.1, RngStream(0))
    with pytest.raises(CapacityError):
        partition_dirichlet(small_pool, 3000, 0.01, RngStream(0))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["iid", "quantity", "dirichlet"]), st.integers(10, 600),
       st.integers(0, 2 ** 32 - 1))
def test_partition_invariants(small_pool, kind, size, seed):
    regime = {"iid": IidRegime(0.1), "quantity": QuantityRegime(3),
              "dirichlet": DirichletRegime(1.0)}[kind]
    try:
        ds, dist = partition(small_pool, size, regime, RngStream(seed))
    except CapacityError:
        return
    assert len(ds) == size
    assert np.unique(ds.index).size == size  # no pool index twice
    assert _exact(ds, dist)
    assert np.array_equal(small_pool.labels[ds.index], ds.labels)


def test_sample_auxiliary(small_pool):
    spec = VirtualClientSpec(0, 250, DirichletRegime(0.5), seed=77)
    a, da = sample_auxiliary(small_pool, spec)
    b, db = sample_auxiliary(small_pool, spec)
    assert np.array_equal(a.index, b.index) and np.array_equal(da.p, db.p)
    assert int(a.class_counts().sum()) == 250
    with pytest.raises(ValidationError):
        sample_auxiliary(small_pool, VirtualClientSpec(1, 0, IidRegime(0.1), seed=1))


def test_sample_auxiliary_retries_dirichlet(tiny_pool):
    # 60 per class: a skewed draw of 120 often overflows one class and must be redrawn
    for seed in range(10):
        spec = VirtualClientSpec(0, 120, DirichletRegime(0.5), seed=seed)
        ds, dist = sample_auxiliary(tiny_pool, spec)
        assert len(ds) == 120 and ds.class_counts().max() <= 60


def test_balanced_split_disjoint(small_pool):
    taken, rest = balanced_split(small_pool, 30, RngStream(0))
    assert taken.class_counts().tolist() == [30] * 10
    assert len(rest) == len(small_pool) - 300
    assert not set(taken.index) & set(rest.index)


def test_dataset_validation():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 2)), [0, 3], 2)
