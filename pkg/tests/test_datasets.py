import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from atriaseg.datasets import (
    AugmentationPolicy,
    ConfigError,
    IterationError,
    SliceStore,
    SplitManifest,
    apply_transform,
    augment,
    batch_iterator,
    choose_augmentation,
    make_splits,
    normalize,
    split_sizes,
)
from atriaseg.volume_io import SliceSample


def refs(n, per_volume=40):
    return [(f"v{i // per_volume:03d}", i % per_volume) for i in range(n)]


def check_partitions(manifest, all_refs):
    universe = set(all_refs)
    for sid in "ABC":
        tr, va, te = (set(manifest.partition(sid, p)) for p in ("train", "val", "test"))
        assert not (tr & va) and not (tr & te) and not (va & te)
        assert tr | va | te == universe


def test_reference_split_sizes():
    r = refs(3080)
    for seed in (0, 1, 99):
        m = make_splits(r, seed=seed)
        for sid in "ABC":
            assert len(m.partition(sid, "train")) == 2587
            assert len(m.partition(sid, "val")) == 246
        assert len(m.test) == 247
        check_partitions(m, r)


def test_exact_ratio():
    assert split_sizes(100, (84, 8, 8)) == (84, 8, 8)
    m = make_splits(refs(100), seed=4)
    assert (len(m.partition("A", "train")), len(m.partition("A", "val")), len(m.test)) == (84, 8, 8)


def test_fixed_test_set_varying_train():
    m = make_splits(refs(3080), seed=11)
    assert m.partition("A", "test") == m.partition("B", "test") == m.partition("C", "test")
    a, b, c = (m.partition(s, "train") for s in "ABC")
    assert a != b and b != c and a != c
    assert sorted(a + m.partition("A", "val")) == sorted(b + m.partition("B", "val"))


def test_slices_of_one_volume_spread_over_partitions():
    m = make_splits(refs(3080), seed=0)
    vol0 = {r for r in refs(3080) if r[0] == "v000"}
    hit = [bool(vol0 & set(m.partition("A", p))) for p in ("train", "val", "test")]
    assert hit[0] and (hit[1] or hit[2])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 400), st.integers(0, 2**32), st.tuples(st.integers(0, 10), st.integers(0, 10), st.integers(1, 10)))
def test_partition_algebra(n, seed, ratio):
    r = refs(n, per_volume=7)
    m = make_splits(r, seed=seed, ratio=ratio)
    check_partitions(m, r)
    ntr, nva, nte = split_sizes(n, ratio)
    assert len(m.partition("C", "train")) == ntr and len(m.partition("C", "val")) == nva and len(m.test) == nte


def test_split_errors():
    with pytest.raises(ConfigError):
        make_splits(refs(10), ratio=(0, 0, 0))
    with pytest.raises(ConfigError):
        make_splits(refs(10), ratio=(-1, 50, 51))
    with pytest.raises(ConfigError):
        make_splits([])


def test_manifest_json_roundtrip(tmp_path):
    m = make_splits(refs(120), seed=5)
    m.save(tmp_path / "manifest.json")
    m2 = SplitManifest.load(tmp_path / "manifest.json")
    assert m2 == m
    d = m.to_dict()
    assert set(d) == {"seed", "ratio", "splits", "test"}
    assert set(d["splits"]) == {"A", "B", "C"}
    assert set(d["splits"]["A"]) == {"train", "val"}


def test_split_determinism():
    assert make_splits(refs(300), seed=2) == make_splits(refs(300), seed=2)
    assert make_splits(refs(300), seed=2) != make_splits(refs(300), seed=3)


# -- augmentation


def sample(rng, n=32):
    return SliceSample(rng.random((n, n)).astype(np.float32), rng.integers(0, 4, (n, n)).astype(np.uint8), "v", 0)


class FixedRng:
    def __init__(self, u):
        self.u = u

    def random(self):
        return self.u

    def integers(self, n):
        return 0


def test_identity_branch(rng):
    s = sample(rng)
    out = augment(s, FixedRng(0.95))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.label, s.label)


def test_branch_boundaries():
    p = AugmentationPolicy()
    assert [choose_augmentation(u, p) for u in (0.0, 0.0999, 0.1, 0.1999, 0.2, 0.2999, 0.3, 0.99)] == [
        "hflip", "hflip", "vflip", "vflip", "rotate", "rotate", "identity", "identity"]


def test_flips_are_involutions(rng):
    s = sample(rng)
    for u in (0.05, 0.15):
        twice = augment(augment(s, FixedRng(u)), FixedRng(u))
        assert np.array_equal(twice.image, s.image) and np.array_equal(twice.label, s.label)


def test_augmentation_frequencies():
    rng = np.random.default_rng(0)
    s = SliceSample(np.zeros((32, 32), np.float32), np.zeros((32, 32), np.uint8), "v", 0)
    counts = {"hflip": 0, "vflip": 0, "rotate": 0, "identity": 0}
    p = AugmentationPolicy()
    n = 100_000
    for _ in range(n):
        counts[choose_augmentation(rng.random(), p)] += 1
    lo, hi = stats.binom.interval(0.999, n, 0.1)
    for k in ("hflip", "vflip", "rotate"):
        assert abs(counts[k] / n - 0.1) <= 0.005
        assert lo <= counts[k] <= hi
    assert sum(counts.values()) == n


def test_rotation_angles_drawn_uniformly():
    rng = np.random.default_rng(1)
    s = sample(rng, 32)
    angles = []
    for _ in range(4000):
        _, kind, angle = augment(s, rng, return_kind=True)
        if kind == "rotate":
            angles.append(angle)
    assert set(angles) == {45.0, 135.0, 225.0, 315.0}
    counts = np.array([angles.count(a) for a in (45.0, 135.0, 225.0, 315.0)])
    assert stats.chisquare(counts).pvalue > 1e-3


@pytest.mark.parametrize("u", [0.05, 0.15, 0.25])
@pytest.mark.parametrize("angle_index", [0, 1, 2, 3])
def test_image_and_label_share_geometry(u, angle_index):
    n = 32
    yy, xx = np.mgrid[:n, :n].astype(np.float32)
    ramp = 0.5 * yy + 0.25 * xx + 1.0
    index_grid = (np.arange(n * n).reshape(n, n) + 1).astype(np.float64)

    class Rng(FixedRng):
        def integers(self, k):
            return angle_index

    policy = AugmentationPolicy()
    kind = choose_augmentation(u, policy)
    angle = policy.rotation_angles[angle_index]
    # nearest-neighbour transform of an index grid tells where each output pixel came from
    src = apply_transform(index_grid, kind, angle, order=0).astype(np.int64) - 1
    lab = np.arange(n * n).reshape(n, n) % 4
    out = augment(SliceSample(ramp, lab.astype(np.uint8), "v", 0), Rng(u))
    inside = src >= 0
    assert np.array_equal(out.label[inside], lab.ravel()[src[inside]])
    assert (out.label[~inside] == 0).all()
    # bilinear resampling of a linear ramp is exact up to the nearest-pixel offset (<= 0.5*sqrt(2) px)
    interior = inside.copy()
    interior[[0, -1], :] = interior[:, [0, -1]] = False
    ref = ramp.ravel()[src[interior]]
    assert np.abs(out.image[interior] - ref).max() <= 0.75 * 0.71 + 1e-4
    assert out.image.shape == ramp.shape


def test_augment_preserves_codomain(rng):
    s = sample(rng)
    for _ in range(50):
        out = augment(s, rng)
        assert set(np.unique(out.label)) <= {0, 1, 2, 3}
        assert out.image.shape == s.image.shape


def test_policy_validation():
    with pytest.raises(ConfigError):
        AugmentationPolicy(0.5, 0.4, 0.2)


# -- normalisation


def test_normalize_examples():
    img = np.array([[100.0, 200.0], [300.0, 150.0]])
    np.testing.assert_allclose(normalize(img), (img - 100) / 200)
    assert (normalize(np.full((4, 4), 7.0)) == 0).all()
    levels = np.array([[0.2, 0.5], [0.8, 0.2]], dtype=np.float32)
    np.testing.assert_allclose(normalize(levels), [[0, 0.5], [1, 0]], atol=1e-6)
    with pytest.raises(ValueError):
        normalize(np.array([[np.inf, 0.0]]))


# -- batching


def uniform_store(n, size=32):
    rng = np.random.default_rng(0)
    return SliceStore([SliceSample(rng.random((size, size)).astype(np.float32), np.zeros((size, size), np.uint8),
                                   f"v{i // 10}", i % 10) for i in range(n)])


def test_test_batches_arithmetic():
    store = uniform_store(3080, size=32)
    m = make_splits(store.refs(), seed=0)
    batches = list(batch_iterator(m, "A", "test", 4, False, 0, store))
    assert len(batches) == 62
    assert [len(b[0]) for b in batches[-1:]] == [3]
    assert batches[0][0].shape == (4, 1, 32, 32) and batches[0][1].dtype == np.int64


def test_batch_determinism_and_epoch_shuffle():
    store = uniform_store(100)
    m = make_splits(store.refs(), seed=0)
    first = [b[0] for b in batch_iterator(m, "A", "train", 8, True, 7, store)]
    again = [b[0] for b in batch_iterator(m, "A", "train", 8, True, 7, store)]
    assert all(np.array_equal(a, b) for a, b in zip(first, again))
    other = [b[0] for b in batch_iterator(m, "A", "train", 8, True, 7, store, epoch=1)]
    assert not all(np.array_equal(a, b) for a, b in zip(first, other))


def test_eval_partitions_skip_augmentation():
    store = uniform_store(100)
    m = make_splits(store.refs(), seed=0)
    for part in ("val", "test"):
        with_aug = list(batch_iterator(m, "A", part, 4, True, 0, store))
        without = list(batch_iterator(m, "A", part, 4, False, 0, store))
        assert all(np.array_equal(a[0], b[0]) for a, b in zip(with_aug, without))
        refs_ = m.partition("A", part)
        expected = np.stack([normalize(store[r].image) for r in refs_[:4]])
        np.testing.assert_array_equal(with_aug[0][0][:, 0], expected)


def test_sizes_never_mixed():
    rng = np.random.default_rng(0)
    samples = []
    for i in range(60):
        n = 64 if i % 3 else 96
        samples.append(SliceSample(rng.random((n, n)).astype(np.float32), np.zeros((n, n), np.uint8), f"v{i}", 0))
    store = SliceStore(samples)
    m = make_splits(store.refs(), seed=0, ratio=(80, 10, 10))
    for part in ("train", "test"):
        for images, labels in batch_iterator(m, "A", part, 5, True, 0, store):
            assert images.shape[-2:] == labels.shape[-2:]


def test_empty_partition_and_bad_batch():
    store = uniform_store(10)
    m = make_splits(store.refs(), seed=0, ratio=(100, 0, 0))
    with pytest.raises(IterationError):
        list(batch_iterator(m, "A", "val", 2, False, 0, store))
    with pytest.raises(ConfigError):
        list(batch_iterator(m, "A", "train", 0, False, 0, store))
