import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atriaseg.metrics import MetricError, boundary, dice_score, hausdorff, hd95, nearest_rank
from oracles import brute_dice, brute_hd, random_mask_pair

masks = st.integers(2, 12).flatmap(
    lambda n: st.tuples(arrays(bool, (n, n)), arrays(bool, (n, n)))
)


def _pts(shape, *pts):
    m = np.zeros(shape, bool)
    for p in pts:
        m[p] = True
    return m


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[0] = True
    assert dice_score(a, a) == 1.0
    assert dice_score(a, np.roll(a, 1, 0)) == 0.0
    b = np.zeros((4, 4), bool)
    b[0, 2:] = True
    b[1, :2] = True
    assert dice_score(a, b) == 0.5
    assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(MetricError):
        dice_score(np.zeros((2, 2)), np.zeros((3, 3)))


def test_hd95_examples():
    m = _pts((16, 16), (3, 3), (3, 4), (4, 4))
    assert hd95(m, m) == 0.0
    assert hd95(_pts((8, 8), (0, 0)), _pts((8, 8), (3, 4))) == 5.0
    assert hd95(_pts((16, 16), (0, 0), (10, 0)), _pts((16, 16), (0, 0))) == 10.0
    assert hd95(np.zeros((4, 4)), np.zeros((4, 4))) == 0.0
    assert hd95(np.zeros((4, 4)), _pts((4, 4), (1, 1))) is None
    with pytest.raises(MetricError):
        hd95(np.zeros((2, 2)), np.zeros((2, 3)))


def test_nearest_rank_rule():
    assert nearest_rank([0, 10]) == 10
    assert nearest_rank(list(range(1, 21))) == 19
    assert nearest_rank(list(range(1, 101))) == 95
    assert nearest_rank([4.0]) == 4.0


def test_boundary_four_connectivity():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    b = boundary(m)
    assert b.sum() == 8 and not b[2, 2]
    full = np.ones((3, 3), bool)
    assert boundary(full).sum() == 8


def test_hd95_matches_brute_force(rng):
    for _ in range(200):
        a, b = random_mask_pair(rng)
        assert hd95(a, b) == brute_hd(a, b)
        assert dice_score(a, b) == brute_dice(a, b)


def test_hd95_anisotropic_spacing(rng):
    for _ in range(50):
        a, b = random_mask_pair(rng, 16)
        got, ref = hd95(a, b, (0.7, 1.3)), brute_hd(a, b, (0.7, 1.3))
        if ref is None:
            assert got is None
        else:
            assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(masks)
def test_dice_symmetry_and_range(pair):
    a, b = pair
    d = dice_score(a, b)
    assert d == dice_score(b, a)
    assert 0.0 <= d <= 1.0


@settings(max_examples=150, deadline=None)
@given(masks)
def test_hd95_symmetric_and_bounded_by_hausdorff(pair):
    a, b = pair
    h = hd95(a, b)
    assert h == hd95(b, a)
    if h is not None:
        assert 0.0 <= h <= hausdorff(a, b)


@settings(max_examples=100, deadline=None)
@given(masks, st.integers(0, 4), st.integers(0, 4))
def test_hd95_translation_invariant(pair, dy, dx):
    a, b = pair
    n = a.shape[0]
    # embed with a margin so the shift keeps everything inside the frame
    big_a = np.zeros((n + 10, n + 10), bool)
    big_b = np.zeros_like(big_a)
    big_a[1:n + 1, 1:n + 1] = a
    big_b[1:n + 1, 1:n + 1] = b
    sa = np.roll(np.roll(big_a, dy, 0), dx, 1)
    sb = np.roll(np.roll(big_b, dy, 0), dx, 1)
    assert hd95(big_a, big_b) == hd95(sa, sb)
