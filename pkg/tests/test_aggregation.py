from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hflsim.aggregation import (
    MaskGroup,
    Update,
    aggregate,
    fedavg,
    mask_updates,
    median_aggregate,
    trimmed_mean_aggregate,
    unmask_on_dropout,
)
from hflsim.errors import EmptyInput, LengthMismatch, MemberMismatch, NoSurvivors


def U(delta, w=1.0, origin=0):
    return Update(np.asarray(delta, dtype=float), w, origin)


def _random_updates(rng, n, size=5):
    return [U(rng.normal(size=size), float(rng.integers(1, 20)), o) for o in range(n)]


def test_fedavg_weighted_mean():
    out = fedavg([U([2, 0], 1), U([0, 4], 3, 1)])
    assert out.weight == 4
    np.testing.assert_allclose(out.delta, [0.5, 3.0])


def test_fedavg_identity_and_symmetry():
    u = U([1.5, -2.0], 3, 7)
    np.testing.assert_array_equal(fedavg([u]).delta, u.delta)
    np.testing.assert_array_equal(fedavg([U([1, 2]), U([-1, -2], 1, 1)]).delta, [0, 0])


def test_fedavg_errors():
    with pytest.raises(EmptyInput):
        fedavg([])
    with pytest.raises(LengthMismatch):
        fedavg([U([1, 2]), U([1, 2, 3], 1, 1)])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_fedavg_permutation_invariant_and_idempotent(n, seed):
    rng = np.random.default_rng(seed)
    ups = _random_updates(rng, n)
    perm = [ups[i] for i in rng.permutation(n)]
    assert np.max(np.abs(fedavg(ups).delta - fedavg(perm).delta)) <= 1e-12
    same = [U(ups[0].delta, ups[0].weight, o) for o in range(n)]
    np.testing.assert_allclose(fedavg(same).delta, ups[0].delta, rtol=0, atol=1e-15)


def test_median_examples():
    np.testing.assert_array_equal(median_aggregate([U([1, 5]), U([2, 6], 1, 1), U([100, 7], 1, 2)]).delta, [2, 6])
    np.testing.assert_array_equal(median_aggregate([U([1, 5]), U([3, 9], 5, 1)]).delta, [2, 7])
    np.testing.assert_array_equal(median_aggregate([U([4, 4])] * 3).delta, [4, 4])


def test_trimmed_mean_examples():
    ups = [U([1]), U([2], 1, 1), U([100], 1, 2)]
    np.testing.assert_allclose(trimmed_mean_aggregate(ups, 1 / 3).delta, [2])
    np.testing.assert_allclose(trimmed_mean_aggregate(ups, 0).delta, [103 / 3])
    np.testing.assert_allclose(trimmed_mean_aggregate(ups[:2], 0.4).delta, [1.5])


def test_trimmed_mean_beta_range():
    with pytest.raises(ValueError):
        trimmed_mean_aggregate([U([1])], 0.5)


def test_aggregate_dispatch():
    ups = [U([1]), U([2], 1, 1), U([9], 1, 2)]
    assert aggregate("median", ups).delta[0] == 2
    with pytest.raises(ValueError):
        aggregate("nope", ups)
    with pytest.raises(ValueError):
        aggregate("median", ups, correction=np.zeros(1))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 2**32 - 1), st.floats(1, 1e6))
def test_median_stays_in_benign_range(m_half, f_extra, seed, scale):
    rng = np.random.default_rng(seed)
    m = 2 * m_half + 1
    f = min(f_extra, (m - 1) // 2)
    benign = rng.uniform(-1, 1, size=(m, 4))
    bad = rng.choice([-1, 1], size=(f, 4)) * scale
    ups = [U(v, 1.0, i) for i, v in enumerate(np.vstack([benign, bad]) if f else benign)]
    med = median_aggregate(ups).delta
    assert np.all(med >= benign.min(axis=0)) and np.all(med <= benign.max(axis=0))


def _masked_sum_gap(rng, size_group, seed):
    ups = _random_updates(rng, size_group)
    group = MaskGroup(range(size_group), seed)
    masked = mask_updates(ups, group)
    assert all(u.masked for u in masked)
    return float(np.max(np.abs(fedavg(masked).delta - fedavg(ups).delta))), ups, masked, group


@pytest.mark.parametrize("size_group", range(2, 9))
def test_masks_cancel(size_group):
    rng = np.random.default_rng(size_group)
    for seed in range(20):
        gap, ups, masked, _ = _masked_sum_gap(rng, size_group, seed)
        assert gap < 1e-9
        # individual updates are hidden
        assert all(np.max(np.abs(a.delta - b.delta)) > 1e-3 for a, b in zip(ups, masked))


def test_mask_needs_two_members():
    with pytest.raises(MemberMismatch):
        mask_updates([U([1.0])], MaskGroup([0], 1))
    with pytest.raises(MemberMismatch):
        mask_updates([U([1.0]), U([2.0], 1, 1)], MaskGroup([0, 2], 1))


def test_no_dropout_correction_is_zero():
    group = MaskGroup([1, 2, 3], 5)
    np.testing.assert_array_equal(unmask_on_dropout(group, [1, 2, 3], 4), np.zeros(4))


@pytest.mark.parametrize("size_group", range(3, 9))
def test_dropout_correction_recovers_survivors(size_group):
    rng = np.random.default_rng(100 + size_group)
    for seed in range(20):
        ups = _random_updates(rng, size_group)
        group = MaskGroup(range(size_group), seed)
        masked = mask_updates(ups, group)
        n_drop = int(rng.integers(1, size_group))
        dropped = set(rng.choice(size_group, n_drop, replace=False).tolist())
        alive_m = [u for u in masked if u.origin not in dropped]
        alive = [u for u in ups if u.origin not in dropped]
        corr = unmask_on_dropout(group, [u.origin for u in alive], 5)
        assert np.max(np.abs(fedavg(alive_m, correction=corr).delta - fedavg(alive).delta)) < 1e-9


def test_single_survivor_is_fully_revealed():
    ups = [U([1.0, 2.0], 2, 0), U([3.0, 4.0], 1, 1), U([5.0, 6.0], 1, 2)]
    group = MaskGroup([0, 1, 2], 9)
    masked = mask_updates(ups, group)
    corr = unmask_on_dropout(group, [1], 2)
    np.testing.assert_allclose(fedavg([masked[1]], correction=corr).delta, [3.0, 4.0], atol=1e-12)


def test_all_dropped():
    with pytest.raises(NoSurvivors):
        unmask_on_dropout(MaskGroup([0, 1], 1), [], 3)
