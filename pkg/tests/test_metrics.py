import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradreg import DisplacementField, LabelMap, LandmarkSet, Volume3, dice, evaluate, gc, gc_score, hd95, ndv, tre
from gradreg.metrics import hd95_masks, jacobian_negative_percent

from conftest import smooth_volume
from oracles import hd95_bruteforce


def labels(arr, spacing=(1.0, 1.0, 1.0)):
    return LabelMap(np.asarray(arr, dtype=np.int16), spacing)


def reflection(n):
    u = np.zeros((n, n, n, 3))
    x = np.arange(n, dtype=float)[:, None, None]
    u[..., 0] = (n - 1 - x) - x
    return DisplacementField(u)


def random_masks(rng, n=16):
    # blobby masks so that boundaries are neither empty nor the whole mask
    from scipy import ndimage

    a = ndimage.gaussian_filter(rng.standard_normal((n, n, n)), 1.5) > 0.1
    b = ndimage.gaussian_filter(rng.standard_normal((n, n, n)), 1.5) > 0.1
    return a, b


class TestDice:
    def test_identities(self, rng):
        a = labels(rng.integers(0, 4, (5, 5, 5)))
        per, mean = dice(a, a)
        assert set(per.values()) == {1.0} and mean == 1.0

    def test_disjoint_and_half(self):
        a = np.zeros((4, 4, 4), dtype=int)
        b = np.zeros_like(a)
        a[0, 0, :2] = 1
        b[0, 0, 1:3] = 1
        assert dice(labels(a), labels(b))[0] == {1: 0.5}
        b[:] = 0
        b[3, 3, 3] = 1
        assert dice(labels(a), labels(b))[0] == {1: 0.0}

    def test_label_in_one_map(self):
        a = np.zeros((3, 3, 3), dtype=int)
        b = a.copy()
        a[0, 0, 0] = 1
        b[0, 0, 0] = 1
        b[2, 2, 2] = 5
        per, mean = dice(labels(a), labels(b))
        assert per == {1: 1.0, 5: 0.0} and mean == 0.5

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a, b = labels(rng.integers(0, 4, (4, 4, 4))), labels(rng.integers(0, 4, (4, 4, 4)))
        assert dice(a, b) == dice(b, a)
        assert all(0.0 <= v <= 1.0 for v in dice(a, b)[0].values())


class TestHD95:
    def test_identical(self, rng):
        a, _ = random_masks(rng)
        assert hd95_masks(a, a) == 0.0

    def test_single_voxels(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = a.copy()
        a[2, 4, 4] = True
        b[5, 4, 4] = True
        assert hd95_masks(a, b) == 3.0
        assert hd95_masks(a, b, spacing=(2.0, 1.0, 1.0)) == 6.0

    @pytest.mark.parametrize("seed", range(10))
    def test_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_masks(rng)
        spacing = (1.0, 1.5, 0.75) if seed % 2 else (1.0, 1.0, 1.0)
        assert hd95_masks(a, b, spacing) == hd95_bruteforce(a, b, spacing)

    def test_skips_empty_label(self, caplog):
        a = np.zeros((6, 6, 6), dtype=int)
        b = a.copy()
        a[1:3, 1:3, 1:3] = 1
        b[1:3, 1:3, 1:4] = 1
        a[4, 4, 4] = 2
        with caplog.at_level(logging.WARNING):
            per, mean, skipped = hd95(labels(a), labels(b))
        assert skipped == [2] and list(per) == [1] and mean == per[1]
        assert "label 2" in caplog.text

    def test_symmetric(self, rng):
        a, b = random_masks(rng)
        assert hd95_masks(a, b) == hd95_masks(b, a)


class TestNDV:
    def test_zero_translation_reflection(self):
        assert ndv(DisplacementField.zeros((5, 5, 5))) == 0.0
        u = np.broadcast_to(np.array([2.3, -1.0, 0.5]), (5, 5, 5, 3)).copy()
        assert ndv(DisplacementField(u)) == 0.0
        assert ndv(reflection(6)) == 100.0

    def test_single_fold_is_partial(self):
        u = np.zeros((6, 6, 6, 3))
        u[3, 3, 3, 0] = -1.8
        value = ndv(DisplacementField(u))
        assert 0.0 < value < 100.0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), shift=st.tuples(*[st.integers(-5, 5)] * 3))
    def test_translation_invariant(self, seed, shift):
        rng = np.random.default_rng(seed)
        # dyadic values keep every sum exact, so equality is bitwise
        u = np.round(rng.normal(0, 0.8, (5, 5, 5, 3)) * 64) / 64
        assert ndv(DisplacementField(u + np.array(shift, float))) == ndv(DisplacementField(u))
        v = rng.normal(0, 0.8, (5, 5, 5, 3))
        assert ndv(DisplacementField(v + 0.3)) == pytest.approx(ndv(DisplacementField(v)), rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("s", [0.3, 1.0, 2.5])
    def test_uniform_scaling(self, s):
        grid = np.stack(np.indices((5, 6, 7), dtype=float), axis=-1)
        assert ndv(DisplacementField((s - 1.0) * grid)) == 0.0

    def test_bounded(self, rng):
        assert 0.0 < ndv(DisplacementField(rng.normal(0, 0.5, (6, 6, 6, 3)))) < 100.0
        assert ndv(DisplacementField(rng.normal(0, 10, (6, 6, 6, 3)))) == 100.0

    def test_jacobian_diagnostic(self):
        assert jacobian_negative_percent(DisplacementField.zeros((4, 4, 4))) == 0.0
        assert jacobian_negative_percent(reflection(4)) == 100.0


class TestTRE:
    def test_cases(self):
        zero = DisplacementField.zeros((8, 8, 8))
        pts = LandmarkSet(np.array([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]))
        assert tre(pts, pts, zero) == 0.0
        assert tre(LandmarkSet([[1.0, 1.0, 1.0]]), LandmarkSet([[4.0, 5.0, 1.0]]), zero) == 5.0
        u = np.zeros((8, 8, 8, 3))
        u[..., 0] = 1.0
        shifted = LandmarkSet(pts.points + [1.0, 0.0, 0.0])
        assert tre(pts, shifted, DisplacementField(u)) == 0.0

    def test_spacing(self):
        u = np.zeros((8, 8, 8, 3))
        u[..., 0] = 1.0
        field = DisplacementField(u, spacing=(2.0, 1.0, 1.0))
        fixed = LandmarkSet([[4.0, 2.0, 2.0]])
        assert tre(fixed, LandmarkSet([[6.0, 2.0, 2.0]]), field) == 0.0

    def test_errors(self):
        zero = DisplacementField.zeros((4, 4, 4))
        with pytest.raises(ValueError, match="count mismatch"):
            tre(LandmarkSet([[0.0, 0, 0]]), LandmarkSet(np.zeros((2, 3))), zero)
        pts = LandmarkSet([[1.0, 1, 1], [9.0, 1, 1], [1.0, -1, 1]])
        with pytest.raises(ValueError, match=r"\[1, 2\]"):
            tre(pts, pts, zero)

    def test_permutation_invariant(self, rng):
        field = DisplacementField(rng.normal(0, 1, (6, 6, 6, 3)))
        a = rng.uniform(0, 5, (7, 3))
        b = rng.uniform(0, 5, (7, 3))
        perm = rng.permutation(7)
        ref = tre(LandmarkSet(a), LandmarkSet(b), field)
        assert tre(LandmarkSet(a[perm]), LandmarkSet(b[perm]), field) == pytest.approx(ref, rel=1e-12)


class TestGCScore:
    def test_alias(self, rng):
        a, b = smooth_volume(rng, (6, 6, 6)), smooth_volume(rng, (6, 6, 6))
        assert gc_score(a, b) == gc(a, b)
        assert gc_score(a, a) == pytest.approx(1.0, abs=1e-12)
        assert gc_score(a, Volume3(np.full((6, 6, 6), 2.0))) == 0.0


def test_evaluate_report(rng):
    lab = labels(rng.integers(0, 3, (6, 6, 6)))
    zero = DisplacementField.zeros(lab.dims)
    rep = evaluate(fixed_labels=lab, warped_labels=lab, field=zero)
    assert rep.dice_mean == 1.0 and rep.hd95_mean == 0.0 and rep.ndv_percent == 0.0
    assert rep.tre_mean is None and rep.gc_score is None
    d = rep.to_dict()
    assert set(d["dice_per_label"]) == {"1", "2"}
