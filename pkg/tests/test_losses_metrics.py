import math

import numpy as np
import pytest

from cvseg.autograd import Tensor
from cvseg.errors import ContractError
from cvseg.gradcheck import check_gradients
from cvseg.losses import (
    FOCAL_LAMBDA,
    IGNORE,
    ConfusionAccumulator,
    LossWeights,
    bce_with_logits,
    class_scores,
    cls_loss,
    mask_consistency_loss,
    metrics,
    seg_loss,
    total_loss,
)
from cvseg.selftest import _loss_cases, brute_force_rates, check_metric_oracle
from cvseg.transforms import IDENTITY, GeomTransform


class TestSegLoss:
    def test_confident_correct_is_near_zero(self):
        target = np.random.default_rng(0).integers(0, 3, size=(2, 4, 4))
        logits = np.moveaxis(np.eye(3)[target], -1, 1) * 20.0
        assert 0 <= seg_loss([Tensor(logits)], [target]).item() < 1e-6

    def test_uniform_logits_give_log_k(self):
        target = np.random.default_rng(1).integers(0, 5, size=(1, 3, 3))
        assert seg_loss([Tensor(np.zeros((1, 5, 3, 3)))], [target]).item() == pytest.approx(math.log(5), rel=1e-14)

    def test_brute_force_two_by_two(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(1, 3, 2, 2))
        target = np.array([[[0, 2], [IGNORE, 1]]])
        terms = []
        for i in range(2):
            for j in range(2):
                if target[0, i, j] == IGNORE:
                    continue
                z = logits[0, :, i, j]
                terms.append(-(z[target[0, i, j]] - math.log(sum(math.exp(v) for v in z))))
        assert seg_loss([Tensor(logits)], [target]).item() == pytest.approx(sum(terms) / len(terms), rel=1e-13)

    def test_all_ignored_is_zero(self):
        assert seg_loss([Tensor(np.ones((1, 2, 2, 2)))], [np.full((1, 2, 2), IGNORE)]).item() == 0.0

    def test_summed_over_views(self):
        rng = np.random.default_rng(3)
        a, b = Tensor(rng.normal(size=(1, 3, 2, 2))), Tensor(rng.normal(size=(1, 3, 4, 4)))
        ta, tb = rng.integers(0, 3, size=(1, 2, 2)), rng.integers(0, 3, size=(1, 4, 4))
        both = seg_loss([a, b], [ta, tb]).item()
        assert both == pytest.approx(seg_loss([a], [ta]).item() + seg_loss([b], [tb]).item(), rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            seg_loss([Tensor(np.zeros((1, 2, 3, 3)))], [np.zeros((1, 2, 2), dtype=int)])


class TestClsLoss:
    def test_bce_brute_force(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(2, 3, 4, 4)) * 2
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        scores = class_scores(Tensor(logits)).data[:, 1:]
        brute = 0.0
        for i in range(2):
            for c in range(2):
                s = 1 / (1 + math.exp(-scores[i, c]))
                brute -= y[i, c] * math.log(s) + (1 - y[i, c]) * math.log(1 - s)
        assert cls_loss([Tensor(logits)], y).item() == pytest.approx(brute / 2, rel=1e-12)

    def test_score_brute_force(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(1, 3, 2, 3))
        m = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        for c in range(3):
            mc, zc = m[0, c].ravel(), z[0, c].ravel()
            pooled = (mc * zc).sum() / (1e-4 + mc.sum())
            focal = (1 - mc.mean()) ** 3 * math.log(0.01 + mc.mean())
            assert class_scores(Tensor(z)).data[0, c] == pytest.approx(pooled + focal, rel=1e-12)

    def test_absent_class_scores_focal_floor(self):
        z = np.zeros((1, 2, 4, 4))
        z[:, 0] = 40.0
        score = class_scores(Tensor(z)).data[0, 1]
        assert score == pytest.approx(math.log(FOCAL_LAMBDA), abs=1e-6)
        assert cls_loss([Tensor(z)], np.array([[0.0]])).item() < 0.01
        assert cls_loss([Tensor(z)], np.array([[1.0]])).item() > 4.0

    def test_present_class_with_large_logits(self):
        z = np.zeros((1, 2, 4, 4))
        z[:, 1] = 40.0
        assert class_scores(Tensor(z)).data[0, 1] > 30
        assert cls_loss([Tensor(z)], np.array([[1.0]])).item() < 1e-12

    def test_bce_stable_for_huge_scores(self):
        out = bce_with_logits(Tensor(np.array([1e4, -1e4])), np.array([1.0, 0.0])).data
        assert np.all(np.isfinite(out)) and np.all(out == 0)

    def test_unlabelled_samples_skipped(self):
        z = Tensor(np.random.default_rng(6).normal(size=(2, 3, 2, 2)))
        y = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert cls_loss([z], y, np.array([False, False])).item() == 0.0
        one = cls_loss([Tensor(z.data[:1])], y[:1]).item()
        assert cls_loss([z], y, np.array([True, False])).item() == pytest.approx(one, rel=1e-14)


class TestMaskConsistency:
    def test_identical_logits(self):
        z = Tensor(np.random.default_rng(7).normal(size=(1, 3, 4, 4)))
        assert mask_consistency_loss([z, z], [IDENTITY, IDENTITY], np.array([[1.0, 1.0]])).item() == 0.0

    def test_no_selected_class(self):
        rng = np.random.default_rng(8)
        a, b = Tensor(rng.normal(size=(1, 3, 4, 4))), Tensor(rng.normal(size=(1, 3, 4, 4)))
        assert mask_consistency_loss([a, b], [IDENTITY, IDENTITY], np.array([[0.0, 0.0]])).item() == 0.0

    def test_constant_offset_in_one_channel(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(1, 3, 4, 4))
        b = a.copy()
        b[:, 2] += 1.0
        b[:, 1] += 7.0  # not selected
        loss = mask_consistency_loss([Tensor(a), Tensor(b)], [IDENTITY, IDENTITY], np.array([[0.0, 1.0]]))
        assert loss.item() == pytest.approx(1.0, rel=1e-14)

    def test_single_view(self):
        assert mask_consistency_loss([Tensor(np.ones((1, 2, 2, 2)))], [IDENTITY]).item() == 0.0

    def test_unlabelled_uses_every_channel(self):
        a = np.zeros((1, 3, 2, 2))
        b = a + 1.0
        loss = mask_consistency_loss([Tensor(a), Tensor(b)], [IDENTITY, IDENTITY], np.array([[0.0, 0.0]]),
                                     labelled=np.array([False]))
        assert loss.item() == 3.0


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.seg, w.cls, w.reg, w.warmup_epochs) == (1.0, 1.0, 4.0, 5)

    def test_warmup(self):
        w = LossWeights()
        assert [w.at_epoch(e).seg for e in range(7)] == [0.0] * 5 + [1.0, 1.0]
        assert w.at_epoch(0).reg == 4.0 and w.at_epoch(0).cls == 1.0

    def test_total_decomposes_exactly(self):
        w = LossWeights(0.7, 1.3, 4.0)
        parts = [Tensor(x) for x in (0.31, 0.17, 0.029, 0.0113)]
        expected = 0.7 * 0.31 + 1.3 * 0.17 + 4.0 * (0.029 + 0.0113)
        assert total_loss(w, *parts).item() == expected


@pytest.mark.parametrize("name,fn,arrays", [pytest.param(*c, id=c[0]) for c in _loss_cases(np.random.default_rng(10))])
def test_loss_gradients(name, fn, arrays):
    assert check_gradients(fn, arrays) < 1e-4


class TestMetrics:
    def test_perfect(self):
        gt = np.random.default_rng(11).integers(0, 3, size=(8, 8))
        assert metrics(ConfusionAccumulator(3).update(gt, gt)) == (1.0, 0.0, 0.0)

    def test_complement(self):
        gt = np.zeros((4, 4), dtype=int)
        gt[:2] = 1
        assert metrics(ConfusionAccumulator(2).update(gt, 1 - gt))[0] == 0.0

    def test_empty(self):
        with pytest.raises(ContractError):
            metrics(ConfusionAccumulator(3))

    def test_ignore_pixels_not_counted(self):
        gt = np.array([[0, 1, IGNORE]])
        conf = ConfusionAccumulator(2).update(gt, np.array([[0, 1, 0]]))
        assert conf.total == 2

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        gt, pred = rng.integers(0, 3, size=(8, 8)), rng.integers(0, 3, size=(8, 8))
        assert metrics(ConfusionAccumulator(3).update(gt, pred)) == brute_force_rates(gt, pred, 3)

    def test_oracle_suite(self):
        res = check_metric_oracle(200)
        assert res.passed, res.detail

    def test_frozen_example(self):
        gt = np.array([0, 0, 1, 1, 2, 2])
        pred = np.array([0, 1, 1, 1, 0, 2])
        miou, mfdr, mfnr = metrics(ConfusionAccumulator(3).update(gt, pred))
        assert miou == pytest.approx((1 / 3 + 2 / 3 + 1 / 2) / 3)
        assert mfdr == pytest.approx((1 / 2 + 1 / 3 + 0) / 3)
        assert mfnr == pytest.approx((1 / 2 + 0 + 1 / 2) / 3)

    def test_relabelling_invariance(self):
        rng = np.random.default_rng(12)
        gt, pred = rng.integers(0, 4, size=(10, 10)), rng.integers(0, 4, size=(10, 10))
        perm = np.array([2, 0, 3, 1])
        a = metrics(ConfusionAccumulator(4).update(gt, pred))
        b = metrics(ConfusionAccumulator(4).update(perm[gt], perm[pred]))
        assert a[0] == pytest.approx(b[0], rel=1e-14)

    def test_merge_is_associative_and_commutative(self):
        rng = np.random.default_rng(13)
        parts = [ConfusionAccumulator(3).update(rng.integers(0, 3, 20), rng.integers(0, 3, 20)) for _ in range(3)]
        a = parts[0].merge(parts[1]).merge(parts[2]).matrix
        b = parts[2].merge(parts[0].merge(parts[1])).matrix
        np.testing.assert_array_equal(a, b)
        assert parts[0].merge(parts[1]).total == parts[0].total + parts[1].total

    def test_out_of_range_class(self):
        with pytest.raises(ContractError):
            ConfusionAccumulator(2).update(np.array([0, 2]), np.array([0, 1]))
