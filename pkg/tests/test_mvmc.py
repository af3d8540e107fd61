import numpy as np
import pytest

from cvseg import functional as F
from cvseg.autograd import Tape, Tensor
from cvseg.errors import ParameterError
from cvseg.losses import IGNORE
from cvseg.mvmc import PseudoMask, RefineConfig, build_seg_targets, calibrate, load_mask, refine, save_mask
from cvseg.selftest import check_mvmc_suite
from cvseg.transforms import IDENTITY, GeomTransform


def probs_of(rng, shape, sharp=3.0):
    return F.softmax(Tensor(rng.normal(size=shape) * sharp), axis=1).data


class TestCalibrate:
    def test_single_view_collapses_to_argmax(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 4, 6, 7))
        pm = calibrate([logits], [IDENTITY], rng.uniform(size=(2, 6, 7, 3)), gamma=0.0, refine_cfg=None,
                       tie_band=-1.0)
        np.testing.assert_array_equal(pm.labels, logits.argmax(axis=1))
        assert not pm.ignore.any()
        np.testing.assert_allclose(pm.confidence, F.softmax(Tensor(logits), axis=1).data.max(axis=1))

    def test_identical_views_match_single_view(self):
        rng = np.random.default_rng(1)
        logits, image = rng.normal(size=(1, 3, 5, 5)), rng.uniform(size=(1, 5, 5, 3))
        one = calibrate([logits], [IDENTITY], image, gamma=0.5)
        many = calibrate([logits] * 4, [IDENTITY] * 4, image, gamma=0.5)
        np.testing.assert_array_equal(many.targets(), one.targets())
        np.testing.assert_allclose(many.confidence, one.confidence, atol=1e-15)

    def test_conflicting_views_are_ignored(self):
        a = np.full((1, 2, 4, 4), -50.0)
        a[:, 0] = 50.0
        b = a[:, ::-1].copy()
        pm = calibrate([a, b], [IDENTITY, IDENTITY], np.zeros((1, 4, 4, 3)), gamma=0.9, refine_cfg=None)
        brute = np.exp(0.0) / (np.exp(0.0) + np.exp(0.0))
        np.testing.assert_allclose(pm.confidence, brute)
        assert pm.ignore.all()

    def test_gamma_out_of_range(self):
        with pytest.raises(ParameterError):
            calibrate([np.zeros((1, 2, 2, 2))], [IDENTITY], np.zeros((1, 2, 2, 3)), gamma=1.5)

    def test_tie_band_marks_near_ties(self):
        logits = np.zeros((1, 3, 1, 2))
        logits[0, 0, 0, 0], logits[0, 1, 0, 0] = 5.0, 4.99
        logits[0, 0, 0, 1] = 5.0
        pm = calibrate([logits], [IDENTITY], np.zeros((1, 1, 2, 3)), gamma=0.0, refine_cfg=None)
        np.testing.assert_array_equal(pm.ignore, [[[True, False]]])

    def test_view_order_invariance(self):
        rng = np.random.default_rng(2)
        geoms = [GeomTransform(0.5), GeomTransform(1.0, True), GeomTransform(0.75, True)]
        logits = [rng.normal(size=(2, 4) + g.output_size((16, 20))) for g in geoms]
        image = rng.uniform(size=(2, 16, 20, 3))
        base = calibrate(logits, geoms, image, gamma=0.5)
        for perm in ([2, 0, 1], [1, 0, 2]):
            other = calibrate([logits[i] for i in perm], [geoms[i] for i in perm], image, gamma=0.5)
            assert np.abs(other.confidence - base.confidence).max() < 1e-12
            np.testing.assert_array_equal(other.labels, base.labels)

    def test_nothing_recorded_on_tape(self):
        rng = np.random.default_rng(3)
        leaf = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
        with Tape() as tape:
            doubled = leaf * 2.0
            before = len(tape)
            pm = calibrate([doubled], [IDENTITY], rng.uniform(size=(1, 4, 4, 3)), gamma=0.5)
            assert len(tape) == before
        assert isinstance(pm.labels, np.ndarray) and isinstance(pm.confidence, np.ndarray)

    def test_absent_classes_are_filtered(self):
        logits = np.zeros((1, 3, 2, 2))
        logits[0, 2] = 10.0
        pm = calibrate([logits], [IDENTITY], np.zeros((1, 2, 2, 3)), gamma=0.0, refine_cfg=None,
                       image_labels=np.array([[1.0, 0.0]]))
        assert (pm.labels != 2).all()

    def test_suite(self):
        res = check_mvmc_suite()
        assert res.passed, res.detail


class TestRefine:
    def test_zero_iterations_identity(self):
        rng = np.random.default_rng(4)
        p = probs_of(rng, (1, 3, 6, 6))
        np.testing.assert_array_equal(refine(p, rng.uniform(size=(1, 6, 6, 3)), iterations=0), p)

    def test_constant_image_is_box_filter(self):
        rng = np.random.default_rng(5)
        p = probs_of(rng, (1, 2, 7, 7))
        out = refine(p, np.full((1, 7, 7, 3), 0.4), iterations=1, kernel_size=3)
        i, j = 3, 4
        np.testing.assert_allclose(out[0, :, i, j], p[0, :, i - 1:i + 2, j - 1:j + 2].mean(axis=(1, 2)), rtol=1e-13)
        # corners average only the in-image part of the window
        np.testing.assert_allclose(out[0, :, 0, 0], p[0, :, :2, :2].mean(axis=(1, 2)), rtol=1e-13)

    def test_even_kernel(self):
        with pytest.raises(ParameterError):
            refine(np.ones((1, 1, 3, 3)), np.zeros((1, 3, 3, 3)), kernel_size=4)

    @pytest.mark.parametrize("iterations", [1, 3, 10])
    def test_distributions_stay_valid(self, iterations):
        rng = np.random.default_rng(6)
        out = refine(probs_of(rng, (2, 4, 8, 8)), rng.uniform(size=(2, 8, 8, 3)), iterations=iterations)
        assert out.min() >= 0
        assert np.abs(out.sum(axis=1) - 1).max() < 1e-9

    def test_edge_preserving_smoothing(self):
        rng = np.random.default_rng(7)
        size = 32
        image = np.zeros((1, size, size, 3))
        image[:, :, size // 2:] = 1.0
        left = np.arange(size) < size // 2
        truth = np.where(left, 0.8, 0.2)[None, :].repeat(size, 0)
        noisy = np.clip(truth + rng.normal(scale=0.1, size=truth.shape), 0.01, 0.99)
        p = np.stack([noisy, 1 - noisy])[None]
        out = refine(p, image, iterations=3)

        def within_var(q):
            return q[0, 0][:, left].var() + q[0, 0][:, ~left].var()

        def mixing(q):
            # distance of each region's mean from its true value
            return abs(q[0, 0][:, left].mean() - 0.8) + abs(q[0, 0][:, ~left].mean() - 0.2)

        assert within_var(out) < within_var(p)
        assert mixing(out) <= mixing(p) + 1e-12


class TestTargets:
    def test_identity(self):
        labels = np.random.default_rng(8).integers(0, 3, size=(1, 5, 6))
        pm = PseudoMask(labels, labels == 2, np.ones(labels.shape))
        out = build_seg_targets(pm, [IDENTITY])[0]
        np.testing.assert_array_equal(out, np.where(labels == 2, IGNORE, labels))

    def test_flip(self):
        labels = np.random.default_rng(9).integers(0, 3, size=(1, 5, 6))
        pm = PseudoMask(labels, np.zeros(labels.shape, bool), np.ones(labels.shape))
        np.testing.assert_array_equal(build_seg_targets(pm, [GeomTransform(1.0, True)])[0], labels[..., ::-1])

    def test_half_scale_quadrants(self):
        quad = np.zeros((1, 8, 8), dtype=np.int64)
        quad[:, :4, 4:], quad[:, 4:, :4], quad[:, 4:, 4:] = 1, 2, 3
        pm = PseudoMask(quad, quad == 3, np.ones(quad.shape))
        half = build_seg_targets(pm, [GeomTransform(0.5)])[0]
        expected = np.array([[0, 1], [2, IGNORE]]).repeat(2, 0).repeat(2, 1)
        np.testing.assert_array_equal(half[0], expected)


class TestPersistence:
    def test_png_roundtrip(self, tmp_path):
        labels = np.random.default_rng(10).integers(0, 4, size=(9, 11))
        labels[0, 0] = IGNORE
        save_mask(tmp_path / "m.png", labels)
        np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), labels)
