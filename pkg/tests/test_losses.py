import math
from types import SimpleNamespace

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from incseg import (ConfigurationError, TrainingError, bce_seg,
                    contrastive_pool_loss, feature_kd, inter_class_loss,
                    intra_class_loss, logit_kd, masked_average_pool, mix_labels,
                    predict_previous, remodel_logits, total_objective)
from incseg.losses import area_downsample, class_masks_from_labels

from .oracles import (bce_ref, contrastive_ref, logit_kd_ref, masked_pool_ref,
                      mse_ref, sigmoid_ref)

IGNORE = 255


class _StubTeacher:
    """Minimal previous-step model: fixed logits, known class layout."""

    def __init__(self, logits, class_ids):
        self._logits = logits
        self.class_ids = tuple(class_ids)

    def __call__(self, images):
        return SimpleNamespace(logits=self._logits)


class TestPredictPrevious:
    def test_sigmoid_confidence_matches_reference(self):
        # a pixel with logits [-1 (unknown), +3 (class 1)]
        logits = torch.tensor([[[[-1.0]], [[3.0]]]])
        teacher = _StubTeacher(logits, class_ids=[1])
        pred, conf = predict_previous(teacher, torch.zeros(1, 3, 1, 1))
        assert int(pred[0, 0, 0]) == 1
        expected = float(1 / (1 + mpmath.exp(-3)))
        assert abs(float(conf[0, 0, 0]) - expected) < 1e-7
        assert abs(expected - 0.9526) < 1e-4
        assert abs(sigmoid_ref(3.0) - expected) < 1e-12

    def test_tie_breaks_to_lowest_channel(self):
        logits = torch.full((1, 4, 2, 2), 0.25)
        teacher = _StubTeacher(logits, class_ids=[5, 6, 7])
        pred, conf = predict_previous(teacher, torch.zeros(1, 3, 2, 2))
        assert (pred == 0).all()  # channel 0 = unknown wins ties
        assert torch.allclose(conf, torch.sigmoid(torch.tensor(0.25)))

    def test_confidence_bounded(self):
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn((2, 5, 6, 6), generator=gen) * 10
        teacher = _StubTeacher(logits, class_ids=[1, 2, 3, 4])
        _, conf = predict_previous(teacher, torch.zeros(2, 3, 6, 6))
        assert float(conf.min()) >= 0.0 and float(conf.max()) <= 1.0

    def test_no_teacher_rejected(self):
        with pytest.raises(ConfigurationError):
            predict_previous(None, torch.zeros(1, 3, 2, 2))


class TestMixLabels:
    def _grids(self, y, pred, conf):
        return (torch.tensor(y, dtype=torch.long),
                torch.tensor(pred, dtype=torch.long),
                torch.tensor(conf, dtype=torch.float))

    def test_confident_unknown_adopts_prediction(self):
        y, pred, conf = self._grids([[0]], [[3]], [[0.9]])
        assert int(mix_labels(y, pred, conf)[0, 0]) == 3

    def test_ground_truth_dominates(self):
        y, pred, conf = self._grids([[16]], [[3]], [[0.99]])
        assert int(mix_labels(y, pred, conf)[0, 0]) == 16

    def test_below_threshold_stays_unknown(self):
        y, pred, conf = self._grids([[0]], [[3]], [[0.69]])
        assert int(mix_labels(y, pred, conf)[0, 0]) == 0

    def test_exact_threshold_adopts(self):
        y, pred, conf = self._grids([[0]], [[3]], [[0.7]])
        assert int(mix_labels(y, pred, conf)[0, 0]) == 3

    def test_ignore_passthrough(self):
        y, pred, conf = self._grids([[IGNORE]], [[3]], [[0.99]])
        assert int(mix_labels(y, pred, conf)[0, 0]) == IGNORE

    def test_exhaustive_truth_table(self):
        # rows: (ground truth, confidence, expected output); prediction is 7
        cases = [
            (16, 0.2, 16), (16, 0.9, 16),        # current-class pixel
            (0, 0.69, 0), (0, 0.7, 7), (0, 0.9999, 7), (0, 0.0, 0),
            (IGNORE, 0.0, IGNORE), (IGNORE, 1.0, IGNORE),
        ]
        for gt, conf, expected in cases:
            y, pred, c = self._grids([[gt]], [[7]], [[conf]])
            assert int(mix_labels(y, pred, c, tau=0.7)[0, 0]) == expected

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_output_domain_invariant(self, seed):
        rng = np.random.default_rng(seed)
        current = [16, 17]
        old = [1, 2, 3]
        y = rng.choice(current + [0, IGNORE], size=(5, 5))
        pred = rng.choice(old + [0], size=(5, 5))
        conf = rng.random((5, 5)).astype(np.float32)
        out = mix_labels(torch.from_numpy(y).long(), torch.from_numpy(pred).long(),
                         torch.from_numpy(conf))
        legal = set(current + old + [0, IGNORE])
        assert set(int(v) for v in torch.unique(out)) <= legal
        # shape and ignore positions preserved
        assert (out.numpy() == IGNORE).sum() == (y == IGNORE).sum()


class TestMaskedAveragePool:
    def test_top_row_prototype(self):
        feats = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])  # (C=1, 2, 2)
        mask = torch.tensor([[[1.0, 1.0], [0.0, 0.0]]])
        protos, kept = masked_average_pool(feats, mask)
        assert kept == [0]
        assert float(protos[0, 0]) == pytest.approx(1.5)
        assert float(masked_pool_ref(feats.numpy(), mask[0].numpy())[0]) == pytest.approx(1.5)

    def test_constant_map(self):
        feats = torch.full((4, 3, 3), 2.5)
        mask = torch.zeros((1, 3, 3))
        mask[0, 1, 1] = 0.7
        protos, _ = masked_average_pool(feats, mask)
        assert torch.allclose(protos, torch.full((1, 4), 2.5))

    def test_full_mask_is_global_mean(self):
        gen = torch.Generator().manual_seed(2)
        feats = torch.randn((3, 4, 4), generator=gen)
        protos, _ = masked_average_pool(feats, torch.ones((1, 4, 4)))
        assert torch.allclose(protos[0], feats.mean(dim=(1, 2)), atol=1e-6)

    def test_zero_mass_masks_omitted(self):
        gen = torch.Generator().manual_seed(3)
        feats = torch.randn((2, 4, 4), generator=gen)
        masks = torch.zeros((3, 4, 4))
        masks[0, 0, 0] = 1.0
        masks[2, 1, 1] = 1.0
        protos, kept = masked_average_pool(feats, masks)
        assert kept == [0, 2]
        assert protos.shape == (2, 2)

    def test_all_empty_returns_empty(self):
        feats = torch.randn((2, 4, 4))
        protos, kept = masked_average_pool(feats, torch.zeros((3, 4, 4)))
        assert kept == [] and protos.shape == (0, 2)

    def test_matches_oracle_on_random_soft_masks(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            feats = rng.normal(size=(3, 4, 5))
            mask = rng.random((4, 5))
            protos, _ = masked_average_pool(torch.from_numpy(feats),
                                            torch.from_numpy(mask)[None])
            ref = masked_pool_ref(feats, mask)
            assert np.allclose(protos[0].numpy(), ref, rtol=1e-10)


class TestContrastivePool:
    def test_single_pair_is_zero(self):
        a = torch.tensor([[1.0, 0.0]])
        b = torch.tensor([[0.6, 0.8]])
        assert float(contrastive_pool_loss(a, b)) == pytest.approx(0.0, abs=1e-9)

    def test_orthonormal_pair_frozen_value(self):
        # two orthonormal prototypes identical across steps, raw dot products
        a = torch.eye(2)
        loss = contrastive_pool_loss(a, a.clone(), normalize=False)
        expected = float(mpmath.log(2 + mpmath.e) - 1)
        assert float(loss) == pytest.approx(expected, rel=1e-7)
        assert expected == pytest.approx(0.5514, abs=1e-4)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            k, c = int(rng.integers(2, 6)), int(rng.integers(2, 5))
            anchors = rng.normal(size=(k, c))
            positives = rng.normal(size=(k, c))
            for normalize in (True, False):
                got = float(contrastive_pool_loss(torch.from_numpy(anchors),
                                                  torch.from_numpy(positives),
                                                  normalize=normalize))
                ref = contrastive_ref(anchors, positives, normalize=normalize)
                assert got == pytest.approx(ref, rel=1e-9)

    def test_monotone_in_positive_similarity(self):
        # raising the anchor-positive dot with negatives fixed lowers the loss
        anchors = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        base = torch.tensor([[0.5, 0.0], [0.0, 1.0]])
        closer = torch.tensor([[0.9, 0.0], [0.0, 1.0]])
        l_base = float(contrastive_pool_loss(anchors, base, normalize=False))
        l_closer = float(contrastive_pool_loss(anchors, closer, normalize=False))
        assert l_closer < l_base

    def test_finite_on_random_inputs(self):
        gen = torch.Generator().manual_seed(5)
        for _ in range(5):
            a = torch.randn((4, 8), generator=gen)
            b = torch.randn((4, 8), generator=gen)
            assert torch.isfinite(contrastive_pool_loss(a, b))

    def test_empty_pool_zero(self):
        a = torch.zeros((0, 4))
        assert float(contrastive_pool_loss(a, a)) == 0.0


class TestInterClassLoss:
    def _feats(self, seed=0, c=3, h=4, w=4):
        gen = torch.Generator().manual_seed(seed)
        return torch.randn((c, h, w), generator=gen, dtype=torch.float64)

    def _labels(self, values):
        return torch.tensor(values, dtype=torch.long)

    def test_single_class_zero(self):
        labels = torch.zeros((8, 8), dtype=torch.long)
        labels[:4] = 3
        loss, k = inter_class_loss(labels, self._feats(0), self._feats(1))
        assert k == 1
        assert float(loss) == pytest.approx(0.0, abs=1e-9)

    def test_no_foreground_skips(self):
        labels = torch.zeros((8, 8), dtype=torch.long)
        loss, k = inter_class_loss(labels, self._feats(0), self._feats(1))
        assert k == 0 and float(loss) == 0.0

    def test_identical_maps_match_bruteforce(self):
        labels = torch.zeros((8, 8), dtype=torch.long)
        labels[:4, :4] = 2
        labels[:4, 4:] = 5
        labels[4:, :4] = 9
        feats = self._feats(7)
        loss, k = inter_class_loss(labels, feats, feats.clone())
        assert k == 3
        masks, classes = class_masks_from_labels(labels, (4, 4))
        protos, _ = masked_average_pool(feats, masks.to(feats.dtype))
        ref = contrastive_ref(protos.numpy(), protos.numpy(), normalize=True)
        assert float(loss) == pytest.approx(ref, rel=1e-9)

    def test_class_id_permutation_invariant(self):
        labels = torch.zeros((8, 8), dtype=torch.long)
        labels[:4, :4] = 2
        labels[4:, 4:] = 7
        f_t, f_p = self._feats(3), self._feats(4)
        a, _ = inter_class_loss(labels, f_t, f_p)
        swapped = labels.clone()
        swapped[labels == 2] = 7
        swapped[labels == 7] = 2
        b, _ = inter_class_loss(swapped, f_t, f_p)
        assert float(a) == pytest.approx(float(b), rel=1e-9)

    def test_ignore_and_unknown_excluded(self):
        labels = torch.zeros((8, 8), dtype=torch.long)
        labels[:4, :4] = 2
        labels[4:, 4:] = IGNORE
        _, k = inter_class_loss(labels, self._feats(0), self._feats(1))
        assert k == 1


class TestIntraClassLoss:
    def _partition(self, labels_grid):
        n = int(labels_grid.max()) + 1
        return torch.stack([(labels_grid == i).to(torch.float64) for i in range(n)])

    def test_single_proposal_skips(self):
        masks = torch.ones((1, 8, 8))
        gen = torch.Generator().manual_seed(0)
        f = torch.randn((3, 4, 4), generator=gen, dtype=torch.float64)
        loss, n = intra_class_loss(masks, f, f.clone())
        assert n == 1 and float(loss) == 0.0

    def test_matches_bruteforce_on_three_proposals(self):
        grid = torch.zeros((8, 8), dtype=torch.long)
        grid[:, 3:5] = 1
        grid[5:, 5:] = 2
        masks = self._partition(grid)
        gen = torch.Generator().manual_seed(1)
        f_t = torch.randn((3, 4, 4), generator=gen, dtype=torch.float64)
        f_p = torch.randn((3, 4, 4), generator=gen, dtype=torch.float64)
        loss, n = intra_class_loss(masks, f_t, f_p)
        assert n == 3
        small = area_downsample(masks, (4, 4))
        anchors, _ = masked_average_pool(f_t, small.to(f_t.dtype))
        positives, _ = masked_average_pool(f_p, small.to(f_p.dtype))
        ref = contrastive_ref(anchors.numpy(), positives.numpy(), normalize=True)
        assert float(loss) == pytest.approx(ref, rel=1e-9)

    def test_proposal_permutation_invariant(self):
        grid = torch.zeros((8, 8), dtype=torch.long)
        grid[:4] = 1
        grid[:, :2] = 2
        masks = self._partition(grid)
        gen = torch.Generator().manual_seed(2)
        f_t = torch.randn((3, 4, 4), generator=gen, dtype=torch.float64)
        f_p = torch.randn((3, 4, 4), generator=gen, dtype=torch.float64)
        a, _ = intra_class_loss(masks, f_t, f_p)
        b, _ = intra_class_loss(masks.flip(0), f_t, f_p)
        assert float(a) == pytest.approx(float(b), rel=1e-9)

    def test_empty_padding_does_not_change_value(self):
        grid = torch.zeros((8, 8), dtype=torch.long)
        grid[:4] = 1
        masks = self._partition(grid)
        padded = torch.cat([masks, torch.zeros((3, 8, 8))])
        gen = torch.Generator().manual_seed(3)
        f_t = torch.randn((3, 4, 4), generator=gen, dtype=torch.float64)
        f_p = torch.randn((3, 4, 4), generator=gen, dtype=torch.float64)
        a, na = intra_class_loss(masks, f_t, f_p)
        b, nb = intra_class_loss(padded, f_t, f_p)
        assert na == nb == 2
        assert float(a) == pytest.approx(float(b), rel=1e-12)


class TestFeatureKd:
    def test_identical_zero(self):
        f = torch.randn((3, 4, 4))
        assert float(feature_kd(f, f.clone())) == 0.0

    def test_constant_offset(self):
        f = torch.randn((3, 4, 4))
        assert float(feature_kd(f + 0.25, f)) == pytest.approx(0.0625, rel=1e-6)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(3, 4, 4))
        b = rng.normal(size=(3, 4, 4))
        got = float(feature_kd(torch.from_numpy(a), torch.from_numpy(b)))
        assert got == pytest.approx(mse_ref(a, b), rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            feature_kd(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


class TestRemodelLogits:
    def test_spec_pixel_example(self):
        # channels: [unknown, c1, c2, c4, c5]; current step classes c4, c5
        z = torch.tensor([0.2, 1.0, -0.5, 2.0, 1.0]).reshape(5, 1, 1)
        out = remodel_logits(z, current_channels=[3, 4])
        assert out.shape == (3, 1, 1)
        assert float(out[0]) == pytest.approx(3.0)
        assert float(out[1]) == pytest.approx(1.0)
        assert float(out[2]) == pytest.approx(-0.5)

    def test_singleton_current(self):
        z = torch.tensor([0.5, -1.0, 2.5]).reshape(3, 1, 1)
        out = remodel_logits(z, current_channels=[2])
        assert float(out[0]) == pytest.approx(2.5)
        assert float(out[1]) == pytest.approx(-1.0)

    def test_old_channels_bit_identical(self):
        gen = torch.Generator().manual_seed(6)
        z = torch.randn((2, 6, 3, 3), generator=gen)
        out = remodel_logits(z, current_channels=[4, 5])
        assert torch.equal(out[:, 1:], z[:, 1:4])

    def test_empty_current_rejected(self):
        with pytest.raises(ValueError):
            remodel_logits(torch.zeros(3, 2, 2), current_channels=[])


class TestLogitKd:
    def test_student_equals_teacher_gives_mean_entropy(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(3, 4, 4))
        got = float(logit_kd(torch.from_numpy(z), torch.from_numpy(z)))
        # brute-force: mean self-entropy of the teacher scaled by 1/|C|
        total = 0.0
        for i in range(4):
            for j in range(4):
                e = np.exp(z[:, i, j] - z[:, i, j].max())
                p = e / e.sum()
                total += -(p * np.log(p)).sum()
        assert got == pytest.approx(total / (3 * 16), rel=1e-9)

    def test_one_hot_teacher_matched_student_near_zero(self):
        z = torch.full((2, 2, 2), -30.0)
        z[0] = 30.0
        assert float(logit_kd(z, z.clone())) < 1e-6

    def test_matches_bruteforce_small_instance(self):
        rng = np.random.default_rng(9)
        student = rng.normal(size=(2, 2, 2))
        teacher = rng.normal(size=(2, 2, 2))
        got = float(logit_kd(torch.from_numpy(student), torch.from_numpy(teacher)))
        assert got == pytest.approx(logit_kd_ref(student, teacher), rel=1e-10)

    def test_minimised_by_matching_student(self):
        rng = np.random.default_rng(10)
        teacher = torch.from_numpy(rng.normal(size=(3, 4, 4)))
        at_teacher = float(logit_kd(teacher.clone(), teacher))
        perturbed = float(logit_kd(teacher + 0.5 * torch.from_numpy(
            rng.normal(size=(3, 4, 4))), teacher))
        assert at_teacher <= perturbed


class TestBceSeg:
    def test_saturated_correct_prediction(self):
        target = torch.zeros((2, 2), dtype=torch.long)
        target[0, :] = 1
        logits = torch.full((2, 2, 2), -20.0)
        logits[1, 0, :] = 20.0
        logits[0, 1, :] = 20.0
        loss, skipped = bce_seg(logits, target)
        assert not skipped
        assert float(loss) < 1e-6

    def test_zero_logits_give_log_two(self):
        target = torch.zeros((3, 3), dtype=torch.long)
        loss, _ = bce_seg(torch.zeros((4, 3, 3)), target)
        assert float(loss) == pytest.approx(math.log(2), rel=1e-6)

    def test_matches_bruteforce_with_ignore(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(2, 2, 2))
        target = np.array([[0, 1], [IGNORE, 0]])
        loss, _ = bce_seg(torch.from_numpy(logits), torch.from_numpy(target))
        assert float(loss) == pytest.approx(bce_ref(logits, target), rel=1e-9)

    def test_all_ignored_skips(self):
        target = torch.full((2, 2), IGNORE, dtype=torch.long)
        loss, skipped = bce_seg(torch.zeros((3, 2, 2)), target)
        assert skipped and float(loss) == 0.0


class TestTotalObjective:
    def test_weighted_sum_example(self):
        out = total_objective(bce=1.0, inter_class=0.5, intra_class=0.3,
                              kd_feature=0.2, kd_logit=0.4,
                              lambda_c=0.01, lambda_r=0.1)
        assert out.total == pytest.approx(1.068, abs=1e-12)
        assert out.contrast == pytest.approx(0.8)
        assert out.regularization == pytest.approx(0.6)

    def test_first_step_reduces_to_bce(self):
        out = total_objective(bce=0.37)
        assert out.total == pytest.approx(0.37)
        assert out.contrast == 0.0 and out.regularization == 0.0

    def test_zero_weights_reduce_to_bce(self):
        out = total_objective(bce=2.0, inter_class=9.0, intra_class=9.0,
                              kd_feature=9.0, kd_logit=9.0,
                              lambda_c=0.0, lambda_r=0.0)
        assert out.total == pytest.approx(2.0)

    def test_identities_hold_with_tensors(self):
        gen = torch.Generator().manual_seed(13)
        vals = torch.rand(5, generator=gen, dtype=torch.float64)
        out = total_objective(bce=vals[0], inter_class=vals[1], intra_class=vals[2],
                              kd_feature=vals[3], kd_logit=vals[4],
                              lambda_c=0.01, lambda_r=0.1)
        assert float(out.contrast) == pytest.approx(float(vals[1] + vals[2]), rel=1e-15)
        assert float(out.regularization) == pytest.approx(float(vals[3] + vals[4]), rel=1e-15)
        assert float(out.total) == pytest.approx(
            float(vals[0] + 0.01 * (vals[1] + vals[2]) + 0.1 * (vals[3] + vals[4])),
            rel=1e-15)

    def test_non_finite_component_named(self):
        with pytest.raises(TrainingError, match="kd_logit"):
            total_objective(bce=1.0, kd_logit=float("nan"))

    def test_to_floats(self):
        out = total_objective(bce=torch.tensor(1.0), inter_class=torch.tensor(2.0))
        floats = out.to_floats()
        assert floats["bce"] == 1.0 and floats["inter_class"] == 2.0
        assert floats["total"] == pytest.approx(1.0 + 0.01 * 2.0)


class TestZeroMassInvariance:
    def test_removing_empty_mask_changes_nothing(self):
        gen = torch.Generator().manual_seed(14)
        feats = torch.randn((3, 4, 4), generator=gen, dtype=torch.float64)
        masks = torch.zeros((3, 4, 4), dtype=torch.float64)
        masks[0, :2] = 1.0
        masks[1, 2:] = 1.0
        with_empty, kept_a = masked_average_pool(feats, masks)
        without, kept_b = masked_average_pool(feats, masks[:2])
        assert torch.equal(with_empty, without)
        assert kept_a == kept_b == [0, 1]
