import numpy as np
import pytest

from asapseg.autograd import Tensor, backward, fresh_tape
from asapseg.errors import (DegenerateBatchError, DegenerateMetricError,
                            LabelError, ShapeError)
from asapseg.losses import (ConfusionMatrix, LossWeights, miou, ohem_ce,
                            ohem_kept_mask, total_loss)


def ohem_oracle(losses, probs, valid, threshold, min_kept):
    """Brute-force restatement of the mining rule via explicit sorting."""
    losses, probs, valid = (np.asarray(a).reshape(-1)
                            for a in (losses, probs, valid))
    hard = [i for i in range(losses.size) if valid[i] and probs[i] < threshold]
    min_kept = min(min_kept, int(valid.sum()))
    if len(hard) >= min_kept:
        return set(hard)
    ranked = sorted((i for i in range(losses.size) if valid[i]),
                    key=lambda i: (-losses[i], i))
    return set(ranked[:min_kept])


def random_logit_batch(seed, n=2, k=4, h=8, w=8, ignore_frac=0.1):
    r = np.random.default_rng(seed)
    logits = r.normal(0, 2.0, size=(n, k, h, w))
    labels = r.integers(0, k, size=(n, h, w))
    labels[r.random(size=labels.shape) < ignore_frac] = 255
    return logits, labels


class TestOhem:
    def test_kept_set_matches_oracle_100_batches(self):
        w = LossWeights()
        for seed in range(100):
            r = np.random.default_rng(seed)
            size = int(r.integers(20, 200))
            losses = r.exponential(1.0, size=size)
            probs = np.exp(-losses)
            valid = r.random(size=size) < 0.9
            if not valid.any():
                valid[0] = True
            min_kept = int(r.integers(1, size))
            got = ohem_kept_mask(losses, probs, valid,
                                 w.ohem_threshold, min_kept)
            assert set(np.flatnonzero(got)) == ohem_oracle(
                losses, probs, valid, w.ohem_threshold, min_kept)

    def test_uniform_logits_loss_is_log_k(self):
        logits = np.zeros((1, 4, 4, 4))
        labels = np.zeros((1, 4, 4), dtype=np.int64)
        with fresh_tape():
            loss = ohem_ce(Tensor(logits), labels, LossWeights())
        assert loss.item() == pytest.approx(np.log(4.0))

    def test_confident_batch_uses_min_kept_fallback(self):
        # every pixel extremely confident and correct -> fallback keeps
        # min_kept highest-loss pixels; loss equals their mean
        logits = np.zeros((1, 2, 4, 4))
        logits[:, 1] = 20.0
        labels = np.ones((1, 4, 4), dtype=np.int64)
        w = LossWeights(ohem_min_kept=3)
        with fresh_tape():
            loss = ohem_ce(Tensor(logits), labels, w)
        per_pixel = -np.log(np.exp(20.0) / (np.exp(20.0) + 1.0))
        assert loss.item() == pytest.approx(per_pixel)

    def test_min_kept_default_is_sixteenth(self):
        assert LossWeights().min_kept_for(1600) == 100
        assert LossWeights(ohem_min_kept=7).min_kept_for(1600) == 7

    def test_ignored_pixels_never_kept(self):
        logits, labels = random_logit_batch(0)
        labels[0, 0, 0] = 255
        with fresh_tape():
            loss = ohem_ce(Tensor(logits, requires_grad=True), labels,
                           LossWeights())
            backward(loss)
        grad = loss  # gradient landed on the input tensor
        # re-run to inspect the logits grad directly
        with fresh_tape():
            t = Tensor(logits, requires_grad=True)
            backward(ohem_ce(t, labels, LossWeights()))
            assert np.all(t.grad[0, :, 0, 0] == 0.0)

    def test_out_of_range_label_raises(self):
        logits, labels = random_logit_batch(1)
        labels[0, 0, 0] = 9
        with pytest.raises(LabelError):
            ohem_ce(Tensor(logits), labels, LossWeights())

    def test_all_ignored_raises(self):
        logits = np.zeros((1, 3, 2, 2))
        labels = np.full((1, 2, 2), 255, dtype=np.int64)
        with pytest.raises(DegenerateBatchError):
            ohem_ce(Tensor(logits), labels, LossWeights())

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ohem_ce(Tensor(np.zeros((1, 3, 4, 4))),
                    np.zeros((1, 4, 5), dtype=np.int64), LossWeights())

    def test_gradient_matches_finite_differences(self):
        from asapseg.gradcheck import finite_diff_check
        logits, labels = random_logit_batch(2, n=1, k=3, h=4, w=4)
        w = LossWeights(ohem_min_kept=1)

        def f(t):
            return ohem_ce(t, labels, w)

        report = finite_diff_check(f, logits, coords=24,
                                   rng=np.random.default_rng(0))
        assert report.passed, str(report)

    def test_raising_kept_pixel_logit_does_not_increase_loss(self):
        logits, labels = random_logit_batch(3, n=1)
        w = LossWeights()
        with fresh_tape():
            before = ohem_ce(Tensor(logits), labels, w).item()
        lab = labels[0, 0, 0]
        if lab == 255:
            lab = labels[0, 1, 1]
            labels[0, 0, 0] = lab
        logits2 = logits.copy()
        logits2[0, lab, 0, 0] += 5.0
        with fresh_tape():
            after = ohem_ce(Tensor(logits2), labels, w).item()
        assert after <= before + 1e-12


class TestTotalLoss:
    def test_spot_value_and_linearity(self):
        # heads engineered to produce exact component losses via uniform
        # logits: loss = ln K; instead verify linearity by substitution on
        # real heads and the spot value with synthetic components
        w = LossWeights(alpha=0.4, beta=0.4)
        assert 1.0 + w.alpha * 0.5 + w.beta * 0.5 == pytest.approx(1.4)

        logits, labels = random_logit_batch(5, n=1)
        l_pred = logits
        l_a1 = np.random.default_rng(6).normal(size=logits.shape)
        l_a2 = np.random.default_rng(7).normal(size=logits.shape)
        with fresh_tape():
            parts = [ohem_ce(Tensor(x), labels, w).item()
                     for x in (l_pred, l_a1, l_a2)]
            combo = total_loss(Tensor(l_pred), Tensor(l_a1), Tensor(l_a2),
                               labels, w).item()
        assert combo == pytest.approx(
            parts[0] + w.alpha * parts[1] + w.beta * parts[2], rel=1e-12)

    def test_zero_weights_reduce_to_pred(self):
        logits, labels = random_logit_batch(8, n=1)
        w = LossWeights(alpha=0.0, beta=0.0)
        with fresh_tape():
            combo = total_loss(Tensor(logits), Tensor(logits), Tensor(logits),
                               labels, w).item()
            solo = ohem_ce(Tensor(logits), labels, w).item()
        assert combo == pytest.approx(solo)

    def test_aux_gradient_scaled_by_alpha(self):
        logits, labels = random_logit_batch(9, n=1)
        aux = np.random.default_rng(10).normal(size=logits.shape)
        w = LossWeights(alpha=0.4, beta=0.0)
        with fresh_tape():
            t = Tensor(aux, requires_grad=True)
            backward(total_loss(Tensor(logits), t, Tensor(aux), labels, w))
            combined_grad = t.grad.copy()
        with fresh_tape():
            t2 = Tensor(aux, requires_grad=True)
            backward(ohem_ce(t2, labels, w))
            solo_grad = t2.grad.copy()
        np.testing.assert_allclose(combined_grad, w.alpha * solo_grad,
                                   rtol=1e-12)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-0.1)
        with pytest.raises(ValueError):
            LossWeights(ohem_threshold=1.5)
        with pytest.raises(ValueError):
            LossWeights(ohem_min_kept=0)


class TestMiou:
    def test_perfect_diagonal(self):
        cm = ConfusionMatrix(3, counts=np.diag([5, 2, 9]))
        iou, mean = miou(cm)
        np.testing.assert_array_equal(iou, 1.0)
        assert mean == 1.0

    def test_hand_example_two_class(self):
        cm = ConfusionMatrix(2, counts=[[3, 1], [1, 3]])
        iou, mean = miou(cm)
        np.testing.assert_allclose(iou, [0.6, 0.6])
        assert mean == pytest.approx(0.6)

    def test_hand_example_all_zero_predictions(self):
        pred = np.zeros(10, dtype=np.int64)
        truth = np.array([0] * 5 + [1] * 5)
        cm = ConfusionMatrix(2).update(pred, truth)
        iou, mean = miou(cm)
        np.testing.assert_allclose(iou, [0.5, 0.0])
        assert mean == pytest.approx(0.25)

    def test_absent_class_excluded_from_mean(self):
        cm = ConfusionMatrix(3, counts=[[4, 0, 0], [0, 4, 0], [0, 0, 0]])
        iou, mean = miou(cm)
        assert np.isnan(iou[2])
        assert mean == pytest.approx(1.0)

    def test_empty_matrix_raises(self):
        with pytest.raises(DegenerateMetricError):
            miou(ConfusionMatrix(2))

    def test_update_ignores_and_validates(self):
        cm = ConfusionMatrix(2)
        cm.update(np.array([0, 1, 0]), np.array([0, 255, 1]))
        assert cm.total == 2
        with pytest.raises(LabelError):
            cm.update(np.array([5]), np.array([0]))

    def test_merge_commutes_with_accumulation(self, rng):
        pred = rng.integers(0, 3, size=100)
        truth = rng.integers(0, 3, size=100)
        whole = ConfusionMatrix(3).update(pred, truth)
        a = ConfusionMatrix(3).update(pred[:50], truth[:50])
        b = ConfusionMatrix(3).update(pred[50:], truth[50:])
        np.testing.assert_array_equal(a.merge(b).counts, whole.counts)
