import math
import unittest

import pytest
import torch

from errors import ConfigError, DivergenceError
from losses import (
    PHASE2_TERMS,
    GradNormTracker,
    LossConfig,
    LossLedger,
    adv_feedback_loss,
    ce_loss,
    dice_loss,
    disc_loss,
    dynamic_weights,
    gen_loss,
    phase_for_epoch,
    seg_loss,
    size_loss,
    sparsity_loss,
    total_loss,
)


class TestGanTerms(unittest.TestCase):
    def test_disc_loss_value(self):
        real = torch.tensor([0.9, 0.6])
        fake = torch.tensor([0.2, 0.3])
        expected = -(math.log(0.9) + math.log(0.6)) / 2 - (math.log(0.8) + math.log(0.7)) / 2
        self.assertAlmostEqual(float(disc_loss(real, fake)), expected, places=6)

    def test_gen_loss_value(self):
        self.assertAlmostEqual(float(gen_loss(torch.tensor([0.5, 0.25]))),
                               -(math.log(0.5) + math.log(0.25)) / 2, places=6)

    def test_saturated_scores_stay_finite(self):
        self.assertTrue(math.isfinite(float(disc_loss(torch.zeros(3), torch.ones(3)))))
        self.assertTrue(math.isfinite(float(gen_loss(torch.zeros(3)))))


def test_ce_loss_binary_value():
    probs = torch.tensor([0.8, 0.3])
    targets = torch.tensor([1.0, 0.0])
    expected = -(math.log(0.8) + math.log(0.7)) / 2
    assert float(ce_loss(probs, targets)) == pytest.approx(expected, rel=1e-6)


def test_ce_loss_sums_channels():
    probs = torch.tensor([[[0.7]], [[0.2]], [[0.1]]]).unsqueeze(0)
    onehot = torch.tensor([[[1.0]], [[0.0]], [[0.0]]]).unsqueeze(0)
    expected = -(math.log(0.7) + math.log(0.8) + math.log(0.9))
    assert float(ce_loss(probs, onehot, channel_dim=1)) == pytest.approx(expected, rel=1e-6)


def test_dice_loss_identities():
    mask = torch.tensor([[0.0, 1.0], [1.0, 1.0]])
    assert float(dice_loss(mask, mask)) == pytest.approx(0.0, abs=1e-6)
    assert float(dice_loss(mask, 1 - mask)) == pytest.approx(1.0, abs=1e-6)
    assert float(dice_loss(torch.zeros(2, 2), torch.zeros(2, 2))) == pytest.approx(0.0)
    soft = torch.tensor([0.5, 0.5])
    target = torch.tensor([1.0, 0.0])
    assert float(dice_loss(soft, target, smooth=0.0)) == pytest.approx(1 - 2 * 0.5 / 2.0)


def test_seg_loss_perfect_prediction():
    classes = torch.tensor([[[0, 1], [2, 3]]])
    onehot = torch.nn.functional.one_hot(classes, 4).permute(0, 3, 1, 2).float()
    ce, dice = seg_loss(onehot, onehot)
    assert float(dice) == pytest.approx(0.0, abs=1e-5)
    assert float(ce) < 1e-5


def test_sparsity_loss():
    mask = torch.tensor([[0.5, -0.5], [0.0, 1.0]])
    assert float(sparsity_loss(mask, alpha=0.1)) == pytest.approx(0.1 * 2.0 / 4)


def test_size_loss_relative_error():
    mask = torch.zeros(4, 4)
    mask[:2, :2] = 1.0
    assert float(size_loss(mask, 8.0, gamma=1.0)) == pytest.approx(0.5)
    assert float(size_loss(mask, 4.0, gamma=2.0)) == pytest.approx(0.0)


def test_size_loss_skips_empty_labels():
    masks = torch.ones(2, 3, 3)
    assert float(size_loss(masks, [0.0, 3.0])) == pytest.approx(2.0)
    zero = size_loss(masks.requires_grad_(), [0.0, 0.0])
    assert float(zero) == 0.0
    assert zero.requires_grad


def test_adv_feedback_weights_by_edges():
    scores = torch.tensor([[0.5, 0.9], [0.1, 0.0]])
    edge = torch.tensor([[1.0, 0.0], [3.0, 0.0]])
    expected = (1.0 * -math.log(0.5) + 3.0 * -math.log(0.9)) / 4.0
    assert float(adv_feedback_loss(scores, edge)) == pytest.approx(expected, rel=1e-6)


def test_adv_feedback_empty_edge_map():
    scores = torch.full((2, 2), 0.5, requires_grad=True)
    loss = adv_feedback_loss(scores, torch.zeros(2, 2))
    assert float(loss) == 0.0
    loss.backward()
    assert torch.all(scores.grad == 0)


def test_adv_feedback_pushes_abnormality_down():
    scores = torch.tensor([0.6, 0.2], requires_grad=True)
    adv_feedback_loss(scores, torch.ones(2)).backward()
    assert torch.all(scores.grad > 0)


def test_gradcheck_losses():
    torch.manual_seed(0)
    probs = torch.rand(2, 3, 4, 4, dtype=torch.float64) * 0.8 + 0.1
    probs = (probs / probs.sum(dim=1, keepdim=True)).requires_grad_()
    onehot = torch.nn.functional.one_hot(torch.randint(0, 3, (2, 4, 4)), 3).permute(0, 3, 1, 2).double()
    assert torch.autograd.gradcheck(lambda p: seg_loss(p, onehot)[0] + seg_loss(p, onehot)[1],
                                    (probs,), eps=1e-4, rtol=1e-3, atol=1e-6)

    mask = (torch.rand(2, 5, 5, dtype=torch.float64) * 0.8 + 0.1).requires_grad_()
    assert torch.autograd.gradcheck(lambda m: size_loss(m, [100.0, 1.0]), (mask,), eps=1e-4, rtol=1e-3)

    scores = (torch.rand(3, 3, dtype=torch.float64) * 0.8 + 0.1).requires_grad_()
    edge = torch.rand(3, 3, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda a: adv_feedback_loss(a, edge), (scores,), eps=1e-4, rtol=1e-3)


def test_dynamic_weights():
    raw = dynamic_weights({"a": 1.0, "b": 3.0}, eps=0.0 + 1e-12, normalize=False)
    assert raw["a"] == pytest.approx(1.0)
    assert raw["b"] == pytest.approx(1 / 3)
    scaled = dynamic_weights({"a": 1.0, "b": 3.0})
    assert sum(scaled.values()) == pytest.approx(2.0)
    assert scaled["a"] / scaled["b"] == pytest.approx(3.0, rel=1e-6)


def test_phase_boundary():
    assert phase_for_epoch(0) == 1
    assert phase_for_epoch(10) == 1
    assert phase_for_epoch(11) == 2
    assert phase_for_epoch(0, phase1_last_epoch=-1) == 2


def test_grad_norm_tracker_ema():
    weight = torch.nn.Parameter(torch.tensor([2.0, 0.0]))
    tracker = GradNormTracker([weight], momentum=0.5)
    first = tracker.update({"x": (weight * torch.tensor([3.0, 4.0])).sum()})
    assert first["x"] == pytest.approx(5.0)
    second = tracker.update({"x": (weight * torch.tensor([1.0, 0.0])).sum()})
    assert second["x"] == pytest.approx(0.5 * 5.0 + 0.5 * 1.0)
    assert tracker.measure(torch.tensor(1.0)) == 0.0


def _ledger():
    ledger = LossLedger()
    for name, value in [("L_ce", 0.7), ("L_dice", 0.3), ("L_sparsity", 0.05),
                        ("L_adv", 0.2), ("L_size", 0.4)]:
        ledger.record(name, torch.tensor(value))
    ledger.grad_norms = {"seg": 1.0, "sparsity": 0.5, "adv": 2.0, "size": 4.0}
    return ledger


class TestTotalLoss(unittest.TestCase):
    def setUp(self):
        self.config = LossConfig()

    def test_phase1_is_segmentation_only(self):
        ledger = _ledger()
        total, used = total_loss(ledger, epoch=3, config=self.config)
        self.assertAlmostEqual(float(total), 1.0, places=6)
        self.assertEqual(used, {"seg": 1.0, "sparsity": 0.0, "adv": 0.0, "size": 0.0})
        self.assertEqual(ledger.to_record()["phase"], 1)

    def test_phase2_explicit_weights(self):
        weights = {"seg": 1.0, "sparsity": 2.0, "adv": 0.5, "size": 1.0}
        total, used = total_loss(_ledger(), epoch=11, config=self.config, weights=weights)
        self.assertAlmostEqual(float(total), 1.0 + 0.1 + 0.1 + 0.4, places=6)
        self.assertEqual(used, weights)

    def test_phase2_dynamic_weights(self):
        ledger = _ledger()
        _, used = total_loss(ledger, epoch=12, config=self.config)
        self.assertEqual(tuple(used), PHASE2_TERMS)
        self.assertAlmostEqual(sum(used.values()), 4.0, places=6)
        self.assertGreater(used["sparsity"], used["size"])
        self.assertEqual(ledger.to_record()["weights"], used)

    def test_phase2_fixed_seg_weight(self):
        config = LossConfig(dynamic_seg_weight=False)
        _, used = total_loss(_ledger(), epoch=12, config=config)
        self.assertEqual(used["seg"], 1.0)
        self.assertAlmostEqual(used["sparsity"] + used["adv"] + used["size"], 3.0, places=6)

    def test_non_finite_term_diverges(self):
        with self.assertRaises(DivergenceError):
            LossLedger().record("L_ce", torch.tensor(float("nan")))

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            LossConfig(prob_clamp=0.7).validate()


def test_gradcheck_gan_and_region_terms():
    generator = torch.Generator().manual_seed(1)

    def probs(*shape):
        return (torch.rand(*shape, generator=generator, dtype=torch.float64) * 0.8 + 0.1).requires_grad_()

    real, fake = probs(6, 6), probs(6, 6)
    assert torch.autograd.gradcheck(disc_loss, (real, fake), eps=1e-4, rtol=1e-3)
    assert torch.autograd.gradcheck(gen_loss, (fake,), eps=1e-4, rtol=1e-3)

    mask = probs(6, 6)
    assert torch.autograd.gradcheck(lambda m: sparsity_loss(m, alpha=0.1), (mask,), eps=1e-4, rtol=1e-3)

    target = (torch.rand(6, 6, generator=generator) > 0.5).double()
    assert torch.autograd.gradcheck(lambda m: dice_loss(m, target), (mask,), eps=1e-4, rtol=1e-3)


@pytest.mark.parametrize("factor", [0.5, 3.0, 10.0])
def test_dynamic_weight_scales_inversely_with_grad_norm(factor):
    base = dynamic_weights({"a": 1.5, "b": 0.2}, normalize=False)
    scaled = dynamic_weights({"a": 1.5 * factor, "b": 0.2}, normalize=False)
    assert base["a"] / scaled["a"] == pytest.approx(factor, rel=1e-6)
    assert scaled["b"] == base["b"]


def test_inactive_terms_do_not_swamp_the_others():
    weights = dynamic_weights({"seg": 1.0, "sparsity": 0.5, "adv": 0.0, "size": 4.0})
    assert weights["adv"] == 0.0
    assert sum(weights.values()) == pytest.approx(3.0)
    assert weights["seg"] == pytest.approx(3.0 / 3.25, rel=1e-6)

    assert dynamic_weights({"a": 0.0, "b": 0.0}) == {"a": 0.0, "b": 0.0}


def test_empty_edge_map_step_still_trains_segmentation():
    ledger = _ledger()
    ledger.grad_norms = {"seg": 1.0, "sparsity": 0.5, "adv": 0.0, "size": 4.0}
    total, used = total_loss(ledger, epoch=11, config=LossConfig())
    assert used["adv"] == 0.0
    assert used["seg"] == pytest.approx(3.0 / 3.25, rel=1e-6)
    expected = used["seg"] * 1.0 + used["sparsity"] * 0.05 + used["size"] * 0.4
    assert float(total) == pytest.approx(expected, rel=1e-5)
