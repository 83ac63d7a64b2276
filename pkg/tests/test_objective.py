"""Loss term values, invariances, and the weighted combination.

Hand-computed oracle values:
  softmax([1, 2])          = [0.26894142, 0.73105858]
  CE([1, 2], target 1)     = -ln 0.73105858 = 0.31326169
  CE([0, 2], target 0)     = ln(1 + e^2)    = 2.12692801
  KL(g || p), p = [0, 0], g = [0, ln 3]:
      softmax(g) = [0.25, 0.75], softmax(p) = [0.5, 0.5]
      KL = 0.25 ln(0.25/0.5) + 0.75 ln(0.75/0.5) = 0.13081204
"""

from __future__ import annotations

import math

import pytest
import torch

from explainkit.errors import LossError
from explainkit.objective import (
    LossWeights,
    classification_loss,
    distillation_loss,
    generator_label_loss,
    mle_loss,
    total_loss,
)


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.ce, w.mle, w.ce_g, w.dis, w.temperature) == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_rejects_negative_weight(self):
        with pytest.raises(LossError):
            LossWeights(mle=-0.1)

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(LossError):
            LossWeights(temperature=0.0)


class TestClassificationLoss:
    def test_hand_value(self):
        loss = classification_loss(torch.tensor([[1.0, 2.0]]), torch.tensor([1]))
        assert float(loss) == pytest.approx(0.31326169, abs=1e-7)

    def test_hand_value_wrong_class(self):
        loss = classification_loss(torch.tensor([[0.0, 2.0]]), torch.tensor([0]))
        assert float(loss) == pytest.approx(math.log(1 + math.e**2), abs=1e-7)

    def test_uniform_equals_ln_k(self):
        for k in (2, 3, 5):
            loss = classification_loss(
                torch.zeros(4, k, dtype=torch.float64), torch.zeros(4).long()
            )
            assert float(loss) == pytest.approx(math.log(k), abs=1e-9)

    def test_one_hot_answers(self):
        scores = torch.tensor([[1.0, 2.0], [3.0, 0.0]])
        index_form = classification_loss(scores, torch.tensor([1, 0]))
        one_hot = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        assert float(classification_loss(scores, one_hot)) == pytest.approx(
            float(index_form)
        )

    def test_shift_invariance(self):
        scores = torch.randn(6, 4, dtype=torch.float64)
        answers = torch.randint(0, 4, (6,))
        shifted = classification_loss(scores + 100.0, answers)
        assert float(shifted) == pytest.approx(
            float(classification_loss(scores, answers)), abs=1e-9
        )

    def test_sum_reduction(self):
        scores = torch.randn(5, 3)
        answers = torch.randint(0, 3, (5,))
        mean = classification_loss(scores, answers, "mean")
        total = classification_loss(scores, answers, "sum")
        assert float(total) == pytest.approx(5 * float(mean), rel=1e-6)


class TestMleLoss:
    def test_uniform_equals_ln_v(self):
        logits = torch.zeros(2, 3, 7, dtype=torch.float64)
        targets = torch.randint(0, 7, (2, 3))
        mask = torch.ones(2, 3, dtype=torch.bool)
        assert float(mle_loss(logits, targets, mask)) == pytest.approx(
            math.log(7), abs=1e-9
        )

    def test_pad_positions_contribute_zero(self):
        logits = torch.randn(1, 4, 7)
        targets = torch.randint(0, 7, (1, 4))
        mask = torch.tensor([[True, True, False, False]])
        base = mle_loss(logits, targets, mask, "sum")
        # corrupting masked logits and targets must not change the loss
        corrupted = logits.clone()
        corrupted[:, 2:] = 1e4
        bad_targets = targets.clone()
        bad_targets[:, 2:] = 0
        assert float(mle_loss(corrupted, bad_targets, mask, "sum")) == pytest.approx(
            float(base)
        )

    def test_empty_mask_raises(self):
        with pytest.raises(LossError):
            mle_loss(torch.zeros(1, 2, 5), torch.zeros(1, 2).long(),
                     torch.zeros(1, 2, dtype=torch.bool))

    def test_mean_divides_by_token_count(self):
        logits = torch.randn(2, 3, 5)
        targets = torch.randint(0, 5, (2, 3))
        mask = torch.tensor([[True, True, True], [True, False, False]])
        total = mle_loss(logits, targets, mask, "sum")
        mean = mle_loss(logits, targets, mask, "mean")
        assert float(total) == pytest.approx(4 * float(mean), rel=1e-6)


class TestDistillationLoss:
    def test_hand_value(self):
        p = torch.tensor([[0.0, 0.0]])
        g = torch.tensor([[0.0, math.log(3.0)]])
        expected = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)
        assert float(distillation_loss(p, g)) == pytest.approx(expected, abs=1e-7)

    def test_zero_at_equality(self):
        logits = torch.randn(8, 4)
        assert float(distillation_loss(logits, logits.clone())) == pytest.approx(
            0.0, abs=1e-9
        )

    def test_nonnegative_gibbs(self):
        torch.manual_seed(0)
        p = torch.randn(1000, 5) * 3
        g = torch.randn(1000, 5) * 3
        per_pair = torch.stack(
            [distillation_loss(p[i : i + 1], g[i : i + 1]) for i in range(0, 1000, 100)]
        )
        assert bool((per_pair >= 0).all())
        assert float(distillation_loss(p, g)) >= 0.0

    def test_shift_invariance(self):
        p = torch.randn(4, 3, dtype=torch.float64)
        g = torch.randn(4, 3, dtype=torch.float64)
        assert float(distillation_loss(p + 7.0, g - 11.0)) == pytest.approx(
            float(distillation_loss(p, g)), abs=1e-9
        )

    def test_temperature_softens(self):
        p = torch.tensor([[0.0, 0.0]])
        g = torch.tensor([[0.0, 4.0]])
        hot = distillation_loss(p, g, temperature=1.0)
        cool = distillation_loss(p, g, temperature=10.0)
        assert float(cool) < float(hot)

    def test_detach_target_blocks_generator_grad(self):
        p = torch.randn(2, 3, requires_grad=True)
        g = torch.randn(2, 3, requires_grad=True)
        distillation_loss(p, g, detach_target=True).backward()
        assert g.grad is None
        assert p.grad is not None

    def test_both_sides_differentiable_by_default(self):
        p = torch.randn(2, 3, requires_grad=True)
        g = torch.randn(2, 3, requires_grad=True)
        distillation_loss(p, g).backward()
        assert p.grad is not None and g.grad is not None

    def test_temperature_sq_rescale(self):
        p, g = torch.randn(3, 4), torch.randn(3, 4)
        base = distillation_loss(p, g, temperature=2.0)
        rescaled = distillation_loss(p, g, temperature=2.0, rescale_by_temperature_sq=True)
        assert float(rescaled) == pytest.approx(4 * float(base), rel=1e-6)

    def test_bad_temperature(self):
        with pytest.raises(LossError):
            distillation_loss(torch.zeros(1, 2), torch.zeros(1, 2), temperature=-1.0)


class TestGeneratorLabelLoss:
    def test_uniform_equals_ln_k(self):
        loss = generator_label_loss(
            torch.zeros(3, 4, dtype=torch.float64), torch.tensor([0, 1, 2])
        )
        assert float(loss) == pytest.approx(math.log(4), abs=1e-9)


class TestTotalLoss:
    def test_weighted_sum(self):
        parts = [torch.tensor(v) for v in (1.0, 2.0, 3.0, 4.0)]
        weights = LossWeights(ce=1.0, mle=0.5, ce_g=0.25, dis=2.0)
        assert float(total_loss(*parts, weights)) == pytest.approx(
            1.0 + 1.0 + 0.75 + 8.0
        )

    def test_zero_weights_select_terms(self):
        parts = [torch.tensor(v) for v in (1.0, 2.0, 3.0, 4.0)]
        weights = LossWeights(ce=1.0, mle=0.0, ce_g=0.0, dis=0.0)
        assert float(total_loss(*parts, weights)) == pytest.approx(1.0)

    def test_non_finite_raises(self):
        nan = torch.tensor(float("nan"))
        zero = torch.tensor(0.0)
        with pytest.raises(LossError):
            total_loss(zero, nan, zero, zero, LossWeights())
