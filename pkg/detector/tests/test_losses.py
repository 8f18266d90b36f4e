import math

import numpy as np
from django.test import SimpleTestCase

from detector.engine import losses
from detector.engine.errors import ConfigurationError, DimensionError, DomainError
from detector.engine.heads import PredictionLogits
from detector.engine.losses import LossConfig
from detector.engine.tensor import GradTape, Tensor, backward

from .gradcheck import numeric_gradient, relative_error

QUARTER_LN2 = 0.25 * math.log(2.0)


class FocalTests(SimpleTestCase):
    def test_closed_form(self):
        self.assertAlmostEqual(losses.focal(Tensor([0.5]), [1.0], 2.0).item(), QUARTER_LN2, places=12)

    def test_gamma_zero_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        prob = rng.uniform(0.05, 0.95, 10)
        target = (rng.random(10) < 0.5).astype(float)
        expected = -np.mean(target * np.log(prob) + (1 - target) * np.log(1 - prob))
        self.assertAlmostEqual(losses.focal(Tensor(prob), target, 0.0).item(), expected, places=12)

    def test_confident_correct_prediction_vanishes(self):
        self.assertLess(losses.focal(Tensor([1.0 - 1e-9]), [1.0], 2.0).item(), 1e-12)

    def test_out_of_range(self):
        with self.assertRaises(DomainError):
            losses.focal(Tensor([1.5]), [1.0], 2.0)
        with self.assertRaises(DimensionError):
            losses.focal(Tensor([0.5, 0.5]), [1.0], 2.0)


class L1Tests(SimpleTestCase):
    def test_examples(self):
        self.assertEqual(losses.l1(Tensor([0.3, 0.6]), [0.3, 0.6]).item(), 0.0)
        self.assertEqual(losses.l1(Tensor(np.zeros(4)), np.ones(4)).item(), 1.0)
        self.assertAlmostEqual(losses.l1(Tensor([0.2, 0.8]), [0.0, 1.0]).item(), 0.2, places=15)


class BaseSegLossTests(SimpleTestCase):
    def test_composition(self):
        rng = np.random.default_rng(1)
        prob = Tensor(rng.uniform(0.01, 0.99, (6, 6)))
        target = (rng.random((6, 6)) < 0.3).astype(float)
        cfg = LossConfig()
        expected = losses.l1(prob, target).item() + 5.0 * losses.focal(prob, target, 2.0).item()
        self.assertAlmostEqual(losses.base_seg_loss(prob, target, cfg).item(), expected, places=12)

    def test_perfect_prediction(self):
        target = np.zeros((4, 4))
        target[1:3, 1:3] = 1.0
        self.assertLess(losses.base_seg_loss(Tensor(target), target, LossConfig()).item(), 1e-5)

    def test_beta_must_be_positive(self):
        with self.assertRaises(ConfigurationError):
            LossConfig(beta=0.0)


class ConfidenceWeightedLossTests(SimpleTestCase):
    def test_closed_form(self):
        value = losses.confidence_weighted_loss(Tensor([[0.5]]), Tensor([[0.0]]), 0.1).item()
        self.assertAlmostEqual(value, 1.0 - 0.1 * math.log(2.0), delta=1e-9)
        self.assertAlmostEqual(value, 0.930685, places=6)

    def test_zero_base(self):
        value = losses.confidence_weighted_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), 0.1).item()
        self.assertAlmostEqual(value, -0.1 * math.log(2.0), delta=1e-9)

    def test_low_confidence_limit(self):
        base = Tensor(np.random.default_rng(2).uniform(0, 3, (5, 5)))
        value = losses.confidence_weighted_loss(base, Tensor(np.full((5, 5), -30.0)), 0.1).item()
        self.assertLess(abs(value - base.data.mean()), 1e-6)

    def test_derivative_sign(self):
        alpha = 0.1
        ell, c = np.meshgrid(np.linspace(alpha, 3.0, 50), np.linspace(-10.0, 10.0, 50), indexing="ij")
        confidence = Tensor(c, requires_grad=True)
        with GradTape() as tape:
            loss = losses.confidence_weighted_loss(Tensor(ell), confidence, alpha)
        backward(tape, loss)
        self.assertTrue(np.all(confidence.grad >= 0.0))

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            losses.confidence_weighted_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))), 0.1)


class ImageLossTests(SimpleTestCase):
    def test_closed_form(self):
        self.assertAlmostEqual(losses.image_loss(Tensor(0.5), 1, 2.0).item(), QUARTER_LN2, places=12)

    def test_symmetry(self):
        for score in (0.1, 0.35, 0.8):
            self.assertAlmostEqual(
                losses.image_loss(Tensor(score), 0, 2.0).item(),
                losses.image_loss(Tensor(1.0 - score), 1, 2.0).item(),
                places=15,
            )


def logits(rng, size=8, fill=None):
    if fill is not None:
        return PredictionLogits(
            map_logits=Tensor(np.full((size, size), fill)),
            confidence=Tensor(np.full((size, size), fill)),
            score_logit=Tensor(fill),
        )
    return PredictionLogits(
        map_logits=Tensor(rng.standard_normal((size, size))),
        confidence=Tensor(rng.standard_normal((size, size))),
        score_logit=Tensor(rng.standard_normal()),
    )


class TotalLossTests(SimpleTestCase):
    def test_perfect_normal_prediction(self):
        loss, breakdown = losses.total_loss(logits(None, fill=-30.0), np.zeros((8, 8)), 0, LossConfig())
        self.assertLess(loss.item(), 1e-5)
        self.assertLess(abs(breakdown.total), 1e-5)

    def test_breakdown_identities(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            mask = (rng.random((8, 8)) < 0.2).astype(float)
            _, breakdown = losses.total_loss(logits(rng), mask, 1, LossConfig())
            self.assertLess(abs(breakdown.l_base - (breakdown.l1 + 5.0 * breakdown.focal_pixel)), 1e-12)
            self.assertLess(abs(breakdown.total - (breakdown.l_seg + breakdown.l_img)), 1e-12)

    def test_without_confidence_weighting(self):
        rng = np.random.default_rng(4)
        mask = (rng.random((8, 8)) < 0.2).astype(float)
        _, breakdown = losses.total_loss(logits(rng), mask, 1, LossConfig(use_confidence=False))
        self.assertAlmostEqual(breakdown.l_seg, breakdown.l_base, places=12)

    def test_finite_at_extreme_logits(self):
        for fill in (-30.0, 30.0):
            for label in (0, 1):
                loss, _ = losses.total_loss(logits(None, fill=fill), np.full((8, 8), float(label)), label, LossConfig())
                self.assertTrue(np.isfinite(loss.item()))

    def test_confidence_gradient(self):
        rng = np.random.default_rng(5)
        pred = logits(rng)
        pred.confidence.requires_grad = True
        mask = (rng.random((8, 8)) < 0.2).astype(float)
        with GradTape() as tape:
            loss, _ = losses.total_loss(pred, mask, 1, LossConfig())
        backward(tape, loss)
        numeric = numeric_gradient(
            lambda: losses.total_loss(pred, mask, 1, LossConfig())[0].item(), pred.confidence.data
        )
        self.assertLess(relative_error(pred.confidence.grad, numeric), 1e-5)
