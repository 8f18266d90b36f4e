import numpy as np
from django.test import SimpleTestCase

from detector.engine import lora, vit
from detector.engine.errors import ConfigurationError
from detector.engine.heads import forward_logits
from detector.engine.losses import LossConfig, total_loss
from detector.engine.model import build_model
from detector.engine.tensor import GradTape, backward

from .gradcheck import numeric_gradient, sample_indices
from .test_heads import tiny_model


class BuildModelTests(SimpleTestCase):
    def test_unknown_mode(self):
        with self.assertRaises(ConfigurationError):
            build_model(vit.preset_config("tiny"), "qv_proj", np.random.default_rng(0), backbone_mode="thawed")

    def test_parameter_names_are_sorted_and_complete(self):
        model = tiny_model()
        names = list(model.named_parameters())
        self.assertEqual(names, sorted(names))
        self.assertEqual(set(model.trainable_parameters()) - set(names), set())
        self.assertTrue(any(name.startswith("adapters.") for name in names))

    def test_only_trainable_tensors_require_grad(self):
        model = tiny_model()
        trainable = set(model.trainable_parameters())
        for name, tensor in model.named_parameters().items():
            self.assertEqual(tensor.requires_grad, name in trainable, name)
        model.freeze()
        self.assertFalse(any(t.requires_grad for t in model.named_parameters().values()))

    def test_census_counts_adapters(self):
        model = tiny_model()
        census = model.census()
        self.assertEqual(census["adapters"], lora.adapter_census(model.backbone))
        # qv_proj on 2 blocks, rank 2, 16 -> 16 projections
        self.assertEqual(census["adapters"], 2 * 3 * 2 * (16 + 16))


class FullModelGradientTests(SimpleTestCase):
    def assert_gradients_match(self, model, names, rng, per_tensor: int = 3):
        image = rng.uniform(0.0, 1.0, (3, 32, 32))
        mask = np.zeros((32, 32))
        mask[4:12, 20:28] = 1.0
        cfg = LossConfig()
        trainable = model.trainable_parameters()

        def objective():
            loss, _ = total_loss(forward_logits(image, model), mask, 1, cfg)
            return loss

        with GradTape() as tape:
            loss = objective()
        backward(tape, loss)
        analytic = {name: trainable[name].grad.copy() for name in names}

        for name in names:
            tensor = trainable[name]
            indices = sample_indices(tensor.shape, per_tensor, rng)
            numeric = numeric_gradient(lambda: objective().item(), tensor.data, indices=indices)
            for index in indices:
                self.assertTrue(
                    np.isclose(analytic[name][index], numeric[index], rtol=1e-4, atol=1e-6),
                    f"{name}{index}: {analytic[name][index]} vs {numeric[index]}",
                )

    def test_every_trainable_tensor(self):
        rng = np.random.default_rng(11)
        model = tiny_model(4)
        for name, tensor in model.trainable_parameters().items():
            if name.endswith(".B"):
                tensor.data = 0.05 * rng.standard_normal(tensor.shape)
        self.assert_gradients_match(model, list(model.trainable_parameters()), rng)

    def test_backbone_weights_in_scratch_mode(self):
        rng = np.random.default_rng(12)
        model = build_model(vit.preset_config("tiny", adapter_rank=2), "qv_proj", rng, backbone_mode="scratch")
        backbone = list(model.backbone_parameters())
        self.assertTrue(set(backbone) <= set(model.trainable_parameters()))
        self.assert_gradients_match(model, backbone, rng, per_tensor=2)
