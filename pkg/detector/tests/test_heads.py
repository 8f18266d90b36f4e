import numpy as np
from django.test import SimpleTestCase

from detector.engine import heads, vit
from detector.engine.errors import ConfigurationError, DimensionError
from detector.engine.model import build_model
from detector.engine.tensor import GradTape, Tensor, backward, mul

from .gradcheck import numeric_gradient, relative_error


def tiny_model(seed: int = 0):
    return build_model(vit.preset_config("tiny", adapter_rank=2), "qv_proj", np.random.default_rng(seed))


def zero_heads(model, map_bias: float = 0.0, confidence_bias: float = 0.0):
    for tensor in model.decoder.params.values():
        tensor.data = np.zeros_like(tensor.data)
    model.decoder.params["final.bias"].data = np.array([map_bias, confidence_bias])
    model.score_head.weight.data = np.zeros_like(model.score_head.weight.data)
    model.score_head.bias.data = np.zeros_like(model.score_head.bias.data)


class ReshapeTokensTests(SimpleTestCase):
    def test_grid_layout(self):
        tokens = Tensor(np.random.default_rng(0).standard_normal((64, 16)))
        out = heads.reshape_tokens(vit.BackboneOutput(patch_tokens=tokens, cls_token=tokens[0], grid=(8, 8)))
        self.assertEqual(out.shape, (16, 8, 8))
        np.testing.assert_array_equal(out.data[:, 1, 2], tokens.data[8 + 2])

    def test_full_scale_grid(self):
        config = vit.FULL_SCALE
        tokens = Tensor(np.arange(config.num_patches * 4, dtype=np.float64).reshape(config.num_patches, 4))
        out = heads.reshape_tokens(
            vit.BackboneOutput(patch_tokens=tokens, cls_token=tokens[0], grid=(config.grid, config.grid))
        )
        self.assertEqual(config.num_patches, 2304)
        self.assertEqual(out.shape, (4, 48, 48))
        np.testing.assert_array_equal(out.data[:, 47, 0], tokens.data[47 * 48])
        np.testing.assert_array_equal(out.data[:, 3, 5], tokens.data[3 * 48 + 5])

    def test_grid_mismatch(self):
        tokens = Tensor(np.zeros((60, 16)))
        with self.assertRaises(DimensionError):
            heads.reshape_tokens(vit.BackboneOutput(patch_tokens=tokens, cls_token=tokens[0], grid=(8, 8)))


class DecoderTests(SimpleTestCase):
    def test_output_extents(self):
        decoder = heads.init_decoder(16, 4, np.random.default_rng(0))
        map_logits, confidence = heads.decode(Tensor(np.ones((16, 8, 8))), decoder, 64, 64)
        self.assertEqual(map_logits.shape, (64, 64))
        self.assertEqual(confidence.shape, (64, 64))

    def test_zero_weights_give_final_bias(self):
        model = tiny_model()
        zero_heads(model, map_bias=0.7, confidence_bias=-1.3)
        map_logits, confidence = heads.decode(Tensor(np.random.default_rng(1).standard_normal((16, 8, 8))), model.decoder, 32, 32)
        np.testing.assert_allclose(map_logits.data, 0.7, atol=1e-12)
        np.testing.assert_allclose(confidence.data, -1.3, atol=1e-12)

    def test_group_count_must_divide_widths(self):
        with self.assertRaises(ConfigurationError):
            heads.init_decoder(16, 3, np.random.default_rng(0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        decoder = heads.init_decoder(8, 2, rng)
        for tensor in decoder.params.values():
            tensor.data = tensor.data + 0.1 * rng.standard_normal(tensor.shape)
            tensor.requires_grad = True
        f_r = Tensor(rng.standard_normal((8, 4, 4)))
        w_map, w_conf = rng.standard_normal((16, 16)), rng.standard_normal((16, 16))

        def objective():
            map_logits, confidence = heads.decode(f_r, decoder, 16, 16)
            return mul(map_logits, w_map).sum() + mul(confidence, w_conf).sum()

        with GradTape() as tape:
            loss = objective()
        backward(tape, loss)
        for name, tensor in decoder.params.items():
            numeric = numeric_gradient(lambda: objective().item(), tensor.data)
            self.assertLess(relative_error(tensor.grad, numeric), 1e-5, name)


class ScoreHeadTests(SimpleTestCase):
    def test_zero_head_scores_one_half(self):
        head = heads.ScoreHeadState(weight=Tensor(np.zeros(4)), bias=Tensor(0.0))
        self.assertEqual(heads.score_image(Tensor(np.ones(4)), head), 0.5)

    def test_closed_form(self):
        head = heads.ScoreHeadState(weight=Tensor([1.0, 0.0]), bias=Tensor(np.log(3.0) - 2.0))
        self.assertAlmostEqual(heads.score_image(Tensor([2.0, 5.0]), head), 0.75, places=12)


class PredictTests(SimpleTestCase):
    def test_zero_heads_predict_one_half(self):
        model = tiny_model()
        zero_heads(model)
        prediction = heads.predict(np.random.default_rng(3).uniform(0, 1, (3, 32, 32)), model)
        self.assertEqual(prediction.anomaly_map.shape, (32, 32))
        np.testing.assert_allclose(prediction.anomaly_map, 0.5, atol=1e-12)
        self.assertAlmostEqual(prediction.image_score, 0.5, places=12)

    def test_deterministic(self):
        image = np.random.default_rng(4).uniform(0, 1, (3, 32, 32))
        first = heads.predict(image, tiny_model(seed=9))
        second = heads.predict(image, tiny_model(seed=9))
        np.testing.assert_array_equal(first.anomaly_map, second.anomaly_map)
        self.assertEqual(first.image_score, second.image_score)
