import numpy as np
from django.test import SimpleTestCase

from detector.engine import lora, vit
from detector.engine.errors import ConfigurationError
from detector.engine.lora import InjectionPlan, LoraLayer, lora_forward
from detector.engine.tensor import GradTape, Tensor, backward, mul

from .gradcheck import numeric_gradient, relative_error


def backbone(rank: int = 2, seed: int = 0) -> vit.BackboneState:
    return vit.init_backbone(vit.preset_config("tiny", adapter_rank=rank), np.random.default_rng(seed))


def random_layer(rng, d_in=4, d_out=3, rank=2) -> LoraLayer:
    return LoraLayer(
        A=Tensor(rng.standard_normal((rank, d_in)), requires_grad=True),
        B=Tensor(rng.standard_normal((d_out, rank)), requires_grad=True),
        rank=rank,
        scale=1.0 / rank,
    )


class LoraForwardTests(SimpleTestCase):
    def test_zero_b_is_exactly_the_projection(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((5, 4)))
        weight = Tensor(rng.standard_normal((3, 4)))
        bias = Tensor(rng.standard_normal(3))
        layer = random_layer(rng)
        layer.B.data[:] = 0.0
        np.testing.assert_array_equal(
            lora_forward(x, weight, layer, bias).data, lora_forward(x, weight, None, bias).data
        )

    def test_hand_arithmetic(self):
        layer = LoraLayer(A=Tensor([[1.0, 0.0]]), B=Tensor([[2.0], [0.0]]), rank=1, scale=1.0)
        out = lora_forward(Tensor([[1.0, 1.0]]), Tensor(np.eye(2)), layer)
        np.testing.assert_array_equal(out.data, [[3.0, 1.0]])

    def test_delta_is_linear_in_b(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((6, 4)))
        weight = Tensor(rng.standard_normal((3, 4)))
        layer = random_layer(rng)
        base = lora_forward(x, weight, None).data
        delta = lora_forward(x, weight, layer).data - base
        layer.B.data = layer.B.data * 3.0
        tripled = lora_forward(x, weight, layer).data - base
        self.assertLess(np.abs(tripled - 3.0 * delta).max(), 1e-12)

    def test_delta_is_linear_in_scale(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((6, 4)))
        weight = Tensor(rng.standard_normal((3, 4)))
        bias = Tensor(rng.standard_normal(3))
        layer = random_layer(rng)
        base = lora_forward(x, weight, None, bias).data
        unit = lora_forward(x, weight, LoraLayer(A=layer.A, B=layer.B, rank=2, scale=1.0), bias).data - base
        for scale in (0.0, 0.125, 0.5, 2.0, -3.0):
            scaled = LoraLayer(A=layer.A, B=layer.B, rank=2, scale=scale)
            delta = lora_forward(x, weight, scaled, bias).data - base
            self.assertLess(np.abs(delta - scale * unit).max(), 1e-12, scale)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(2)
        with self.assertRaises(ConfigurationError):
            lora_forward(Tensor(np.ones((2, 4))), Tensor(np.ones((5, 4))), random_layer(rng))
        with self.assertRaises(ConfigurationError):
            LoraLayer(A=Tensor(np.ones((2, 4))), B=Tensor(np.ones((3, 3))), rank=2, scale=0.5)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((5, 4)))
        weight = Tensor(rng.standard_normal((3, 4)))
        layer = random_layer(rng)
        weights = rng.standard_normal((5, 3))

        def loss_value():
            return mul(lora_forward(x, weight, layer), weights).sum().item()

        with GradTape() as tape:
            loss = mul(lora_forward(x, weight, layer), weights).sum()
        backward(tape, loss)
        for tensor in (layer.A, layer.B):
            self.assertLess(relative_error(tensor.grad, numeric_gradient(loss_value, tensor.data)), 1e-5)


class InjectTests(SimpleTestCase):
    def image(self):
        return Tensor(np.random.default_rng(7).uniform(-1, 1, (3, 32, 32)))

    def test_zero_init_changes_no_forward_bit(self):
        for positions in ("qv_proj", "all_linears", "all_norms"):
            state = backbone()
            before = vit.forward(self.image(), state).patch_tokens.data
            lora.inject(state, InjectionPlan.from_preset(positions, 2), 2, np.random.default_rng(1))
            after = vit.forward(self.image(), state).patch_tokens.data
            np.testing.assert_array_equal(before, after)

    def test_census_law(self):
        state = backbone(rank=4)
        lora.inject(state, InjectionPlan.from_preset("qv_proj", 2), 4, np.random.default_rng(1))
        d = state.config.embed_dim
        # query, value and output projection in both blocks, each d -> d
        self.assertEqual(lora.adapter_census(state), 2 * 3 * 4 * (d + d))
        self.assertEqual(len(lora.adapter_parameters(state)), 2 * 3 * 2)

    def test_norm_sites_census(self):
        state = backbone()
        lora.inject(state, InjectionPlan.from_preset("all_norms", 2), 2, np.random.default_rng(1))
        self.assertEqual(lora.adapter_census(state), 2 * 2 * 2 * state.config.embed_dim)

    def test_rank_zero_adds_nothing(self):
        state = backbone(rank=0)
        before = vit.forward(self.image(), state).patch_tokens.data
        lora.inject(state, InjectionPlan.from_preset("qv_proj", 2), 0, np.random.default_rng(1))
        self.assertEqual(lora.adapter_census(state), 0)
        np.testing.assert_array_equal(before, vit.forward(self.image(), state).patch_tokens.data)

    def test_duplicate_injection(self):
        state = backbone()
        plan = InjectionPlan.from_preset("qv_proj", 2)
        lora.inject(state, plan, 2, np.random.default_rng(1))
        with self.assertRaises(ConfigurationError):
            lora.inject(state, plan, 2, np.random.default_rng(1))

    def test_plan_must_cover_every_block(self):
        with self.assertRaises(ConfigurationError):
            lora.inject(backbone(), InjectionPlan.from_preset("qv_proj", 3), 2, np.random.default_rng(1))

    def test_custom_plan_round_trip(self):
        plan = InjectionPlan.from_sites([["query", "all_norms"], []])
        self.assertEqual(plan.sites[0], frozenset({"query", "norm1", "norm2"}))
        self.assertEqual(InjectionPlan.from_dict(plan.to_dict()).sites, plan.sites)
        with self.assertRaises(ConfigurationError):
            InjectionPlan.from_sites([["attention"]])

    def test_adapters_can_be_switched_off(self):
        state = backbone()
        lora.inject(state, InjectionPlan.from_preset("qv_proj", 2), 2, np.random.default_rng(1))
        for adapter in state.adapters.values():
            adapter.B.data = np.random.default_rng(2).standard_normal(adapter.B.shape)
        with_adapters = vit.forward(self.image(), state).patch_tokens.data
        without = vit.forward(self.image(), state, adapters_enabled=False).patch_tokens.data
        self.assertFalse(np.array_equal(with_adapters, without))
        np.testing.assert_array_equal(without, vit.forward(self.image(), backbone()).patch_tokens.data)
