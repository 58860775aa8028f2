"""FLOP accounting: descriptor costs, additivity, branch cost ladder and
depth monotonicity."""

import pytest

from mevit.branches import ARCHITECTURES
from mevit.flops import (
    Conv2dDesc,
    ElementwiseDesc,
    MatMulDesc,
    backbone_prefix_flops,
    branch_descs,
    branch_flops,
    cumulative_flops,
    encoder_layer_descs,
    final_exit_flops,
    flops_of,
    linear_descs,
    patch_embed_descs,
)
from mevit.vit import ViTConfig

CFG = ViTConfig()  # the desk-scale default: 28/7, d=64, H=4, L=6


class TestFlopsOf:
    def test_matmul_convention(self):
        assert flops_of(MatMulDesc(2, 3, 4)) == 48

    def test_conv_convention(self):
        assert flops_of(Conv2dDesc(1, 1, 1, 1, 5, 5)) == 50

    def test_empty_tensor(self):
        assert flops_of(ElementwiseDesc("add", 0)) == 0

    def test_unshaped_descriptor_rejected(self):
        with pytest.raises(ValueError, match="unshaped"):
            flops_of(MatMulDesc(2, None, 4))
        with pytest.raises(ValueError, match="unshaped"):
            flops_of(ElementwiseDesc("gelu", None))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            flops_of(ElementwiseDesc("fft", 10))

    def test_not_a_descriptor(self):
        with pytest.raises(TypeError):
            flops_of("matmul 2x3x4")

    def test_additive_over_composition(self):
        descs = (
            patch_embed_descs(CFG)
            + encoder_layer_descs(CFG.num_tokens, CFG.embed_dim, CFG.num_heads, CFG.mlp_ratio)
            + branch_descs(CFG, "mlp-ee")
        )
        total = sum(flops_of(d) for d in descs)
        assert total == backbone_prefix_flops(CFG, 1) + branch_flops(CFG, "mlp-ee")

    def test_linear_includes_bias(self):
        assert sum(flops_of(d) for d in linear_descs(3, 4, 5)) == 2 * 3 * 4 * 5 + 3 * 5


class TestCumulativeFlops:
    def test_monotone_in_depth(self):
        for arch in ARCHITECTURES:
            costs = [cumulative_flops(CFG, b, arch) for b in range(1, CFG.depth + 1)]
            assert all(b > a for a, b in zip(costs, costs[1:])), arch

    def test_reference_cost_ladder(self):
        # the reference table orders branch costs
        # mlp < cnn-ignore = cnn-add < cnn-project < resmlp/mixer < vit
        at3 = {arch: cumulative_flops(CFG, 3, arch) for arch in ARCHITECTURES}
        assert at3["mlp-ee"] < at3["cnn-ignore-ee"]
        assert at3["cnn-ignore-ee"] == at3["cnn-add-ee"]
        assert at3["cnn-add-ee"] < at3["cnn-project-ee"]
        assert at3["cnn-project-ee"] < min(at3["mlp-mixer-ee"], at3["resmlp-ee"])
        assert max(at3["mlp-mixer-ee"], at3["resmlp-ee"]) < at3["vit-ee"]

    def test_branch_cost_location_independent(self):
        for arch in ARCHITECTURES:
            deltas = {
                cumulative_flops(CFG, b, arch) - backbone_prefix_flops(CFG, b)
                for b in range(1, CFG.depth + 1)
            }
            assert len(deltas) == 1

    def test_location_bounds(self):
        with pytest.raises(ValueError):
            cumulative_flops(CFG, 0, "mlp-ee")
        with pytest.raises(ValueError):
            cumulative_flops(CFG, CFG.depth + 1, "mlp-ee")

    def test_final_exit_beyond_last_prefix(self):
        assert final_exit_flops(CFG) > backbone_prefix_flops(CFG, CFG.depth)

    def test_accepts_model_or_config(self):
        from mevit.multi_exit import MultiExitModel
        from mevit.vit import ViTBackbone

        model = MultiExitModel(ViTBackbone(CFG, seed=0))
        assert cumulative_flops(model, 2, "mlp-ee") == cumulative_flops(CFG, 2, "mlp-ee")

    def test_flops_are_integers(self):
        for arch in ARCHITECTURES:
            assert isinstance(cumulative_flops(CFG, 1, arch), int)
