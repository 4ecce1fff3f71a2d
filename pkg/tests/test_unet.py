import pytest
import torch

from skipforge.unet import (
    Conditioning,
    Inject,
    PASSTHROUGH,
    RECORD,
    UNetConfig,
    UNetError,
    blend,
    build_unet,
    forward,
)


class TestConfig:
    def test_default_tap_count(self):
        cfg = UNetConfig()
        assert cfg.num_skip_taps == 13
        assert cfg.tap_ids() == list(range(13)) + ["h"]

    def test_two_subblocks_gives_nine(self):
        cfg = UNetConfig(subblocks_per_block=2)
        assert cfg.num_skip_taps == 9

    def test_tap_shapes_pure_function(self, tiny_config):
        shapes = {t: tiny_config.tap_shape(t) for t in tiny_config.tap_ids()}
        assert shapes[0] == (8, 32, 32)
        assert shapes[3] == (12, 16, 16)  # first tap of block 2
        assert shapes["h"] == (20, 4, 4)
        again = {t: tiny_config.tap_shape(t) for t in tiny_config.tap_ids()}
        assert shapes == again

    def test_groups_partition_taps(self):
        cfg = UNetConfig()
        assert cfg.tap_group(1) == [1, 2, 3]
        assert cfg.tap_group(2) == [4, 5, 6]
        assert cfg.tap_group(4) == [10, 11, 12]
        all_taps = [t for g in range(1, 5) for t in cfg.tap_group(g)]
        assert sorted(all_taps) == list(range(1, 13))

    def test_rejects_bad_config(self):
        with pytest.raises(UNetError):
            UNetConfig(block_channels=(8, 16, 24)).validate()
        with pytest.raises(UNetError):
            UNetConfig(image_size=30).validate()

    def test_dict_roundtrip(self, tiny_config):
        assert UNetConfig.from_dict(tiny_config.to_dict()) == tiny_config


class TestBuild:
    def test_same_seed_identical_parameters(self, tiny_config):
        a = build_unet(tiny_config, seed=7)
        b = build_unet(tiny_config, seed=7)
        for (na, pa), (nb, pb) in zip(sorted(a.named_parameters()), sorted(b.named_parameters())):
            assert na == nb and torch.equal(pa, pb)

    def test_different_seed_differs(self, tiny_config):
        a = build_unet(tiny_config, seed=7)
        b = build_unet(tiny_config, seed=8)
        assert any(
            not torch.equal(pa, pb)
            for (_, pa), (_, pb) in zip(sorted(a.named_parameters()), sorted(b.named_parameters()))
        )

    def test_tap_ids_exposed(self, tiny_model):
        assert tiny_model.tap_ids == list(range(9)) + ["h"]


class TestForward:
    def test_passthrough_equals_no_controller(self, tiny_model):
        x = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        cond = Conditioning(2)
        a, rec = forward(tiny_model, x, 500, cond, None)
        b, _ = forward(tiny_model, x, 500, cond, {t: PASSTHROUGH for t in tiny_model.tap_ids})
        assert torch.equal(a, b)
        assert rec == {}

    def test_record_then_self_inject_identical(self, tiny_model):
        x = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(1))
        cond = Conditioning(0)
        eps1, rec = forward(tiny_model, x, 321, cond, {4: RECORD})
        eps2, _ = forward(tiny_model, x, 321, cond, {4: Inject(rec[4][0], gamma=1.0)})
        assert torch.equal(eps1, eps2)

    def test_record_all_then_inject_all_identical(self, tiny_model):
        x = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(2))
        cond = Conditioning(9)
        eps1, rec = forward(tiny_model, x, 10, cond, {t: RECORD for t in tiny_model.tap_ids})
        modes = {t: Inject(rec[t][0], gamma=1.0) for t in tiny_model.tap_ids}
        eps2, _ = forward(tiny_model, x, 10, cond, modes)
        assert torch.equal(eps1, eps2)

    def test_foreign_feature_changes_output(self, tiny_model, tiny_config):
        x = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(3))
        cond = Conditioning(1)
        base, _ = forward(tiny_model, x, 200, cond, None)
        foreign = torch.randn(tiny_config.tap_shape(4), generator=torch.Generator().manual_seed(4))
        out, _ = forward(tiny_model, x, 200, cond, {4: Inject(foreign, gamma=1.0)})
        assert float((out - base).abs().max()) > 0

    def test_forward_deterministic(self, tiny_model):
        x = torch.randn(2, 3, 32, 32)
        a, _ = forward(tiny_model, x, 77, Conditioning(None))
        b, _ = forward(tiny_model, x, 77, Conditioning(None))
        assert torch.equal(a, b)

    def test_shape_validation(self, tiny_model, tiny_config):
        with pytest.raises(UNetError):
            forward(tiny_model, torch.randn(1, 3, 16, 16), 0, Conditioning(0))
        bad = torch.randn(5, 5, 5)
        with pytest.raises(UNetError):
            forward(tiny_model, torch.randn(1, 3, 32, 32), 0, Conditioning(0), {4: Inject(bad)})

    def test_unknown_tap_rejected(self, tiny_model):
        with pytest.raises(UNetError):
            forward(tiny_model, torch.randn(1, 3, 32, 32), 0, Conditioning(0), {99: RECORD})

    def test_conditioning_bounds(self, tiny_model):
        with pytest.raises(UNetError):
            forward(tiny_model, torch.randn(1, 3, 32, 32), 0, Conditioning(64))

    def test_recorded_keeps_batch_dim(self, tiny_model):
        x = torch.randn(2, 3, 32, 32)
        _, rec = forward(tiny_model, x, 5, [Conditioning(None), Conditioning(1)], {4: RECORD})
        assert rec[4].shape[0] == 2


class TestBlend:
    def test_gamma_zero_returns_original_exactly(self):
        orig, inj = torch.randn(4, 6, 6), torch.randn(4, 6, 6)
        assert blend(orig, inj, 0.0) is orig

    def test_gamma_one_full_mask_returns_injected_exactly(self):
        orig, inj = torch.randn(4, 6, 6), torch.randn(4, 6, 6)
        assert torch.equal(blend(orig, inj, 1.0), inj)

    def test_eq2_arithmetic(self):
        orig = torch.full((2, 3, 3), 2.0)
        inj = torch.full((2, 3, 3), 6.0)
        out = blend(orig, inj, 0.75)
        assert torch.equal(out, torch.full((2, 3, 3), 5.0))

    def test_masked_original_channels_bit_unchanged(self):
        orig, inj = torch.randn(6, 4, 4), torch.randn(6, 4, 4)
        mask = torch.tensor([True, False, True, False, False, True])
        out = blend(orig, inj, 0.9, mask)
        for c in range(6):
            if not mask[c]:
                assert torch.equal(out[c], orig[c])
            else:
                assert not torch.equal(out[c], orig[c])

    def test_gamma_above_one_extrapolates(self):
        orig = torch.zeros(1, 2, 2)
        inj = torch.ones(1, 2, 2)
        assert torch.allclose(blend(orig, inj, 1.5), torch.full((1, 2, 2), 1.5))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(UNetError):
            blend(torch.randn(4, 6, 6), torch.randn(4, 5, 5), 1.0)
        with pytest.raises(UNetError):
            blend(torch.randn(4, 6, 6), torch.randn(4, 6, 6), 1.0, torch.ones(5, dtype=torch.bool))

    def test_negative_gamma_rejected(self):
        with pytest.raises(UNetError):
            blend(torch.randn(2, 2, 2), torch.randn(2, 2, 2), -0.1)
