import hashlib

import pytest
import torch

from skipforge.injection import (
    ChannelMaskSpec,
    FeatureCache,
    InjectionError,
    InjectionPlan,
    InjectionWindow,
    inject_run,
    make_channel_mask,
    record_run,
)
from skipforge.scheduler import SamplerConfig, linear_beta_schedule, sample
from skipforge.unet import Conditioning


@pytest.fixture(scope="module")
def schedule():
    return linear_beta_schedule(1000)


@pytest.fixture(scope="module")
def setup(tiny_model, schedule):
    sampler = SamplerConfig(num_steps=6, cfg_scale=7.5)
    z = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(11))
    cond_a, cond_b = Conditioning(0), Conditioning(33)
    image_a, cache = record_run(
        tiny_model, z, cond_a, sampler, schedule, taps=(3, 4), source={"seed": 11}
    )
    baseline, _ = sample(tiny_model, z, cond_b, sampler, schedule)
    return dict(model=tiny_model, sampler=sampler, z=z, cond_a=cond_a, cond_b=cond_b,
                image_a=image_a, cache=cache, baseline=baseline, schedule=schedule)


class TestWindow:
    def test_inclusive_bounds(self):
        w = InjectionWindow(400, 900)
        assert w.contains(400) and w.contains(900) and w.contains(500)
        assert not w.contains(399) and not w.contains(901)

    def test_degenerate_point_window(self):
        w = InjectionWindow(500, 500)
        assert w.contains(500) and not w.contains(499)

    def test_inverted_rejected(self):
        with pytest.raises(InjectionError):
            InjectionWindow(900, 400)
        with pytest.raises(InjectionError):
            InjectionWindow(-1, 10)


class TestChannelMask:
    def test_period_10_depth_30(self):
        m = make_channel_mask(30, ChannelMaskSpec("period", 10))
        original = [c for c in range(30) if not m[c]]
        assert original == [0, 10, 20]
        assert int(m.sum()) == 27

    def test_ratio_half_depth_8(self):
        m = make_channel_mask(8, ChannelMaskSpec("ratio", 0.5))
        assert [c for c in range(8) if m[c]] == [1, 3, 5, 7]

    def test_ratio_boundaries(self):
        assert make_channel_mask(5, ChannelMaskSpec("ratio", 1.0)).all()
        assert not make_channel_mask(5, ChannelMaskSpec("ratio", 0.0)).any()

    def test_full(self):
        assert make_channel_mask(7, ChannelMaskSpec("full")).all()

    def test_period_zero_rejected(self):
        with pytest.raises(InjectionError):
            ChannelMaskSpec("period", 0)

    def test_bad_ratio_rejected(self):
        with pytest.raises(InjectionError):
            ChannelMaskSpec("ratio", 1.5)

    def test_depth_must_be_positive(self):
        with pytest.raises(InjectionError):
            make_channel_mask(0, ChannelMaskSpec("full"))

    def test_ratio_even_interleave_counts(self):
        for depth in (3, 8, 13, 64):
            for r in (0.25, 0.5, 0.75):
                m = make_channel_mask(depth, ChannelMaskSpec("ratio", r))
                assert int(m.sum()) == int(depth * r) or int(m.sum()) == round(depth * r)


class TestPlan:
    def test_json_roundtrip(self):
        plan = InjectionPlan(taps=(4, 5, "h"), window=InjectionWindow(100, 800), gamma=1.5,
                             mask=ChannelMaskSpec("ratio", 0.25), noise_source="inverted_a")
        again = InjectionPlan.from_json(plan.to_json())
        assert again == plan

    def test_canonical_key_set(self):
        d = InjectionPlan().to_json()
        assert sorted(d) == ["gamma", "mask", "noise_source", "taps", "window"]
        assert d["window"] == [400, 900]

    def test_taps_sorted_h_last(self):
        plan = InjectionPlan(taps=("h", 5, 4))
        assert plan.taps == (4, 5, "h")

    def test_rejects_empty_taps(self):
        with pytest.raises(InjectionError):
            InjectionPlan(taps=())

    def test_rejects_unknown_noise_source(self):
        with pytest.raises(InjectionError):
            InjectionPlan(noise_source="nope")


class TestRecord:
    def test_counts(self, setup):
        assert len(setup["cache"].entries) == 6 * 2

    def test_single_step_h_only(self, tiny_model, schedule):
        z = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(5))
        _, cache = record_run(tiny_model, z, Conditioning(0),
                              SamplerConfig(num_steps=1, cfg_scale=1.0), schedule, taps=("h",))
        assert len(cache.entries) == 1

    def test_tap_channel_width_matches_config(self, setup, tiny_config):
        feat = setup["cache"].feature(0, 3)
        assert feat.shape == tiny_config.tap_shape(3)

    def test_needs_taps(self, tiny_model, schedule):
        with pytest.raises(InjectionError):
            record_run(tiny_model, torch.randn(1, 3, 32, 32), Conditioning(0),
                       SamplerConfig(num_steps=2), schedule, taps=())


class TestInjectRun:
    def test_gamma_zero_is_baseline_bitwise(self, setup):
        plan = InjectionPlan(taps=(3, 4), window=InjectionWindow(0, 1000), gamma=0.0,
                             mask=ChannelMaskSpec("full"))
        out = inject_run(setup["model"], setup["z"], setup["cond_b"], setup["sampler"],
                         setup["schedule"], setup["cache"], plan)
        assert torch.equal(out, setup["baseline"])

    def test_empty_window_is_baseline(self, setup):
        plan = InjectionPlan(taps=(3, 4), window=InjectionWindow(1, 2), gamma=1.0,
                             mask=ChannelMaskSpec("full"))
        out = inject_run(setup["model"], setup["z"], setup["cond_b"], setup["sampler"],
                         setup["schedule"], setup["cache"], plan)
        assert torch.equal(out, setup["baseline"])

    def test_ratio_zero_is_baseline_ratio_one_is_full(self, setup):
        args = (setup["model"], setup["z"], setup["cond_b"], setup["sampler"],
                setup["schedule"], setup["cache"])
        w = InjectionWindow(0, 1000)
        out_r0 = inject_run(*args, InjectionPlan(taps=(3, 4), window=w, gamma=1.0,
                                                 mask=ChannelMaskSpec("ratio", 0.0)))
        out_r1 = inject_run(*args, InjectionPlan(taps=(3, 4), window=w, gamma=1.0,
                                                 mask=ChannelMaskSpec("ratio", 1.0)))
        out_full = inject_run(*args, InjectionPlan(taps=(3, 4), window=w, gamma=1.0,
                                                   mask=ChannelMaskSpec("full")))
        assert torch.equal(out_r0, setup["baseline"])
        assert torch.equal(out_r1, out_full)

    def test_self_injection_identity_guidance_one(self, tiny_model, schedule):
        sampler = SamplerConfig(num_steps=5, cfg_scale=1.0)
        z = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(21))
        cond = Conditioning(17)
        taps = tuple(range(9)) + ("h",)
        image_b, cache = record_run(tiny_model, z, cond, sampler, schedule, taps=taps)
        plan = InjectionPlan(taps=taps, window=InjectionWindow(0, 1000), gamma=1.0,
                             mask=ChannelMaskSpec("full"))
        out = inject_run(tiny_model, z, cond, sampler, schedule, cache, plan)
        assert torch.equal(out, image_b)

    def test_injection_changes_output(self, setup):
        plan = InjectionPlan(taps=(3, 4), window=InjectionWindow(0, 1000), gamma=1.0,
                             mask=ChannelMaskSpec("full"))
        out = inject_run(setup["model"], setup["z"], setup["cond_b"], setup["sampler"],
                         setup["schedule"], setup["cache"], plan)
        assert float((out - setup["baseline"]).abs().max()) > 0

    def test_grid_mismatch_rejected(self, setup):
        other = SamplerConfig(num_steps=7, cfg_scale=7.5)
        plan = InjectionPlan(taps=(3, 4), window=InjectionWindow(0, 1000), gamma=1.0)
        with pytest.raises(InjectionError):
            inject_run(setup["model"], setup["z"], setup["cond_b"], other,
                       setup["schedule"], setup["cache"], plan)

    def test_missing_tap_rejected(self, setup):
        plan = InjectionPlan(taps=(7,), window=InjectionWindow(0, 1000), gamma=1.0)
        with pytest.raises(InjectionError):
            inject_run(setup["model"], setup["z"], setup["cond_b"], setup["sampler"],
                       setup["schedule"], setup["cache"], plan)

    def test_cache_not_mutated(self, setup):
        def cache_digest(cache):
            h = hashlib.sha256(cache.header_json().encode())
            for key in sorted(cache.entries, key=lambda k: (k[0], str(k[1]))):
                h.update(cache.entries[key].numpy().tobytes())
            return h.hexdigest()

        before = cache_digest(setup["cache"])
        plan = InjectionPlan(taps=(3, 4), window=InjectionWindow(0, 1000), gamma=0.6,
                             mask=ChannelMaskSpec("period", 3))
        inject_run(setup["model"], setup["z"], setup["cond_b"], setup["sampler"],
                   setup["schedule"], setup["cache"], plan)
        assert cache_digest(setup["cache"]) == before


class TestCachePersistence:
    def test_roundtrip(self, setup, tmp_path):
        path = tmp_path / "cache.skfc"
        setup["cache"].save(path)
        loaded = FeatureCache.load(path)
        assert loaded.grid == setup["cache"].grid
        assert loaded.taps == setup["cache"].taps
        assert set(loaded.entries) == set(setup["cache"].entries)
        for key in loaded.entries:
            assert torch.equal(loaded.entries[key], setup["cache"].entries[key])

    def test_loaded_cache_drives_identical_injection(self, setup, tmp_path):
        path = tmp_path / "cache.skfc"
        setup["cache"].save(path)
        loaded = FeatureCache.load(path)
        plan = InjectionPlan(taps=(3, 4), window=InjectionWindow(0, 1000), gamma=1.0,
                             mask=ChannelMaskSpec("full"))
        a = inject_run(setup["model"], setup["z"], setup["cond_b"], setup["sampler"],
                       setup["schedule"], setup["cache"], plan)
        b = inject_run(setup["model"], setup["z"], setup["cond_b"], setup["sampler"],
                       setup["schedule"], loaded, plan)
        assert torch.equal(a, b)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.skfc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(InjectionError):
            FeatureCache.load(path)
