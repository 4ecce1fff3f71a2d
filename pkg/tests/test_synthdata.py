import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from skipforge import synthdata
from skipforge.synthdata import (
    BG_STYLES,
    FG_NAMES,
    SHAPES,
    SceneSpec,
    TrainConfig,
    class_id_of,
    load_manifest,
    make_dataset,
    parse_cond,
    render_scene,
    train,
    triple_of,
    write_manifest,
)


class TestClassEncoding:
    def test_bijective_over_64(self):
        ids = {class_id_of(s, f, b) for s in SHAPES for f in FG_NAMES for b in BG_STYLES}
        assert ids == set(range(64))

    def test_roundtrip(self):
        for cid in range(64):
            s, f, b = triple_of(cid)
            assert class_id_of(s, f, b) == cid

    def test_parse_cond(self):
        assert parse_cond("circle/red/solid-blue") == ("circle", "red", "solid-blue")
        with pytest.raises(ValueError):
            parse_cond("circle/red")
        with pytest.raises(ValueError):
            parse_cond("blob/red/solid-blue")


class TestRender:
    def test_deterministic(self):
        spec = SceneSpec("triangle", "magenta", "gradient", 123)
        a_img, a_mask, a_cid = render_scene(spec)
        b_img, b_mask, b_cid = render_scene(spec)
        assert torch.equal(a_img, b_img) and torch.equal(a_mask, b_mask) and a_cid == b_cid

    def test_circle_mask_matches_analytic_disc(self):
        spec = SceneSpec("circle", "red", "solid-blue", 5)
        img, mask, _ = render_scene(spec)
        rng = np.random.default_rng(5)
        yy, xx = np.meshgrid(np.arange(32) + 0.5, np.arange(32) + 0.5, indexing="ij")
        cx = 16 + rng.uniform(-3, 3)
        cy = 16 + rng.uniform(-3, 3)
        r = 6.5 * rng.uniform(0.85, 1.2)
        disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        assert np.array_equal(mask.numpy(), disc)

    def test_solid_background_pixels_match_palette(self):
        spec = SceneSpec("square", "yellow", "solid-blue", 9)
        img, mask, _ = render_scene(spec)
        bg = img[:, ~mask]
        expected = synthdata.bg_style_colors("solid-blue")[0]
        assert np.allclose(bg.numpy(), expected[:, None], atol=1e-5)

    def test_foreground_pixels_match_palette(self):
        spec = SceneSpec("cross", "white", "solid-green", 4)
        img, mask, _ = render_scene(spec)
        fg = img[:, mask]
        expected = synthdata.fg_palette_color("white")
        assert np.allclose(fg.numpy(), expected[:, None], atol=1e-5)

    def test_values_in_range(self):
        for seed in range(8):
            img, _, _ = render_scene(SceneSpec("circle", "red", "noise-texture", seed))
            assert img.min() >= -1.0 and img.max() <= 1.0

    @settings(max_examples=60, deadline=None)
    @given(
        st.sampled_from(SHAPES),
        st.sampled_from(FG_NAMES),
        st.sampled_from(BG_STYLES),
        st.integers(min_value=0, max_value=2**31 - 1),
    )
    def test_mask_coverage_invariant(self, shape, fg, bg, jitter):
        _, mask, _ = render_scene(SceneSpec(shape, fg, bg, jitter))
        cov = float(mask.float().mean())
        assert 0.08 <= cov <= 0.40


class TestDataset:
    def test_reproducible_from_seed(self):
        a_imgs, a_labels, a_specs = make_dataset(16, seed=3)
        b_imgs, b_labels, b_specs = make_dataset(16, seed=3)
        assert torch.equal(a_imgs, b_imgs) and torch.equal(a_labels, b_labels)
        assert a_specs == b_specs

    def test_manifest_roundtrip(self, tmp_path):
        _, _, specs = make_dataset(8, seed=1)
        path = tmp_path / "manifest.jsonl"
        write_manifest(specs, path)
        assert load_manifest(path) == specs


class TestTrain:
    def test_smoke_train_loss_log(self, tmp_path, tiny_config):
        cfg = TrainConfig(epochs=2, batch_size=32, dataset_size=64, seed=0,
                          deterministic=True, classifier_epochs=1)
        out = train(tiny_config, cfg, tmp_path / "t.ckpt")
        lines = (tmp_path / "t.loss.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,loss,null_frac"
        losses = [float(line.split(",")[1]) for line in lines[1:]]
        assert len(losses) == 2 and all(np.isfinite(losses))
        assert losses[-1] <= losses[0]  # decreasing trend at smoke scale
        assert out.exists()

    def test_same_seed_identical_checkpoint(self, tmp_path, tiny_config):
        cfg = TrainConfig(epochs=1, batch_size=32, dataset_size=64, seed=5,
                          deterministic=True, classifier_epochs=1)
        a = train(tiny_config, cfg, tmp_path / "a.ckpt")
        b = train(tiny_config, cfg, tmp_path / "b.ckpt")
        assert a.read_bytes() == b.read_bytes()

    def test_null_condition_frequency(self, tmp_path, tiny_config):
        cfg = TrainConfig(epochs=1, batch_size=64, dataset_size=2048, seed=2,
                          deterministic=True, classifier_epochs=1, learning_rate=1e-4)
        train(tiny_config, cfg, tmp_path / "n.ckpt")
        line = (tmp_path / "n.loss.csv").read_text().strip().splitlines()[1]
        null_frac = float(line.split(",")[2])
        assert abs(null_frac - 0.1) <= 0.02

    def test_divergence_aborts(self, tmp_path, tiny_config):
        cfg = TrainConfig(epochs=3, batch_size=32, dataset_size=64, seed=0,
                          deterministic=True, learning_rate=1e12, classifier_epochs=1)
        with pytest.raises(synthdata.TrainingDiverged):
            train(tiny_config, cfg, tmp_path / "d.ckpt")

    def test_bad_dropout_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(cond_dropout_prob=1.0)
