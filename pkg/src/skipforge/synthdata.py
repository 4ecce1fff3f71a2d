"""Procedural scenes with controllable content (shape) and style (palette,
background), ground-truth masks, and the conditional DDPM training loop that
produces the desk-scale checkpoint.

A scene is one foreground shape on a styled background. The 4 shapes x 4
foreground palettes x 4 background styles factorize into 64 classes, so
"change the shape, keep the background" is a class change. Rendering is
deterministic from the spec, masks are analytic, and published palettes let
the metrics module measure foreground/background properties exactly.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt_mod
from .scheduler import linear_beta_schedule
from .unet import Conditioning, UNetConfig, build_unet

SHAPES = ("circle", "square", "triangle", "cross")

# RGB in [0, 1]; images are stored in [-1, 1]
FG_PALETTES: Dict[str, Tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "yellow": (0.95, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "white": (0.95, 0.95, 0.95),
}
FG_NAMES = tuple(FG_PALETTES)

BG_STYLES = ("solid-blue", "solid-green", "gradient", "noise-texture")
BG_SOLID = {
    "solid-blue": (0.10, 0.20, 0.80),
    "solid-green": (0.10, 0.65, 0.25),
}
GRADIENT_TOP = (0.05, 0.15, 0.60)
GRADIENT_BOTTOM = (0.10, 0.60, 0.30)
NOISE_BASE = (0.30, 0.30, 0.35)
NOISE_AMP = 0.15


def _to_signed(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float32) * 2.0 - 1.0


def fg_palette_color(name: str) -> np.ndarray:
    """Published foreground color in [-1, 1] space."""
    return _to_signed(FG_PALETTES[name])


def bg_style_colors(style: str) -> np.ndarray:
    """Published background reference colors in [-1, 1], shape (K, 3)."""
    if style in BG_SOLID:
        return _to_signed(BG_SOLID[style])[None, :]
    if style == "gradient":
        top, bottom = np.asarray(GRADIENT_TOP), np.asarray(GRADIENT_BOTTOM)
        mix = np.linspace(0.0, 1.0, 9)[:, None]
        return _to_signed((1 - mix) * top[None, :] + mix * bottom[None, :])
    if style == "noise-texture":
        return _to_signed(NOISE_BASE)[None, :]
    raise ValueError(f"unknown bg_style {style!r}")


def class_id_of(shape: str, fg_palette: str, bg_style: str) -> int:
    return SHAPES.index(shape) * 16 + FG_NAMES.index(fg_palette) * 4 + BG_STYLES.index(bg_style)


def triple_of(class_id: int) -> Tuple[str, str, str]:
    if not 0 <= class_id < 64:
        raise ValueError(f"class_id {class_id} outside [0, 64)")
    return (SHAPES[class_id // 16], FG_NAMES[(class_id // 4) % 4], BG_STYLES[class_id % 4])


def parse_cond(text: str) -> Tuple[str, str, str]:
    """Parse 'shape/fg_palette/bg_style', e.g. 'circle/red/solid-blue'."""
    parts = text.strip().split("/")
    if len(parts) != 3:
        raise ValueError(f"condition must be shape/fg/bg, got {text!r}")
    shape, fg, bg = parts
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}, choose from {SHAPES}")
    if fg not in FG_NAMES:
        raise ValueError(f"unknown fg palette {fg!r}, choose from {FG_NAMES}")
    if bg not in BG_STYLES:
        raise ValueError(f"unknown bg style {bg!r}, choose from {BG_STYLES}")
    return shape, fg, bg


def conditioning_for(shape: str, fg_palette: str, bg_style: str) -> Conditioning:
    return Conditioning(class_id_of(shape, fg_palette, bg_style))


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    fg_palette: str
    bg_style: str
    jitter_seed: int = 0

    @property
    def class_id(self) -> int:
        return class_id_of(self.shape, self.fg_palette, self.bg_style)

    def to_json(self) -> dict:
        return {
            "shape": self.shape,
            "fg_palette": self.fg_palette,
            "bg_style": self.bg_style,
            "jitter_seed": self.jitter_seed,
        }

    @staticmethod
    def from_json(d: dict) -> "SceneSpec":
        return SceneSpec(d["shape"], d["fg_palette"], d["bg_style"], int(d["jitter_seed"]))


def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    cx = size / 2 + rng.uniform(-3.0, 3.0)
    cy = size / 2 + rng.uniform(-3.0, 3.0)
    scale = rng.uniform(0.85, 1.2) * size / 32.0
    if shape == "circle":
        r = 6.5 * scale
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "square":
        half = 5.8 * scale
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    if shape == "triangle":
        w, h = 9.2 * scale, 14.5 * scale
        rel = (yy - (cy - h / 2)) / h  # 0 at apex, 1 at base
        return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= w * rel)
    if shape == "cross":
        length, width = 14.5 * scale, 6.0 * scale
        horiz = (np.abs(xx - cx) <= length / 2) & (np.abs(yy - cy) <= width / 2)
        vert = (np.abs(yy - cy) <= length / 2) & (np.abs(xx - cx) <= width / 2)
        return horiz | vert
    raise ValueError(f"unknown shape {shape!r}")


def _background(style: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if style in BG_SOLID:
        img = np.tile(np.asarray(BG_SOLID[style], dtype=np.float64), (size, size, 1))
    elif style == "gradient":
        mix = np.linspace(0.0, 1.0, size)[:, None, None]
        top, bottom = np.asarray(GRADIENT_TOP), np.asarray(GRADIENT_BOTTOM)
        img = (1 - mix) * top[None, None, :] + mix * bottom[None, None, :]
        img = np.broadcast_to(img, (size, size, 3)).copy()
    elif style == "noise-texture":
        img = np.asarray(NOISE_BASE)[None, None, :] + rng.uniform(
            -NOISE_AMP, NOISE_AMP, size=(size, size, 3)
        )
    else:
        raise ValueError(f"unknown bg_style {style!r}")
    return np.clip(img, 0.0, 1.0)


def render_scene(spec: SceneSpec, image_size: int = 32):
    """Render (image in [-1,1] as (3,H,W) float32, mask (H,W) bool, class_id).

    Deterministic from the spec: geometry jitter and noise texture both come
    from the spec's jitter seed, drawn in a fixed order.
    """
    rng = np.random.default_rng(spec.jitter_seed)
    mask = _shape_mask(spec.shape, image_size, rng)
    coverage = mask.mean()
    # guaranteed at the dataset's native resolution; below ~24px pixel
    # quantization dominates the analytic area
    if image_size >= 24 and not 0.08 <= coverage <= 0.40:
        raise ValueError(f"mask covers {coverage:.1%} of pixels, outside 8%-40% ({spec})")
    img = _background(spec.bg_style, image_size, rng)
    img[mask] = np.asarray(FG_PALETTES[spec.fg_palette], dtype=np.float64)
    img = (img * 2.0 - 1.0).astype(np.float32).transpose(2, 0, 1)
    return torch.from_numpy(img), torch.from_numpy(mask), spec.class_id


def random_spec(rng: np.random.Generator) -> SceneSpec:
    return SceneSpec(
        shape=SHAPES[rng.integers(4)],
        fg_palette=FG_NAMES[rng.integers(4)],
        bg_style=BG_STYLES[rng.integers(4)],
        jitter_seed=int(rng.integers(0, 2**31)),
    )


def make_dataset(size: int, seed: int, image_size: int = 32):
    """Fully reproducible dataset: (images (N,3,H,W), class_ids (N,), specs)."""
    rng = np.random.default_rng(seed)
    specs = [random_spec(rng) for _ in range(size)]
    images = torch.empty(size, 3, image_size, image_size)
    labels = torch.empty(size, dtype=torch.long)
    for i, spec in enumerate(specs):
        img, _, cid = render_scene(spec, image_size)
        images[i] = img
        labels[i] = cid
    return images, labels, specs


def write_manifest(specs: Sequence[SceneSpec], path) -> None:
    with open(path, "w") as f:
        for spec in specs:
            f.write(json.dumps(spec.to_json(), sort_keys=True) + "\n")


def load_manifest(path) -> List[SceneSpec]:
    with open(path) as f:
        return [SceneSpec.from_json(json.loads(line)) for line in f if line.strip()]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    ema_decay: float = 0.999
    cond_dropout_prob: float = 0.1
    dataset_size: int = 8192
    seed: int = 0
    deterministic: bool = True  # single-threaded reference mode
    classifier_epochs: int = 8
    order_seed: Optional[int] = None  # varies batch order on resume stages

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout_prob < 1.0:
            raise ValueError(f"cond_dropout_prob must be in [0, 1), got {self.cond_dropout_prob}")


class TrainingDiverged(RuntimeError):
    pass


def _ema_update(ema: Dict[str, torch.Tensor], model: torch.nn.Module, decay: float) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            ema[name].mul_(decay).add_(p, alpha=1.0 - decay)


def train_classifier(
    images: torch.Tensor,
    labels: torch.Tensor,
    num_classes: int,
    seed: int,
    epochs: int = 8,
    batch_size: int = 128,
    lr: float = 1e-3,
):
    """Train the small scene classifier used by the fidelity metric.

    Adds light input noise and a small share of degenerate images (solid
    colors) with uniform soft labels, so confidently-wrong outputs on blank,
    shapeless inputs are trained away.
    """
    g = torch.Generator().manual_seed(seed)
    model = ckpt_mod.SceneClassifier(num_classes)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if p.dim() >= 2:
                fan_in = p.shape[1] * (p[0, 0].numel() if p.dim() > 2 else 1)
                p.copy_((torch.rand(p.shape, generator=g) * 2 - 1) / math.sqrt(fan_in))
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.fill_(1.0)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = images.shape[0]
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(n, generator=g)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            x = images[idx] + 0.03 * torch.randn(images[idx].shape, generator=g)
            target = torch.zeros(len(idx), num_classes)
            target[torch.arange(len(idx)), labels[idx]] = 1.0
            # ~2% degenerate solid-color rows with uniform targets
            outlier = torch.rand(len(idx), generator=g) < 0.02
            if outlier.any():
                solid = (torch.rand(int(outlier.sum()), 3, 1, 1, generator=g) * 2 - 1).expand(
                    -1, -1, x.shape[2], x.shape[3]
                )
                x[outlier] = solid + 0.03 * torch.randn(solid.shape, generator=g)
                target[outlier] = 1.0 / num_classes
            logits = model(x)
            loss = -(target * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def train(unet_config: UNetConfig, train_config: TrainConfig, out_path, log_path=None, resume_from=None) -> Path:
    """Epsilon-prediction MSE training; writes the checkpoint bundle.

    The bundle carries raw weights (for resuming), EMA weights (for all
    evaluation) and the scene classifier. The per-epoch loss log lands next
    to the checkpoint as CSV with the realized null-condition frequency.
    resume_from continues from an earlier bundle's raw and EMA weights.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else out_path.with_suffix(".loss.csv")

    old_threads = torch.get_num_threads()
    if train_config.deterministic:
        torch.set_num_threads(1)
    try:
        schedule = linear_beta_schedule(1000)
        sqrt_acp = torch.from_numpy(np.sqrt(schedule.alphas_cumprod)).float()
        sqrt_1m_acp = torch.from_numpy(np.sqrt(1.0 - schedule.alphas_cumprod)).float()

        images, labels, _ = make_dataset(train_config.dataset_size, train_config.seed, unet_config.image_size)
        model = build_unet(unet_config, train_config.seed)
        if resume_from is not None:
            prev = ckpt_mod.load_bundle(resume_from)
            if prev.config != unet_config:
                raise ValueError("resume checkpoint config does not match")
            model.load_state_dict(prev.unet.state_dict())
            ema_src = dict(prev.ema_unet.named_parameters())
        model.train()
        ema = {
            k: (ema_src[k].detach().clone() if resume_from is not None else v.detach().clone())
            for k, v in model.named_parameters()
        }
        opt = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
        order = train_config.order_seed if train_config.order_seed is not None else train_config.seed + 1
        g = torch.Generator().manual_seed(order)
        null_id = unet_config.num_conditions

        n = images.shape[0]
        rows = []
        for epoch in range(train_config.epochs):
            perm = torch.randperm(n, generator=g)
            total, count, null_count = 0.0, 0, 0
            for start in range(0, n, train_config.batch_size):
                idx = perm[start : start + train_config.batch_size]
                x0 = images[idx]
                b = x0.shape[0]
                t = torch.randint(0, schedule.T, (b,), generator=g)
                eps = torch.randn(x0.shape, generator=g)
                x_t = sqrt_acp[t][:, None, None, None] * x0 + sqrt_1m_acp[t][:, None, None, None] * eps
                ids = labels[idx].clone()
                drop = torch.rand(b, generator=g) < train_config.cond_dropout_prob
                ids[drop] = null_id
                null_count += int(drop.sum())
                pred = model.forward_with_ids(x_t, t, ids)
                loss = torch.nn.functional.mse_loss(pred, eps)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, step {start // train_config.batch_size}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                _ema_update(ema, model, train_config.ema_decay)
                total += loss.item() * b
                count += b
            rows.append((epoch, total / count, null_count / count))

        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "null_frac"])
            for r in rows:
                w.writerow([r[0], f"{r[1]:.6f}", f"{r[2]:.4f}"])

        model.eval()
        classifier = train_classifier(
            images,
            labels,
            unet_config.num_conditions,
            seed=train_config.seed + 2,
            epochs=train_config.classifier_epochs,
        )
        ckpt_mod.save_bundle(
            out_path,
            unet_config=unet_config,
            schedule=schedule,
            unet_state={k: v.detach() for k, v in model.named_parameters()},
            ema_state=ema,
            classifier_state=dict(classifier.state_dict()),
            train_info={
                "epochs": train_config.epochs,
                "dataset_size": train_config.dataset_size,
                "seed": train_config.seed,
                "final_loss": rows[-1][1] if rows else None,
            },
        )
    finally:
        torch.set_num_threads(old_threads)
    return out_path
