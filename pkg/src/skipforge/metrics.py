"""Desk-scale evaluation: class-fidelity, structural distance, perceptual
proxy, and ground-truth foreground measures over the synthetic scenes.

The structural distance reuses the trained U-Net's own encoder as the
featurizer (tap 4 at a fixed low-noise time with zero noise), computing
patch cosine self-similarity matrices; the perceptual proxy is a multi-scale
per-patch-normalized L2. Both are pseudo-metrics: non-negative, symmetric,
zero on identical inputs. None of this claims equivalence with CLIP, DINO or
LPIPS.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import synthdata
from .canonical import canonical_dumps
from .checkpoint import SceneClassifier
from .scheduler import DiffusionSchedule
from .unet import RECORD, Conditioning, UNetModel

# pixels farther than this from every palette color are never foreground
DETECTOR_MAX_DIST = 1.0


@dataclass
class MetricReport:
    fidelity: float
    structure_dist: float
    perceptual_dist: float
    fg_iou: Optional[float] = None

    def __post_init__(self):
        for name in ("fidelity", "structure_dist", "perceptual_dist"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} is not finite: {v}")

    def to_json(self) -> str:
        d = {
            "fidelity": self.fidelity,
            "structure_dist": self.structure_dist,
            "perceptual_dist": self.perceptual_dist,
        }
        if self.fg_iou is not None:
            d["fg_iou"] = self.fg_iou
        return canonical_dumps(d)


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def class_probabilities(classifier: SceneClassifier, image: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        logits = classifier(_batched(image))
        return torch.softmax(logits, dim=1)[0].numpy()


def edit_fidelity(classifier: SceneClassifier, image: torch.Tensor, target_class: int) -> float:
    """Softmax probability the classifier assigns to the target class."""
    probs = class_probabilities(classifier, image)
    if not 0 <= target_class < len(probs):
        raise ValueError(f"target_class {target_class} outside [0, {len(probs)})")
    return float(probs[target_class])


def _self_similarity(unet: UNetModel, schedule: DiffusionSchedule, x: torch.Tensor, tap: int, t: int) -> torch.Tensor:
    # fixed zero-noise convention: x_t = sqrt(alpha_bar_t) * x, null condition
    x_t = float(np.sqrt(schedule.alpha_bar(t))) * _batched(x)
    with torch.no_grad():
        _, recorded = unet.forward(x_t, t, Conditioning(None), {tap: RECORD})
    feat = F.adaptive_avg_pool2d(recorded[tap], (8, 8))[0]  # (C, 8, 8)
    v = feat.reshape(feat.shape[0], -1).T  # (64, C)
    v = v / (v.norm(dim=1, keepdim=True) + 1e-8)
    return v @ v.T


def structure_distance(
    unet: UNetModel,
    schedule: DiffusionSchedule,
    x: torch.Tensor,
    y: torch.Tensor,
    tap: int = 4,
    t: int = 100,
) -> float:
    """Frobenius distance between patch cosine self-similarity matrices,
    normalized by patch count. Deterministic given the checkpoint."""
    s_x = _self_similarity(unet, schedule, x, tap, t)
    s_y = _self_similarity(unet, schedule, y, tap, t)
    return float(torch.linalg.matrix_norm(s_x - s_y) / s_x.shape[0])


def perceptual_proxy(x: torch.Tensor, y: torch.Tensor) -> float:
    """Mean over scales (full, 1/2, 1/4) of per-patch-normalized L2."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    x, y = _batched(x), _batched(y)
    total = 0.0
    for factor in (1, 2, 4):
        xs = F.avg_pool2d(x, factor) if factor > 1 else x
        ys = F.avg_pool2d(y, factor) if factor > 1 else y
        px = F.unfold(xs, kernel_size=4, stride=4)  # (B, 3*16, L)
        py = F.unfold(ys, kernel_size=4, stride=4)
        px = (px - px.mean(dim=1, keepdim=True)) / (px.std(dim=1, keepdim=True, unbiased=False) + 1e-6)
        py = (py - py.mean(dim=1, keepdim=True)) / (py.std(dim=1, keepdim=True, unbiased=False) + 1e-6)
        dist = (px - py).pow(2).sum(dim=1).sqrt() / math.sqrt(px.shape[1])
        total += float(dist.mean())
    return total / 3.0


def _otsu_threshold(values: np.ndarray) -> float:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-9:
        return hi
    hist, edges = np.histogram(values, bins=256, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    w = hist.astype(np.float64)
    total = w.sum()
    cum_w = np.cumsum(w)
    cum_mean = np.cumsum(w * centers)
    mean_total = cum_mean[-1] / total
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mean_total * cum_w - cum_mean) ** 2 / (cum_w * (total - cum_w))
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def detect_foreground(image: torch.Tensor, fg_palette: Union[str, np.ndarray]) -> torch.Tensor:
    """Palette-distance threshold (Otsu, capped) + largest connected component.

    Returns an all-false mask when no pixel is anywhere near the palette
    color (empty-detection convention).
    """
    color = synthdata.fg_palette_color(fg_palette) if isinstance(fg_palette, str) else np.asarray(fg_palette)
    img = image.detach().numpy() if torch.is_tensor(image) else np.asarray(image)
    dist = np.sqrt(((img - color[:, None, None]) ** 2).sum(axis=0))
    if float(dist.min()) > DETECTOR_MAX_DIST:
        return torch.zeros(dist.shape, dtype=torch.bool)
    thr = min(_otsu_threshold(dist.ravel()), DETECTOR_MAX_DIST)
    candidate = dist <= thr
    labels, count = ndimage.label(candidate)
    if count == 0:
        return torch.zeros(dist.shape, dtype=torch.bool)
    sizes = ndimage.sum_labels(np.ones_like(dist), labels, index=np.arange(1, count + 1))
    return torch.from_numpy(labels == (1 + int(np.argmax(sizes))))


def mask_iou(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.bool().numpy() if torch.is_tensor(a) else np.asarray(a, dtype=bool)
    b = b.bool().numpy() if torch.is_tensor(b) else np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def foreground_iou(image: torch.Tensor, reference_mask: torch.Tensor, fg_palette) -> float:
    return mask_iou(detect_foreground(image, fg_palette), reference_mask)


def bg_palette_distance(image: torch.Tensor, bg_style: str, fg_mask: Optional[torch.Tensor] = None) -> float:
    """Mean over background pixels of the distance to the style's color set."""
    colors = synthdata.bg_style_colors(bg_style)  # (K, 3)
    img = image.detach().numpy() if torch.is_tensor(image) else np.asarray(image)
    dist = np.sqrt(((img[None, :, :, :] - colors[:, :, None, None]) ** 2).sum(axis=1)).min(axis=0)
    if fg_mask is not None:
        bg = ~(fg_mask.numpy() if torch.is_tensor(fg_mask) else np.asarray(fg_mask, dtype=bool))
        if not bg.any():
            return float(dist.mean())
        dist = dist[bg]
    return float(dist.mean())


def psnr(x: torch.Tensor, y: torch.Tensor, data_range: float = 2.0) -> float:
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(data_range * data_range / mse)


def compute_report(
    bundle,
    edited: torch.Tensor,
    source_image: torch.Tensor,
    target_class: int,
    reference_mask: Optional[torch.Tensor] = None,
    fg_palette: Optional[str] = None,
) -> MetricReport:
    """Standard per-run report: fidelity to the target class plus structural
    and perceptual distance to the source image."""
    fid = edit_fidelity(bundle.classifier, edited, target_class) if bundle.classifier else 0.0
    report = MetricReport(
        fidelity=fid,
        structure_dist=structure_distance(bundle.model, bundle.schedule, edited, source_image),
        perceptual_dist=perceptual_proxy(edited, source_image),
    )
    if reference_mask is not None and fg_palette is not None:
        report.fg_iou = foreground_iou(edited, reference_mask, fg_palette)
    return report
