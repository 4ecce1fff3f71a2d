"""End-to-end editing workflows: generated-image editing, real-image editing
via inversion, style transfer, the group sweep, and the hyperparameter sweep
harness with its CSV schema.

Every workflow is reproducible from its serialized request plus the
checkpoint hash: noise comes from explicit seeds, sampling is deterministic
DDIM, and sweep rows are emitted in fixed lexicographic axis order.
"""
from __future__ import annotations

import hashlib
import io
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import metrics as metrics_mod
from . import synthdata
from .canonical import canonical_dumps, canonical_hash
from .checkpoint import Bundle
from .injection import (
    ChannelMaskSpec,
    FeatureCache,
    InjectionError,
    InjectionPlan,
    InjectionWindow,
    inject_run,
    record_run,
)
from .scheduler import SamplerConfig, ddim_invert, sample
from .unet import Conditioning, H_TAP, TapId

MODES = ("edit_generated", "edit_real", "style_transfer", "group_sweep")

SWEEP_COLUMNS = ("skip", "injection_t", "switch_g", "altern", "fidelity", "structure_dist", "perceptual_dist")


class PipelineError(ValueError):
    pass


# --- image helpers ----------------------------------------------------------

def to_pil(image: torch.Tensor) -> Image.Image:
    """[-1,1] float tensor (3,H,W) -> 8-bit PIL image (values clamped here only)."""
    arr = image.detach().clamp(-1, 1).numpy()
    arr = ((arr + 1.0) * 127.5).round().astype(np.uint8).transpose(1, 2, 0)
    return Image.fromarray(arr)


def png_bytes(image: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    to_pil(image).save(buf, format="PNG")
    return buf.getvalue()


def image_hash(image: torch.Tensor) -> str:
    return hashlib.sha256(png_bytes(image)).hexdigest()


def save_png(image: torch.Tensor, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    to_pil(image).save(Path(path), format="PNG")


def load_png(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1) / 127.5 - 1.0)


def montage(tiles: Sequence[Tuple[str, torch.Tensor]], caption: str = "", tile_scale: int = 4) -> Image.Image:
    """Labeled tile strip with a caption band; tiles padded to equal size."""
    if not tiles:
        raise PipelineError("montage needs at least one tile")
    size = max(max(im.shape[-2], im.shape[-1]) for _, im in tiles) * tile_scale
    label_h, caption_h, pad = 14, 18 if caption else 0, 4
    width = len(tiles) * (size + pad) + pad
    height = size + label_h + 2 * pad + caption_h
    canvas = Image.new("RGB", (width, height), (24, 24, 24))
    draw = ImageDraw.Draw(canvas)
    for i, (label, im) in enumerate(tiles):
        tile = to_pil(im).resize((size, size), Image.NEAREST)
        x = pad + i * (size + pad)
        canvas.paste(tile, (x, pad))
        draw.text((x + 2, pad + size + 1), label[:24], fill=(230, 230, 230))
    if caption:
        draw.text((pad, size + label_h + pad + 2), caption[:160], fill=(200, 200, 200))
    return canvas


# --- requests ---------------------------------------------------------------

def cond_json(shape: str, fg: str, bg: str) -> dict:
    return {"shape": shape, "fg_palette": fg, "bg_style": bg}


def cond_from_json(d: dict) -> Conditioning:
    return synthdata.conditioning_for(d["shape"], d["fg_palette"], d["bg_style"])


def default_edit_request() -> dict:
    """The documented canonical default request (the UI's initial form state)."""
    return {
        "checkpoint": "desk32",
        "mode": "edit_generated",
        "source": {"seed": 0, "cond": cond_json("circle", "red", "solid-blue")},
        "target_cond": cond_json("square", "red", "solid-blue"),
        "plan": InjectionPlan().to_json(),
        "sampler": {"num_steps": 50, "cfg_scale": 7.5, "eta": 0.0},
    }


def validate_request(req: dict) -> dict:
    """Light structural validation shared by CLI replay; the service adds
    schema-level validation on top."""
    if req.get("mode") not in MODES:
        raise PipelineError(f"unknown mode {req.get('mode')!r}")
    source = req.get("source") or {}
    if "seed" not in source and "image_id" not in source:
        raise PipelineError("source needs a seed or an image_id")
    if req["mode"] == "edit_generated" and "seed" not in source:
        raise PipelineError("edit_generated requires a seed source")
    if req["mode"] == "edit_real" and "image_id" not in source:
        raise PipelineError("edit_real requires an image_id source")
    InjectionPlan.from_json(req["plan"])
    cond_from_json(source["cond"])
    cond_from_json(req["target_cond"])
    return req


def sampler_from_json(d: dict) -> SamplerConfig:
    return SamplerConfig(
        num_steps=int(d.get("num_steps", 50)),
        cfg_scale=float(d.get("cfg_scale", 7.5)),
        eta=float(d.get("eta", 0.0)),
    )


def sampler_json(s: SamplerConfig) -> dict:
    return {"num_steps": s.num_steps, "cfg_scale": s.cfg_scale, "eta": s.eta}


# --- core flows ---------------------------------------------------------

@dataclass
class EditResult:
    image_A: torch.Tensor
    image_B_baseline: torch.Tensor
    image_edited: torch.Tensor
    cache: Optional[FeatureCache] = None
    extras: Dict[str, torch.Tensor] = field(default_factory=dict)


def seed_noise(seed: int, config, batch: int = 1) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(batch, config.in_channels, config.image_size, config.image_size, generator=g)


def _source_latent(bundle: Bundle, plan: InjectionPlan, sampler: SamplerConfig, cond_a, cond_b, seed=None, image=None):
    """Resolve z_T per the plan's noise source.

    shared_random draws from the seed; the inverted variants run DDIM
    inversion of the source image (generated first when only a seed is
    given) under cond A or cond B.
    """
    model = bundle.model
    if image is None:
        z = seed_noise(seed, bundle.config)
        if plan.noise_source == "shared_random":
            return z
        image, _ = sample(model, z, cond_a, sampler, bundle.schedule)
    elif plan.noise_source == "shared_random" and seed is not None:
        return seed_noise(seed, bundle.config)
    invert_cond = cond_b if plan.noise_source == "inverted_b" else cond_a
    inv_steps = sampler.num_steps
    return ddim_invert(model, image, invert_cond, inv_steps, bundle.schedule)[-1]


def edit_generated(
    bundle: Bundle,
    seed: int,
    cond_a: Conditioning,
    cond_b: Conditioning,
    plan: InjectionPlan,
    sampler: SamplerConfig,
) -> EditResult:
    """Record under cond A, then baseline + injected runs under cond B, all
    three sharing one z_T and one step grid."""
    model = bundle.model
    z = _source_latent(bundle, plan, sampler, cond_a, cond_b, seed=seed)
    image_a, cache = record_run(
        model, z, cond_a, sampler, bundle.schedule, plan.taps,
        source={"seed": seed, "cond": cond_a.class_id},
    )
    baseline, _ = sample(model, z, cond_b, sampler, bundle.schedule)
    edited = inject_run(model, z, cond_b, sampler, bundle.schedule, cache, plan)
    return EditResult(image_a, baseline, edited, cache)


def edit_real(
    bundle: Bundle,
    image: torch.Tensor,
    cond_a: Conditioning,
    cond_b: Conditioning,
    plan: InjectionPlan,
    sampler: SamplerConfig,
) -> EditResult:
    """Invert the image to z_T, then proceed as edit_generated."""
    expected = (bundle.config.in_channels, bundle.config.image_size, bundle.config.image_size)
    if tuple(image.shape[-3:]) != expected:
        raise PipelineError(f"image shape {tuple(image.shape)} does not match model resolution {expected}")
    if image.dim() == 3:
        image = image.unsqueeze(0)
    model = bundle.model
    z = _source_latent(bundle, plan, sampler, cond_a, cond_b, image=image)
    image_a, cache = record_run(
        model, z, cond_a, sampler, bundle.schedule, plan.taps,
        source={"image": True, "cond": cond_a.class_id},
    )
    baseline, _ = sample(model, z, cond_b, sampler, bundle.schedule)
    edited = inject_run(model, z, cond_b, sampler, bundle.schedule, cache, plan)
    result = EditResult(image_a, baseline, edited, cache)
    result.extras["input"] = image[0]
    return result


STYLE_PLAN = InjectionPlan(
    taps=(4, 5),
    window=InjectionWindow(400, 900),
    gamma=0.65,
    mask=ChannelMaskSpec("period", 15),
)


def style_transfer(
    bundle: Bundle,
    style_cond: Conditioning,
    plan: Optional[InjectionPlan] = None,
    sampler: SamplerConfig = SamplerConfig(),
    seed: Optional[int] = None,
    cond_a: Optional[Conditioning] = None,
    image: Optional[torch.Tensor] = None,
) -> EditResult:
    """Content source recorded, generation driven by the style class.

    Mechanically identical to the edit pipelines but with its own defaults
    (lower switch guidance, longer alternation period).
    """
    plan = plan if plan is not None else STYLE_PLAN
    if image is not None:
        return edit_real(bundle, image, cond_a, style_cond, plan, sampler)
    if seed is None or cond_a is None:
        raise PipelineError("style_transfer needs an image or (seed, cond_a)")
    return edit_generated(bundle, seed, cond_a, style_cond, plan, sampler)


# --- group sweep --------------------------------------------------------

def tap_groups(config) -> Dict[str, List[TapId]]:
    return {
        "group1": config.tap_group(1),
        "group2": config.tap_group(2),
        "group3": config.tap_group(3),
        "group4": config.tap_group(4),
        "h": [H_TAP],
    }


@dataclass
class GroupSweepResult:
    image_A: torch.Tensor
    image_B_baseline: torch.Tensor
    images: Dict[str, torch.Tensor]
    montage: Image.Image


def group_sweep(
    bundle: Bundle,
    seed: int,
    cond_a: Conditioning,
    cond_b: Conditioning,
    sampler: SamplerConfig,
) -> GroupSweepResult:
    """One edited image per skip group (plus the h tap) at full window,
    gamma 1, full mask; montage = source + baseline + the five variants."""
    model = bundle.model
    config = bundle.config
    groups = tap_groups(config)
    all_taps = sorted({t for taps in groups.values() for t in taps if isinstance(t, int)}) + [H_TAP]
    z = seed_noise(seed, config)
    image_a, cache = record_run(
        model, z, cond_a, sampler, bundle.schedule, all_taps,
        source={"seed": seed, "cond": cond_a.class_id},
    )
    baseline, _ = sample(model, z, cond_b, sampler, bundle.schedule)
    window = InjectionWindow(0, bundle.schedule.T)
    images = {}
    for name, taps in groups.items():
        plan = InjectionPlan(taps=tuple(taps), window=window, gamma=1.0, mask=ChannelMaskSpec("full"))
        images[name] = inject_run(model, z, cond_b, sampler, bundle.schedule, cache, plan)
    tiles = [("source", image_a[0]), ("baseline", baseline[0])] + [
        (name, images[name][0]) for name in ("group1", "group2", "group3", "group4", "h")
    ]
    caption = f"group sweep seed={seed} window=(0,{bundle.schedule.T}) gamma=1 mask=full"
    return GroupSweepResult(image_a, baseline, images, montage(tiles, caption))


# --- sweep harness --------------------------------------------------------

@dataclass(frozen=True)
class SweepGrid:
    """Cross product of tap sets, windows, gammas and mask specs."""

    taps_axis: Tuple[Tuple[TapId, ...], ...]
    windows: Tuple[InjectionWindow, ...]
    gammas: Tuple[float, ...]
    masks: Tuple[ChannelMaskSpec, ...]

    def __post_init__(self):
        if not (self.taps_axis and self.windows and self.gammas and self.masks):
            raise PipelineError("sweep grid axes must be nonempty")

    def __len__(self) -> int:
        return len(self.taps_axis) * len(self.windows) * len(self.gammas) * len(self.masks)

    def points(self):
        return itertools.product(self.taps_axis, self.windows, self.gammas, self.masks)

    def to_json(self) -> dict:
        return {
            "taps_axis": [list(t) for t in self.taps_axis],
            "windows": [[w.t_end, w.t_start] for w in self.windows],
            "gammas": list(self.gammas),
            "masks": [m.to_json() for m in self.masks],
        }

    @staticmethod
    def from_json(d: dict) -> "SweepGrid":
        return SweepGrid(
            taps_axis=tuple(tuple(t) for t in d["taps_axis"]),
            windows=tuple(InjectionWindow(int(w[0]), int(w[1])) for w in d["windows"]),
            gammas=tuple(float(g) for g in d["gammas"]),
            masks=tuple(ChannelMaskSpec.from_json(m) for m in d["masks"]),
        )


def default_sweep_grid() -> SweepGrid:
    """The standard ablation grid: 2 tap sets x 3 windows x 4 gammas x 3 masks = 72 rows."""
    return SweepGrid(
        taps_axis=((4,), (4, 5)),
        windows=(InjectionWindow(0, 1000), InjectionWindow(400, 900), InjectionWindow(400, 800)),
        gammas=(0.0, 0.75, 1.0, 1.5),
        masks=(ChannelMaskSpec("full"), ChannelMaskSpec("period", 10), ChannelMaskSpec("period", 20)),
    )


def _taps_label(taps: Sequence[TapId]) -> str:
    return "+".join(str(t) for t in taps)


def run_sweep(
    bundle: Bundle,
    base_request: dict,
    grid: SweepGrid,
    workers: int = 1,
) -> Tuple[str, List[dict]]:
    """One row per grid point, lexicographic over (taps, window, gamma, mask).

    Columns: fidelity is the classifier probability of the target class;
    structure_dist and perceptual_dist are distances of the edited image to
    the source, reported relative to the un-injected baseline's distance
    (so a gamma=0 row is exactly 0 on both).
    """
    if len(grid) == 0:
        raise PipelineError("empty sweep grid")
    validate_request(base_request)
    model = bundle.model
    base_plan = InjectionPlan.from_json(base_request["plan"])
    sampler = sampler_from_json(base_request["sampler"])
    cond_a = cond_from_json(base_request["source"]["cond"])
    cond_b = cond_from_json(base_request["target_cond"])
    seed = int(base_request["source"]["seed"])

    all_taps = sorted({t for taps in grid.taps_axis for t in taps if isinstance(t, int)})
    if any(H_TAP in taps for taps in grid.taps_axis):
        all_taps.append(H_TAP)
    z = _source_latent(bundle, base_plan, sampler, cond_a, cond_b, seed=seed)
    image_a, cache = record_run(
        model, z, cond_a, sampler, bundle.schedule, all_taps,
        source={"seed": seed, "cond": cond_a.class_id},
    )
    baseline, _ = sample(model, z, cond_b, sampler, bundle.schedule)

    sd_base = metrics_mod.structure_distance(model, bundle.schedule, baseline[0], image_a[0])
    pd_base = metrics_mod.perceptual_proxy(baseline[0], image_a[0])
    target_class = cond_b.class_id

    points = list(grid.points())

    def one_row(point):
        taps, window, gamma, mask = point
        plan = InjectionPlan(
            taps=tuple(taps), window=window, gamma=gamma, mask=mask,
            noise_source=base_plan.noise_source,
        )
        edited = inject_run(model, z, cond_b, sampler, bundle.schedule, cache, plan)
        if gamma == 0.0:
            sd, pd = 0.0, 0.0
        else:
            sd = metrics_mod.structure_distance(model, bundle.schedule, edited[0], image_a[0]) - sd_base
            pd = metrics_mod.perceptual_proxy(edited[0], image_a[0]) - pd_base
        fid = (
            metrics_mod.edit_fidelity(bundle.classifier, edited[0], target_class)
            if bundle.classifier
            else 0.0
        )
        return {
            "skip": _taps_label(taps),
            "injection_t": f"{window.t_end}-{window.t_start}",
            "switch_g": f"{gamma:g}",
            "altern": mask.label(),
            "fidelity": f"{fid:.6f}",
            "structure_dist": f"{sd:.6f}",
            "perceptual_dist": f"{pd:.6f}",
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one_row, points))
    else:
        rows = [one_row(p) for p in points]

    lines = [
        f"# checkpoint={bundle.checkpoint_hash} grid={canonical_hash(grid.to_json())}",
        ",".join(SWEEP_COLUMNS),
    ]
    for row in rows:
        lines.append(",".join(row[c] for c in SWEEP_COLUMNS))
    return "\n".join(lines) + "\n", rows


# --- request execution (service / CLI replay) -------------------------------

def execute_request(
    bundle: Bundle,
    request: dict,
    image_resolver: Optional[Callable[[str], torch.Tensor]] = None,
):
    """Dispatch a validated request; returns {name: image tensor}, the
    metric report, and an optional montage image."""
    validate_request(request)
    plan = InjectionPlan.from_json(request["plan"])
    sampler = sampler_from_json(request["sampler"])
    cond_a = cond_from_json(request["source"]["cond"])
    cond_b = cond_from_json(request["target_cond"])
    mode = request["mode"]
    montage_img = None
    if mode == "group_sweep":
        res = group_sweep(bundle, int(request["source"]["seed"]), cond_a, cond_b, sampler)
        images = {"image_A": res.image_A[0], "baseline": res.image_B_baseline[0]}
        images.update({name: im[0] for name, im in res.images.items()})
        edited = res.images["group2"][0]
        montage_img = res.montage
        source_img = res.image_A[0]
    else:
        if mode == "edit_real":
            if image_resolver is None:
                raise PipelineError("edit_real requires an image resolver")
            image = image_resolver(request["source"]["image_id"])
            result = edit_real(bundle, image, cond_a, cond_b, plan, sampler)
        elif mode == "style_transfer":
            result = style_transfer(
                bundle, cond_b, plan, sampler, seed=int(request["source"]["seed"]), cond_a=cond_a
            )
        else:
            result = edit_generated(bundle, int(request["source"]["seed"]), cond_a, cond_b, plan, sampler)
        images = {
            "image_A": result.image_A[0],
            "baseline": result.image_B_baseline[0],
            "edited": result.image_edited[0],
        }
        edited = result.image_edited[0]
        source_img = result.image_A[0]
    _, fg_a, _ = synthdata.triple_of(cond_a.class_id)
    reference = metrics_mod.detect_foreground(source_img, fg_a)
    _, fg_b, _ = synthdata.triple_of(cond_b.class_id)
    report = metrics_mod.compute_report(
        bundle, edited, source_img, cond_b.class_id, reference_mask=reference, fg_palette=fg_b
    )
    return images, report, montage_img
