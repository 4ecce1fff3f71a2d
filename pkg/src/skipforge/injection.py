"""Record skip features from a source run and inject them into a target run.

A record run stores the conditional-branch feature of every requested tap at
every grid step into an immutable FeatureCache. An inject run replays those
features into another run's tap controllers, blended with the live feature
under a switch-guidance gamma, restricted to a diffusion-time window, and
optionally alternated per depth channel (period-k or ratio-r masks).

Caches persist as a single container file: canonical JSON header (grid,
taps, source descriptor, entry manifest) followed by raw little-endian
float32 tensors.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .canonical import canonical_dumps
from .scheduler import DiffusionSchedule, SamplerConfig, StepGrid, sample
from .unet import H_TAP, Inject, RECORD, TapId, UNetModel, blend  # noqa: F401  (blend re-exported)

CACHE_MAGIC = b"SKFC"
CACHE_VERSION = 1

NOISE_SOURCES = ("shared_random", "inverted_a", "inverted_b")


class InjectionError(ValueError):
    pass


@dataclass(frozen=True)
class InjectionWindow:
    """Inclusive diffusion-time window [t_end, t_start] where injection is live."""

    t_end: int = 400
    t_start: int = 900

    def __post_init__(self):
        if not 0 <= self.t_end <= self.t_start:
            raise InjectionError(f"window requires 0 <= t_end <= t_start, got ({self.t_end}, {self.t_start})")

    def contains(self, t: int) -> bool:
        return self.t_end <= t <= self.t_start


@dataclass(frozen=True)
class ChannelMaskSpec:
    """Full injects every channel; Period(k) keeps channels c % k == 0
    original; Ratio(r) injects an even interleave of round(depth*r) channels."""

    variant: str = "full"  # full | period | ratio
    param: Optional[float] = None

    def __post_init__(self):
        if self.variant not in ("full", "period", "ratio"):
            raise InjectionError(f"unknown mask variant {self.variant!r}")
        if self.variant == "period":
            if self.param is None or int(self.param) != self.param or int(self.param) < 1:
                raise InjectionError(f"period mask needs integer k >= 1, got {self.param!r}")
        if self.variant == "ratio":
            if self.param is None or not 0.0 <= float(self.param) <= 1.0:
                raise InjectionError(f"ratio mask needs r in [0, 1], got {self.param!r}")

    def label(self) -> str:
        if self.variant == "full":
            return "none"
        if self.variant == "period":
            return str(int(self.param))
        return f"r{float(self.param):g}"

    def to_json(self) -> dict:
        if self.variant == "full":
            return {"variant": "full", "param": None}
        if self.variant == "period":
            return {"variant": "period", "param": int(self.param)}
        return {"variant": "ratio", "param": float(self.param)}

    @staticmethod
    def from_json(d: dict) -> "ChannelMaskSpec":
        return ChannelMaskSpec(variant=d["variant"], param=d.get("param"))


def make_channel_mask(depth: int, spec: ChannelMaskSpec) -> torch.Tensor:
    """Boolean per-channel mask, True = use the injected blend."""
    if depth < 1:
        raise InjectionError(f"depth must be >= 1, got {depth}")
    c = np.arange(depth)
    if spec.variant == "full":
        m = np.ones(depth, dtype=bool)
    elif spec.variant == "period":
        m = (c % int(spec.param)) != 0
    else:
        r = float(spec.param)
        m = np.floor((c + 1) * r) > np.floor(c * r)
    return torch.from_numpy(m)


@dataclass(frozen=True)
class InjectionPlan:
    taps: Tuple[TapId, ...] = (4, 5)
    window: InjectionWindow = field(default_factory=InjectionWindow)
    gamma: float = 0.75
    mask: ChannelMaskSpec = field(default_factory=lambda: ChannelMaskSpec("period", 10))
    noise_source: str = "shared_random"

    def __post_init__(self):
        if not self.taps:
            raise InjectionError("plan needs at least one tap")
        if self.gamma < 0:
            raise InjectionError(f"gamma must be >= 0, got {self.gamma}")
        if self.noise_source not in NOISE_SOURCES:
            raise InjectionError(f"unknown noise_source {self.noise_source!r}")
        object.__setattr__(self, "taps", _sorted_taps(self.taps))

    def to_json(self) -> dict:
        return {
            "taps": list(self.taps),
            "window": [self.window.t_end, self.window.t_start],
            "gamma": self.gamma,
            "mask": self.mask.to_json(),
            "noise_source": self.noise_source,
        }

    @staticmethod
    def from_json(d: dict) -> "InjectionPlan":
        return InjectionPlan(
            taps=tuple(d["taps"]),
            window=InjectionWindow(int(d["window"][0]), int(d["window"][1])),
            gamma=float(d["gamma"]),
            mask=ChannelMaskSpec.from_json(d["mask"]),
            noise_source=d["noise_source"],
        )


def _sorted_taps(taps: Iterable[TapId]) -> Tuple[TapId, ...]:
    ints = sorted(t for t in taps if isinstance(t, int))
    strs = sorted(t for t in taps if not isinstance(t, int))
    for t in strs:
        if t != H_TAP:
            raise InjectionError(f"unknown tap id {t!r}")
    return tuple(ints) + tuple(strs)


@dataclass
class FeatureCache:
    """Immutable record of (grid step, tap) -> feature from a source run."""

    grid: StepGrid
    taps: Tuple[TapId, ...]
    entries: Dict[Tuple[int, TapId], torch.Tensor]
    source: dict

    def feature(self, step_index: int, tap: TapId) -> torch.Tensor:
        key = (step_index, tap)
        if key not in self.entries:
            raise InjectionError(f"cache has no entry for step {step_index}, tap {tap!r}")
        return self.entries[key]

    def has_tap(self, tap: TapId) -> bool:
        return (0, tap) in self.entries

    def _manifest(self) -> List[dict]:
        out = []
        for (k, tap), feat in sorted(self.entries.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
            out.append({"step": k, "tap": tap, "shape": list(feat.shape)})
        return out

    def header_json(self) -> str:
        return canonical_dumps(
            {
                "version": CACHE_VERSION,
                "grid": {"T": self.grid.T, "times": list(self.grid.times)},
                "taps": list(self.taps),
                "source": self.source,
                "entries": self._manifest(),
            }
        )

    def save(self, path) -> None:
        path = Path(path)
        header = self.header_json().encode("utf-8")
        with open(path, "wb") as f:
            f.write(CACHE_MAGIC)
            f.write(struct.pack("<I", CACHE_VERSION))
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for item in self._manifest():
                feat = self.entries[(item["step"], item["tap"])]
                f.write(feat.numpy().astype("<f4").tobytes())

    @staticmethod
    def load(path) -> "FeatureCache":
        path = Path(path)
        with open(path, "rb") as f:
            if f.read(4) != CACHE_MAGIC:
                raise InjectionError(f"{path} is not a feature cache file")
            (version,) = struct.unpack("<I", f.read(4))
            if version != CACHE_VERSION:
                raise InjectionError(f"unsupported cache version {version}")
            (hlen,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(hlen).decode("utf-8"))
            entries = {}
            for item in header["entries"]:
                shape = tuple(item["shape"])
                n = int(np.prod(shape))
                buf = f.read(n * 4)
                arr = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
                tap = item["tap"]
                entries[(int(item["step"]), tap)] = torch.from_numpy(arr)
        grid = StepGrid(T=int(header["grid"]["T"]), times=tuple(header["grid"]["times"]))
        return FeatureCache(
            grid=grid, taps=_sorted_taps(header["taps"]), entries=entries, source=header["source"]
        )


class _Recorder:
    def __init__(self, taps: Sequence[TapId]):
        self.taps = tuple(taps)
        self.entries: Dict[Tuple[int, TapId], torch.Tensor] = {}

    def tap_modes(self, step_index: int, t: int):
        return {tap: RECORD for tap in self.taps}

    def on_recorded(self, step_index: int, t: int, bundle: dict) -> None:
        for tap, feat in bundle.items():
            self.entries[(step_index, tap)] = feat.clone()


def record_run(
    model: UNetModel,
    z_T: torch.Tensor,
    cond_A,
    sampler_config: SamplerConfig,
    schedule: DiffusionSchedule,
    taps: Sequence[TapId],
    source: Optional[dict] = None,
):
    """Fully denoise z_T under cond_A, recording every requested tap at every
    step of the shared grid. Returns (image_A, FeatureCache).

    Features come from the conditional CFG branch; at high guidance that
    branch determines content.
    """
    taps = _sorted_taps(taps)
    if not taps:
        raise InjectionError("record_run needs at least one tap")
    recorder = _Recorder(taps)
    image, _ = sample(model, z_T, cond_A, sampler_config, schedule, injector=recorder)
    grid = StepGrid.build(schedule.T, sampler_config.num_steps)
    cache = FeatureCache(grid=grid, taps=taps, entries=recorder.entries, source=source or {})
    expected = len(grid) * len(taps)
    if len(cache.entries) != expected:
        raise InjectionError(f"recorded {len(cache.entries)} entries, expected {expected}")
    return image, cache


class _Injector:
    """Sets Inject modes for every planned tap while the step time is inside
    the window; passthrough elsewhere. Masks are built once per tap depth."""

    def __init__(self, cache: FeatureCache, plan: InjectionPlan, model: UNetModel):
        self.cache = cache
        self.plan = plan
        self.masks = {
            tap: make_channel_mask(model.config.tap_shape(tap)[0], plan.mask) for tap in plan.taps
        }
        self.steps_fired = 0

    def tap_modes(self, step_index: int, t: int):
        if not self.plan.window.contains(t):
            return None
        self.steps_fired += 1
        return {
            tap: Inject(
                feature=self.cache.feature(step_index, tap),
                gamma=self.plan.gamma,
                mask=self.masks[tap],
            )
            for tap in self.plan.taps
        }

    def on_recorded(self, step_index: int, t: int, bundle: dict) -> None:
        pass


def inject_run(
    model: UNetModel,
    z_T: torch.Tensor,
    cond_B,
    sampler_config: SamplerConfig,
    schedule: DiffusionSchedule,
    cache: FeatureCache,
    plan: InjectionPlan,
) -> torch.Tensor:
    """Denoise z_T under cond_B, substituting cached source features.

    The cache's grid must equal this run's grid (hard precondition: cache
    keys are grid indices). Each CFG branch blends the cached feature against
    its own live feature, so gamma=0 reproduces the baseline exactly.
    """
    grid = StepGrid.build(schedule.T, sampler_config.num_steps)
    if grid != cache.grid:
        raise InjectionError(
            f"cache grid (T={cache.grid.T}, {len(cache.grid)} steps) does not match "
            f"run grid (T={grid.T}, {len(grid)} steps)"
        )
    for tap in plan.taps:
        if not cache.has_tap(tap):
            raise InjectionError(f"cache does not contain tap {tap!r}")
    injector = _Injector(cache, plan, model)
    image, _ = sample(model, z_T, cond_B, sampler_config, schedule, injector=injector)
    return image
