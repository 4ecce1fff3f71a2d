"""Versioned binary checkpoint bundle.

Layout: magic, format version, header length, canonical-JSON header, then
the named parameter tensors as contiguous little-endian float32 in header
manifest order. The bundle carries raw U-Net weights (resuming), EMA weights
(evaluation), and the scene classifier used by the fidelity metric. The
loader rejects unknown versions and headers whose config hash does not match
their config section.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .canonical import canonical_dumps, canonical_hash
from .scheduler import DiffusionSchedule, linear_beta_schedule
from .unet import UNetConfig, UNetModel, _norm_groups

BUNDLE_MAGIC = b"SKFB"
BUNDLE_VERSION = 1


class CheckpointError(ValueError):
    pass


class SceneClassifier(nn.Module):
    """Small conv classifier over the 64 scene classes."""

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        w = width
        self.width = width
        self.num_classes = num_classes
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1),
            nn.GroupNorm(_norm_groups(w), w),
            nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.GroupNorm(_norm_groups(2 * w), 2 * w),
            nn.SiLU(),
            nn.Conv2d(2 * w, 3 * w, 3, stride=2, padding=1),
            nn.GroupNorm(_norm_groups(3 * w), 3 * w),
            nn.SiLU(),
            nn.Conv2d(3 * w, 4 * w, 3, stride=2, padding=1),
            nn.GroupNorm(_norm_groups(4 * w), 4 * w),
            nn.SiLU(),
        )
        self.head = nn.Linear(4 * w, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.head(h.mean(dim=(2, 3)))


def _schedule_dict(schedule: DiffusionSchedule) -> dict:
    return {
        "T": schedule.T,
        "beta_start": float(schedule.betas[0]),
        "beta_end": float(schedule.betas[-1]),
    }


def _config_hash(unet_config: UNetConfig, schedule_dict: dict) -> str:
    return canonical_hash({"unet_config": unet_config.to_dict(), "schedule": schedule_dict})


def save_bundle(
    path,
    *,
    unet_config: UNetConfig,
    schedule: DiffusionSchedule,
    unet_state: Dict[str, torch.Tensor],
    ema_state: Dict[str, torch.Tensor],
    classifier_state: Optional[Dict[str, torch.Tensor]] = None,
    classifier_width: int = 32,
    train_info: Optional[dict] = None,
) -> Path:
    path = Path(path)
    sched = _schedule_dict(schedule)
    tensors = []
    for prefix, state in (("unet", unet_state), ("ema", ema_state), ("classifier", classifier_state or {})):
        for name in sorted(state):
            tensors.append((f"{prefix}.{name}", state[name]))
    header = {
        "format_version": BUNDLE_VERSION,
        "unet_config": unet_config.to_dict(),
        "schedule": sched,
        "classifier": (
            {"width": classifier_width, "num_classes": unet_config.num_conditions}
            if classifier_state
            else None
        ),
        "train_info": train_info or {},
        "config_hash": _config_hash(unet_config, sched),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    blob = canonical_dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC)
        f.write(struct.pack("<I", BUNDLE_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, t in tensors:
            f.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    return path


@dataclass
class Bundle:
    """Loaded checkpoint: models ready to run plus provenance."""

    path: Path
    config: UNetConfig
    schedule: DiffusionSchedule
    unet: UNetModel
    ema_unet: UNetModel
    classifier: Optional[SceneClassifier]
    header: dict
    checkpoint_hash: str

    @property
    def model(self) -> UNetModel:
        """EMA weights; used for all evaluation."""
        return self.ema_unet


def load_bundle(path) -> Bundle:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != BUNDLE_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint bundle")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != BUNDLE_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {BUNDLE_VERSION})")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    config = UNetConfig.from_dict(header["unet_config"])
    sched = header["schedule"]
    if header.get("config_hash") != _config_hash(config, sched):
        raise CheckpointError(f"{path}: config hash mismatch, refusing to load")
    schedule = linear_beta_schedule(int(sched["T"]), float(sched["beta_start"]), float(sched["beta_end"]))

    states: Dict[str, Dict[str, torch.Tensor]] = {"unet": {}, "ema": {}, "classifier": {}}
    offset = 16 + hlen
    for item in header["tensors"]:
        shape = tuple(item["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += n * 4
        prefix, name = item["name"].split(".", 1)
        states[prefix][name] = torch.from_numpy(arr)

    unet = UNetModel(config)
    unet.load_state_dict(states["unet"])
    unet.eval()
    ema_unet = UNetModel(config)
    ema_unet.load_state_dict(states["ema"])
    ema_unet.eval()
    classifier = None
    if header.get("classifier"):
        classifier = SceneClassifier(
            int(header["classifier"]["num_classes"]), int(header["classifier"]["width"])
        )
        classifier.load_state_dict(states["classifier"])
        classifier.eval()
    return Bundle(
        path=path,
        config=config,
        schedule=schedule,
        unet=unet,
        ema_unet=ema_unet,
        classifier=classifier,
        header=header,
        checkpoint_hash=hashlib.sha256(raw).hexdigest(),
    )
