"""Run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

ABLATIONS = (
    "none",
    "no_visibility",
    "no_ray_casting",
    "over_compositing",
    "no_warped_sources",
    "no_refinement",
)


@dataclass(frozen=True)
class TrainConfig:
    num_sources: int = 6
    num_planes: int = 48
    depth_range: tuple[float, float] = (0.5, 100.0)
    resolution: tuple[int, int] | None = None  # (H, W); None keeps native size
    crop_size: tuple[int, int] | None = None  # (H, W) random training crop; None trains full frames
    learning_rate: float = 2e-4
    # weight on the photometric term tying the pre-refinement blend to the
    # target; keeps depth/visibility supervised even when the refinement net
    # could absorb their errors
    blend_l1_weight: float = 1.0
    steps: int = 1000
    seed: int = 0
    ablation: str = "none"
    gan: bool = False
    lambda_adv: float = 0.01

    def __post_init__(self):
        if self.num_sources < 2:
            raise ValueError("num_sources must be >= 2")
        if self.num_planes < 2:
            raise ValueError("num_planes must be >= 2")
        d_min, d_max = self.depth_range
        if not (0 < d_min < d_max):
            raise ValueError(f"invalid depth range ({d_min}, {d_max})")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.blend_l1_weight < 0:
            raise ValueError("blend_l1_weight must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}, options: {ABLATIONS}")
        if self.resolution is not None:
            h, w = self.resolution
            if h < 8 or w < 8:
                raise ValueError("resolution must be at least 8x8")
        if self.crop_size is not None:
            h, w = self.crop_size
            if h < 8 or w < 8:
                raise ValueError("crop_size must be at least 8x8")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["depth_range"] = list(self.depth_range)
        d["resolution"] = list(self.resolution) if self.resolution is not None else None
        d["crop_size"] = list(self.crop_size) if self.crop_size is not None else None
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["depth_range"] = tuple(d["depth_range"])
        if d.get("resolution") is not None:
            d["resolution"] = tuple(d["resolution"])
        if d.get("crop_size") is not None:
            d["crop_size"] = tuple(d["crop_size"])
        return cls(**d)
