"""Parameter-free feature pyramid built from frozen encoder layers.

Three same-resolution encoder layers are blended top-down, pushed through
the frozen projection head, and resampled to five levels (F2..F6) at
strides 4..64 relative to the input image for a stride-16 encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nvt
from .errors import ValidationError
from .tensorops import FeatureMap, ProjectionHead, bilinear_resize, max_pool2, project

LEVEL_NAMES = ("F2", "F3", "F4", "F5", "F6")


@dataclass(frozen=True)
class PyramidLevel:
    name: str
    map: FeatureMap
    stride: int


@dataclass(frozen=True)
class Pyramid:
    levels: tuple[PyramidLevel, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise ValidationError("pyramid needs at least one level")
        strides = [lv.stride for lv in levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValidationError(f"pyramid strides must strictly increase, got {strides}")
        if len({lv.map.channels for lv in levels}) != 1:
            raise ValidationError("pyramid levels disagree on channel count")
        object.__setattr__(self, "levels", levels)

    @property
    def channels(self) -> int:
        return self.levels[0].map.channels

    @property
    def names(self) -> list[str]:
        return [lv.name for lv in self.levels]

    def level(self, name: str) -> PyramidLevel:
        for lv in self.levels:
            if lv.name == name:
                return lv
        raise ValidationError(f"no pyramid level named {name!r}; have {self.names}")

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for lv in self.levels:
            fname = f"{lv.name}.nvt"
            nvt.save(d / fname, lv.map.data)
            entries.append({"name": lv.name, "stride": lv.stride, "file": fname})
        (d / "pyramid.json").write_text(json.dumps({"levels": entries}, indent=2))

    @classmethod
    def load(cls, directory) -> "Pyramid":
        d = Path(directory)
        manifest = d / "pyramid.json"
        if not manifest.exists():
            raise ValidationError(f"{manifest} not found")
        meta = json.loads(manifest.read_text())
        try:
            levels = [
                PyramidLevel(e["name"], FeatureMap(nvt.load(d / e["file"])), int(e["stride"]))
                for e in meta["levels"]
            ]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed pyramid manifest: {exc}") from exc
        return cls(tuple(levels))


@dataclass(frozen=True)
class KfpnConfig:
    head: ProjectionHead
    layer_picks: tuple[int, int, int] = (5, 7, 11)
    fusion_weight: float = 0.3
    target_strides: tuple[int, ...] = (4, 8, 16, 32, 64)

    def __post_init__(self):
        picks = tuple(int(p) for p in self.layer_picks)
        if len(picks) != 3 or not picks[0] < picks[1] < picks[2]:
            raise ValidationError(f"layer_picks must be 3 strictly increasing ints, got {picks}")
        if not 0.0 <= self.fusion_weight <= 1.0:
            raise ValidationError(f"fusion weight must lie in [0, 1], got {self.fusion_weight}")
        strides = tuple(int(s) for s in self.target_strides)
        if len(strides) != 5 or any(s < 1 for s in strides):
            raise ValidationError(f"need 5 positive target strides, got {strides}")
        object.__setattr__(self, "layer_picks", picks)
        object.__setattr__(self, "target_strides", strides)


def top_down_fuse(p2: FeatureMap, p3: FeatureMap, p4: FeatureMap, W: float):
    """Convex top-down blend: t4 = p4, t_l = W * p_l + (1 - W) * t_{l+1}.

    W weights the lateral (lower-layer) input; W = 0 propagates p4 everywhere.
    """
    if not (p2.shape == p3.shape == p4.shape):
        raise ValidationError(f"fusion inputs differ in shape: {p2.shape}, {p3.shape}, {p4.shape}")
    if not 0.0 <= W <= 1.0:
        raise ValidationError(f"fusion weight must lie in [0, 1], got {W}")
    t4 = p4.data.astype(np.float64)
    t3 = W * p3.data.astype(np.float64) + (1.0 - W) * t4
    t2 = W * p2.data.astype(np.float64) + (1.0 - W) * t3
    return FeatureMap(t2.astype(np.float32)), FeatureMap(t3.astype(np.float32)), p4


def build_pyramid(layers, cfg: KfpnConfig) -> Pyramid:
    layers = list(layers)
    if len(layers) != 3:
        raise ValidationError(f"expected 3 encoder layers, got {len(layers)}")
    h, w = layers[0].height, layers[0].width
    if h % 4 or w % 4:
        raise ValidationError(f"base map size must be divisible by 4, got {h}x{w}")

    t2, t3, t4 = top_down_fuse(*layers, cfg.fusion_weight)
    c2, c3, c4 = (project(t, cfg.head) for t in (t2, t3, t4))

    f2 = bilinear_resize(c2, 4 * h, 4 * w)
    f3 = bilinear_resize(c3, 2 * h, 2 * w)
    f4 = c4
    f5 = max_pool2(f4)
    f6 = max_pool2(f5)
    maps = (f2, f3, f4, f5, f6)
    return Pyramid(
        tuple(PyramidLevel(n, m, s) for n, m, s in zip(LEVEL_NAMES, maps, cfg.target_strides))
    )


def pyramid_cell_feature(pyr: Pyramid, level_name: str, y: int, x: int) -> np.ndarray:
    fmap = pyr.level(level_name).map
    if not (0 <= y < fmap.height and 0 <= x < fmap.width):
        raise ValidationError(
            f"cell ({y}, {x}) outside {level_name} of size {fmap.height}x{fmap.width}"
        )
    return fmap.data[:, y, x].copy()


def strides_for_encoder(patch_stride: int) -> tuple[int, ...]:
    """Pyramid strides for a given encoder patch stride (x4, x2, x1, /2, /4)."""
    if patch_stride % 4:
        raise ValidationError(f"patch stride must be divisible by 4, got {patch_stride}")
    return (patch_stride // 4, patch_stride // 2, patch_stride, patch_stride * 2, patch_stride * 4)
