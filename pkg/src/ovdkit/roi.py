"""Boxes, proposals, IoU and RoI-Align over pyramid levels."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .kfpn import Pyramid
from .tensorops import FeatureMap


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_valid(self) -> bool:
        vals = (self.x1, self.y1, self.x2, self.y2)
        return all(math.isfinite(v) for v in vals) and self.x2 > self.x1 and self.y2 > self.y1

    def check(self) -> "Box":
        if not self.is_valid():
            raise ValidationError(f"degenerate box {self.as_list()}")
        return self

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def of(cls, coords) -> "Box":
        try:
            x1, y1, x2, y2 = (float(c) for c in coords)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"a box needs four numbers, got {coords!r}") from exc
        return cls(x1, y1, x2, y2)


SOURCES = ("rpn", "cache")


@dataclass(frozen=True)
class Proposal:
    box: Box
    score_rpn: float
    score_kfpn: Optional[float] = None
    score_fused: Optional[float] = None
    source: str = "rpn"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"unknown proposal source {self.source!r}")
        for name in ("score_rpn", "score_kfpn", "score_fused"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["box"] = self.box.as_list()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Proposal":
        try:
            return cls(
                box=Box.of(d["box"]),
                score_rpn=float(d["score_rpn"]),
                score_kfpn=None if d.get("score_kfpn") is None else float(d["score_kfpn"]),
                score_fused=None if d.get("score_fused") is None else float(d["score_fused"]),
                source=d.get("source", "rpn"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed proposal {d!r}: {exc}") from exc


def save_proposals(path, proposals: Sequence[Proposal]) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in proposals], indent=1))


def load_proposals(path) -> list[Proposal]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"proposal file {p} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p} is not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise ValidationError("proposal file must hold a JSON list")
    return [Proposal.from_json(d) for d in data]


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: Sequence[Box], b: Sequence[Box]) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([x.as_list() for x in a], dtype=np.float64)
    B = np.array([x.as_list() for x in b], dtype=np.float64)
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _hat_antiderivative(t: np.ndarray, n: int) -> np.ndarray:
    """Antiderivative of each clamped bilinear basis function, shape (len(t), n).

    Basis i is the hat centred on cell i; the first and last hats extend as
    constants past the border, which is what edge-clamped sampling gives.
    """
    t = np.asarray(t, dtype=np.float64)[:, None]
    if n == 1:
        return t.copy()
    d = t - np.arange(n)[None, :]
    g = np.where(
        d <= -1, 0.0, np.where(d <= 0, 0.5 * (d + 1) ** 2, np.where(d <= 1, 1 - 0.5 * (1 - d) ** 2, 1.0))
    )
    g[:, 0] = np.where(t[:, 0] <= 0, t[:, 0], g[:, 0] - 0.5)
    last = n - 1
    g[:, last] = np.where(t[:, 0] <= last, g[:, last], 0.5 + (t[:, 0] - last))
    return g


def _hat_values(t: np.ndarray, n: int) -> np.ndarray:
    t = np.clip(np.asarray(t, dtype=np.float64), 0, n - 1)[:, None]
    return np.clip(1.0 - np.abs(t - np.arange(n)[None, :]), 0.0, None)


def _axis_weights(lo: float, hi: float, bins: int, n: int, sampling_ratio) -> np.ndarray:
    edges = np.linspace(lo, hi, bins + 1)
    if sampling_ratio is None:
        g = _hat_antiderivative(edges, n)
        return (g[1:] - g[:-1]) / (edges[1:] - edges[:-1])[:, None]
    r = int(sampling_ratio)
    step = (hi - lo) / bins
    pts = lo + (np.arange(bins)[:, None] + (np.arange(r)[None, :] + 0.5) / r) * step
    return _hat_values(pts.ravel(), n).reshape(bins, r, n).mean(axis=1)


def roi_align(
    level: FeatureMap,
    stride: float,
    box: Box,
    out_h: int,
    out_w: int,
    sampling_ratio: Optional[int] = None,
) -> FeatureMap:
    """Pool ``box`` (image pixels) from ``level`` into an out_h x out_w grid.

    Pixel coordinate p maps to continuous feature coordinate p / stride - 0.5,
    so cell i's value sits at its centre. Each bin holds the average of the
    edge-clamped bilinear interpolant over the bin. With ``sampling_ratio=None``
    that average is integrated exactly; an integer r instead averages r x r
    point samples per bin.
    """
    box.check()
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"output grid must be positive, got {out_h}x{out_w}")
    if sampling_ratio is not None and sampling_ratio < 1:
        raise ValidationError(f"sampling ratio must be positive, got {sampling_ratio}")
    fx1, fx2 = box.x1 / stride - 0.5, box.x2 / stride - 0.5
    fy1, fy2 = box.y1 / stride - 0.5, box.y2 / stride - 0.5
    if fx2 <= -0.5 or fy2 <= -0.5 or fx1 >= level.width - 0.5 or fy1 >= level.height - 0.5:
        raise ValidationError(f"box {box.as_list()} does not overlap the feature map")

    wy = _axis_weights(fy1, fy2, out_h, level.height, sampling_ratio)
    wx = _axis_weights(fx1, fx2, out_w, level.width, sampling_ratio)
    # only rows/cols with nonzero weight touch the contraction
    ys = np.flatnonzero(np.abs(wy).sum(axis=0))
    xs = np.flatnonzero(np.abs(wx).sum(axis=0))
    y0, y1 = ys[0], ys[-1] + 1
    x0, x1 = xs[0], xs[-1] + 1
    patch = level.data[:, y0:y1, x0:x1].astype(np.float64)
    out = np.einsum("ih,chw,jw->cij", wy[:, y0:y1], patch, wx[:, x0:x1], optimize=True)
    return FeatureMap(out.astype(np.float32))


LEVEL_SNAP = 1e-9


def select_level(box: Box, canonical_size: float = 224.0, canonical_level: int = 4,
                 min_level: int = 2, max_level: int = 6) -> int:
    """FPN routing: floor(canonical_level + log2(sqrt(area) / canonical_size)), clamped."""
    box.check()
    ratio = math.sqrt(box.width * box.height) / canonical_size
    # boxes a rounding error short of a level boundary route to the upper level
    lvl = canonical_level + math.floor(math.log2(ratio) + LEVEL_SNAP)
    return max(min_level, min(max_level, lvl))


def pooled_embedding(pyr: Pyramid, box: Box, out: int = 7, canonical_size: float = 224.0,
                     sampling_ratio: Optional[int] = None) -> np.ndarray:
    """Unit-norm proposal feature from the routed pyramid level."""
    lvl = pyr.level(f"F{select_level(box, canonical_size)}")
    pooled = roi_align(lvl.map, lvl.stride, box, out, out, sampling_ratio)
    vec = pooled.data.astype(np.float64).mean(axis=(1, 2))
    n = np.linalg.norm(vec)
    if n == 0.0:
        raise ValidationError(f"pooled feature for {box.as_list()} is exactly zero")
    return vec / n


def rescale_box(box: Box, from_size, to_size) -> Box:
    fh, fw = from_size
    th, tw = to_size
    if min(fh, fw, th, tw) <= 0:
        raise ValidationError(f"sizes must be positive, got {from_size} -> {to_size}")
    sx, sy = tw / fw, th / fh
    return Box(box.x1 * sx, box.y1 * sy, box.x2 * sx, box.y2 * sy)


def with_box(p: Proposal, box: Box, source: str) -> Proposal:
    return replace(p, box=box, source=source)
