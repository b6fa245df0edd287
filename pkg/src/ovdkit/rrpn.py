"""Test-time proposal re-weighting: NMS, score fusion, re-ranking."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .discovery import score_proposal
from .encoder import PromptBank
from .errors import ValidationError
from .kfpn import Pyramid
from .roi import Proposal, iou_matrix


@dataclass(frozen=True)
class RrpnConfig:
    alpha: float = 0.5
    nms_iou: float = 0.7
    keep_topk: int = 1000
    temperature: float = 0.05
    roi_out: int = 7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValidationError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")
        if self.keep_topk < 1:
            raise ValidationError("keep_topk must be at least 1")
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")


def nms(proposals: Sequence[Proposal], iou_thresh: float = 0.7) -> list[Proposal]:
    """Greedy NMS on score_rpn; suppresses IoU >= iou_thresh. Output is in keep order."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValidationError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    props = list(proposals)
    if not props:
        return []
    scores = np.array([p.score_rpn for p in props])
    order = np.lexsort((np.arange(len(props)), -scores))
    ious = iou_matrix([p.box for p in props], [p.box for p in props])
    suppressed = np.zeros(len(props), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] >= iou_thresh
    return [props[i] for i in keep]


def fuse(score_rpn: float, score_kfpn: float, alpha: float) -> float:
    return alpha * score_rpn + (1.0 - alpha) * score_kfpn


def fuse_scores(proposals: Sequence[Proposal], pyr: Pyramid, bank: PromptBank,
                cfg: RrpnConfig) -> list[Proposal]:
    out = []
    for p in proposals:
        kfpn = score_proposal(pyr, p.box, bank, cfg.temperature, cfg.roi_out).confidence
        fused = min(1.0, max(0.0, fuse(p.score_rpn, kfpn, cfg.alpha)))
        out.append(replace(p, score_kfpn=kfpn, score_fused=fused))
    return out


def rerank_topk(proposals: Sequence[Proposal], k: int) -> list[Proposal]:
    """Stable descending sort on score_fused, truncated to k."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    props = list(proposals)
    if any(p.score_fused is None for p in props):
        raise ValidationError("rerank_topk needs fused scores on every proposal")
    order = sorted(range(len(props)), key=lambda i: (-props[i].score_fused, i))
    return [props[i] for i in order[:k]]


def rpn_only(raw: Sequence[Proposal], cfg: RrpnConfig) -> list[Proposal]:
    """Plain RPN post-processing: NMS then top-k by score_rpn."""
    kept = nms(raw, cfg.nms_iou)
    return rerank_topk([replace(p, score_fused=p.score_rpn) for p in kept], cfg.keep_topk)


def rrpn_pipeline(raw: Sequence[Proposal], pyr: Pyramid, bank: PromptBank,
                  cfg: RrpnConfig = RrpnConfig()) -> list[Proposal]:
    kept = nms(raw, cfg.nms_iou)
    if not kept:
        return []
    return rerank_topk(fuse_scores(kept, pyr, bank, cfg), cfg.keep_topk)
