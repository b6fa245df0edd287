"""Prompt-based foreground scoring, base filtering and the candidate cache."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nvt
from .encoder import PromptBank
from .errors import ValidationError
from .kfpn import Pyramid
from .roi import Box, Proposal, iou_matrix, pooled_embedding, rescale_box, with_box
from .tensorops import cosine_matrix, tempered_softmax


@dataclass(frozen=True)
class ForegroundScore:
    s_fg: float
    s_bg: float
    confidence: float

    @property
    def is_foreground(self) -> bool:
        return self.s_fg > self.s_bg


@dataclass(frozen=True)
class DiscoveryConfig:
    temperature: float = 0.05
    base_iou: float = 0.5
    capacity: int = 100
    roi_out: int = 7

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")
        if not 0 < self.base_iou < 1:
            raise ValidationError("base_iou must lie in (0, 1)")
        if self.capacity < 1:
            raise ValidationError("capacity must be positive")


def foreground_score(sims_fg, sims_bg, temperature: float) -> ForegroundScore:
    """Group maxima plus the foreground share of a tempered softmax over all sims."""
    sims_fg = np.asarray(sims_fg, dtype=np.float64).ravel()
    sims_bg = np.asarray(sims_bg, dtype=np.float64).ravel()
    if sims_fg.size == 0 or sims_bg.size == 0:
        raise ValidationError("need at least one foreground and one background similarity")
    p = tempered_softmax(np.concatenate([sims_fg, sims_bg]), temperature)
    conf = float(min(1.0, p[: sims_fg.size].sum()))
    return ForegroundScore(float(sims_fg.max()), float(sims_bg.max()), conf)


def score_embedding(vec, bank: PromptBank, temperature: float) -> ForegroundScore:
    sims_fg = cosine_matrix(vec, bank.matrix("foreground"))[0]
    sims_bg = cosine_matrix(vec, bank.matrix("background"))[0]
    return foreground_score(sims_fg, sims_bg, temperature)


def score_proposal(pyr: Pyramid, box: Box, bank: PromptBank, temperature: float = 0.05,
                   roi_out: int = 7) -> ForegroundScore:
    return score_embedding(pooled_embedding(pyr, box, roi_out), bank, temperature)


def filter_base(proposals: Sequence[Proposal], gt_base: Sequence[Box], iou_thresh: float = 0.5):
    """Drop proposals overlapping any base ground-truth box with IoU >= iou_thresh."""
    if not 0 < iou_thresh < 1:
        raise ValidationError("iou_thresh must lie in (0, 1)")
    proposals = list(proposals)
    keep = _not_base(proposals, gt_base, iou_thresh)
    return [p for p, k in zip(proposals, keep) if k]


def _not_base(proposals, gt_base, iou_thresh) -> np.ndarray:
    if not gt_base or not proposals:
        return np.ones(len(proposals), dtype=bool)
    best = iou_matrix([p.box for p in proposals], list(gt_base)).max(axis=1)
    return best < iou_thresh


def discover(pyr: Pyramid, proposals: Sequence[Proposal], gt_base: Sequence[Box],
             bank: PromptBank, cfg: DiscoveryConfig = DiscoveryConfig()):
    """Latent novel candidates: foreground, not base, top ``cfg.capacity`` by confidence."""
    proposals = list(proposals)
    if not proposals:
        raise ValidationError("discover needs at least one proposal")
    scored = [(i, p, score_proposal(pyr, p.box, bank, cfg.temperature, cfg.roi_out))
              for i, p in enumerate(proposals)]
    fg = [t for t in scored if t[2].is_foreground]
    keep = _not_base([p for _, p, _ in fg], gt_base, cfg.base_iou)
    survivors = [t for t, k in zip(fg, keep) if k]
    survivors.sort(key=lambda t: (-t[2].confidence, t[0]))
    return [(p, s) for _, p, s in survivors[: cfg.capacity]]


@dataclass(frozen=True)
class CacheEntry:
    box: Box
    embedding: np.ndarray
    confidence: float


@dataclass(frozen=True)
class CandidateCache:
    image_id: str
    entries: tuple
    capacity: int = 100

    def __post_init__(self):
        entries = tuple(self.entries)
        if len(entries) > self.capacity:
            raise ValidationError(f"{len(entries)} entries exceed capacity {self.capacity}")
        confs = [e.confidence for e in entries]
        if any(b > a for a, b in zip(confs, confs[1:])):
            raise ValidationError("cache entries must be sorted by confidence, descending")
        for e in entries:
            n = float(np.linalg.norm(e.embedding))
            if abs(n - 1.0) > 1e-5:
                raise ValidationError(f"cached embedding has norm {n}, expected 1")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, directory, stacked: bool = True) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"image_id": self.image_id, "capacity": self.capacity, "entries": []}
        if stacked and self.entries:
            nvt.save(d / "embeddings.nvt", np.stack([e.embedding for e in self.entries]))
        for i, e in enumerate(self.entries):
            item = {"box": e.box.as_list(), "confidence": e.confidence}
            if stacked:
                item["embedding_file"] = "embeddings.nvt"
                item["row"] = i
            else:
                name = f"embedding_{i:04d}.nvt"
                nvt.save(d / name, e.embedding)
                item["embedding_file"] = name
            meta["entries"].append(item)
        (d / "cache.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory) -> "CandidateCache":
        d = Path(directory)
        p = d / "cache.json"
        if not p.exists():
            raise ValidationError(f"{p} not found")
        meta = json.loads(p.read_text())
        tensors, seen = {}, {}
        entries = []
        try:
            for item in meta["entries"]:
                fname = item["embedding_file"]
                if fname not in tensors:
                    tensors[fname] = nvt.load(d / fname)
                arr = tensors[fname]
                # stacked files without explicit rows are read in listing order
                row = int(item.get("row", seen.get(fname, 0)))
                seen[fname] = row + 1
                emb = arr[row] if arr.ndim == 2 else arr.ravel()
                entries.append(CacheEntry(Box.of(item["box"]), emb, float(item["confidence"])))
            return cls(str(meta["image_id"]), tuple(entries), int(meta["capacity"]))
        except (KeyError, TypeError, IndexError) as exc:
            raise ValidationError(f"malformed cache manifest: {exc}") from exc


def build_cache(encoder, scene, candidates, feature_size, image_size,
                image_id: str = "image", capacity: int = 100) -> CandidateCache:
    """Offline cache of discovered candidates with their crop embeddings.

    ``feature_size`` is the (h, w) frame the candidate boxes live in and
    ``image_size`` the original image the encoder crops from.
    """
    candidates = list(candidates)
    if len(candidates) > capacity:
        raise ValidationError(f"{len(candidates)} candidates exceed capacity {capacity}")
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i][1].confidence, i))
    entries = []
    for i in order:
        prop, score = candidates[i]
        box = rescale_box(prop.box, feature_size, image_size)
        emb = np.asarray(encoder.encode_crop(scene, box), dtype=np.float32)
        entries.append(CacheEntry(box, emb, float(np.float32(score.confidence))))
    return CandidateCache(image_id, tuple(entries), capacity)


def merge_cached(proposals: Sequence[Proposal], cache: CandidateCache, iou_thresh: float = 0.5):
    """Swap proposals for overlapping cached candidates, one proposal per entry.

    Pairs with IoU >= iou_thresh are matched greedily by IoU (descending;
    ties by proposal then entry index), so each entry replaces its best
    still-unmatched proposal and no proposal is replaced twice.
    """
    if not 0 < iou_thresh < 1:
        raise ValidationError("iou_thresh must lie in (0, 1)")
    out = list(proposals)
    if not out or not cache.entries:
        return out
    m = iou_matrix([p.box for p in out], [e.box for e in cache.entries])
    pi, ei = np.nonzero(m >= iou_thresh)
    order = sorted(zip(pi.tolist(), ei.tolist()), key=lambda t: (-m[t], t[0], t[1]))
    used_p, used_e = set(), set()
    for p, e in order:
        if p in used_p or e in used_e:
            continue
        used_p.add(p)
        used_e.add(e)
        out[p] = with_box(out[p], cache.entries[e].box, "cache")
    return out
