"""Desk-scale experiment harness.

Synthetic scenes, an RPN stand-in whose scores encode the base-trained
RPN's bias against novel objects, recall / accuracy evaluation and the
sweep runner that drives the ablations.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import (
    PromptBank,
    SceneObject,
    SyntheticEncoder,
    SyntheticScene,
    make_frozen_head,
    make_synthetic_bank,
)
from .errors import ValidationError
from .kfpn import KfpnConfig, Pyramid, build_pyramid, strides_for_encoder
from .roi import Box, Proposal, iou_matrix, pooled_embedding
from .rrpn import RrpnConfig, rpn_only, rrpn_pipeline
from .tensorops import cosine_matrix, tempered_softmax

RPN_STREAM = 0x5250
SCENE_STREAM = 0x5343


# -- scenes -----------------------------------------------------------------

def generate_scene(
    h: int = 384,
    w: int = 384,
    n_objects: int = 8,
    novel_frac: float = 0.25,
    n_base: int = 10,
    n_novel: int = 10,
    seed: int = 0,
    noise_sigma: float = 0.1,
    min_size: int = 40,
    max_size: int = 96,
    allow_overlap: bool = False,
    max_tries: int = 10_000,
) -> SyntheticScene:
    """Random scene; the first round(n_objects * novel_frac) objects are novel."""
    if not 0.0 <= novel_frac <= 1.0:
        raise ValidationError("novel_frac must lie in [0, 1]")
    if max_size > min(h, w) or min_size < 1 or min_size > max_size:
        raise ValidationError(f"object size range [{min_size}, {max_size}] does not fit {h}x{w}")
    n_nov = int(round(n_objects * novel_frac))
    if (n_nov and not n_novel) or (n_objects - n_nov and not n_base):
        raise ValidationError("scene needs classes for both object groups")
    rng = np.random.default_rng([seed, SCENE_STREAM])
    boxes: list[Box] = []
    tries = 0
    while len(boxes) < n_objects:
        tries += 1
        if tries > max_tries:
            raise ValidationError(f"could not place {n_objects} objects without overlap")
        bw, bh = rng.integers(min_size, max_size + 1, size=2)
        x1 = int(rng.integers(0, w - bw + 1))
        y1 = int(rng.integers(0, h - bh + 1))
        b = Box(float(x1), float(y1), float(x1 + bw), float(y1 + bh))
        if not allow_overlap and boxes and iou_matrix([b], boxes).max() > 0:
            continue
        boxes.append(b)
    objs = []
    for i, b in enumerate(boxes):
        novel = i < n_nov
        cid = n_base + int(rng.integers(n_novel)) if novel else int(rng.integers(n_base))
        objs.append(SceneObject(b, cid, novel))
    return SyntheticScene(h, w, tuple(objs), seed, noise_sigma)


# -- RPN stand-in -----------------------------------------------------------

@dataclass(frozen=True)
class RpnSimConfig:
    n_per_object: int = 3
    center_jitter: float = 0.08
    size_jitter: float = 0.1
    n_background: int = 150
    background_size: tuple = (32, 128)
    base_score: float = 0.9
    novel_rpn_score: float = 0.25
    background_score: float = 0.1
    object_score_sd: float = 0.05
    background_score_sd: float = 0.1


def _jitter(rng, b: Box, cfg: RpnSimConfig, h: int, w: int) -> Box:
    cx = (b.x1 + b.x2) / 2 + rng.normal(0, cfg.center_jitter * b.width)
    cy = (b.y1 + b.y2) / 2 + rng.normal(0, cfg.center_jitter * b.height)
    bw = b.width * np.exp(rng.normal(0, cfg.size_jitter))
    bh = b.height * np.exp(rng.normal(0, cfg.size_jitter))
    x1, x2 = max(0.0, cx - bw / 2), min(float(w), cx + bw / 2)
    y1, y2 = max(0.0, cy - bh / 2), min(float(h), cy + bh / 2)
    if x2 - x1 < 1 or y2 - y1 < 1:
        return b
    return Box(float(x1), float(y1), float(x2), float(y2))


def _score(rng, mean: float, sd: float) -> float:
    return float(np.clip(rng.normal(mean, sd), 0.0, 1.0))


def simulate_rpn(scene: SyntheticScene, cfg: RpnSimConfig = RpnSimConfig()) -> list[Proposal]:
    """Jittered boxes around every object plus random background boxes."""
    rng = np.random.default_rng([scene.seed, RPN_STREAM])
    out = []
    for o in scene.objects:
        mean = cfg.novel_rpn_score if o.is_novel else cfg.base_score
        for _ in range(cfg.n_per_object):
            out.append(Proposal(_jitter(rng, o.box, cfg, scene.h, scene.w),
                                _score(rng, mean, cfg.object_score_sd)))
    lo, hi = cfg.background_size
    hi = min(hi, scene.h, scene.w)
    lo = min(lo, hi)
    for _ in range(cfg.n_background):
        bw, bh = rng.integers(lo, hi + 1, size=2)
        x1 = float(rng.integers(0, scene.w - bw + 1))
        y1 = float(rng.integers(0, scene.h - bh + 1))
        out.append(Proposal(Box(x1, y1, x1 + float(bw), y1 + float(bh)),
                            _score(rng, cfg.background_score, cfg.background_score_sd)))
    return out


# -- evaluation -------------------------------------------------------------

@dataclass(frozen=True)
class ObjectMatch:
    object_index: int
    class_id: int
    is_novel: bool
    best_iou: float
    proposal_index: Optional[int]
    matched_iou: Optional[float]

    @property
    def recalled(self) -> bool:
        return self.proposal_index is not None


@dataclass(frozen=True)
class RecallReport:
    recall_base: Optional[float]
    recall_novel: Optional[float]
    recall_all: Optional[float]
    k: int
    iou_match_thresh: float
    matches: tuple

    def to_json(self) -> dict:
        d = asdict(self)
        d["matches"] = [asdict(m) for m in self.matches]
        return d


def greedy_match(ious: np.ndarray, thresh: float) -> dict:
    """One-to-one assignment by descending IoU; returns {row: col}."""
    rows, cols = np.nonzero(ious >= thresh)
    order = sorted(zip(rows.tolist(), cols.tolist()), key=lambda t: (-ious[t], t[0], t[1]))
    taken_r, taken_c, out = set(), set(), {}
    for r, c in order:
        if r in taken_r or c in taken_c:
            continue
        taken_r.add(r)
        taken_c.add(c)
        out[r] = c
    return out


def eval_recall(kept: Sequence[Proposal], scene: SyntheticScene, iou_match: float = 0.5,
                k: Optional[int] = None) -> RecallReport:
    """Recall of ground-truth objects among the top-k kept proposals.

    Objects and proposals are paired one-to-one, greedily by IoU; an object
    is recalled when it receives a partner with IoU >= iou_match.
    """
    if not 0 < iou_match < 1:
        raise ValidationError("iou_match must lie in (0, 1)")
    top = list(kept) if k is None else list(kept)[:k]
    k = len(top) if k is None else k
    gts = [o.box for o in scene.objects]
    ious = iou_matrix(gts, [p.box for p in top])
    assign = greedy_match(ious, iou_match) if top else {}
    matches = []
    for i, o in enumerate(scene.objects):
        j = assign.get(i)
        best = float(ious[i].max()) if top else 0.0
        matches.append(ObjectMatch(i, o.class_id, o.is_novel, best, j,
                                   None if j is None else float(ious[i, j])))

    def rate(ms):
        return sum(m.recalled for m in ms) / len(ms) if ms else None

    return RecallReport(
        rate([m for m in matches if not m.is_novel]),
        rate([m for m in matches if m.is_novel]),
        rate(matches),
        k,
        iou_match,
        tuple(matches),
    )


@dataclass(frozen=True)
class ClassPrediction:
    class_id: int
    max_cosine: float
    probability: float
    low_confidence: bool


def classify_embeddings(vecs, bank: PromptBank, temperature: float = 0.05,
                        low_cosine: float = 0.5) -> list[ClassPrediction]:
    classes = bank.class_embeddings()
    if classes.shape[0] == 0:
        raise ValidationError("classification needs base and/or novel class prompts")
    sims = cosine_matrix(vecs, classes)
    out = []
    for row in sims:
        c = int(np.argmax(row))  # first maximum, i.e. lowest class id on ties
        p = tempered_softmax(row, temperature)[c]
        out.append(ClassPrediction(c, float(row[c]), float(p), bool(row[c] < low_cosine)))
    return out


def classify_kept(kept: Sequence[Proposal], pyr: Pyramid, bank: PromptBank,
                  temperature: float = 0.05, roi_out: int = 7):
    kept = list(kept)
    if not kept:
        return []
    vecs = np.stack([pooled_embedding(pyr, p.box, roi_out) for p in kept])
    return list(zip(kept, classify_embeddings(vecs, bank, temperature)))


def classification_accuracy(classified, scene: SyntheticScene, iou_match: float = 0.5):
    """Share of proposals overlapping an object (IoU >= iou_match) whose class is right.

    Each proposal is judged against its highest-IoU object. Returns None when
    no proposal overlaps any object.
    """
    if not classified or not scene.objects:
        return None
    ious = iou_matrix([p.box for p, _ in classified], [o.box for o in scene.objects])
    hits = total = 0
    for row, (_, pred) in zip(ious, classified):
        j = int(np.argmax(row))
        if row[j] >= iou_match:
            total += 1
            hits += pred.class_id == scene.objects[j].class_id
    return hits / total if total else None


# -- experiments ------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleConfig:
    n_scenes: int = 50
    base_seed: int = 1000
    image_size: int = 384
    n_objects: int = 8
    novel_frac: float = 0.25
    noise_sigma: float = 0.1
    min_size: int = 40
    max_size: int = 96
    allow_overlap: bool = False
    n_base: int = 10
    n_novel: int = 10
    text_dim: int = 64
    feature_dim: int = 96
    patch_stride: int = 16
    bank_seed: int = 0
    head_seed: int = 0
    layer_indices: tuple = (5, 7, 11)
    layer_noise: tuple = (1.0, 1.0, 1.0)
    layer_blur: tuple = (0, 0, 0)
    layer_semantic: tuple = (1.0, 1.0, 1.0)

    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_scenes)]


@dataclass(frozen=True)
class Variant:
    name: str
    alpha: float = 0.5
    W: float = 0.3
    rrpn: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    ensemble: EnsembleConfig = EnsembleConfig()
    rpn: RpnSimConfig = RpnSimConfig()
    variants: tuple = ()
    k: int = 20
    iou_match: float = 0.5
    nms_iou: float = 0.7
    temperature: float = 0.05

    def to_json(self) -> dict:
        return {
            "ensemble": asdict(self.ensemble),
            "rpn": asdict(self.rpn),
            "variants": [asdict(v) for v in self.variants],
            "k": self.k,
            "iou_match": self.iou_match,
            "nms_iou": self.nms_iou,
            "temperature": self.temperature,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ValidationError("experiment config must be a JSON object")
        known = {"ensemble", "rpn", "variants", "k", "iou_match", "nms_iou", "temperature"}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown experiment config keys: {sorted(extra)}")
        try:
            ens = _build(EnsembleConfig, d.get("ensemble", {}))
            rpn = _build(RpnSimConfig, d.get("rpn", {}))
            variants = tuple(_build(Variant, v) for v in d.get("variants", []))
            cfg = cls(ens, rpn, variants or default_variants(),
                      int(d.get("k", 20)), float(d.get("iou_match", 0.5)),
                      float(d.get("nms_iou", 0.7)), float(d.get("temperature", 0.05)))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"invalid experiment config: {exc}") from exc
        names = [v.name for v in cfg.variants]
        if len(set(names)) != len(names):
            raise ValidationError("variant names must be unique")
        for v in cfg.variants:
            if not (0 <= v.alpha <= 1 and 0 <= v.W <= 1):
                raise ValidationError(f"variant {v.name}: alpha and W must lie in [0, 1]")
        if cfg.k < 1 or cfg.ensemble.n_scenes < 1:
            raise ValidationError("k and n_scenes must be positive")
        return cfg


def _build(klass, d):
    if not isinstance(d, dict):
        raise ValidationError(f"{klass.__name__} section must be an object")
    names = {f.name for f in fields(klass)}
    extra = set(d) - names
    if extra:
        raise ValidationError(f"unknown {klass.__name__} keys: {sorted(extra)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return klass(**kw)


def default_variants() -> tuple:
    return (
        Variant("rpn_only", alpha=1.0, W=0.3, rrpn=False),
        Variant("rrpn_a1.0", alpha=1.0, W=0.3),
        Variant("rrpn_a0.5", alpha=0.5, W=0.3),
        Variant("rrpn_a0.5_W0.0", alpha=0.5, W=0.0),
        Variant("rrpn_a0.5_W1.0", alpha=0.5, W=1.0),
    )


def default_experiment() -> ExperimentConfig:
    return ExperimentConfig(variants=default_variants())


@dataclass
class World:
    """Bank, frozen head and encoder shared by every scene of an ensemble."""

    bank: PromptBank
    encoder: SyntheticEncoder

    @classmethod
    def build(cls, ens: EnsembleConfig) -> "World":
        bank = make_synthetic_bank(ens.text_dim, ens.n_base, ens.n_novel, seed=ens.bank_seed)
        head = make_frozen_head(ens.feature_dim, ens.text_dim, seed=ens.head_seed)
        enc = SyntheticEncoder.from_bank(
            bank, head,
            layer_indices=ens.layer_indices,
            patch_stride=ens.patch_stride,
            layer_noise=ens.layer_noise,
            layer_blur=ens.layer_blur,
            layer_semantic=ens.layer_semantic,
        )
        return cls(bank, enc)

    def pyramid(self, layers, W: float) -> Pyramid:
        cfg = KfpnConfig(self.encoder.head, self.encoder.layer_indices, W,
                         strides_for_encoder(self.encoder.patch_stride))
        return build_pyramid(layers, cfg)


def ensemble_scene(ens: EnsembleConfig, seed: int) -> SyntheticScene:
    return generate_scene(ens.image_size, ens.image_size, ens.n_objects, ens.novel_frac,
                          ens.n_base, ens.n_novel, seed, ens.noise_sigma,
                          ens.min_size, ens.max_size, ens.allow_overlap)


CSV_COLUMNS = ("variant", "alpha", "W", "seed", "recall_base", "recall_novel", "recall_all", "acc")
METRICS = ("recall_base", "recall_novel", "recall_all", "acc")


def run_scene(cfg: ExperimentConfig, world: World, seed: int) -> list[dict]:
    scene = ensemble_scene(cfg.ensemble, seed)
    layers = world.encoder.encode_layers(scene)
    raw = simulate_rpn(scene, cfg.rpn)
    pyramids: dict = {}
    rows = []
    for v in cfg.variants:
        if v.W not in pyramids:
            pyramids[v.W] = world.pyramid(layers, v.W)
        pyr = pyramids[v.W]
        rcfg = RrpnConfig(alpha=v.alpha, nms_iou=cfg.nms_iou, keep_topk=cfg.k,
                          temperature=cfg.temperature)
        kept = rrpn_pipeline(raw, pyr, world.bank, rcfg) if v.rrpn else rpn_only(raw, rcfg)
        rep = eval_recall(kept, scene, cfg.iou_match, cfg.k)
        acc = classification_accuracy(
            classify_kept(kept, pyr, world.bank, cfg.temperature), scene, cfg.iou_match)
        rows.append({
            "variant": v.name, "alpha": v.alpha, "W": v.W, "seed": seed,
            "recall_base": rep.recall_base, "recall_novel": rep.recall_novel,
            "recall_all": rep.recall_all, "acc": acc,
        })
    return rows


def _aggregate(rows: list[dict], cfg: ExperimentConfig) -> dict:
    out = {}
    for v in cfg.variants:
        mine = [r for r in rows if r["variant"] == v.name]
        stats = {"alpha": v.alpha, "W": v.W, "rrpn": v.rrpn, "n": len(mine)}
        for m in METRICS:
            vals = [r[m] for r in mine if r[m] is not None]
            stats[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            stats[f"{m}_std"] = float(np.std(vals)) if vals else None
        out[v.name] = stats
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run every variant on every scene; optionally write report.json / report.csv."""
    world = World.build(cfg.ensemble)
    rows = []
    for seed in cfg.ensemble.seeds():
        rows.extend(run_scene(cfg, world, seed))
    report = {"config": cfg.to_json(), "summary": _aggregate(rows, cfg), "rows": rows}
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in report["rows"]:
        w.writerow({c: ("" if r[c] is None else r[c]) for c in CSV_COLUMNS})
    return buf.getvalue()


def write_report(report: dict, out_dir) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(report_json(report))
    (d / "report.csv").write_text(report_csv(report))


def load_experiment_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config {p} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_json(data)
