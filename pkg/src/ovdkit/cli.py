"""Command-line entry point: ``ovdkit <subcommand> ...``.

Exit codes: 0 on success, 2 on invalid input, 1 on anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import nvt
from .discovery import DiscoveryConfig, build_cache, discover
from .encoder import (
    FileEncoder,
    SyntheticEncoder,
    SyntheticScene,
    load_prompt_bank,
    make_frozen_head,
    make_synthetic_bank,
    save_layers,
)
from .errors import ValidationError
from .harness import (
    RpnSimConfig,
    eval_recall,
    generate_scene,
    load_experiment_config,
    report_json,
    run_experiment,
    simulate_rpn,
)
from .kfpn import KfpnConfig, Pyramid, build_pyramid, strides_for_encoder
from .losses import KINDS, alt_kd_losses, cons_loss, max_rel_err, numeric_grad
from .roi import load_proposals, save_proposals
from .rrpn import RrpnConfig, rrpn_pipeline
from .tensorops import ProjectionHead

ENCODE_MANIFEST = "encode.json"
LAYER_DIR = "layers"
HEAD_FILE = "head.nvt"


def _read_json(path):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p} is not valid JSON: {exc}") from exc


def _load_nvt(path):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{p} not found")
    return nvt.load(p)


def cmd_gen_scene(a):
    scene = generate_scene(a.height, a.width, a.objects, a.novel_frac, a.n_base, a.n_novel,
                           a.seed, a.sigma, a.min_size, a.max_size, a.allow_overlap)
    scene.save(a.out)
    print(json.dumps({"objects": len(scene.objects),
                      "novel": sum(o.is_novel for o in scene.objects)}))


def cmd_make_bank(a):
    bank = make_synthetic_bank(a.dim, a.n_base, a.n_novel, seed=a.seed)
    bank.save(a.out)
    print(json.dumps(bank.counts()))


def _encoder_from_dir(feats: Path, bank):
    meta = _read_json(feats / ENCODE_MANIFEST)
    w = _load_nvt(feats / HEAD_FILE)
    head = ProjectionHead(w, np.zeros(w.shape[0], dtype=np.float32))
    if meta["backend"] == "synthetic":
        return SyntheticEncoder.from_bank(bank, head, layer_indices=tuple(meta["layers"]),
                                          patch_stride=meta["patch_stride"])
    return FileEncoder(feats / LAYER_DIR, head)


def cmd_encode(a):
    bank = load_prompt_bank(a.bank)
    scene = SyntheticScene.load(a.scene)
    out = Path(a.out)
    if a.backend == "synthetic":
        head = make_frozen_head(a.in_dim, bank.dim, a.head_seed)
        enc = SyntheticEncoder.from_bank(bank, head, patch_stride=a.patch_stride)
        layers, layer_ids, stride = enc.encode_layers(scene), enc.layer_indices, enc.patch_stride
    else:
        if a.source is None:
            raise ValidationError("--backend nvt-dir needs --source")
        src = FileEncoder(Path(a.source))
        layers, layer_ids, stride = src.encode_layers(scene), src.layer_indices, src.patch_stride
        head = make_frozen_head(layers[0].channels, bank.dim, a.head_seed)
    if len(layers) != 3:
        raise ValidationError(f"pyramid needs three encoder layers, got {len(layers)}")
    pyr = build_pyramid(layers, KfpnConfig(head, tuple(layer_ids), a.W, strides_for_encoder(stride)))
    save_layers(out / LAYER_DIR, layers, layer_ids, stride)
    pyr.save(out)
    nvt.save(out / HEAD_FILE, head.weight)
    meta = {"backend": a.backend, "layers": list(layer_ids), "patch_stride": stride,
            "W": a.W, "head_checksum": head.checksum()}
    (out / ENCODE_MANIFEST).write_text(json.dumps(meta, indent=2))
    print(json.dumps({"levels": [[lv.name, lv.stride, list(lv.map.shape)] for lv in pyr.levels]}))


def cmd_simulate_rpn(a):
    scene = SyntheticScene.load(a.scene)
    cfg = RpnSimConfig(n_background=a.n_background, novel_rpn_score=a.novel_rpn_score)
    props = simulate_rpn(scene, cfg)
    save_proposals(a.out, props)
    print(json.dumps({"proposals": len(props)}))


def cmd_build_cache(a):
    scene = SyntheticScene.load(a.scene)
    bank = load_prompt_bank(a.bank)
    feats = Path(a.feats)
    pyr = Pyramid.load(feats)
    props = load_proposals(a.proposals) if a.proposals else simulate_rpn(scene)
    gt_base = [o.box for o in scene.objects if not o.is_novel]
    cfg = DiscoveryConfig(temperature=a.temperature, capacity=a.capacity)
    found = discover(pyr, props, gt_base, bank, cfg)
    enc = _encoder_from_dir(feats, bank)
    size = (scene.h, scene.w)
    cache = build_cache(enc, scene, found, size, size, a.image_id, a.capacity)
    cache.save(a.out)
    print(json.dumps({"candidates": len(cache)}))


def cmd_rerank(a):
    base = _read_json(a.config) if a.config else {}
    flags = {"alpha": a.alpha, "nms_iou": a.nms_iou, "keep_topk": a.topk,
             "temperature": a.temperature}
    base.update({k: v for k, v in flags.items() if v is not None})
    try:
        cfg = RrpnConfig(**base)
    except TypeError as exc:
        raise ValidationError(f"invalid rerank config: {exc}") from exc
    kept = rrpn_pipeline(load_proposals(a.proposals), Pyramid.load(a.pyramid),
                         load_prompt_bank(a.bank), cfg)
    save_proposals(a.out, kept)
    print(json.dumps({"kept": len(kept), "config": asdict(cfg)}))


def cmd_eval_recall(a):
    rep = eval_recall(load_proposals(a.kept), SyntheticScene.load(a.scene), a.iou, a.k)
    d = rep.to_json()
    if not a.matches:
        d.pop("matches")
    print(json.dumps(d, indent=2))


def cmd_losses(a):
    roi = _load_nvt(a.roi).astype(np.float64)
    other = _load_nvt(a.cached).astype(np.float64)
    if a.kind == "cons":
        if a.labels is None:
            raise ValidationError("--kind cons needs --labels")
        labels = np.asarray(_read_json(a.labels), dtype=np.int64)

        def fn(x):
            return cons_loss(x, other, labels, a.temperature)
    else:
        def fn(x):
            return alt_kd_losses(x, other, a.kind, a.beta)
    value, grad = fn(roi)
    fd = numeric_grad(lambda x: fn(x)[0], roi, a.fd_step)
    digest = hashlib.sha256(np.ascontiguousarray(grad, dtype="<f8").tobytes()).hexdigest()
    print(json.dumps({"kind": a.kind, "value": value, "grad_checksum": digest,
                      "fd_max_rel_err": max_rel_err(grad, fd)}))


def cmd_experiment(a):
    cfg = load_experiment_config(a.config)
    report = run_experiment(cfg, a.out)
    if a.out is None:
        print(report_json(report))
    else:
        print(json.dumps(report["summary"], indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ovdkit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a seeded synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--novel-frac", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=384)
    p.add_argument("--width", type=int, default=384)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--n-base", type=int, default=10)
    p.add_argument("--n-novel", type=int, default=10)
    p.add_argument("--min-size", type=int, default=40)
    p.add_argument("--max-size", type=int, default=96)
    p.add_argument("--allow-overlap", action="store_true")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("make-bank", help="write a seeded synthetic prompt bank")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--n-base", type=int, default=10)
    p.add_argument("--n-novel", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_bank)

    p = sub.add_parser("encode", help="encode a scene and build its feature pyramid")
    p.add_argument("--scene", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=("synthetic", "nvt-dir"), default="synthetic")
    p.add_argument("--source", help="directory of precomputed layers (nvt-dir backend)")
    p.add_argument("--in-dim", type=int, default=96, help="encoder feature width")
    p.add_argument("--head-seed", type=int, default=0)
    p.add_argument("--patch-stride", type=int, default=16)
    p.add_argument("--W", type=float, default=0.3, help="top-down fusion weight")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("simulate-rpn", help="write stand-in RPN proposals for a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-background", type=int, default=150)
    p.add_argument("--novel-rpn-score", type=float, default=0.25)
    p.set_defaults(func=cmd_simulate_rpn)

    p = sub.add_parser("build-cache", help="discover latent novel objects and cache them")
    p.add_argument("--scene", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--feats", required=True, help="output directory of `encode`")
    p.add_argument("--proposals", help="proposal JSON (default: simulated RPN)")
    p.add_argument("--out", required=True)
    p.add_argument("--capacity", type=int, default=100)
    p.add_argument("--temperature", type=float, default=0.05)
    p.add_argument("--image-id", default="image")
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("rerank", help="NMS, score fusion and top-k re-ranking")
    p.add_argument("--proposals", required=True)
    p.add_argument("--pyramid", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON with any of alpha, nms_iou, keep_topk, temperature")
    p.add_argument("--alpha", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--nms-iou", type=float)
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval-recall", help="recall@k of kept proposals")
    p.add_argument("--kept", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--matches", action="store_true", help="include the per-object table")
    p.set_defaults(func=cmd_eval_recall)

    p = sub.add_parser("losses", help="loss value plus a finite-difference gradient check")
    p.add_argument("--roi", required=True)
    p.add_argument("--cached", required=True,
                   help="cached features, or class embeddings for --kind cons")
    p.add_argument("--kind", choices=KINDS + ("cons",), default="l2")
    p.add_argument("--labels", help="JSON list of class indices (cons)")
    p.add_argument("--temperature", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("experiment", help="run an ablation sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
