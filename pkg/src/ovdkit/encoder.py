"""Stand-ins for the frozen image and text encoders.

``SyntheticEncoder`` paints each feature cell with the embedding of the object
covering it (or a background embedding) plus seeded Gaussian noise, which makes
zero-shot recognisability exact at zero noise. ``FileEncoder`` serves
precomputed layers stored as NVT files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nvt
from .errors import ValidationError
from .roi import Box
from .tensorops import FeatureMap, ProjectionHead, l2_normalize

GROUPS = ("foreground", "background", "base", "novel")
REQUIRED_GROUPS = ("foreground", "background")


@dataclass(frozen=True)
class PromptEntry:
    label: str
    embedding: np.ndarray


@dataclass(frozen=True)
class PromptBank:
    dim: int
    groups: dict

    def __post_init__(self):
        groups = {}
        for name in REQUIRED_GROUPS:
            if not self.groups.get(name):
                raise ValidationError(f"prompt bank is missing the {name!r} group")
        for name, entries in self.groups.items():
            if name not in GROUPS:
                raise ValidationError(f"unknown prompt group {name!r}")
            clean = []
            for e in entries:
                v = np.asarray(e.embedding, dtype=np.float64).ravel()
                if v.shape != (self.dim,):
                    raise ValidationError(
                        f"{name}/{e.label!r}: embedding has dim {v.size}, bank dim is {self.dim}"
                    )
                if not np.isfinite(v).all():
                    raise ValidationError(f"{name}/{e.label!r}: non-finite embedding")
                clean.append(PromptEntry(e.label, l2_normalize(v)))
            groups[name] = tuple(clean)
        for name in GROUPS:
            groups.setdefault(name, ())
        object.__setattr__(self, "groups", groups)

    def matrix(self, group: str) -> np.ndarray:
        entries = self.groups[group]
        if not entries:
            return np.zeros((0, self.dim))
        return np.stack([e.embedding for e in entries])

    def labels(self, group: str) -> list[str]:
        return [e.label for e in self.groups[group]]

    def counts(self) -> dict:
        return {g: len(self.groups[g]) for g in GROUPS}

    @property
    def n_base(self) -> int:
        return len(self.groups["base"])

    def class_embeddings(self) -> np.ndarray:
        """Base classes followed by novel classes; scene class ids index this."""
        return np.concatenate([self.matrix("base"), self.matrix("novel")], axis=0)

    def background_embedding(self) -> np.ndarray:
        return l2_normalize(self.matrix("background").mean(axis=0))

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "groups": {
                g: [{"label": e.label, "embedding": [float(x) for x in e.embedding.astype(np.float32)]}
                    for e in self.groups[g]]
                for g in GROUPS
            },
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, data: dict) -> "PromptBank":
        try:
            dim = int(data["dim"])
            raw = data["groups"]
            groups = {
                g: [PromptEntry(str(e["label"]), np.asarray(e["embedding"], dtype=np.float64))
                    for e in entries]
                for g, entries in raw.items()
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed prompt bank: {exc}") from exc
        return cls(dim, groups)


def load_prompt_bank(path) -> PromptBank:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"prompt bank {p} not found")
    return PromptBank.from_json(json.loads(p.read_text()))


def default_prompt_labels() -> dict:
    text = resources.files("ovdkit").joinpath("data/prompts.json").read_text()
    return json.loads(text)


def _random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _separated_units(rng, dim: int, n: int, max_cos: float, max_tries: int = 10_000):
    out = []
    for _ in range(n):
        for _ in range(max_tries):
            v = _random_unit(rng, dim)
            if all(abs(v @ u) <= max_cos for u in out):
                out.append(v)
                break
        else:
            raise ValidationError(
                f"could not place {n} unit vectors in {dim} dims with |cos| <= {max_cos}"
            )
    return out


def make_synthetic_bank(
    dim: int = 512,
    n_base: int = 10,
    n_novel: int = 10,
    seed: int = 0,
    n_foreground: int = 30,
    n_background: int = 30,
    max_cos: float = 0.3,
    subset_size: tuple[int, int] = (2, 3),
    background_spread: float = 0.5,
) -> PromptBank:
    """Seeded bank whose prompts relate to classes the way generic CLIP prompts do.

    Class embeddings (and the background direction) are pairwise separated by
    |cos| <= max_cos. Each foreground prompt is the normalised mean of a small
    class subset, cycling so every class appears in some prompt. Background
    prompts scatter around one background direction.
    """
    labels = default_prompt_labels()
    rng = np.random.default_rng(seed)
    n_cls = n_base + n_novel
    for _ in range(100):
        vecs = _separated_units(rng, dim, n_cls + 1, max_cos)
        classes, anchor = vecs[:n_cls], vecs[n_cls]
        bg = [l2_normalize(anchor + background_spread * _random_unit(rng, dim))
              for _ in range(n_background)]
        bg_mean = l2_normalize(np.mean(bg, axis=0))
        if all(abs(bg_mean @ c) <= max_cos for c in classes):
            break
    else:
        raise ValidationError("could not separate the background direction from the classes")

    fg = []
    lo, hi = subset_size
    for i in range(n_foreground):
        k = int(rng.integers(lo, hi + 1)) if n_cls else 0
        members = {i % n_cls} if n_cls else set()
        while len(members) < min(k, n_cls):
            members.add(int(rng.integers(n_cls)))
        vec = (np.mean([classes[m] for m in sorted(members)], axis=0)
               if members else _random_unit(rng, dim))
        fg.append(l2_normalize(vec))

    def names(pool, n, fallback):
        return [pool[i] if i < len(pool) else f"{fallback} {i}" for i in range(n)]

    groups = {
        "foreground": [PromptEntry(lab, v) for lab, v in
                       zip(names(labels["foreground"], n_foreground, "foreground prompt"), fg)],
        "background": [PromptEntry(lab, v) for lab, v in
                       zip(names(labels["background"], n_background, "background prompt"), bg)],
        "base": [PromptEntry(f"base class {i}", classes[i]) for i in range(n_base)],
        "novel": [PromptEntry(f"novel class {i}", classes[n_base + i]) for i in range(n_novel)],
    }
    return PromptBank(dim, groups)


def make_frozen_head(in_dim: int, out_dim: int, seed: int = 0) -> ProjectionHead:
    """Random projection with orthonormal rows and zero bias (needs in_dim >= out_dim)."""
    if in_dim < out_dim:
        raise ValidationError(f"head needs in_dim >= out_dim, got {in_dim} < {out_dim}")
    rng = np.random.default_rng([seed, 0x4EAD])
    q, _ = np.linalg.qr(rng.standard_normal((in_dim, out_dim)))
    return ProjectionHead(q.T.astype(np.float32), np.zeros(out_dim, dtype=np.float32))


@dataclass(frozen=True)
class SceneObject:
    box: Box
    class_id: int
    is_novel: bool


@dataclass(frozen=True)
class SyntheticScene:
    h: int
    w: int
    objects: tuple
    seed: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValidationError(f"scene size must be positive, got {self.h}x{self.w}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        objs = tuple(self.objects)
        for o in objs:
            b = o.box.check()
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.w or b.y2 > self.h:
                raise ValidationError(f"object box {b.as_list()} leaves the {self.h}x{self.w} image")
            if o.class_id < 0:
                raise ValidationError(f"negative class id {o.class_id}")
        object.__setattr__(self, "objects", objs)

    def to_json(self) -> dict:
        return {
            "h": self.h,
            "w": self.w,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "objects": [{"box": o.box.as_list(), "class_id": o.class_id, "is_novel": o.is_novel}
                        for o in self.objects],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticScene":
        try:
            objs = tuple(
                SceneObject(Box.of(o["box"]), int(o["class_id"]), bool(o["is_novel"]))
                for o in d["objects"]
            )
            return cls(int(d["h"]), int(d["w"]), objs, int(d["seed"]), float(d["noise_sigma"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed scene: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"scene {p} not found")
        return cls.from_json(json.loads(p.read_text()))


def _cell_centers(n: int, stride: int) -> np.ndarray:
    return (np.arange(n) + 0.5) * stride


def _box_blur(field_hwc: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return field_hwc
    k = 2 * radius + 1
    padded = np.pad(field_hwc, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    c = padded.cumsum(axis=0).cumsum(axis=1)
    c = np.pad(c, ((1, 0), (1, 0), (0, 0)))
    h, w = field_hwc.shape[:2]
    s = c[k:k + h, k:k + w] - c[:h, k:k + w] - c[k:k + h, :w] + c[:h, :w]
    return s / (k * k)


@dataclass(frozen=True)
class SyntheticEncoder:
    """Deterministic frozen-encoder stand-in.

    Planted vectors are the class / background text embeddings carried back
    into encoder space through the pseudo-inverse of ``head``, so projecting a
    clean cell recovers the text embedding. Optional per-layer profiles:
    ``layer_noise`` scales the noise, ``layer_blur`` box-blurs the planted
    field (radius in cells) and ``layer_semantic`` s blends object cells as
    s * class + (1 - s) * generic object direction. The defaults leave every
    layer a clean copy of the planted field.
    """

    class_embeddings: np.ndarray
    background_embedding: np.ndarray
    head: ProjectionHead
    layer_indices: tuple = (5, 7, 11)
    patch_stride: int = 16
    layer_noise: Optional[tuple] = None
    layer_blur: Optional[tuple] = None
    layer_semantic: Optional[tuple] = None
    _lift: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cls_emb = np.atleast_2d(np.asarray(self.class_embeddings, dtype=np.float64))
        bg = np.asarray(self.background_embedding, dtype=np.float64).ravel()
        if cls_emb.shape[1] != self.head.out_dim or bg.shape != (self.head.out_dim,):
            raise ValidationError("embeddings must live in the head's output space")
        n_layers = len(self.layer_indices)
        noise = tuple(self.layer_noise) if self.layer_noise is not None else (1.0,) * n_layers
        blur = tuple(self.layer_blur) if self.layer_blur is not None else (0,) * n_layers
        sem = tuple(self.layer_semantic) if self.layer_semantic is not None else (1.0,) * n_layers
        if not (len(noise) == len(blur) == len(sem) == n_layers):
            raise ValidationError("per-layer profile length must match layer_indices")
        if any(not 0.0 <= x <= 1.0 for x in sem):
            raise ValidationError("layer_semantic entries must lie in [0, 1]")
        object.__setattr__(self, "class_embeddings", cls_emb)
        object.__setattr__(self, "background_embedding", bg)
        object.__setattr__(self, "layer_indices", tuple(int(i) for i in self.layer_indices))
        object.__setattr__(self, "layer_noise", noise)
        object.__setattr__(self, "layer_blur", tuple(int(b) for b in blur))
        object.__setattr__(self, "layer_semantic", tuple(float(x) for x in sem))
        w = self.head.weight.astype(np.float64)
        pinv = np.linalg.pinv(w)
        generic = l2_normalize(cls_emb.mean(axis=0))
        planted = np.concatenate([cls_emb, bg[None, :], generic[None, :]], axis=0)
        object.__setattr__(self, "_lift", (planted - self.head.bias.astype(np.float64)) @ pinv.T)

    @classmethod
    def from_bank(cls, bank: PromptBank, head: Optional[ProjectionHead] = None, **kw):
        head = head if head is not None else ProjectionHead.identity(bank.dim)
        return cls(bank.class_embeddings(), bank.background_embedding(), head, **kw)

    @property
    def feature_dim(self) -> int:
        return self.head.in_dim

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]

    def planted_vector(self, class_id: Optional[int]) -> np.ndarray:
        """Encoder-space vector for a class (None for background)."""
        return self._lift[self.n_classes if class_id is None else class_id]

    def grid_size(self, scene: SyntheticScene) -> tuple[int, int]:
        s = self.patch_stride
        if scene.h % s or scene.w % s:
            raise ValidationError(
                f"scene {scene.h}x{scene.w} is not divisible by patch stride {s}"
            )
        return scene.h // s, scene.w // s

    def label_grid(self, scene: SyntheticScene) -> np.ndarray:
        """Class id per cell, -1 for background; later objects paint over earlier ones."""
        gh, gw = self.grid_size(scene)
        cy = _cell_centers(gh, self.patch_stride)
        cx = _cell_centers(gw, self.patch_stride)
        grid = np.full((gh, gw), -1, dtype=np.int64)
        for o in scene.objects:
            if o.class_id >= self.n_classes:
                raise ValidationError(f"class id {o.class_id} outside the {self.n_classes} classes")
            ys = (cy >= o.box.y1) & (cy < o.box.y2)
            xs = (cx >= o.box.x1) & (cx < o.box.x2)
            grid[np.ix_(ys, xs)] = o.class_id
        return grid

    def planted_field(self, scene: SyntheticScene, semantic: float = 1.0) -> np.ndarray:
        grid = self.label_grid(scene)
        idx = np.where(grid < 0, self.n_classes, grid)
        f = self._lift[idx]  # (gh, gw, C)
        if semantic < 1.0:
            obj = grid >= 0
            f = f.copy()
            f[obj] = semantic * f[obj] + (1.0 - semantic) * self._lift[self.n_classes + 1]
        return f

    def _noise(self, scene: SyntheticScene, layer: int, shape) -> np.ndarray:
        rng = np.random.default_rng([scene.seed, layer])
        return rng.standard_normal(shape)

    def encode_layers(self, scene: SyntheticScene) -> list[FeatureMap]:
        maps = []
        profile = zip(self.layer_indices, self.layer_noise, self.layer_blur, self.layer_semantic)
        for layer, mult, radius, sem in profile:
            f = _box_blur(self.planted_field(scene, sem), radius)
            if scene.noise_sigma > 0 and mult > 0:
                f = f + (scene.noise_sigma * mult) * self._noise(scene, layer, f.shape)
            maps.append(FeatureMap(np.transpose(f, (2, 0, 1))))
        return maps

    def encode_crop(self, scene: SyntheticScene, box: Box) -> np.ndarray:
        """Unit text-space embedding of a region: mean of covered cells, projected.

        Uses the un-blurred planted field with the top layer's noise, standing
        in for re-encoding the cropped pixels.
        """
        box.check()
        if box.x1 < 0 or box.y1 < 0 or box.x2 > scene.w or box.y2 > scene.h:
            raise ValidationError(f"crop {box.as_list()} leaves the image")
        planted = self.planted_field(scene)
        top = self.layer_indices[-1]
        if scene.noise_sigma > 0 and self.layer_noise[-1] > 0:
            f = planted + (scene.noise_sigma * self.layer_noise[-1]) * self._noise(scene, top, planted.shape)
        else:
            f = planted
        return _crop_mean_projected(f, self.patch_stride, box, self.head)


def _crop_mean_projected(field_hwc: np.ndarray, stride: int, box: Box, head: ProjectionHead):
    gh, gw = field_hwc.shape[:2]
    cy, cx = _cell_centers(gh, stride), _cell_centers(gw, stride)
    ys = (cy >= box.y1) & (cy < box.y2)
    xs = (cx >= box.x1) & (cx < box.x2)
    if not ys.any() or not xs.any():
        raise ValidationError(f"crop {box.as_list()} covers no cell centre")
    mean = field_hwc[np.ix_(ys, xs)].reshape(-1, field_hwc.shape[2]).mean(axis=0)
    vec = head.weight.astype(np.float64) @ mean + head.bias.astype(np.float64)
    return l2_normalize(vec)


LAYER_MANIFEST = "layers.json"


def save_layers(directory, maps: Sequence[FeatureMap], layer_indices, patch_stride: int) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for idx, m in zip(layer_indices, maps):
        name = f"layer_{int(idx):02d}.nvt"
        nvt.save(d / name, m.data)
        files.append({"layer": int(idx), "file": name})
    meta = {"patch_stride": int(patch_stride), "layers": files}
    (d / LAYER_MANIFEST).write_text(json.dumps(meta, indent=2))


@dataclass(frozen=True)
class FileEncoder:
    """Serves precomputed encoder layers from a directory of NVT files."""

    directory: Path
    head: Optional[ProjectionHead] = None

    def _meta(self) -> dict:
        p = Path(self.directory) / LAYER_MANIFEST
        if not p.exists():
            raise ValidationError(f"{p} not found")
        return json.loads(p.read_text())

    @property
    def layer_indices(self) -> tuple:
        return tuple(e["layer"] for e in self._meta()["layers"])

    @property
    def patch_stride(self) -> int:
        return int(self._meta()["patch_stride"])

    @property
    def feature_dim(self) -> int:
        return self.encode_layers()[0].channels

    def encode_layers(self, scene: Optional[SyntheticScene] = None) -> list[FeatureMap]:
        meta = self._meta()
        maps = [FeatureMap(nvt.load(Path(self.directory) / e["file"])) for e in meta["layers"]]
        shapes = {m.shape for m in maps}
        if len(shapes) != 1:
            raise ValidationError(f"stored layers differ in shape: {sorted(shapes)}")
        if scene is not None:
            s = int(meta["patch_stride"])
            if scene.h % s or scene.w % s:
                raise ValidationError(f"scene {scene.h}x{scene.w} not divisible by stride {s}")
            if (maps[0].height, maps[0].width) != (scene.h // s, scene.w // s):
                raise ValidationError("stored layer size does not match the scene")
        return maps

    def encode_crop(self, scene: SyntheticScene, box: Box) -> np.ndarray:
        if self.head is None:
            raise ValidationError("file-backed crop encoding needs a projection head")
        box.check()
        top = self.encode_layers(scene)[-1]
        f = np.transpose(top.data.astype(np.float64), (1, 2, 0))
        return _crop_mean_projected(f, self.patch_stride, box, self.head)
