"""Dense-array primitives shared by every other module.

Feature maps are stored channel-first (C, H, W) as float32. Reductions and
dot products accumulate in float64 and are cast back on the way out.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValidationError(f"feature map must be (C, H, W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValidationError(f"feature map has a zero-sized axis: {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise ValidationError("feature map contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, channels: int, height: int, width: int, values) -> "FeatureMap":
        flat = np.asarray(values, dtype=np.float32).ravel()
        if flat.size != channels * height * width:
            raise ValidationError(
                f"expected {channels * height * width} values, got {flat.size}"
            )
        return cls(flat.reshape(channels, height, width))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def flat(self) -> np.ndarray:
        """Row-major view of length C*H*W."""
        return self.data.reshape(-1)


@dataclass(frozen=True)
class ProjectionHead:
    """Frozen per-pixel affine map from in_dim to out_dim channels."""

    weight: np.ndarray
    bias: np.ndarray
    frozen: bool = field(default=True, init=False)

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float32)
        b = np.array(self.bias, dtype=np.float32).ravel()
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValidationError(
                f"head weight must be (out, in) and bias (out,), got {w.shape} and {b.shape}"
            )
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValidationError("head parameters contain non-finite values")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.weight.tobytes())
        h.update(self.bias.tobytes())
        return h.hexdigest()

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls(np.eye(dim, dtype=np.float32), np.zeros(dim, dtype=np.float32))


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align-corners interpolation weights, shape (n_out, n_in)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(int)
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(fmap: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    """Resize spatially with align-corners bilinear interpolation.

    Corner pixels of input and output coincide. An output axis of length 1
    samples the input center.
    """
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"output size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (fmap.height, fmap.width):
        return fmap
    ry = _resize_matrix(fmap.height, out_h)
    rx = _resize_matrix(fmap.width, out_w)
    out = np.einsum("yh,chw,xw->cyx", ry, fmap.data.astype(np.float64), rx, optimize=True)
    return FeatureMap(out.astype(np.float32))


def max_pool2(fmap: FeatureMap) -> FeatureMap:
    """2x2 max pooling with stride 2."""
    c, h, w = fmap.shape
    if h % 2 or w % 2:
        raise ValidationError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    blocks = fmap.data.reshape(c, h // 2, 2, w // 2, 2)
    return FeatureMap(blocks.max(axis=(2, 4)))


def project(fmap: FeatureMap, head: ProjectionHead) -> FeatureMap:
    if fmap.channels != head.in_dim:
        raise ValidationError(
            f"channel mismatch: map has {fmap.channels}, head expects {head.in_dim}"
        )
    out = np.einsum(
        "oc,chw->ohw",
        head.weight.astype(np.float64),
        fmap.data.astype(np.float64),
        optimize=True,
    )
    out += head.bias.astype(np.float64)[:, None, None]
    return FeatureMap(out.astype(np.float32))


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise ValidationError("cannot normalize a zero-norm vector")
    return v / n


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity of a zero-norm vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def cosine_matrix(vecs, refs) -> np.ndarray:
    """Cosine similarity of each row of ``vecs`` against each row of ``refs``."""
    vecs = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    nv = np.linalg.norm(vecs, axis=1)
    nr = np.linalg.norm(refs, axis=1)
    if (nv == 0).any() or (nr == 0).any():
        raise ValidationError("cosine similarity of a zero-norm vector is undefined")
    return (vecs / nv[:, None]) @ (refs / nr[:, None]).T


def tempered_softmax(scores, temperature: float) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValidationError("softmax of an empty vector")
    if not temperature > 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    if not np.isfinite(s).all():
        raise ValidationError("softmax scores must be finite")
    z = (s - s.max()) / temperature
    e = np.exp(z)
    return e / e.sum()
