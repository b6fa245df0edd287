"""Slow, loop-based reference implementations used as independent oracles."""

import math

import numpy as np


def iou_ref(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if inter > 0 else 0.0


def dense_bilinear(img, out_h, out_w):
    """Align-corners resize, one output pixel at a time."""
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for oy in range(out_h):
        sy = (h - 1) / 2 if out_h == 1 else oy * (h - 1) / (out_h - 1)
        for ox in range(out_w):
            sx = (w - 1) / 2 if out_w == 1 else ox * (w - 1) / (out_w - 1)
            out[:, oy, ox] = sample(img, sy, sx)
    return out


def block_max(img, k):
    c, h, w = img.shape
    out = np.zeros((c, h // k, w // k))
    for y in range(h // k):
        for x in range(w // k):
            out[:, y, x] = img[:, y * k:(y + 1) * k, x * k:(x + 1) * k].reshape(c, -1).max(axis=1)
    return out


def sample(img, y, x):
    """Bilinear read at continuous (y, x) with coordinates clamped to the map."""
    _, h, w = img.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[:, y0, x0] + (1 - fy) * fx * img[:, y0, x1]
            + fy * (1 - fx) * img[:, y1, x0] + fy * fx * img[:, y1, x1])


def _sample_grid(img, ys, xs):
    """Vectorised clamped bilinear reads on the outer product ys x xs."""
    _, h, w = img.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    g = lambda a, b: img[:, a][:, :, b]  # noqa: E731
    return ((1 - fy) * (1 - fx) * g(y0, x0) + (1 - fy) * fx * g(y0, x1)
            + fy * (1 - fx) * g(y1, x0) + fy * fx * g(y1, x1))


def dense_roi_align(img, stride, box, out_h, out_w, n=64):
    """Average of n x n evenly spaced bilinear samples in every bin."""
    img = np.asarray(img, dtype=np.float64)
    fx1, fy1 = box[0] / stride - 0.5, box[1] / stride - 0.5
    fx2, fy2 = box[2] / stride - 0.5, box[3] / stride - 0.5
    bh, bw = (fy2 - fy1) / out_h, (fx2 - fx1) / out_w
    out = np.zeros((img.shape[0], out_h, out_w))
    offs = (np.arange(n) + 0.5) / n
    for i in range(out_h):
        ys = fy1 + (i + offs) * bh
        for j in range(out_w):
            xs = fx1 + (j + offs) * bw
            out[:, i, j] = _sample_grid(img, ys, xs).mean(axis=(1, 2))
    return out


def nms_reference(boxes, scores, thresh):
    """Textbook O(n^2) greedy NMS returning kept indices in keep order."""
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        keep.append(best)
        remaining = [i for i in remaining if i != best and iou_ref(boxes[best], boxes[i]) < thresh]
    return keep


def level_ref(box, canonical=224.0):
    side = math.sqrt((box[2] - box[0]) * (box[3] - box[1]))
    return int(min(6, max(2, math.floor(4 + math.log2(side / canonical)))))
