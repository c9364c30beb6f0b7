"""Patch-grid and SLICO superpixel segmentation with optional lesion masks."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import rgb2lab

from pix2graph.dataset import ImageBuffer
from pix2graph.errors import ValidationError

_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class Segment:
    size: int
    centroid: tuple[float, float]  # (x, y) in pixel units
    bbox: tuple[int, int, int, int]  # (y0, x0, y1, x1), half-open


@dataclass
class SegmentMap:
    """Per-pixel segment labels; ``-1`` marks excluded pixels."""

    labels: np.ndarray
    segments: list[Segment]

    @property
    def n(self) -> int:
        return len(self.segments)

    def region(self, i: int) -> np.ndarray:
        return self.labels == i

    def centroids(self) -> np.ndarray:
        return np.array([s.centroid for s in self.segments], dtype=np.float64).reshape(-1, 2)

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "SegmentMap":
        labels = np.asarray(labels, dtype=np.int32)
        n = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
        ys, xs = np.nonzero(labels >= 0)
        lab = labels[ys, xs]
        sizes = np.bincount(lab, minlength=n)
        if n and (sizes == 0).any():
            raise ValidationError(f"segment indices must be contiguous; empty: {np.flatnonzero(sizes == 0)}")
        cx = np.bincount(lab, weights=xs, minlength=n) / np.maximum(sizes, 1)
        cy = np.bincount(lab, weights=ys, minlength=n) / np.maximum(sizes, 1)
        boxes = ndimage.find_objects(labels + 1, max_label=n)
        segments = [
            Segment(int(sizes[i]), (float(cx[i]), float(cy[i])),
                    (boxes[i][0].start, boxes[i][1].start, boxes[i][0].stop, boxes[i][1].stop))
            for i in range(n)
        ]
        return cls(labels, segments)

    def save(self, path: str | os.PathLike) -> tuple[Path, Path]:
        """Write a 16-bit PNG raster (``label + 1``, 0 = excluded) and a JSON sidecar."""
        path = Path(path)
        raster = (self.labels.astype(np.int64) + 1).astype(np.uint16)
        Image.fromarray(raster).save(path.with_suffix(".png"), format="PNG")
        side = path.with_suffix(".json")
        with side.open("w", encoding="utf-8") as f:
            json.dump(
                {"n": self.n, "segments": [
                    {"size": s.size, "centroid": list(s.centroid), "bbox": list(s.bbox)} for s in self.segments
                ]},
                f, indent=1,
            )
        return path.with_suffix(".png"), side

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SegmentMap":
        with Image.open(Path(path).with_suffix(".png")) as im:
            raster = np.asarray(im).astype(np.int32)
        return cls.from_labels(raster - 1)


def apply_mask(image: ImageBuffer, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, ImageBuffer]:
    """Split into lesion / background pixel sets and return a buffer restricted to the lesion."""
    mask = np.asarray(mask)
    if mask.shape != (image.height, image.width):
        raise ValidationError(f"mask shape {mask.shape} does not match image {(image.height, image.width)}")
    lesion = mask.astype(bool)
    if not lesion.any():
        raise ValidationError("lesion mask is empty")
    return lesion, ~lesion, ImageBuffer(image.pixels, mask=lesion, valid=lesion)


# --------------------------------------------------------------------------
# patch grid


def patch_segment(image: ImageBuffer, rows: int, cols: int) -> SegmentMap:
    """Rectangular ``rows x cols`` grid; the last row/column absorbs the remainder.

    Excluded pixels keep label -1 and patches without any valid pixel are dropped.
    """
    if rows <= 0 or cols <= 0:
        raise ValidationError(f"rows and cols must be positive, got {rows}x{cols}")
    h, w = image.height, image.width
    if rows > h or cols > w:
        raise ValidationError(f"{rows}x{cols} grid does not fit a {w}x{h} image")
    ph, pw = h // rows, w // cols
    r = np.minimum(np.arange(h) // ph, rows - 1)
    c = np.minimum(np.arange(w) // pw, cols - 1)
    labels = (r[:, None] * cols + c[None, :]).astype(np.int32)
    if image.valid is not None:
        labels[~image.valid] = -1
        labels = _compact(labels)
    return SegmentMap.from_labels(labels)


def _compact(labels: np.ndarray) -> np.ndarray:
    """Renumber non-negative labels to 0..n-1 preserving their order."""
    out = np.full_like(labels, -1)
    keep = labels >= 0
    uniq, inv = np.unique(labels[keep], return_inverse=True)
    out[keep] = inv.astype(labels.dtype)
    return out


# --------------------------------------------------------------------------
# SLICO


def _grid_shape(n: int, h: float, w: float) -> tuple[int, int]:
    ny = max(1, int(round(math.sqrt(n * h / w))))
    nx = max(1, int(round(n / ny)))
    return ny, nx


def _gradient(lab: np.ndarray) -> np.ndarray:
    p = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return (gx * gx).sum(-1) + (gy * gy).sum(-1)


def _initial_centers(valid: np.ndarray, n_target: int) -> np.ndarray:
    """Grid seeds (y, x). Masked images get seeds on the lesion's bounding box,
    snapped to the mask and spread with a few Lloyd steps over the valid pixels."""
    h, w = valid.shape
    if valid.all():
        ny, nx = _grid_shape(n_target, h, w)
        ys = (np.arange(ny) + 0.5) * h / ny - 0.5
        xs = (np.arange(nx) + 0.5) * w / nx - 0.5
        return np.array([(y, x) for y in ys for x in xs], dtype=np.float64)

    vy, vx = np.nonzero(valid)
    y0, y1, x0, x1 = vy.min(), vy.max() + 1, vx.min(), vx.max() + 1
    bh, bw = y1 - y0, x1 - x0
    k = min(n_target, vy.size)
    ny, nx = _grid_shape(k, bh, bw)
    grid = np.array(
        [(y0 + (i + 0.5) * bh / ny, x0 + (j + 0.5) * bw / nx) for i in range(ny) for j in range(nx)]
    )
    pts = np.stack([vy, vx], axis=1).astype(np.float64)
    # snap each grid point to its nearest valid pixel, dropping duplicates
    nearest = np.argmin(((grid[:, None, :] - pts[None, :, :]) ** 2).sum(-1), axis=1)
    _, first = np.unique(nearest, return_index=True)
    centers = pts[nearest[np.sort(first)]]
    for _ in range(5):
        assign = np.argmin(((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1), axis=1)
        counts = np.bincount(assign, minlength=len(centers))
        for d in range(2):
            s = np.bincount(assign, weights=pts[:, d], minlength=len(centers))
            centers[:, d] = np.where(counts > 0, s / np.maximum(counts, 1), centers[:, d])
    return np.rint(centers)


def _perturb(centers: np.ndarray, grad: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Move each seed to the lowest-gradient pixel of its 3x3 neighborhood.

    A seed that is already at a minimum keeps its (possibly fractional) position.
    """
    h, w = grad.shape
    out = centers.copy()
    for i, (cy, cx) in enumerate(np.rint(centers).astype(int)):
        best = (grad[cy, cx], None) if valid[cy, cx] else (np.inf, None)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                y, x = cy + dy, cx + dx
                if 0 <= y < h and 0 <= x < w and valid[y, x] and grad[y, x] < best[0]:
                    best = (grad[y, x], (y, x))
        if best[1] is not None:
            out[i] = best[1]
    return out


def slico_segment(image: ImageBuffer, n_target: int = 20, max_iters: int = 10) -> SegmentMap:
    """SLIC-zero superpixels in CIELAB + xy.

    Per cluster the color term is normalized by the largest color distance seen
    so far (starting at 10), the spatial term by the grid step ``S``. Afterwards
    every segment is made 4-connected: stray components and fragments smaller
    than ``S**2 / 4`` join the neighbor with which they share the longest border.
    """
    if n_target < 1:
        raise ValidationError(f"n_target must be >= 1, got {n_target}")
    valid = image.valid_mask()
    area = int(valid.sum())
    if area == 0:
        raise ValidationError("image has no valid pixels")
    h, w = valid.shape
    lab = rgb2lab(image.as_float())
    step = math.sqrt(area / n_target)

    seeds = _perturb(_initial_centers(valid, n_target), _gradient(lab), valid)
    k = len(seeds)
    sy, sx = np.rint(seeds[:, 0]).astype(int), np.rint(seeds[:, 1]).astype(int)
    centers = np.concatenate([lab[sy, sx], seeds], axis=1)  # L, a, b, y, x
    max_color = np.full(k, 10.0)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.full((h, w), -1, dtype=np.int32)
    inv_s2 = 1.0 / (step * step)
    for _ in range(max_iters):
        dist = np.full((h, w), np.inf)
        color2 = np.zeros((h, w))
        new = np.full((h, w), -1, dtype=np.int32)
        for i in range(k):
            cy, cx = centers[i, 3], centers[i, 4]
            y0, y1 = max(0, int(cy - step)), min(h, int(cy + step) + 1)
            x0, x1 = max(0, int(cx - step)), min(w, int(cx + step) + 1)
            win = (slice(y0, y1), slice(x0, x1))
            dc2 = ((lab[win] - centers[i, :3]) ** 2).sum(-1)
            ds2 = (yy[win] - cy) ** 2 + (xx[win] - cx) ** 2
            d = dc2 / (max_color[i] ** 2) + ds2 * inv_s2
            better = (d < dist[win]) & valid[win]
            dist[win][better] = d[better]
            color2[win][better] = dc2[better]
            new[win][better] = i
        assigned = new >= 0
        lab_ids = new[assigned]
        counts = np.bincount(lab_ids, minlength=k)
        peak = np.zeros(k)
        np.maximum.at(peak, lab_ids, np.sqrt(color2[assigned]))
        max_color = np.maximum(max_color, peak)
        feats = np.concatenate([lab[assigned], yy[assigned, None], xx[assigned, None]], axis=1)
        for d in range(5):
            s = np.bincount(lab_ids, weights=feats[:, d], minlength=k)
            centers[:, d] = np.where(counts > 0, s / np.maximum(counts, 1), centers[:, d])
        if np.array_equal(new, labels):
            break
        labels = new

    labels = _enforce_connectivity(labels, valid, step * step / 4.0)
    return SegmentMap.from_labels(labels)


def _enforce_connectivity(labels: np.ndarray, valid: np.ndarray, min_size: float) -> np.ndarray:
    h, w = labels.shape
    comps: list[tuple[int, np.ndarray, bool]] = []  # (label, flat pixel indices, keep)
    for lab_id in np.unique(labels[labels >= 0]):
        cc, n = ndimage.label(labels == lab_id, structure=_FOUR_CONN)
        sizes = np.bincount(cc.ravel())[1:]
        largest = int(np.argmax(sizes)) + 1
        flat = cc.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
        for c in range(1, n + 1):
            idx = order[bounds[c - 1]:bounds[c]]
            comps.append((int(lab_id), idx, c == largest and idx.size >= min_size))
    stray = (labels < 0) & valid
    if stray.any():
        cc, n = ndimage.label(stray, structure=_FOUR_CONN)
        for c in range(1, n + 1):
            comps.append((-1, np.flatnonzero(cc.ravel() == c), False))
    if comps and not any(keep for _, _, keep in comps):
        big = max(range(len(comps)), key=lambda j: (comps[j][0] >= 0, comps[j][1].size))
        comps[big] = (comps[big][0], comps[big][1], True)

    out = np.full(h * w, -1, dtype=np.int32)
    for lab_id, idx, keep in comps:
        if keep:
            out[idx] = lab_id
    pending = sorted((c for c in comps if not c[2]), key=lambda c: (c[1].size, int(c[1][0])))
    next_label = int(labels.max()) + 1 if labels.size else 0
    while pending:
        deferred = []
        for lab_id, idx, _ in pending:
            target = _longest_border(out, idx, h, w)
            if target is None:
                deferred.append((lab_id, idx, False))
            else:
                out[idx] = target
        if len(deferred) == len(pending):
            for _, idx, _ in deferred:  # isolated pieces become segments of their own
                out[idx] = next_label
                next_label += 1
            break
        pending = deferred
    return _relabel_raster_order(out.reshape(h, w))


def _longest_border(out: np.ndarray, idx: np.ndarray, h: int, w: int) -> int | None:
    y, x = np.divmod(idx, w)
    found = []
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = y + dy, x + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        nb = out[ny[ok] * w + nx[ok]]
        found.append(nb[nb >= 0])
    nbs = np.concatenate(found)
    if nbs.size == 0:
        return None
    counts = np.bincount(nbs)
    return int(np.argmax(counts))  # ties resolve to the lowest label


def _relabel_raster_order(labels: np.ndarray) -> np.ndarray:
    flat = labels.ravel()
    keep = flat >= 0
    uniq, first = np.unique(flat[keep], return_index=True)
    order = uniq[np.argsort(first)]
    lut = np.full(int(flat.max()) + 1 if keep.any() else 1, -1, dtype=np.int32)
    lut[order] = np.arange(order.size, dtype=np.int32)
    out = np.full_like(flat, -1)
    out[keep] = lut[flat[keep]]
    return out.reshape(labels.shape)
