"""Corpus loading, synthetic corpus generation and stratified fold assignment."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from pix2graph.errors import ValidationError

MANIFEST_COLUMNS = ["id", "image_path", "mask_path", "dx"]
HAM10000_CLASSES = ("akiec", "bcc", "bkl", "df", "mel", "nv", "vasc")
NORMAL_CLASS = "nv"


@dataclass(frozen=True)
class ImageRecord:
    id: str
    image_path: Path
    mask_path: Path | None
    dx: str

    @property
    def is_anomalous(self) -> bool:
        return self.dx != NORMAL_CLASS


@dataclass
class ImageBuffer:
    """8-bit RGB raster with an optional lesion mask.

    ``valid`` marks pixels that downstream stages may look at; ``None`` means
    every pixel is valid. Masked pipelines set it to the lesion region.
    """

    pixels: np.ndarray
    mask: np.ndarray | None = None
    valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"expected an HxWx3 raster, got shape {px.shape}")
        if px.shape[0] < 2 or px.shape[1] < 2:
            raise ValidationError(f"image must be at least 2x2, got {px.shape[1]}x{px.shape[0]}")
        self.pixels = px.astype(np.uint8, copy=False)
        for name in ("mask", "valid"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr)
            if arr.shape != px.shape[:2]:
                raise ValidationError(f"{name} shape {arr.shape} does not match image {px.shape[:2]}")
            if arr.dtype != bool:
                if not np.isin(arr, (0, 1)).all():
                    raise ValidationError(f"{name} must be binary")
                arr = arr.astype(bool)
            setattr(self, name, arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.pixels.shape[:2], dtype=bool)
        return self.valid

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0


def load_image(record: ImageRecord) -> ImageBuffer:
    """Decode a record's image (and mask, if any) into an :class:`ImageBuffer`."""
    with Image.open(record.image_path) as im:
        pixels = np.asarray(im.convert("RGB"))
    mask = None
    if record.mask_path is not None:
        with Image.open(record.mask_path) as im:
            gray = np.asarray(im.convert("L"))
        if gray.shape != pixels.shape[:2]:
            raise ValidationError(
                f"{record.id}: mask {gray.shape[::-1]} does not match image {pixels.shape[1::-1]}"
            )
        mask = gray >= 128
    return ImageBuffer(pixels, mask=mask)


# --------------------------------------------------------------------------
# manifests


def load_manifest(path: str | os.PathLike) -> list[ImageRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records: list[ImageRecord] = []
    seen: set[str] = set()
    with path.open("r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_COLUMNS:
            raise ValidationError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 or not row[0] or not row[1] or not row[3]:
                raise ValidationError(f"{path}:{lineno}: malformed row {row!r}")
            rid, image_path, mask_path, dx = (c.strip() for c in row)
            if rid in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate id {rid}")
            seen.add(rid)
            records.append(
                ImageRecord(
                    id=rid,
                    image_path=base / image_path,
                    mask_path=(base / mask_path) if mask_path else None,
                    dx=dx,
                )
            )
    return records


def write_manifest(records: Iterable[ImageRecord], path: str | os.PathLike) -> Path:
    """Write records as a manifest CSV; paths under the manifest directory are stored relative."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()

    def rel(p: Path | None) -> str:
        if p is None:
            return ""
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return p.as_posix()

    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            w.writerow([r.id, rel(r.image_path), rel(r.mask_path), r.dx])
    return path


def ham10000_records(
    metadata_csv: str | os.PathLike,
    images_dir: str | os.PathLike,
    masks_dir: str | os.PathLike | None = None,
) -> list[ImageRecord]:
    """Build records from ``HAM10000_metadata.csv`` (columns ``image_id``, ``dx``)."""
    images_dir = Path(images_dir)
    records = []
    with open(metadata_csv, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            iid = row["image_id"].strip()
            mask = Path(masks_dir) / f"{iid}_segmentation.png" if masks_dir else None
            records.append(ImageRecord(iid, images_dir / f"{iid}.jpg", mask, row["dx"].strip()))
    return records


def class_counts(records: Iterable[ImageRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in records:
        counts[r.dx] = counts.get(r.dx, 0) + 1
    return dict(sorted(counts.items()))


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldAssignment:
    n_folds: int
    fold_of: Mapping[str, int] = field(default_factory=dict)

    def test_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.fold_of.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.fold_of.items() if f != fold]


def stratified_folds(labels: Mapping[str, str], n_folds: int, seed: int) -> FoldAssignment:
    """Class-stratified fold assignment.

    Within each class the ids (sorted, then shuffled with ``seed``) are dealt
    round-robin. The starting fold of each class continues where the previous
    class stopped so that total fold sizes also stay balanced.
    """
    if n_folds < 2:
        raise ValidationError(f"n_folds must be >= 2, got {n_folds}")
    if n_folds > len(labels):
        raise ValidationError(f"n_folds={n_folds} exceeds corpus size {len(labels)}")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = {}
    for rid, cls in labels.items():
        by_class.setdefault(cls, []).append(rid)
    fold_of: dict[str, int] = {}
    offset = 0
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        order = rng.permutation(len(ids))
        for i, j in enumerate(order):
            fold_of[ids[j]] = (offset + i) % n_folds
        offset += len(ids)
    return FoldAssignment(n_folds, {rid: fold_of[rid] for rid in labels})


# --------------------------------------------------------------------------
# synthetic corpus

ANOMALY_KINDS = ("color", "border", "texture")
_ANOMALY_DX = {"color": "mel", "border": "bcc", "texture": "bkl"}


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _skin(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = np.array([222.0, 182.0, 160.0]) + rng.normal(0.0, 6.0, 3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gy, gx = rng.uniform(-0.15, 0.15, 2)
    shade = 1.0 + gy * (yy / h - 0.5) + gx * (xx / w - 0.5)
    img = base[None, None, :] * shade[..., None]
    return img + rng.normal(0.0, 3.0, (h, w, 3))


def _normal_lesion(rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    cy = h / 2 + rng.uniform(-0.08, 0.08) * h
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    ry = rng.uniform(0.20, 0.30) * h
    rx = rng.uniform(0.20, 0.30) * w
    mask = _ellipse(h, w, cy, cx, ry, rx, rng.uniform(0, np.pi))
    color = np.array([168.0, 118.0, 96.0]) + rng.normal(0.0, 6.0, 3)
    return mask, color


def _render(
    rng: np.random.Generator, h: int, w: int, kind: str | None
) -> tuple[np.ndarray, np.ndarray, float]:
    """Return (pixels, lesion mask, anomaly strength in [0, 1])."""
    img = _skin(rng, h, w)
    mask, color = _normal_lesion(rng, h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # benign lesions are not flat: a darker patch of random contrast
    py, px = np.nonzero(mask)
    j = rng.integers(len(py))
    blob = _ellipse(h, w, py[j], px[j], rng.uniform(0.06, 0.14) * h, rng.uniform(0.06, 0.14) * w, rng.uniform(0, np.pi))
    base = np.broadcast_to(color, (h, w, 3)) - rng.uniform(0.0, 30.0) * blob[..., None]

    if kind is None:
        img[mask] = base[mask] + rng.normal(0.0, 3.0, (int(mask.sum()), 3))
        return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask, 0.0

    strength = float(rng.uniform(0.15, 1.0))
    if kind == "color":
        # several differently colored cells inside the lesion
        palette = np.array([[70.0, 45.0, 40.0], [110.0, 120.0, 150.0], [190.0, 80.0, 80.0], [40.0, 30.0, 30.0]])
        n_cells = int(rng.integers(3, 6))
        pick = rng.choice(len(py), size=n_cells, replace=False)
        seeds = np.stack([py[pick], px[pick]], axis=1).astype(np.float64)
        d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
        cell = np.argmin(d, axis=-1)
        cols = palette[rng.integers(0, len(palette), n_cells)] + rng.normal(0.0, 10.0, (n_cells, 3))
        cols[0] = color
        target = cols[cell[mask]] + rng.normal(0.0, 8.0, (int(mask.sum()), 3))
    elif kind == "border":
        cy, cx = np.array([h, w], dtype=np.float64) / 2 + rng.uniform(-0.05, 0.05, 2) * np.array([h, w])
        ang = np.arctan2(yy - cy, xx - cx)
        r = np.hypot((yy - cy) / h, (xx - cx) / w)
        radius = 0.25 + sum(
            rng.uniform(0.03, 0.07) * strength * np.cos(k * ang + rng.uniform(0, 2 * np.pi)) for k in (3, 5, 7)
        )
        mask = r <= radius
        dark = color * rng.uniform(0.55, 0.7)
        t = np.clip(r / np.maximum(radius, 1e-6), 0, 1)[mask]
        target = dark + (color - dark) * t[:, None] + rng.normal(0.0, 9.0, (int(mask.sum()), 3))
    elif kind == "texture":
        n_blobs = int(rng.integers(3, 6))
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(n_blobs):
            mask |= _ellipse(
                h, w,
                rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w,
                rng.uniform(0.08, 0.16) * h, rng.uniform(0.08, 0.16) * w,
                rng.uniform(0, np.pi),
            )
        n = int(mask.sum())
        speckle = rng.random(n) < 0.35
        target = np.where(speckle[:, None], color * 0.45, color) + rng.normal(0.0, 10.0, (n, 3))
    else:
        raise ValidationError(f"unknown anomaly kind {kind!r}")
    benign = base[mask] + rng.normal(0.0, 3.0, (int(mask.sum()), 3))
    img[mask] = benign + strength * (target - benign)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask, strength


def synthesize_corpus(
    out_dir: str | os.PathLike,
    n_normal: int,
    n_anomalous: int,
    width: int = 96,
    height: int = 72,
    seed: int = 7,
) -> list[ImageRecord]:
    """Write a synthetic lesion corpus (PNG images, PNG masks, ``manifest.csv``).

    Normal images show an elliptical lesion with a faint darker patch. Anomalies
    cycle through three generators (multi-colored cells, irregular dark borders,
    speckled multi-blob lesions) whose appearance is blended with a benign
    lesion by a random strength in [0.15, 1]. Output is byte-identical for identical arguments.
    A ``synth_meta.json`` sidecar records the generator kind and the lesion pixel
    count and anomaly strength of every image.
    """
    if n_normal < 0 or n_anomalous < 0:
        raise ValidationError("counts must be >= 0")
    if width < 32 or height < 32:
        raise ValidationError(f"width and height must be >= 32, got {width}x{height}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    records: list[ImageRecord] = []
    meta: dict[str, dict] = {}
    for i in range(n_normal + n_anomalous):
        kind = None if i < n_normal else ANOMALY_KINDS[(i - n_normal) % len(ANOMALY_KINDS)]
        rng = np.random.default_rng([seed, i])
        img, mask, strength = _render(rng, height, width, kind)
        rid = f"SYN_{i:05d}"
        ipath = out / "images" / f"{rid}.png"
        mpath = out / "masks" / f"{rid}_segmentation.png"
        Image.fromarray(img, mode="RGB").save(ipath, format="PNG")
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(mpath, format="PNG")
        dx = NORMAL_CLASS if kind is None else _ANOMALY_DX[kind]
        records.append(ImageRecord(rid, ipath, mpath, dx))
        meta[rid] = {"kind": kind or "normal", "lesion_pixels": int(mask.sum()), "strength": round(strength, 6)}

    write_manifest(records, out / "manifest.csv")
    with (out / "synth_meta.json").open("w", encoding="utf-8") as f:
        json.dump(
            {"n_normal": n_normal, "n_anomalous": n_anomalous, "width": width,
             "height": height, "seed": seed, "images": meta},
            f, indent=1, sort_keys=True,
        )
        f.write("\n")
    return load_manifest(out / "manifest.csv")
