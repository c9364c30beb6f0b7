"""Edge construction, virtual nodes, graph assembly and graph files.

Graph JSON (``format_version`` 1)::

    {"format_version": 1, "n": 22, "edges": [[0, 3], ...], "x": [[...], ...],
     "y": -1, "meta": {...}}

``edges`` holds undirected pairs ``u < v`` in lexicographic order. ``y`` follows
the supervision convention: -1 labeled anomaly, 0 unlabeled, 1 labeled normal.

A ``.gbin`` batch file is ``b"GBIN"``, a little-endian ``uint32`` version, a
``uint64`` graph count, ``count + 1`` little-endian ``uint64`` offsets into the
payload, then the concatenated UTF-8 graph JSON documents.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pix2graph.dataset import ImageBuffer, ImageRecord, load_image
from pix2graph.errors import ValidationError
from pix2graph.features import FeatureSet, ImageFeatures, extract, rgb_average
from pix2graph.segmentation import SegmentMap, apply_mask, patch_segment, slico_segment

FORMAT_VERSION = 1
_GBIN_MAGIC = b"GBIN"


class EdgeMethod(str, enum.Enum):
    RAG = "rag"
    KNN_S = "knn_s"
    KNN_SC = "knn_sc"


class Segmentation(str, enum.Enum):
    PATCH = "patch"
    SLICO = "slico"


@dataclass
class AttributedGraph:
    n: int
    edges: np.ndarray
    x: np.ndarray
    y: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.edges = canonical_edges(self.edges)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(self.n, -1)
        if self.y not in (-1, 0, 1):
            raise ValidationError(f"label must be -1, 0 or 1, got {self.y}")
        if self.edges.size and (self.edges.max() >= self.n or self.edges.min() < 0):
            raise ValidationError(f"edge endpoint out of range for n={self.n}")

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def id(self) -> str:
        return self.meta.get("image_id", "")

    @property
    def is_anomalous(self) -> bool:
        return bool(self.meta.get("anomalous", self.y == -1))

    @property
    def virtual_node_ids(self) -> tuple[int, int] | None:
        v = self.meta.get("virtual_nodes")
        return tuple(v) if v else None

    def adjacency_lists(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            adj[u].append(int(v))
            adj[v].append(int(u))
        return adj

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttributedGraph):
            return NotImplemented
        return (
            self.n == other.n
            and self.y == other.y
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.x, other.x)
            and self.meta == other.meta
        )


def canonical_edges(edges: Iterable) -> np.ndarray:
    """Sorted unique undirected pairs with ``u < v``; self-loops are rejected."""
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64).reshape(-1, 2)
    if (arr[:, 0] == arr[:, 1]).any():
        raise ValidationError("self-loops are not allowed")
    arr = np.sort(arr, axis=1)
    if arr.size == 0:
        return arr
    return np.unique(arr, axis=0)


# --------------------------------------------------------------------------
# edges


def build_rag(segments: SegmentMap, connectivity: int = 2) -> np.ndarray:
    """Region adjacency: segments touching within pixel distance ``sqrt(connectivity)``."""
    if connectivity not in (1, 2):
        raise ValidationError(f"connectivity must be 1 or 2, got {connectivity}")
    lab = segments.labels
    h, w = lab.shape
    offsets = [(0, 1), (1, 0)] + ([(1, 1), (1, -1)] if connectivity == 2 else [])
    pairs = []
    for dy, dx in offsets:
        x0, x1 = max(0, -dx), w - max(0, dx)
        a = lab[0:h - dy, x0:x1]
        b = lab[dy:h, x0 + dx:x1 + dx]
        sel = (a >= 0) & (b >= 0) & (a != b)
        pairs.append(np.stack([a[sel], b[sel]], axis=1))
    return canonical_edges(np.concatenate(pairs) if pairs else np.empty((0, 2)))


SPATIAL_WEIGHT = 1.0 / 2.0
COLOR_WEIGHT = 1.0 / 3.0


def spatial_color_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Distance between ``(x, y, r, g, b)`` nodes: spatial terms halved, color terms divided by three."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ds = (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2
    dc = (a[2] - b[2]) ** 2 + (a[3] - b[3]) ** 2 + (a[4] - b[4]) ** 2
    return float(np.sqrt(ds * SPATIAL_WEIGHT + dc * COLOR_WEIGHT))


def build_knn(points: np.ndarray, k: int, weights: Sequence[float] | None = None) -> np.ndarray:
    """Symmetrized k-nearest-neighbor edges under a weighted Euclidean metric.

    Each node picks its ``k`` nearest other nodes; equal distances prefer the
    lower node index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k < 1 or k >= n:
        raise ValidationError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    wts = np.ones(pts.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = (diff * diff * wts).sum(-1)
    idx = np.arange(n)
    edges = []
    for i in range(n):
        order = np.lexsort((idx, d2[i]))
        chosen = [j for j in order if j != i][:k]
        edges.extend((i, j) for j in chosen)
    return canonical_edges(edges)


def knn_points(segments: SegmentMap, mean_rgb255: np.ndarray | None) -> tuple[np.ndarray, np.ndarray | None]:
    cent = segments.centroids()
    if mean_rgb255 is None:
        return cent, None
    return np.concatenate([cent, mean_rgb255], axis=1), np.array([SPATIAL_WEIGHT] * 2 + [COLOR_WEIGHT] * 3)


def add_virtual_nodes(graph: AttributedGraph, lesion: np.ndarray, background: np.ndarray) -> AttributedGraph:
    """Append a lesion hub (linked to every node) and a background node linked to the hub."""
    if graph.virtual_node_ids is not None:
        raise ValidationError("graph already has virtual nodes")
    if graph.n < 1:
        raise ValidationError("graph has no nodes")
    lesion = np.asarray(lesion, dtype=np.float64).ravel()
    background = np.asarray(background, dtype=np.float64).ravel()
    if lesion.size != graph.d or background.size != graph.d:
        raise ValidationError(f"virtual node features must have dimension {graph.d}")
    hub, bg = graph.n, graph.n + 1
    extra = [(i, hub) for i in range(graph.n)] + [(hub, bg)]
    edges = np.concatenate([graph.edges, np.array(extra, dtype=np.int64)])
    meta = dict(graph.meta, virtual_nodes=[hub, bg])
    return AttributedGraph(graph.n + 2, edges, np.vstack([graph.x, lesion, background]), graph.y, meta)


# --------------------------------------------------------------------------
# assembly


@dataclass(frozen=True)
class PipelineConfig:
    segmentation: Segmentation = Segmentation.SLICO
    edges: EdgeMethod = EdgeMethod.RAG
    features: FeatureSet = FeatureSet.COLOR
    mask: bool = False
    virtual_nodes: bool = False
    patch_rows: int = 4
    patch_cols: int = 5
    slico_n: int = 20
    slico_iters: int = 10
    connectivity: int = 2
    k: int = 6

    def __post_init__(self) -> None:
        object.__setattr__(self, "segmentation", Segmentation(self.segmentation))
        object.__setattr__(self, "edges", EdgeMethod(self.edges))
        object.__setattr__(self, "features", FeatureSet(self.features))
        self.validate()

    def validate(self) -> None:
        if self.segmentation is Segmentation.PATCH and self.features is FeatureSet.SHAPE:
            raise ValidationError("shape features are excluded for patch segmentation (not informative on patches)")
        if self.virtual_nodes and not self.mask:
            raise ValidationError("virtual nodes require a lesion mask")
        if self.connectivity not in (1, 2):
            raise ValidationError(f"connectivity must be 1 or 2, got {self.connectivity}")
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("segmentation", "edges", "features"):
            d[key] = d[key].value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def supervision_label(record: ImageRecord) -> int:
    return -1 if record.is_anomalous else 1


def assemble(
    record: ImageRecord,
    config: PipelineConfig,
    image: ImageBuffer | None = None,
    timings: dict[str, float] | None = None,
) -> AttributedGraph:
    """Turn one corpus record into an attributed graph.

    Stage wall-clock seconds are added to ``timings`` under ``io``,
    ``segmentation``, ``features`` and ``edges`` when a dict is passed.
    """
    clock = timings if timings is not None else {}

    def tick(stage: str, t0: float) -> float:
        t1 = time.perf_counter()
        clock[stage] = clock.get(stage, 0.0) + (t1 - t0)
        return t1

    t = time.perf_counter()
    if image is None:
        image = load_image(record)
    t = tick("io", t)

    work = image
    virtual_regions = None
    if config.mask:
        if image.mask is None:
            raise ValidationError(f"{record.id}: configuration needs a mask but the record has none")
        lesion, background, work = apply_mask(image, image.mask)
        if config.virtual_nodes:
            virtual_regions = (lesion, background)
    if config.segmentation is Segmentation.PATCH:
        segments = patch_segment(work, config.patch_rows, config.patch_cols)
    else:
        segments = slico_segment(work, config.slico_n, config.slico_iters)
    t = tick("segmentation", t)

    matrix, virtual = extract(work, segments, config.features, virtual_regions)
    mean_rgb = None
    if config.edges is EdgeMethod.KNN_SC:
        feats = ImageFeatures(work)
        mean_rgb = np.array([rgb_average(feats, segments.region(i)) for i in range(segments.n)]) * 255.0
    t = tick("features", t)

    k_used = None
    if config.edges is EdgeMethod.RAG:
        edges = build_rag(segments, config.connectivity)
    elif segments.n < 2:
        edges = np.empty((0, 2), dtype=np.int64)
    else:
        k_used = min(config.k, segments.n - 1)
        pts, wts = knn_points(segments, mean_rgb)
        edges = build_knn(pts, k_used, wts)
    meta = {
        "image_id": record.id,
        "dx": record.dx,
        "anomalous": record.is_anomalous,
        "config_hash": config.config_hash(),
        "n_segments": segments.n,
        "features": config.features.value,
    }
    if k_used is not None and k_used != config.k:
        meta["k_clamped"] = k_used
    graph = AttributedGraph(segments.n, edges, matrix.values, supervision_label(record), meta)
    if virtual is not None:
        graph = add_virtual_nodes(graph, virtual[0], virtual[1])
    tick("edges", t)
    return graph


# --------------------------------------------------------------------------
# serialization


def graph_to_dict(graph: AttributedGraph) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "n": int(graph.n),
        "edges": graph.edges.tolist(),
        "x": graph.x.tolist(),
        "y": int(graph.y),
        "meta": graph.meta,
    }


def graph_from_dict(d: dict) -> AttributedGraph:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported graph format_version {d.get('format_version')}")
    n = int(d["n"])
    x = np.array(d["x"], dtype=np.float64).reshape(n, -1)
    return AttributedGraph(n, np.array(d["edges"], dtype=np.int64).reshape(-1, 2), x, int(d["y"]), d["meta"])


def _dumps(graph: AttributedGraph) -> bytes:
    return json.dumps(graph_to_dict(graph), sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_graph(graph: AttributedGraph, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_bytes(_dumps(graph) + b"\n")
    return path


def load_graph(path: str | os.PathLike) -> AttributedGraph:
    return graph_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_batch(graphs: Sequence[AttributedGraph], path: str | os.PathLike) -> Path:
    path = Path(path)
    blobs = [_dumps(g) for g in graphs]
    offsets = np.zeros(len(blobs) + 1, dtype="<u8")
    offsets[1:] = np.cumsum([len(b) for b in blobs])
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as f:
        f.write(_GBIN_MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(blobs)))
        f.write(offsets.tobytes())
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)
    return path


def read_batch(path: str | os.PathLike, indices: Iterable[int] | None = None) -> list[AttributedGraph]:
    with open(path, "rb") as f:
        if f.read(4) != _GBIN_MAGIC:
            raise ValidationError(f"{path}: not a graph batch file")
        version, count = struct.unpack("<IQ", f.read(12))
        if version != FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported batch version {version}")
        offsets = np.frombuffer(f.read(8 * (count + 1)), dtype="<u8")
        base = f.tell()
        out = []
        for i in range(count) if indices is None else indices:
            f.seek(base + int(offsets[i]))
            blob = f.read(int(offsets[i + 1] - offsets[i]))
            out.append(graph_from_dict(json.loads(blob)))
    return out


def with_label(graph: AttributedGraph, y: int) -> AttributedGraph:
    return replace(graph, y=y, meta=dict(graph.meta))
