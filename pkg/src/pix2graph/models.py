"""OCGTL and its semi-supervised variant, plus a shallow distance baseline.

An OCGTL model is an ensemble of K+1 GIN feature extractors, index 0 being
the reference, and a center ``c``. The per-graph objective is

    occ(G) = sum_k ||h_k - c||
    gtl(G) = sum_k -log( e^{s(k,0)/t} / (e^{s(k,0)/t} + sum_{l != k} e^{s(k,l)/t}) )

with ``s`` the cosine similarity and k, l ranging over the K non-reference
views. Labeled anomalies (y = -1) replace ``occ`` with the sum of inverse
distances to the center. Graphs are scored with ``occ + gtl``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from pix2graph.errors import TrainingError, ValidationError
from pix2graph.graphs import AttributedGraph
from pix2graph.nn.adam import AdamState, adam_step
from pix2graph.nn.gin import GinParams, GraphBatch, gin_forward
from pix2graph.nn.tensor import Tensor, as_tensor, clamp_min, exp, log, norm, normalize, reciprocal, stack

CHECKPOINT_FORMAT = "pix2graph-ocgtl"
CHECKPOINT_VERSION = 1
SUPPORTED_MODELS = ("ocgtl",)
UNSUPPORTED_MODELS = ("signet", "cvtgad")


def check_model(name: str) -> str:
    key = name.strip().lower()
    if key in SUPPORTED_MODELS:
        return key
    if key in UNSUPPORTED_MODELS:
        raise ValidationError(f"unsupported model: {name} (only ocgtl is implemented)")
    raise ValidationError(f"unknown model: {name}")


# --------------------------------------------------------------------------
# objectives; all accept a single graph (K x D) or a batch (B x K x D)


def _batched(x) -> tuple[Tensor, bool]:
    t = as_tensor(x)
    if t.ndim == 2:
        return t.reshape(1, *t.shape), True
    return t, False


def _unbatch(t: Tensor, single: bool) -> Tensor:
    return t.reshape(()) if single else t


def _center_distances(views: Tensor, c) -> Tensor:
    return norm(views - as_tensor(c, dtype=views.dtype), axis=-1)


def occ_loss(views, c) -> Tensor:
    v, single = _batched(views)
    return _unbatch(_center_distances(v, c).sum(axis=1), single)


def gtl_loss(reference, views, tau: float = 0.1) -> Tensor:
    v, single = _batched(views)
    ref = as_tensor(reference, dtype=v.dtype)
    if single:
        ref = ref.reshape(1, -1)
    k = v.shape[1]
    if k < 2:
        raise ValidationError("gtl_loss needs at least 2 views")
    # zero embeddings normalize to zero, so their cosine similarity is 0
    zv = normalize(v)
    z0 = normalize(ref).reshape(ref.shape[0], 1, ref.shape[-1])
    pos = (zv * z0).sum(axis=-1) * (1.0 / tau) - 1.0 / tau  # B x K, shifted by the max logit 1/tau
    sims = (zv @ zv.swapaxes(1, 2)) * (1.0 / tau) - 1.0 / tau  # B x K x K
    off_diag = 1.0 - np.eye(k, dtype=v.dtype)
    denom = exp(pos) + (exp(sims) * off_diag).sum(axis=-1)
    per_view = log(denom) - pos
    return _unbatch(per_view.sum(axis=1), single)


def semi_ocgtl_loss(embeddings, c, y, tau: float = 0.1, delta: float = 1e-6) -> Tensor:
    """Per-graph loss; ``embeddings`` holds the reference at index 0."""
    h, single = _batched(embeddings)
    labels = np.atleast_1d(np.asarray(y))
    if labels.shape[0] != h.shape[0]:
        raise ValidationError("one label per graph required")
    if not np.isin(labels, (-1, 0, 1)).all():
        raise ValidationError(f"labels must be in {{-1, 0, 1}}, got {np.unique(labels).tolist()}")
    views = h[:, 1:, :]
    dist = _center_distances(views, c)
    anomalous = (labels == -1).astype(h.dtype)
    occ = dist.sum(axis=1)
    if anomalous.any():
        inv = reciprocal(clamp_min(dist, delta)).sum(axis=1)
        center_term = occ * (1.0 - anomalous) + inv * anomalous
    else:
        center_term = occ
    total = center_term + gtl_loss(h[:, 0, :], views, tau)
    return _unbatch(total, single)


def ocgtl_loss(embeddings, c, tau: float = 0.1) -> Tensor:
    h, single = _batched(embeddings)
    total = occ_loss(h[:, 1:, :], c) + gtl_loss(h[:, 0, :], h[:, 1:, :], tau)
    return _unbatch(total, single)


# --------------------------------------------------------------------------
# supervision


class Regime(str, Enum):
    UNSUPERVISED = "unsupervised"
    WEAK = "weak"
    FULL = "full"


@dataclass(frozen=True)
class SupervisionRegime:
    mode: Regime = Regime.UNSUPERVISED
    anomaly_fraction: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "mode", Regime(self.mode))
        if self.mode is Regime.WEAK and not 0.0 < self.anomaly_fraction < 1.0:
            raise ValidationError(f"weak anomaly fraction must be in (0, 1), got {self.anomaly_fraction}")


def weak_anomaly_count(n_normal: int, fraction: float = 0.05) -> int:
    """Labeled anomalies so that they form ``fraction`` of the training set.

    The exact count ``fraction * n / (1 - fraction)`` is rounded half up.
    """
    return int(math.floor(fraction * n_normal / (1.0 - fraction) + 0.5))


def select_training(
    normal_ids: Sequence[str], anomaly_ids: Sequence[str], regime: SupervisionRegime, seed: int | Sequence[int]
) -> list[tuple[str, int]]:
    """Training ids with their supervision label (1 normal, -1 labeled anomaly).

    WEAK draws its anomalies without replacement using ``seed``.
    """
    chosen: list[str] = []
    pool = sorted(anomaly_ids)
    if regime.mode is Regime.FULL:
        chosen = pool
    elif regime.mode is Regime.WEAK and pool:
        n = min(weak_anomaly_count(len(normal_ids), regime.anomaly_fraction), len(pool))
        rng = np.random.default_rng(seed)
        chosen = sorted(pool[i] for i in rng.choice(len(pool), size=n, replace=False))
    return [(i, 1) for i in sorted(normal_ids)] + [(i, -1) for i in chosen]


# --------------------------------------------------------------------------
# model


@dataclass
class OcgtlConfig:
    k: int = 5
    hidden: int = 16
    n_layers: int = 2
    tau: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.001
    seed: int = 42
    dtype: str = "float32"
    delta: float = 1e-6

    def __post_init__(self):
        if self.k < 2:
            raise ValidationError("OCGTL needs K >= 2 non-reference extractors")
        if self.tau <= 0:
            raise ValidationError("temperature must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch size must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass
class OcgtlModel:
    config: OcgtlConfig
    d_in: int
    extractors: list[GinParams]
    c: Tensor
    adam: AdamState = field(default_factory=AdamState)
    loss_trace: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, d_in: int, config: OcgtlConfig | None = None) -> "OcgtlModel":
        cfg = config or OcgtlConfig()
        dtype = np.dtype(cfg.dtype)
        ex = [GinParams.init(d_in, cfg.seed, i, cfg.hidden, cfg.n_layers, dtype) for i in range(cfg.k + 1)]
        c = Tensor(np.zeros(cfg.hidden, dtype=dtype), requires_grad=True, name="center")
        return cls(cfg, d_in, ex, c, AdamState(lr=cfg.lr))

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameters(self) -> list[Tensor]:
        return [p for e in self.extractors for p in e.parameters()] + [self.c]

    def embed(self, batch: GraphBatch) -> Tensor:
        """Graph embeddings, B x (K+1) x hidden."""
        return stack([gin_forward(batch, e)[1] for e in self.extractors], axis=1)

    def batch(self, graphs: Sequence[AttributedGraph]) -> GraphBatch:
        for g in graphs:
            if g.d != self.d_in:
                raise ValidationError(f"graph {g.id!r} has {g.d} features, model expects {self.d_in}")
        return GraphBatch.from_graphs([(g.edges, g.x) for g in graphs], dtype=self.dtype)

    def score_components(self, graphs: Sequence[AttributedGraph], chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
        occ, gtl = [], []
        tau = self.config.tau
        for s in range(0, len(graphs), chunk):
            h = self.embed(self.batch(graphs[s:s + chunk]))
            occ.append(occ_loss(h[:, 1:, :], self.c).data)
            gtl.append(gtl_loss(h[:, 0, :], h[:, 1:, :], tau).data)
        return np.concatenate(occ).astype(np.float64), np.concatenate(gtl).astype(np.float64)

    def score(self, graphs: Sequence[AttributedGraph]) -> np.ndarray:
        occ, gtl = self.score_components(graphs)
        return occ + gtl

    # -- checkpoints --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "d_in": self.d_in,
            "extractors": [
                {"epsilons": e.epsilons, "layers": [{k: t.data.tolist() for k, t in layer.items()} for layer in e.weights]}
                for e in self.extractors
            ],
            "c": self.c.data.tolist(),
            "adam": self.adam.to_dict(),
            "loss_trace": list(self.loss_trace),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OcgtlModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError("not an OCGTL checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {d.get('version')}")
        cfg = OcgtlConfig(**d["config"])
        dtype = np.dtype(cfg.dtype)
        ex = []
        for i, e in enumerate(d["extractors"]):
            layers = [
                {k: Tensor(np.array(v, dtype=dtype), requires_grad=True, name=f"gin{i}.l{li}.{k}") for k, v in layer.items()}
                for li, layer in enumerate(e["layers"])
            ]
            ex.append(GinParams(layers, [float(x) for x in e["epsilons"]]))
        c = Tensor(np.array(d["c"], dtype=dtype), requires_grad=True, name="center")
        return cls(cfg, int(d["d_in"]), ex, c, AdamState.from_dict(d["adam"], dtype), list(d["loss_trace"]))


def save_model(model: OcgtlModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True, separators=(",", ":")))


def load_model(path: str | Path) -> OcgtlModel:
    return OcgtlModel.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# training


def train(
    graphs: Sequence[AttributedGraph],
    labels: Sequence[int] | None = None,
    config: OcgtlConfig | None = None,
) -> OcgtlModel:
    """Mini-batch Adam on the semi-supervised objective.

    ``labels`` defaults to each graph's ``y``; only -1 changes the objective.
    """
    cfg = config or OcgtlConfig()
    if not graphs:
        raise ValidationError("empty training set")
    y = np.array([g.y for g in graphs] if labels is None else list(labels), dtype=np.int64)
    if y.shape[0] != len(graphs):
        raise ValidationError("one label per training graph required")
    d_in = graphs[0].d
    model = OcgtlModel.init(d_in, cfg)
    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    n = len(graphs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            h = model.embed(model.batch([graphs[i] for i in idx]))
            if epoch == 0 and b == 0:
                ref_rows = y[idx] != -1
                views = h.data[:, 1:, :][ref_rows] if ref_rows.any() else h.data[:, 1:, :]
                model.c.data[...] = views.mean(axis=(0, 1))
            per_graph = semi_ocgtl_loss(h, model.c, y[idx], cfg.tau, cfg.delta)
            loss = per_graph.mean()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            for p in params:
                p.grad = None
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            try:
                adam_step(params, grads, model.adam)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch + 1}, batch {b + 1}: {exc}") from None
            total += value * len(idx)
        model.loss_trace.append(total / n)
    return model


def score(model: OcgtlModel, graphs: Sequence[AttributedGraph]) -> np.ndarray:
    return model.score(graphs)


# --------------------------------------------------------------------------
# shallow baseline


def mean_pool(graph: AttributedGraph) -> np.ndarray:
    return np.asarray(graph.x, dtype=np.float64).mean(axis=0)


def baseline_distance_score(
    train_graphs: Sequence[AttributedGraph], test_graphs: Sequence[AttributedGraph], k: int = 5
) -> np.ndarray:
    """Distance of each mean-pooled test graph to its k-th nearest training graph."""
    if not train_graphs:
        raise ValidationError("baseline needs at least one training graph")
    ref = np.stack([mean_pool(g) for g in train_graphs])
    q = np.stack([mean_pool(g) for g in test_graphs])
    kk = min(max(k, 1), len(ref))
    d = np.sqrt(((q[:, None, :] - ref[None, :, :]) ** 2).sum(axis=-1))
    return np.sort(d, axis=1)[:, kk - 1]


# --------------------------------------------------------------------------
# score files

SCORE_COLUMNS = ("graph_id", "score", "label")


def write_scores(path: str | Path, ids: Sequence[str], scores: Sequence[float], labels: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for i, s, lab in zip(ids, scores, labels):
            w.writerow([i, f"{float(s):.6f}", int(lab)])


def read_scores(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ([r["graph_id"] for r in rows], np.array([float(r["score"]) for r in rows]),
            np.array([int(r["label"]) for r in rows]))
