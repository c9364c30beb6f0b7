"""Cross-validated evaluation, ranking metrics and result tables.

Stage timings recorded by :func:`run_experiment` cover the whole run. With
``timing=True`` (serial, single BLAS thread) their sum matches the wall-clock
total; with concurrent jobs the stage sums count worker time instead.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from pix2graph.dataset import ImageRecord, stratified_folds
from pix2graph.errors import ValidationError
from pix2graph.features import DIMENSION_NOTE, FeatureSet
from pix2graph.graphs import AttributedGraph, PipelineConfig, assemble, read_batch, write_batch
from pix2graph.models import OcgtlConfig, Regime, SupervisionRegime, select_training, train, write_scores
from pix2graph.reduction import Projection, fit

CACHE_ENV = "PIX2GRAPH_CACHE_DIR"
TIMING_STAGES = ("setup", "io", "segmentation", "features", "edges", "cache", "reduction", "train", "inference")
RESULT_COLUMNS = (
    "config_hash", "segmentation", "edges", "features", "mask", "vn", "regime",
    "fold", "auc_roc", "auc_pr", "train_s", "infer_s",
)


# --------------------------------------------------------------------------
# metrics


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    lab = np.asarray(labels).ravel()
    if s.shape != lab.shape:
        raise ValidationError(f"{s.size} scores but {lab.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    if not np.isin(lab, (0, 1)).all():
        raise ValidationError("labels must be binary (1 = anomaly)")
    return s, lab.astype(bool)


def _threshold_counts(s: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (TP, FP) at each distinct threshold, highest first."""
    order = np.argsort(-s, kind="stable")
    s, positive = s[order], positive[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(positive)[last]
    fp = np.cumsum(~positive)[last]
    return tp, fp


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve; tied scores count one half."""
    s, pos = _binary(scores, labels)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("auc_roc needs both classes")
    tp, fp = _threshold_counts(s, pos)
    tp = np.r_[0, tp].astype(np.int64)
    fp = np.r_[0, fp].astype(np.int64)
    # exact trapezoid sum in integers, doubled
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    return twice_area / (2.0 * n_pos * n_neg)


def auc_pr(scores, labels) -> float:
    """Average precision with ties grouped into a single operating point."""
    s, pos = _binary(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValidationError("auc_pr needs at least one positive")
    tp, fp = _threshold_counts(s, pos)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    precision = tp / (tp + fp)
    return float(np.sum(recall_step * precision))


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    pipeline: PipelineConfig
    regime: SupervisionRegime = field(default_factory=SupervisionRegime)
    seed: int = 42
    folds: int = 5
    variance: float = 0.95
    model: OcgtlConfig = field(default_factory=OcgtlConfig)

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ValidationError(f"folds must be >= 2, got {self.folds}")
        if not 0.0 < self.variance <= 1.0:
            raise ValidationError(f"variance threshold must be in (0, 1], got {self.variance}")

    def train_config(self) -> OcgtlConfig:
        return replace(self.model, seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline.to_dict(),
            "regime": {"mode": self.regime.mode.value, "anomaly_fraction": self.regime.anomaly_fraction},
            "seed": self.seed,
            "folds": self.folds,
            "variance": self.variance,
            "model": asdict(self.train_config()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            PipelineConfig.from_dict(d["pipeline"]),
            SupervisionRegime(Regime(d["regime"]["mode"]), float(d["regime"]["anomaly_fraction"])),
            int(d["seed"]), int(d["folds"]), float(d["variance"]), OcgtlConfig(**d["model"]),
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# graph construction with cache


def _file_digest(path: Path | None) -> str:
    if path is None:
        return ""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def corpus_hash(records: Sequence[ImageRecord]) -> str:
    """Content hash of a corpus: ids, labels, image and mask bytes."""
    h = hashlib.sha256()
    for r in sorted(records, key=lambda r: r.id):
        h.update(f"{r.id}\0{r.dx}\0{_file_digest(r.image_path)}\0{_file_digest(r.mask_path)}\n".encode())
    return h.hexdigest()[:16]


class GraphCache:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    @classmethod
    def from_env(cls) -> "GraphCache | None":
        root = os.environ.get(CACHE_ENV)
        return cls(root) if root else None

    def path(self, corpus_key: str, pipeline: PipelineConfig) -> Path:
        return self.root / f"{corpus_key}_{pipeline.config_hash()}.gbin"

    def load(self, corpus_key: str, pipeline: PipelineConfig, ids: Sequence[str]) -> list[AttributedGraph] | None:
        p = self.path(corpus_key, pipeline)
        if not p.exists():
            return None
        graphs = read_batch(p)
        if [g.id for g in graphs] != list(ids):
            return None
        return graphs

    def save(self, corpus_key: str, pipeline: PipelineConfig, graphs: Sequence[AttributedGraph]) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        return write_batch(graphs, self.path(corpus_key, pipeline))


def _assemble_timed(record: ImageRecord, pipeline: PipelineConfig) -> tuple[AttributedGraph, dict[str, float]]:
    clock: dict[str, float] = {}
    return assemble(record, pipeline, timings=clock), clock


def build_graphs(
    records: Sequence[ImageRecord],
    pipeline: PipelineConfig,
    jobs: int = 1,
    cache: GraphCache | None = None,
    timings: dict[str, float] | None = None,
) -> list[AttributedGraph]:
    """Graphs for ``records`` in order, reusing the cache when possible."""
    clock = timings if timings is not None else {}
    key = None
    if cache is not None:
        t0 = time.perf_counter()
        key = corpus_hash(records)
        hit = cache.load(key, pipeline, [r.id for r in records])
        clock["cache"] = clock.get("cache", 0.0) + time.perf_counter() - t0
        if hit is not None:
            return hit
    if jobs > 1 and len(records) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_assemble_timed, records, [pipeline] * len(records), chunksize=8))
    else:
        results = [_assemble_timed(r, pipeline) for r in records]
    graphs = []
    for g, c in results:
        graphs.append(g)
        for stage, sec in c.items():
            clock[stage] = clock.get(stage, 0.0) + sec
    if cache is not None and key is not None:
        t0 = time.perf_counter()
        cache.save(key, pipeline, graphs)
        clock["cache"] = clock.get("cache", 0.0) + time.perf_counter() - t0
    return graphs


# --------------------------------------------------------------------------
# protocol


@dataclass
class FoldResult:
    fold: int
    auc_roc: float
    auc_pr: float
    train_seconds: float
    infer_seconds: float
    n_train: int
    n_labeled_anomalies: int
    reduced_dim: int
    test_ids: list[str]
    scores: list[float]
    labels: list[int]
    fitted_ids: list[str]
    loss_trace: list[float]
    scores_file: str | None = None


@dataclass
class EvalReport:
    config: ExperimentConfig
    folds: list[FoldResult]
    timings: dict[str, float]
    total_seconds: float

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(f, metric) for f in self.folds], dtype=np.float64)

    @property
    def auc_roc_mean(self) -> float:
        return float(self.values("auc_roc").mean())

    @property
    def auc_roc_sd(self) -> float:
        return float(self.values("auc_roc").std())  # population SD over folds

    @property
    def auc_pr_mean(self) -> float:
        return float(self.values("auc_pr").mean())

    @property
    def auc_pr_sd(self) -> float:
        return float(self.values("auc_pr").std())

    def signature(self) -> tuple:
        """Everything except wall-clock measurements, for determinism checks."""
        return tuple(
            (f.fold, f.auc_roc, f.auc_pr, tuple(f.test_ids), tuple(f.scores), tuple(f.fitted_ids), tuple(f.loss_trace))
            for f in self.folds
        )


def project_graph(graph: AttributedGraph, projection: Projection | None, y: int) -> AttributedGraph:
    x = graph.x if projection is None else projection.apply(graph.x)
    return AttributedGraph(graph.n, graph.edges, x, y, dict(graph.meta))


def check_folds(is_anomalous: Mapping[str, bool], assignment) -> None:
    for f in range(assignment.n_folds):
        flags = {is_anomalous[i] for i in assignment.test_ids(f)}
        if flags != {True, False}:
            missing = "anomalies" if True not in flags else "normals"
            raise ValidationError(f"test fold {f} has no {missing}; both classes are required")


def run_fold(
    fold: int,
    graphs: Mapping[str, AttributedGraph],
    train_ids: Sequence[str],
    test_ids: Sequence[str],
    config: ExperimentConfig,
    out_dir: str | os.PathLike | None = None,
) -> tuple[FoldResult, dict[str, float]]:
    clock: dict[str, float] = {}
    t0 = time.perf_counter()
    normals = [i for i in train_ids if not graphs[i].is_anomalous]
    anomalies = [i for i in train_ids if graphs[i].is_anomalous]
    selected = select_training(normals, anomalies, config.regime, [config.seed, fold])
    fit_ids = [i for i, y in selected if y == 1]
    if config.pipeline.features is FeatureSet.RGB_AVG:
        projection = None
    else:
        rows = np.concatenate([graphs[i].x for i in fit_ids], axis=0)
        projection = fit(rows, config.variance, ids=fit_ids)
    train_set = [project_graph(graphs[i], projection, y) for i, y in selected]
    test_ids = sorted(test_ids)
    test_set = [project_graph(graphs[i], projection, 0) for i in test_ids]
    t1 = time.perf_counter()
    clock["reduction"] = t1 - t0

    model = train(train_set, config=config.train_config())
    t2 = time.perf_counter()
    clock["train"] = t2 - t1

    scores = model.score(test_set)
    labels = [int(graphs[i].is_anomalous) for i in test_ids]
    roc, pr = auc_roc(scores, labels), auc_pr(scores, labels)
    scores_file = None
    if out_dir is not None:
        sdir = Path(out_dir) / "scores"
        sdir.mkdir(parents=True, exist_ok=True)
        scores_file = str(sdir / f"fold{fold}.csv")
        write_scores(scores_file, test_ids, scores, labels)
    t3 = time.perf_counter()
    clock["inference"] = t3 - t2

    result = FoldResult(
        fold, roc, pr, t2 - t1, t3 - t2, len(train_set), sum(1 for _, y in selected if y == -1),
        train_set[0].d, test_ids, [float(s) for s in scores], labels, list(fit_ids),
        list(model.loss_trace), scores_file,
    )
    return result, clock


def _run_fold_job(args):
    return run_fold(*args)


def run_experiment(
    records: Sequence[ImageRecord],
    config: ExperimentConfig,
    *,
    cache: GraphCache | None = None,
    jobs: int = 1,
    timing: bool = False,
    out_dir: str | os.PathLike | None = None,
) -> EvalReport:
    """Stratified k-fold protocol with nevus as the normal class."""
    start = time.perf_counter()
    timings = {s: 0.0 for s in TIMING_STAGES}
    if timing:
        jobs = 1
    limits = threadpool_limits(limits=1) if timing else nullcontext()
    with limits:
        if not records:
            raise ValidationError("empty corpus")
        assignment = stratified_folds({r.id: r.dx for r in records}, config.folds, config.seed)
        check_folds({r.id: r.is_anomalous for r in records}, assignment)
        timings["setup"] += time.perf_counter() - start

        graph_list = build_graphs(records, config.pipeline, jobs, cache, timings)
        graphs = {g.id: g for g in graph_list}
        tasks = [
            (f, graphs, assignment.train_ids(f), assignment.test_ids(f), config, out_dir)
            for f in range(config.folds)
        ]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
                outcomes = list(pool.map(_run_fold_job, tasks))
        else:
            outcomes = [run_fold(*t) for t in tasks]
    folds = []
    for result, clock in outcomes:
        folds.append(result)
        for stage, sec in clock.items():
            timings[stage] += sec
    return EvalReport(config, folds, timings, time.perf_counter() - start)


# --------------------------------------------------------------------------
# result tables


def _f6(x: float) -> str:
    return f"{float(x):.6f}"


def result_rows(reports: Sequence[EvalReport]) -> list[dict[str, str]]:
    rows = []
    for rep in reports:
        cfg = rep.config
        for f in rep.folds:
            rows.append({
                "config_hash": cfg.config_hash(),
                "segmentation": cfg.pipeline.segmentation.value,
                "edges": cfg.pipeline.edges.value,
                "features": cfg.pipeline.features.value,
                "mask": str(int(cfg.pipeline.mask)),
                "vn": str(int(cfg.pipeline.virtual_nodes)),
                "regime": cfg.regime.mode.value,
                "fold": str(f.fold),
                "auc_roc": _f6(f.auc_roc),
                "auc_pr": _f6(f.auc_pr),
                "train_s": _f6(f.train_seconds),
                "infer_s": _f6(f.infer_seconds),
            })
    return rows


def write_results_csv(reports: Sequence[EvalReport], path: str | os.PathLike) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(result_rows(reports))
    return path


def read_results_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ValidationError(f"{path}: unexpected results header {reader.fieldnames}")
        return list(reader)


def _quartiles(v: np.ndarray) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(med), float(q1), float(q3)


def aggregate_rows(rows: Sequence[Mapping[str, str]]) -> dict:
    """Per-config mean and population SD (percent) plus distribution summaries."""
    if not rows:
        raise ValidationError("no result rows to aggregate")
    groups: dict[str, list[Mapping[str, str]]] = {}
    for r in rows:
        groups.setdefault(r["config_hash"], []).append(r)
    table = []
    for key in sorted(groups):
        g = sorted(groups[key], key=lambda r: int(r["fold"]))
        roc = np.array([float(r["auc_roc"]) for r in g]) * 100.0
        pr = np.array([float(r["auc_pr"]) for r in g]) * 100.0
        med, q1, q3 = _quartiles(roc)
        entry = {k: g[0][k] for k in ("config_hash", "segmentation", "edges", "features", "mask", "vn", "regime")}
        entry.update({
            "folds": len(g),
            "auc_roc_mean": round(float(roc.mean()), 6),
            "auc_roc_sd": round(float(roc.std()), 6),
            "auc_pr_mean": round(float(pr.mean()), 6),
            "auc_pr_sd": round(float(pr.std()), 6),
            "auc_roc_median": round(med, 6),
            "auc_roc_q1": round(q1, 6),
            "auc_roc_q3": round(q3, 6),
            "train_s_mean": round(float(np.mean([float(r["train_s"]) for r in g])), 6),
            "infer_s_mean": round(float(np.mean([float(r["infer_s"]) for r in g])), 6),
        })
        table.append(entry)
    means = np.array([e["auc_roc_mean"] for e in table])
    med, q1, q3 = _quartiles(means)
    return {
        "results": table,
        "models": {"ocgtl": {"configs": len(table), "auc_roc_median": round(med, 6),
                             "auc_roc_q1": round(q1, 6), "auc_roc_q3": round(q3, 6)}},
        "feature_dimensions": {f.value: f.dimensions for f in FeatureSet},
        "dimension_note": DIMENSION_NOTE,
    }


def aggregate(reports: Sequence[EvalReport]) -> dict:
    if not reports:
        raise ValidationError("no reports to aggregate")
    return aggregate_rows(result_rows(reports))


def write_summary_json(summary: dict, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return path
