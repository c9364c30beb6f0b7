"""Command-line entry point: ``pix2graph <command> [flags]``.

Failures print one ``error_code: message`` line on stderr. Exit codes are 0 on
success, 1 for runtime failures and 2 for usage errors. Every command writes
``run_manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from pix2graph import __version__
from pix2graph.dataset import ham10000_records, load_manifest, synthesize_corpus, write_manifest
from pix2graph.errors import TrainingError, ValidationError
from pix2graph.features import DIMENSION_NOTE, FeatureSet
from pix2graph.graphs import EdgeMethod, PipelineConfig, Segmentation, read_batch, write_batch
from pix2graph.models import (
    OcgtlConfig, Regime, SupervisionRegime, check_model, load_model, save_model, select_training, train, write_scores,
)
from pix2graph.reduction import Projection, fit

MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401 - argparse hook
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# run manifest


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    version: str = __version__
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    timings: dict[str, float] = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def output_hashes(out_dir: Path) -> dict[str, str]:
    """sha256 of every file under ``out_dir`` except the run manifest."""
    return {
        p.relative_to(out_dir).as_posix(): sha256_file(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != MANIFEST_NAME
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --------------------------------------------------------------------------
# parser


def _add_out(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, help="output directory, created if missing (required)")


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42, help="random seed for every stochastic step (default: 42)")


def _add_pipeline(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("image-to-graph pipeline")
    g.add_argument("--segmentation", choices=[s.value for s in Segmentation], default="slico",
                   help="node definition: 4x5 patch grid or SLICO superpixels (default: slico)")
    g.add_argument("--edges", choices=[e.value for e in EdgeMethod], default="rag",
                   help="edge construction: region adjacency or k-nearest neighbours (default: rag)")
    g.add_argument("--features", choices=[f.value for f in FeatureSet], default="color",
                   help="node feature set (default: color)")
    g.add_argument("--mask", action="store_true", help="restrict segmentation to the lesion mask")
    g.add_argument("--virtual-nodes", action="store_true",
                   help="add lesion and background summary nodes (requires --mask)")
    g.add_argument("--slico-n", type=int, default=20, help="target number of superpixels (default: 20)")
    g.add_argument("--k", type=int, default=6, help="neighbours per node for knn edges (default: 6)")


def _add_training(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--regime", choices=[r.value for r in Regime], default="unsupervised",
                   help="supervision regime (default: unsupervised)")
    g.add_argument("--anomaly-fraction", type=float, default=0.05,
                   help="share of labeled anomalies in the weak regime (default: 0.05)")
    g.add_argument("--epochs", type=int, default=20, help="training epochs (default: 20)")
    g.add_argument("--batch-size", type=int, default=128, help="graphs per mini-batch (default: 128)")
    g.add_argument("--lr", type=float, default=0.001, help="Adam learning rate (default: 0.001)")
    g.add_argument("--dtype", choices=["float32", "float64"], default="float32",
                   help="floating point width for training (default: float32)")
    g.add_argument("--model", default="ocgtl", help="detector; only ocgtl is implemented (default: ocgtl)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pix2graph", description="Image-to-graph anomaly detection for skin lesion images.")
    parser.add_argument("--version", action="version", version=f"pix2graph {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic lesion corpus", description="Write a synthetic lesion corpus.")
    p.add_argument("--normal", type=int, default=200, help="number of normal (nevus) images (default: 200)")
    p.add_argument("--anomalous", type=int, default=60, help="number of anomalous images (default: 60)")
    p.add_argument("--width", type=int, default=96, help="image width in pixels (default: 96)")
    p.add_argument("--height", type=int, default=72, help="image height in pixels (default: 72)")
    _add_seed(p)
    _add_out(p)

    p = sub.add_parser("manifest", help="build a manifest from a HAM10000 download",
                       description="Build manifest.csv from HAM10000 metadata, images and masks.")
    p.add_argument("--metadata", type=Path, help="HAM10000_metadata CSV file (required)")
    p.add_argument("--images", type=Path, help="directory with <image_id>.jpg files (required)")
    p.add_argument("--masks", type=Path, help="directory with <image_id>_segmentation.png files (required)")
    _add_seed(p)
    _add_out(p)

    p = sub.add_parser("transform", help="turn a corpus into attributed graphs",
                       description="Turn every manifest image into an attributed graph (graphs.gbin).")
    p.add_argument("--manifest", type=Path, help="corpus manifest CSV (required)")
    _add_pipeline(p)
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    _add_seed(p)
    _add_out(p)

    p = sub.add_parser("train", help="train a detector on graphs",
                       description="Fit the feature reduction and train a detector on a graph file.")
    p.add_argument("--graphs", type=Path, help="graph batch file from transform (required)")
    _add_training(p)
    p.add_argument("--variance", type=float, default=0.95, help="PCA retained variance (default: 0.95)")
    _add_seed(p)
    _add_out(p)

    p = sub.add_parser("score", help="score graphs with a trained model",
                       description="Score a graph file with a trained model (writes scores.csv).")
    p.add_argument("--model", type=Path, help="directory written by train (required)")
    p.add_argument("--graphs", type=Path, help="graph batch file from transform (required)")
    _add_seed(p)
    _add_out(p)

    p = sub.add_parser("eval", help="run the cross-validated protocol",
                       description="Run stratified k-fold evaluation with nevus as the normal class.")
    p.add_argument("--manifest", type=Path, help="corpus manifest CSV (required)")
    _add_pipeline(p)
    _add_training(p)
    p.add_argument("--folds", type=int, default=5, help="number of folds (default: 5)")
    p.add_argument("--variance", type=float, default=0.95, help="PCA retained variance (default: 0.95)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent folds and transforms (default: 1)")
    p.add_argument("--timing", action="store_true",
                   help="serial single-threaded run; fills the train_s/infer_s columns")
    p.add_argument("--cache-dir", type=Path, default=None,
                   help="graph cache directory (default: $PIX2GRAPH_CACHE_DIR, unset disables caching)")
    _add_seed(p)
    _add_out(p)

    p = sub.add_parser("report", help="aggregate results files into tables",
                       description="Aggregate one or more results.csv files into summary tables.")
    p.add_argument("--results", nargs="+", type=Path, help="results.csv files from eval (required)")
    _add_seed(p)
    _add_out(p)
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


# --------------------------------------------------------------------------
# commands


def _pipeline(args) -> PipelineConfig:
    try:
        return PipelineConfig(
            segmentation=args.segmentation, edges=args.edges, features=args.features,
            mask=args.mask, virtual_nodes=args.virtual_nodes, slico_n=args.slico_n, k=args.k,
        )
    except ValidationError as exc:
        raise UsageError(str(exc)) from None


def _training(args) -> tuple[SupervisionRegime, OcgtlConfig]:
    try:
        check_model(args.model)
        regime = SupervisionRegime(Regime(args.regime), args.anomaly_fraction)
        cfg = OcgtlConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed, dtype=args.dtype)
    except ValidationError as exc:
        raise UsageError(str(exc)) from None
    return regime, cfg


def cmd_synth(args, m: RunManifest) -> None:
    synthesize_corpus(args.out, args.normal, args.anomalous, args.width, args.height, args.seed)
    m.config = {"normal": args.normal, "anomalous": args.anomalous, "width": args.width, "height": args.height}
    print(f"wrote {args.normal + args.anomalous} images to {args.out}")


def cmd_manifest(args, m: RunManifest) -> None:
    records = ham10000_records(args.metadata, args.images, args.masks)
    write_manifest(records, args.out / "manifest.csv")
    m.inputs[str(args.metadata)] = sha256_file(args.metadata)
    print(f"wrote manifest with {len(records)} records to {args.out / 'manifest.csv'}")


def cmd_transform(args, m: RunManifest) -> None:
    from pix2graph.evaluation import build_graphs

    pipeline = _pipeline(args)
    records = load_manifest(args.manifest)
    m.config = pipeline.to_dict()
    m.inputs[str(args.manifest)] = sha256_file(args.manifest)
    clock: dict[str, float] = {}
    graphs = build_graphs(records, pipeline, jobs=max(args.jobs, 1), timings=clock)
    write_batch(graphs, args.out / "graphs.gbin")
    (args.out / "pipeline.json").write_text(json.dumps(pipeline.to_dict(), indent=1, sort_keys=True) + "\n")
    m.timings = {k: round(v, 6) for k, v in clock.items()}
    sizes = [g.n for g in graphs]
    print(f"wrote {len(graphs)} graphs (mean {np.mean(sizes):.2f} nodes) to {args.out / 'graphs.gbin'}")


def cmd_train(args, m: RunManifest) -> None:
    from pix2graph.evaluation import project_graph

    regime, cfg = _training(args)
    graphs = read_batch(args.graphs)
    m.inputs[str(args.graphs)] = sha256_file(args.graphs)
    by_id = {g.id: g for g in graphs}
    normals = [g.id for g in graphs if not g.is_anomalous]
    anomalies = [g.id for g in graphs if g.is_anomalous]
    if not normals:
        raise ValidationError("training graphs contain no normal samples")
    selected = select_training(normals, anomalies, regime, [args.seed, 0])
    fit_ids = [i for i, y in selected if y == 1]
    kind = graphs[0].meta.get("features")
    projection = None
    if kind != FeatureSet.RGB_AVG.value:
        projection = fit(np.concatenate([by_id[i].x for i in fit_ids]), args.variance, ids=fit_ids)
        (args.out / "projection.json").write_text(json.dumps(projection.to_dict(), sort_keys=True) + "\n")
    model = train([project_graph(by_id[i], projection, y) for i, y in selected], config=cfg)
    save_model(model, args.out / "model.json")
    m.config = {"regime": regime.mode.value, "anomaly_fraction": regime.anomaly_fraction,
                "model": asdict(cfg), "variance": args.variance}
    print(f"trained on {len(selected)} graphs; final epoch loss {model.loss_trace[-1]:.6f}")


def cmd_score(args, m: RunManifest) -> None:
    from pix2graph.evaluation import auc_pr, auc_roc, project_graph

    model = load_model(args.model / "model.json")
    proj_path = args.model / "projection.json"
    projection = Projection.from_dict(json.loads(proj_path.read_text())) if proj_path.exists() else None
    graphs = read_batch(args.graphs)
    m.inputs[str(args.graphs)] = sha256_file(args.graphs)
    m.inputs[str(args.model / "model.json")] = sha256_file(args.model / "model.json")
    reduced = [project_graph(g, projection, 0) for g in graphs]
    scores = model.score(reduced)
    labels = [int(g.is_anomalous) for g in graphs]
    write_scores(args.out / "scores.csv", [g.id for g in graphs], scores, labels)
    m.config = {"model_dir": str(args.model)}
    msg = f"scored {len(graphs)} graphs"
    if 0 < sum(labels) < len(labels):
        msg += f"; auc_roc {auc_roc(scores, labels):.6f} auc_pr {auc_pr(scores, labels):.6f}"
    print(msg)


def cmd_eval(args, m: RunManifest) -> None:
    from pix2graph.evaluation import (
        ExperimentConfig, GraphCache, aggregate, run_experiment, write_results_csv, write_summary_json,
    )

    pipeline = _pipeline(args)
    regime, cfg = _training(args)
    try:
        config = ExperimentConfig(pipeline, regime, args.seed, args.folds, args.variance, cfg)
    except ValidationError as exc:
        raise UsageError(str(exc)) from None
    records = load_manifest(args.manifest)
    m.inputs[str(args.manifest)] = sha256_file(args.manifest)
    cache = GraphCache(args.cache_dir) if args.cache_dir else GraphCache.from_env()
    report = run_experiment(records, config, cache=cache, jobs=max(args.jobs, 1), timing=args.timing, out_dir=args.out)
    if not args.timing:
        # wall-clock columns are only meaningful (and only reported) in timing mode
        for f in report.folds:
            f.train_seconds = 0.0
            f.infer_seconds = 0.0
    write_results_csv([report], args.out / "results.csv")
    write_summary_json(aggregate([report]), args.out / "summary.json")
    m.config = config.to_dict()
    m.timings = {k: round(v, 6) for k, v in report.timings.items()}
    m.timings["total"] = round(report.total_seconds, 6)
    print(f"auc_roc {100 * report.auc_roc_mean:.1f} +- {100 * report.auc_roc_sd:.1f} %  "
          f"auc_pr {100 * report.auc_pr_mean:.1f} +- {100 * report.auc_pr_sd:.1f} %  ({config.folds} folds)")


def cmd_report(args, m: RunManifest) -> None:
    from pix2graph.evaluation import aggregate_rows, read_results_csv, write_summary_json

    rows = []
    for p in args.results:
        rows.extend(read_results_csv(p))
        m.inputs[str(p)] = sha256_file(p)
    summary = aggregate_rows(rows)
    write_summary_json(summary, args.out / "summary.json")
    cols = ["config_hash", "segmentation", "edges", "features", "mask", "vn", "regime",
            "auc_roc_mean", "auc_roc_sd", "auc_pr_mean", "auc_pr_sd"]
    lines = [",".join(cols)] + [",".join(str(e[c]) for c in cols) for e in summary["results"]]
    (args.out / "table.csv").write_text("\n".join(lines) + "\n")
    for e in summary["results"]:
        print(f"{e['config_hash']} {e['segmentation']}+{e['edges']}+{e['features']} mask={e['mask']} vn={e['vn']} "
              f"{e['regime']}: auc_roc {e['auc_roc_mean']:.1f} +- {e['auc_roc_sd']:.1f}")
    print(f"note: {DIMENSION_NOTE}")


# checked after flag-combination validation so that invalid combinations are
# reported even when other flags are missing
REQUIRED = {
    "synth": ("out",),
    "manifest": ("metadata", "images", "masks", "out"),
    "transform": ("manifest", "out"),
    "train": ("graphs", "out"),
    "score": ("model", "graphs", "out"),
    "eval": ("manifest", "out"),
    "report": ("results", "out"),
}

COMMANDS = {
    "synth": cmd_synth, "manifest": cmd_manifest, "transform": cmd_transform, "train": cmd_train,
    "score": cmd_score, "eval": cmd_eval, "report": cmd_report,
}


def _fail(code: str, message: str, status: int) -> int:
    print(f"{code}: {' '.join(str(message).split())}", file=sys.stderr)
    return status


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command (one of: " + ", ".join(COMMANDS) + ")")
        if args.command in ("transform", "eval"):
            _pipeline(args)
        if args.command in ("train", "eval"):
            try:
                check_model(args.model)
            except ValidationError as exc:
                return _fail("unsupported_model", exc, 2)
        missing = [n for n in REQUIRED[args.command] if getattr(args, n) is None]
        if missing:
            raise UsageError(f"pix2graph {args.command}: missing required flags: "
                             + ", ".join("--" + n.replace("_", "-") for n in missing))
        out: Path = args.out
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, argv, {}, args.seed, started=_now())
        t0 = time.perf_counter()
        COMMANDS[args.command](args, manifest)
        manifest.finished = _now()
        manifest.timings.setdefault("total", round(time.perf_counter() - t0, 6))
        manifest.outputs = output_hashes(out)
        manifest.write(out)
        return 0
    except UsageError as exc:
        return _fail("usage_error", exc, 2)
    except TrainingError as exc:
        return _fail("training_error", exc, 1)
    except ValidationError as exc:
        return _fail("validation_error", exc, 1)
    except FileNotFoundError as exc:
        return _fail("io_error", exc, 1)
    except OSError as exc:
        return _fail("io_error", exc, 1)


if __name__ == "__main__":
    raise SystemExit(main())
