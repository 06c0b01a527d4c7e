"""
The reconstruction pipeline as a LangGraph state graph
(embed -> locality -> patches -> predict -> stitch -> solve), plus the run-level
drivers behind the CLI commands that read inputs and write run directories.
"""
from __future__ import annotations

import asyncio
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
import pandas as pd
from langgraph.graph import END, START, StateGraph
from loguru import logger
from typing_extensions import TypedDict

from .config import PipelineConfig, dump_config
from .errors import InvalidInputError, StageError, StoreError
from .geometry import CoordinateTable, DistanceTable
from .metrics import MetricsReport, coordinates_from_distances, distortion_map, evaluate, match_tables
from .minisets import MinisetSampler, write_minisets
from .patches import (
    EmbeddingMatrix,
    LocalityGraph,
    PatchCover,
    ensure_connected,
    mutual_knn_graph,
    normalize_expression,
    pca_embed,
    sample_patches,
)
from .solver import SolveDiagnostics, solve
from .stitching import StitchResult, stitch
from .store import RunStore
from .synthetic import Predictor, SyntheticSlide, generate_slide, make_predictor, pseudo_spot_aggregate
from .timing import StageRecorder, timed

STAGES = ("embed", "locality", "patches", "predict", "stitch", "solve")

# metric -> True when higher is better
DIRECTIONS = {
    "spearman": True,
    "pearson": True,
    "stress1": False,
    "local_stress": False,
    "scale_err": False,
    "edge_roc_auc": True,
    "bap": True,
    "shell_f1_macro": True,
    "trust_at_k": True,
    "cont_at_k": True,
    "swd": False,
    "w1_knn": False,
    "cal_err": False,
}


class ReconstructState(TypedDict, total=False):
    ids: Tuple[str, ...]
    expression: np.ndarray
    embedding: EmbeddingMatrix
    locality: LocalityGraph
    cover: PatchCover
    geometries: List[np.ndarray]
    stitched: StitchResult
    coords: CoordinateTable
    diagnostics: SolveDiagnostics


@dataclass
class Reconstruction:
    coords: CoordinateTable
    diagnostics: SolveDiagnostics
    stitched: StitchResult
    cover: PatchCover
    locality: LocalityGraph
    timings: Dict[str, Dict[str, float]] = field(default_factory=dict)


class Reconstructor:
    """Steps from expression to coordinates for one slide, with a pluggable per-patch predictor."""

    def __init__(self, cfg: PipelineConfig, predictor: Predictor, recorder: Optional[StageRecorder] = None) -> None:
        self.cfg = cfg
        self.predictor = predictor
        self.recorder = recorder or StageRecorder(STAGES)
        self.graph = self._build().compile()

    # ---------- graph ----------
    def _build(self) -> StateGraph:
        builder = StateGraph(ReconstructState)
        nodes: Dict[str, Callable[[ReconstructState], Dict[str, Any]]] = {
            "embed": self._embed,
            "locality": self._locality,
            "patches": self._patches,
            "predict": self._predict,
            "stitch": self._stitch,
            "solve": self._solve,
        }
        for name, fn in nodes.items():
            builder.add_node(name, self._stage(name, fn))
        builder.add_edge(START, STAGES[0])
        for a, b in zip(STAGES[:-1], STAGES[1:]):
            builder.add_edge(a, b)
        builder.add_edge(STAGES[-1], END)
        return builder

    def _stage(self, name: str, fn: Callable[[ReconstructState], Dict[str, Any]]):
        def run(state: ReconstructState) -> Dict[str, Any]:
            logger.info("stage {} started", name)
            try:
                return timed(self.recorder, name, fn, state)
            except StageError:
                raise
            except Exception as e:
                raise StageError(name, e) from e

        return run

    # ---------- nodes ----------
    def _embed(self, state: ReconstructState) -> Dict[str, Any]:
        E = state["expression"]
        X = normalize_expression(E) if self.cfg.embed.normalize else E
        h = min(self.cfg.embed.h, X.shape[0], X.shape[1])
        if h < self.cfg.embed.h:
            logger.warning("embedding dimension reduced from {} to {}", self.cfg.embed.h, h)
        return {"embedding": pca_embed(X, h, ids=state["ids"])}

    def _locality(self, state: ReconstructState) -> Dict[str, Any]:
        Z = state["embedding"]
        graph = mutual_knn_graph(Z, self.cfg.graph)
        logger.info("locality graph: {} edges on {} cells", graph.n_edges, graph.n)
        return {"locality": ensure_connected(graph, Z)}

    def _patches(self, state: ReconstructState) -> Dict[str, Any]:
        rng = np.random.default_rng(self.cfg.patch.seed)
        return {"cover": sample_patches(state["locality"], self.cfg.patch, rng)}

    def _predict(self, state: ReconstructState) -> Dict[str, Any]:
        cover = state["cover"]

        def one(p: int) -> np.ndarray:
            return timed(self.recorder, "predict_patch", self.predictor, p, cover.patches[p])

        with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
            geometries = list(pool.map(one, range(len(cover))))
        return {"geometries": geometries}

    def _stitch(self, state: ReconstructState) -> Dict[str, Any]:
        result = stitch(state["geometries"], state["cover"], self.cfg.stitch, self.cfg.weighting)
        if result.graph.n_edges == 0:
            raise InvalidInputError("stitched graph is empty; relax stitch.min_support or stitch.tau_spread")
        return {"stitched": result}

    def _solve(self, state: ReconstructState) -> Dict[str, Any]:
        rng = np.random.default_rng(self.cfg.solver.seed)
        coords, diag = solve(state["stitched"].graph, self.cfg.solver, rng, ids=state["ids"])
        return {"coords": coords, "diagnostics": diag}

    # ---------- public API ----------
    def run(self, expression, ids: Sequence[str]) -> Reconstruction:
        state = self.graph.invoke({"expression": np.asarray(expression, dtype=float), "ids": tuple(ids)})
        self.recorder.log_summary()
        return Reconstruction(
            coords=state["coords"],
            diagnostics=state["diagnostics"],
            stitched=state["stitched"],
            cover=state["cover"],
            locality=state["locality"],
            timings=self.recorder.as_dict(),
        )

    async def arun(self, expression, ids: Sequence[str]) -> Reconstruction:
        return await asyncio.to_thread(self.run, expression, ids)


# ---------- run drivers ----------

def _manifest(cfg: PipelineConfig, command: str, **extra: Any) -> Dict[str, Any]:
    body = {"command": command, "config": dump_config(cfg), "seeds": cfg.seeds()}
    body.update(extra)
    return body


def synth_run(cfg: PipelineConfig, out: Union[str, Path]) -> RunStore:
    store = RunStore(out)
    slide = generate_slide(cfg.synthetic)
    slide.write(store)
    extra: Dict[str, Any] = {"n_cells": len(slide.coords), "n_genes": len(slide.genes)}
    if cfg.spots.enabled:
        spots = pseudo_spot_aggregate(slide.coords, slide.expression, cfg.spots.pitch, cfg.spots.min_cells)
        spots.write(store)
        extra.update(n_spots=len(spots), n_discarded=int(spots.discarded.size))
    store.write_manifest(_manifest(cfg, "synth", **extra))
    return store


def minisets_run(cfg: PipelineConfig, input_dir: Union[str, Path], out: Union[str, Path], count: int) -> Path:
    """Paired training minisets drawn from the slide coordinates in `input_dir`."""
    slide = SyntheticSlide.read(input_dir)
    pairs = MinisetSampler(slide.coords, cfg.minisets).pairs(count)
    return write_minisets(pairs, out, cfg.minisets)


def reconstruct_run(cfg: PipelineConfig, input_dir: Union[str, Path], out: Union[str, Path]) -> Reconstruction:
    slide = SyntheticSlide.read(input_dir)
    store = RunStore(out)
    predictor = make_predictor(cfg.predictor, slide.coords, cfg.oracle, cfg.diffusion)
    recon = Reconstructor(cfg, predictor).run(slide.expression, slide.coords.ids)

    store.put_csv("X.csv", recon.coords.to_frame())
    store.put_csv("stitched.csv", recon.stitched.graph.to_frame())
    store.put_csv("locality.csv", recon.locality.to_frame())
    store.put_bytes("patches.json", recon.cover.to_json())
    store.put_json(
        "diagnostics.json",
        {
            "solver": recon.diagnostics.to_dict(),
            "reliability": recon.stitched.reliability.weights,
            "overlap_disagreement": {f"{p}-{q}": v for (p, q), v in sorted(recon.stitched.disagreements.items())},
            "n_patches": len(recon.cover),
            "n_measurements": len(recon.stitched.measurements),
            "n_edges": recon.stitched.graph.n_edges,
        },
    )
    store.write_manifest(
        _manifest(
            cfg,
            "reconstruct",
            input_dir=str(input_dir),
            timings=recon.timings,
            n_patches=len(recon.cover),
            n_edges=recon.stitched.graph.n_edges,
            solver={
                "final_stress": recon.diagnostics.final_stress,
                "residual_max": recon.diagnostics.residual_max,
                "n_components": recon.diagnostics.n_components,
                "n_orphans": recon.diagnostics.n_orphans,
            },
        )
    )
    return recon


def evaluate_run(
    cfg: PipelineConfig,
    pred_path: Union[str, Path],
    gt_path: Union[str, Path],
    out: Union[str, Path],
    distortion: bool = False,
    distances: bool = False,
) -> Tuple[MetricsReport, List[str]]:
    """Scores predicted coordinates, or with `distances` a predicted id-labeled distance matrix."""
    pred: Union[CoordinateTable, DistanceTable] = (
        DistanceTable.read_csv(pred_path) if distances else CoordinateTable.read_csv(pred_path)
    )
    gt = CoordinateTable.read_csv(gt_path)
    report, undefined = evaluate(pred, gt, cfg.metrics)
    store = RunStore(out)
    store.put_json("metrics.json", report.model_dump())
    if distortion:
        matched = match_tables(pred, gt)
        X = coordinates_from_distances(matched.matrix) if distances else matched.coords
        distortion_map(X, gt.coords).write(store)
    store.write_manifest(
        _manifest(cfg, "evaluate", pred=str(pred_path), gt=str(gt_path), pred_kind="distances" if distances else "coords", undefined=undefined)
    )
    return report, undefined


# ---------- report ----------

def _flatten(doc: Dict[str, Any]) -> Dict[str, float]:
    flat: Dict[str, float] = {}
    for key, value in doc.items():
        if key == "lrmse":
            for k, v in sorted(value.items(), key=lambda kv: int(kv[0])):
                flat[f"lrmse@{k}"] = math.nan if v is None else float(v)
        else:
            flat[key] = math.nan if value is None else float(value)
    return flat


def _higher_is_better(metric: str) -> bool:
    return DIRECTIONS.get(metric, False)


def rank_column(values: Sequence[float], higher: bool) -> List[Optional[int]]:
    """1-based ranks (ties share the better rank); NaN gets None."""
    keyed = [(v if higher else -v) for v in values]
    ranks: List[Optional[int]] = []
    for v in keyed:
        if math.isnan(v):
            ranks.append(None)
        else:
            ranks.append(1 + sum(1 for w in keyed if not math.isnan(w) and w > v))
    return ranks


def build_report(paths: Sequence[Union[str, Path]]) -> pd.DataFrame:
    if not paths:
        raise InvalidInputError("report needs at least one metrics.json")
    rows = []
    columns: Optional[List[str]] = None
    for path in paths:
        path = Path(path)
        try:
            doc = orjson.loads(path.read_bytes())
        except (OSError, orjson.JSONDecodeError) as e:
            raise InvalidInputError(f"cannot read metrics report {path}: {e}") from e
        missing = set(MetricsReport.model_fields) - set(doc) if isinstance(doc, dict) else {"*"}
        if missing:
            raise InvalidInputError(f"{path} is not a metrics report (missing {', '.join(sorted(missing))})")
        try:
            flat = _flatten(doc)
        except (TypeError, ValueError, AttributeError) as e:
            raise InvalidInputError(f"{path} is not a metrics report: {e}") from e
        if columns is None:
            columns = list(flat)
        elif list(flat) != columns:
            raise InvalidInputError(f"{path} has a different metric schema than {paths[0]}")
        label = path.parent.name if path.name == "metrics.json" else path.stem
        rows.append({"run": label, **flat})
    return pd.DataFrame(rows, columns=["run"] + (columns or []))


def _markdown(frame: pd.DataFrame) -> str:
    metrics = [c for c in frame.columns if c != "run"]
    header = ["run"] + [f"{m} {'↑' if _higher_is_better(m) else '↓'}" for m in metrics]
    cells = [[str(r) for r in frame["run"]]]
    for m in metrics:
        values = frame[m].tolist()
        ranks = rank_column(values, _higher_is_better(m))
        col = []
        for v, r in zip(values, ranks):
            text = "nan" if math.isnan(v) else f"{v:.4f}"
            if r == 1:
                text = f"**{text}**"
            elif r == 2:
                text = f"_{text}_"
            col.append(text)
        cells.append(col)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for i in range(len(frame)):
        lines.append("| " + " | ".join(col[i] for col in cells) + " |")
    return "\n".join(lines) + "\n"


def report_run(paths: Sequence[Union[str, Path]], out: Union[str, Path]) -> pd.DataFrame:
    frame = build_report(paths)
    store = RunStore(out)
    ranked = frame.copy()
    for m in [c for c in frame.columns if c != "run"]:
        ranked[f"{m}_rank"] = pd.array(rank_column(frame[m].tolist(), _higher_is_better(m)), dtype="Int64")
    store.put_csv("report.csv", ranked)
    store.put_bytes("report.md", _markdown(frame).encode("utf-8"))
    return frame


def verify_run(run_dir: Union[str, Path]) -> List[str]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise StoreError(f"{run_dir} is not a run directory")
    return RunStore(run_dir).verify()
