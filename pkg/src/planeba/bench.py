"""Benchmark orchestration: single pipeline runs, variant ablations, and
keyframe sweeps, with CSV/JSON/markdown reporting.

Pipeline order: perturb ground truth -> build plane map -> optional
pose-plane graph (when loop pairs are enabled) -> assemble the variant's
GBA problem -> Levenberg-Marquardt -> metrics. Timing phases follow the
solver report; the pre-processor phase wraps problem assembly including
compression-matrix preparation, the post-processor phase wraps state
write-back and planar-point triangulation.
"""

from __future__ import annotations

import csv
import io as _io
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import IoFailure, PlaneBaError
from .simworld import Dataset, WorldSpec, ate_rmse, generate, perturb
from .solver import (
    AssemblyConfig,
    GraphConfig,
    SolverConfig,
    apply_graph_result,
    assemble_gba,
    build_map,
    build_pose_plane_graph,
    optimize_pose_plane_graph,
    solve_lm,
    triangulate_plane_points,
)

CSV_COLUMNS = [
    "variant", "seq", "iters", "residual_ms", "jacobians_ms", "linear_ms",
    "pre_ms", "post_ms", "sum_ms", "rmse_m",
]


@dataclass
class PipelineConfig:
    variant: str = "VIP"
    loop_enabled: bool = True
    benchmark_mode: bool = False  # fixed 10 iterations, no time limit
    perturb_rot_deg: float = 0.1  # random-walk sigma per keyframe
    perturb_trans: float = 0.01
    seed: int = 0
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(max_iterations=100, max_time_s=2.0)
    )

    def solver_for_run(self) -> SolverConfig:
        if self.benchmark_mode:
            return SolverConfig(
                max_iterations=10, max_time_s=None, run_all_iterations=True,
                use_schur=self.solver.use_schur,
            )
        return self.solver

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        assembly = AssemblyConfig.from_dict(d.pop("assembly", {}))
        graph = GraphConfig(**d.pop("graph", {}))
        solver = SolverConfig.from_dict(d.pop("solver", {}))
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        cfg = cls(**known, assembly=assembly, graph=graph, solver=solver)
        cfg.assembly.variant = cfg.variant
        return cfg


@dataclass
class BenchResult:
    variant: str
    seq: str
    seed: int = 0
    rep: int = 0
    iters: int = 0
    residual_ms: float = 0.0
    jacobians_ms: float = 0.0
    linear_ms: float = 0.0
    pre_ms: float = 0.0
    post_ms: float = 0.0
    sum_ms: float = 0.0
    rmse_m: float = float("nan")
    ate_init_m: float = float("nan")
    ate_after_graph_m: float = float("nan")
    map_ms: float = 0.0
    graph_ms: float = 0.0
    n_keyframes: int = 0
    n_planar: int = 0
    n_nonplanar: int = 0
    n_planes: int = 0
    state_dim: int = 0
    final_cost: float = float("nan")
    termination: str = ""
    error: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def run_pipeline(dataset: Dataset, config: PipelineConfig):
    """One full run; returns (BenchResult, artifacts dict)."""
    cfg = config
    cfg.assembly.variant = cfg.variant
    result = BenchResult(variant=cfg.variant, seq=f"seed{dataset.spec.seed}", seed=cfg.seed)
    result.n_keyframes = dataset.n_keyframes

    states = perturb(dataset, cfg.perturb_rot_deg, cfg.perturb_trans, cfg.seed)
    result.ate_init_m = ate_rmse(states.kf_trans, dataset.kf_trans)

    t0 = time.perf_counter()
    plane_map, positions = build_map(dataset, states, cfg.assembly)
    result.map_ms = (time.perf_counter() - t0) * 1e3

    if cfg.loop_enabled and dataset.loops:
        t0 = time.perf_counter()
        include_planes = cfg.variant != "VI"
        cam_poses, plane_vecs, rel_edges, plane_edges, plane_ids = build_pose_plane_graph(
            dataset, plane_map if include_planes else None, states, cfg.graph, include_planes
        )
        cam_poses, plane_vecs, _info = optimize_pose_plane_graph(
            cam_poses, plane_vecs, rel_edges, plane_edges, cfg.graph
        )
        states, positions = apply_graph_result(
            dataset, plane_map if include_planes else None, states, positions,
            cam_poses, plane_vecs, plane_ids,
        )
        result.graph_ms = (time.perf_counter() - t0) * 1e3
        result.ate_after_graph_m = ate_rmse(states.kf_trans, dataset.kf_trans)

    t0 = time.perf_counter()
    problem = assemble_gba(
        dataset, plane_map, positions, states, cfg.assembly, cfg.solver_for_run()
    )
    pre_ms = (time.perf_counter() - t0) * 1e3

    opt_states, report = solve_lm(problem)
    report.pre_ms = pre_ms

    t0 = time.perf_counter()
    positions = positions.copy()
    positions[problem.landmark_ids] = opt_states.landmarks
    if problem.plane_ids:
        from .geometry import PlaneCP

        for idx, pid in enumerate(problem.plane_ids):
            plane_map.planes[pid].plane = PlaneCP(opt_states.planes[idx]).to_plane()
    if cfg.variant == "VIP" and plane_map.landmark_plane:
        positions = triangulate_plane_points(dataset, plane_map, opt_states, positions)
    report.post_ms = (time.perf_counter() - t0) * 1e3

    member_count = len(plane_map.landmark_plane)
    result.iters = report.iterations
    result.residual_ms = report.residual_ms
    result.jacobians_ms = report.jacobians_ms
    result.linear_ms = report.linear_ms
    result.pre_ms = report.pre_ms
    result.post_ms = report.post_ms
    result.sum_ms = report.sum_ms
    result.rmse_m = ate_rmse(opt_states.kf_trans, dataset.kf_trans)
    result.n_planar = member_count
    result.n_nonplanar = dataset.n_landmarks - member_count
    result.n_planes = len(problem.plane_ids)
    result.state_dim = problem.state_dimension()
    result.final_cost = report.final_cost
    result.termination = report.termination

    artifacts = {
        "states": opt_states,
        "positions": positions,
        "plane_map": plane_map,
        "problem": problem,
        "report": report,
    }
    return result, artifacts


def run_ablation(specs, variants, repetitions: int = 3, seed: int = 0,
                 config: PipelineConfig | None = None, warmup: bool = True):
    """Variant matrix over datasets; returns (results, summary).

    ``specs`` is a list of (name, WorldSpec) or (name, Dataset) pairs.
    Per-run errors are recorded on the result row, not raised.
    """
    if not variants:
        raise ValueError("ablation needs at least one variant")
    base = config or PipelineConfig()
    results = []
    for seq_name, spec in specs:
        dataset = spec if isinstance(spec, Dataset) else generate(spec)
        if warmup:
            warm_cfg = _clone_config(base, variants[0], seed)
            warm_cfg.benchmark_mode = base.benchmark_mode
            try:
                run_pipeline(dataset, warm_cfg)
            except PlaneBaError:
                pass
        for variant in variants:
            for rep in range(repetitions):
                cfg = _clone_config(base, variant, seed + rep)
                row = None
                try:
                    row, _ = run_pipeline(dataset, cfg)
                except PlaneBaError as exc:
                    row = BenchResult(variant=variant, seq=str(seq_name), seed=seed + rep,
                                      error=str(exc))
                row.seq = str(seq_name)
                row.rep = rep
                results.append(row)
    return results, summarize(results)


def _clone_config(base: PipelineConfig, variant: str, seed: int) -> PipelineConfig:
    import copy

    cfg = copy.deepcopy(base)
    cfg.variant = variant
    cfg.assembly.variant = variant
    cfg.seed = seed
    return cfg


def summarize(results) -> dict:
    """Per-variant means plus speedup ratios relative to the VI variant."""
    ok = [r for r in results if not r.error]
    variants = sorted({r.variant for r in ok})
    summary = {"variants": {}}
    for v in variants:
        rows = [r for r in ok if r.variant == v]
        summary["variants"][v] = {
            "runs": len(rows),
            "mean_sum_ms": float(np.mean([r.sum_ms for r in rows])),
            "median_sum_ms": float(np.median([r.sum_ms for r in rows])),
            "mean_rmse_m": float(np.mean([r.rmse_m for r in rows])),
            "mean_ate_init_m": float(np.mean([r.ate_init_m for r in rows])),
        }
    if "VI" in summary["variants"]:
        vi = summary["variants"]["VI"]["mean_sum_ms"]
        summary["speedup_vs_VI"] = {
            v: vi / summary["variants"][v]["mean_sum_ms"] for v in variants
        }
    errors = [r for r in results if r.error]
    summary["errors"] = len(errors)
    return summary


def sweep_keyframes(base_spec: WorldSpec, keyframe_counts, variants,
                    config: PipelineConfig | None = None, seed: int = 0,
                    repetitions: int = 1):
    """Fig.-5-style sweep: scale keyframes (landmarks proportionally)."""
    results = []
    base_k = base_spec.n_keyframes
    for K in sorted(keyframe_counts):
        scale = K / base_k
        spec = WorldSpec.from_dict(base_spec.to_dict())
        spec.n_keyframes = int(K)
        spec.n_planar_points = max(50, int(round(base_spec.n_planar_points * scale)))
        spec.n_nonplanar_points = max(50, int(round(base_spec.n_nonplanar_points * scale)))
        spec.trajectory.duration_s = max(8.0, base_spec.trajectory.duration_s * scale)
        rows, _ = run_ablation(
            [(f"kf{K}", spec)], variants, repetitions=repetitions, seed=seed, config=config
        )
        results.extend(rows)
    return results, summarize(results)


# --------------------------------------------------------------------------
# Reporting


def render_csv(results) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in results:
        writer.writerow([
            r.variant, r.seq, r.iters,
            _fmt(r.residual_ms), _fmt(r.jacobians_ms), _fmt(r.linear_ms),
            _fmt(r.pre_ms), _fmt(r.post_ms), _fmt(r.sum_ms), _fmt(r.rmse_m),
        ])
    return buf.getvalue()


def _fmt(x) -> str:
    return repr(float(x))


def render_markdown(results, summary=None) -> str:
    lines = ["| " + " | ".join(CSV_COLUMNS) + " |",
             "|" + "---|" * len(CSV_COLUMNS)]
    for r in results:
        lines.append(
            "| " + " | ".join([
                r.variant, r.seq, str(r.iters),
                f"{r.residual_ms:.1f}", f"{r.jacobians_ms:.1f}", f"{r.linear_ms:.1f}",
                f"{r.pre_ms:.1f}", f"{r.post_ms:.1f}", f"{r.sum_ms:.1f}", f"{r.rmse_m:.6f}",
            ]) + " |"
        )
    if summary and "speedup_vs_VI" in summary:
        lines.append("")
        lines.append("Speedup vs VI: " + ", ".join(
            f"{v}: {s:.2f}x" for v, s in sorted(summary["speedup_vs_VI"].items())
        ))
    return "\n".join(lines) + "\n"


def render_sweep_csv(results) -> str:
    """Keyframe count vs per-variant total GBA time (plot-ready)."""
    variants = sorted({r.variant for r in results if not r.error})
    by_seq = {}
    for r in results:
        if r.error:
            continue
        by_seq.setdefault(r.seq, {}).setdefault(r.variant, []).append(r.sum_ms)
    rows = []
    for seq in by_seq:
        k = int(seq.replace("kf", ""))
        rows.append((k, seq))
    rows.sort()
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["keyframes"] + [f"{v}_sum_ms" for v in variants])
    for k, seq in rows:
        writer.writerow([k] + [_fmt(np.median(by_seq[seq].get(v, [float("nan")]))) for v in variants])
    return buf.getvalue()


def emit_report(results, fmt: str = "csv", out_dir=None, summary=None, stem: str = "results"):
    """Write results in the requested format(s); returns written paths."""
    if not results:
        raise IoFailure("emit_report needs at least one result row")
    out_dir = Path(out_dir) if out_dir is not None else Path.cwd()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        if fmt in ("csv", "all"):
            p = out_dir / f"{stem}.csv"
            p.write_text(render_csv(results))
            paths.append(p)
        if fmt in ("json", "all"):
            payload = {"results": [r.as_dict() for r in results]}
            if summary is not None:
                payload["summary"] = summary
            p = out_dir / f"{stem}.json"
            p.write_text(json.dumps(payload, indent=2, sort_keys=True))
            paths.append(p)
        if fmt in ("markdown", "all"):
            p = out_dir / f"{stem}.md"
            p.write_text(render_markdown(results, summary))
            paths.append(p)
    except OSError as exc:
        raise IoFailure(f"failed writing report: {exc}") from exc
    if not paths:
        raise IoFailure(f"unknown report format {fmt!r}")
    return paths


def parse_csv(text: str):
    """Read back a results CSV into float/str row dicts (bit-exact floats)."""
    reader = csv.reader(_io.StringIO(text))
    header = next(reader)
    rows = []
    for rec in reader:
        row = {}
        for key, val in zip(header, rec):
            if key in ("variant", "seq"):
                row[key] = val
            elif key == "iters":
                row[key] = int(val)
            else:
                row[key] = float(val)
        rows.append(row)
    return rows
