"""Post-hoc model selection and result reporting.

Works over per-run epoch trajectories: select the best epoch per run on dev
metrics, pick the best hyperparameter index per method on seed-averaged dev
metrics, aggregate test metrics across seeds (mean, sample std, DTO of the
means), and emit tables and trade-off plot data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyInputError, IndexSchemaError
from .evaluation import dto

CRITERIA = ("DTO", "ConstrainedFairness", "ConstrainedPerformance")


@dataclass(frozen=True)
class SelectionCriterion:
    kind: str = "DTO"
    threshold: float = 0.0
    utopia: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ValueError(f"criterion kind must be one of {CRITERIA}")
        if self.kind != "DTO" and not (0.0 <= self.threshold <= 1.0):
            raise ValueError("threshold must lie in [0, 1]")


def _best_point(points: list[tuple[float, float]], criterion: SelectionCriterion) -> int:
    """Index of the best (performance, fairness) point; ties go to the
    earliest. Constrained kinds fall back to nearest-to-threshold when no
    point meets the threshold."""
    if not points:
        raise EmptyInputError("no candidate points")
    if criterion.kind == "DTO":
        scores = [dto(p, criterion.utopia) for p in points]
        return min(range(len(points)), key=lambda i: (scores[i], i))
    if criterion.kind == "ConstrainedFairness":
        constrained, free = 0, 1  # performance must meet the threshold; maximize fairness
    else:
        constrained, free = 1, 0  # fairness must meet the threshold; maximize performance
    feasible = [i for i, p in enumerate(points) if p[constrained] >= criterion.threshold]
    if feasible:
        return min(feasible, key=lambda i: (-points[i][free], i))
    return min(range(len(points)),
               key=lambda i: (criterion.threshold - points[i][constrained], i))


def select_epoch(rows: list[dict], criterion: SelectionCriterion) -> int:
    """Best epoch of one run by its dev trajectory; returns the epoch index."""
    if not rows:
        raise EmptyInputError("run has no epochs")
    points = [(r["dev_performance"], r["dev_fairness"]) for r in rows]
    return rows[_best_point(points, criterion)]["epoch"]


def _index_key(index: dict) -> tuple:
    return tuple(sorted(index.items()))


def select_across_hyperparameters(runs: list[dict], criterion: SelectionCriterion) -> dict:
    """Pick one hyperparameter index from a method's sweep.

    Each run dict needs: index (dict), seed, rows. Per index, each seed's
    best epoch is chosen on dev; the criterion is applied to dev metrics
    averaged over seeds. Returns the chosen index plus per-seed test points
    at each run's selected epoch."""
    if not runs:
        raise EmptyInputError("no runs")
    schemas = {tuple(sorted(r["index"].keys())) for r in runs}
    if len(schemas) > 1:
        raise IndexSchemaError(f"inconsistent hyperparameter index schemas: {sorted(schemas)}")
    by_index: dict[tuple, list[dict]] = {}
    for r in runs:
        by_index.setdefault(_index_key(r["index"]), []).append(r)

    index_keys = sorted(by_index)
    dev_means = []
    per_index_details = {}
    for key in index_keys:
        dev_pts, details = [], []
        for r in sorted(by_index[key], key=lambda r: r["seed"]):
            epoch = select_epoch(r["rows"], criterion)
            row = next(x for x in r["rows"] if x["epoch"] == epoch)
            dev_pts.append((row["dev_performance"], row["dev_fairness"]))
            details.append({"seed": r["seed"], "epoch": epoch,
                            "test_performance": row["test_performance"],
                            "test_fairness": row["test_fairness"],
                            "dev_performance": row["dev_performance"],
                            "dev_fairness": row["dev_fairness"]})
        dev_means.append((sum(p for p, _ in dev_pts) / len(dev_pts),
                          sum(f for _, f in dev_pts) / len(dev_pts)))
        per_index_details[key] = details
    chosen = index_keys[_best_point(dev_means, criterion)]
    return {
        "index": dict(chosen),
        "dev_mean": dev_means[index_keys.index(chosen)],
        "per_seed": per_index_details[chosen],
    }


def pareto_frontier(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Points not strictly dominated (another >= in both, > in one);
    duplicates kept once, sorted by performance ascending."""
    unique = sorted(set((p[0], p[1]) for p in points))
    out = []
    for p in unique:
        dominated = any(q[0] >= p[0] and q[1] >= p[1] and q != p for q in unique)
        if not dominated:
            out.append(p)
    return out


def aggregate_runs(per_seed_points: list[tuple[float, float]],
                   utopia: tuple[float, float] = (1.0, 1.0)) -> dict:
    """Mean, sample std (n-1; absent for a single seed), and DTO of the means."""
    if not per_seed_points:
        raise EmptyInputError("no per-seed results")
    n = len(per_seed_points)
    perf = [p for p, _ in per_seed_points]
    fair = [f for _, f in per_seed_points]
    mean_p, mean_f = sum(perf) / n, sum(fair) / n

    def sample_std(vals, mean):
        if n < 2:
            return None
        return math.sqrt(sum((v - mean) ** 2 for v in vals) / (n - 1))

    return {
        "performance_mean": mean_p,
        "performance_std": sample_std(perf, mean_p),
        "fairness_mean": mean_f,
        "fairness_std": sample_std(fair, mean_f),
        "dto": dto((mean_p, mean_f), utopia),
        "n_seeds": n,
    }


@dataclass
class ResultsTable:
    rows: dict[str, dict]  # method -> aggregate_runs output
    metadata: dict = field(default_factory=dict)


def _fmt(mean: float, std: float | None) -> str:
    s = f"{100.0 * mean:.2f}"
    if std is not None:
        s += f" ± {100.0 * std:.2f}"
    return s


def emit_table(table: ResultsTable, format: str = "markdown") -> str:
    """Percent scale, two decimals; csv carries raw numeric columns."""
    if not table.rows:
        raise EmptyInputError("empty results table")
    methods = sorted(table.rows)
    if format == "csv":
        lines = ["method,performance_mean,performance_std,fairness_mean,fairness_std,dto"]
        for m in methods:
            r = table.rows[m]
            ps = "" if r["performance_std"] is None else f"{100.0 * r['performance_std']:.4f}"
            fs = "" if r["fairness_std"] is None else f"{100.0 * r['fairness_std']:.4f}"
            lines.append(f"{m},{100.0 * r['performance_mean']:.4f},{ps},"
                         f"{100.0 * r['fairness_mean']:.4f},{fs},{100.0 * r['dto']:.4f}")
        return "\n".join(lines) + "\n"
    if format == "markdown":
        lines = ["| Method | Performance | Fairness | DTO |",
                 "| --- | --- | --- | --- |"]
        for m in methods:
            r = table.rows[m]
            lines.append(f"| {m} | {_fmt(r['performance_mean'], r['performance_std'])} "
                         f"| {_fmt(r['fairness_mean'], r['fairness_std'])} "
                         f"| {100.0 * r['dto']:.2f} |")
        return "\n".join(lines) + "\n"
    if format == "latex":
        lines = [r"\begin{tabular}{lccc}", r"\toprule",
                 r"Method & Performance & Fairness & DTO \\", r"\midrule"]
        for m in methods:
            r = table.rows[m]
            lines.append(f"{m} & {_fmt(r['performance_mean'], r['performance_std'])} & "
                         f"{_fmt(r['fairness_mean'], r['fairness_std'])} & "
                         f"{100.0 * r['dto']:.2f} " + r"\\")
        lines += [r"\bottomrule", r"\end{tabular}"]
        return "\n".join(lines).replace("±", r"$\pm$") + "\n"
    raise ValueError(f"unknown table format {format!r}")


def emit_tradeoff_data(runs_by_method: dict[str, list[dict]],
                       pareto_only: bool = False,
                       criterion: SelectionCriterion | None = None) -> dict:
    """Structured plot data: one named series per method (sorted), each a
    parallel list of test performance/fairness at the dev-selected epoch,
    plus the hyperparameter index and seed of every point."""
    criterion = criterion or SelectionCriterion()
    series = []
    for method in sorted(runs_by_method):
        pts = []
        for r in sorted(runs_by_method[method],
                        key=lambda r: (_index_key(r["index"]), r["seed"])):
            epoch = select_epoch(r["rows"], criterion)
            row = next(x for x in r["rows"] if x["epoch"] == epoch)
            pts.append({"performance": row["test_performance"],
                        "fairness": row["test_fairness"],
                        "index": r["index"], "seed": r["seed"], "epoch": epoch})
        if pareto_only:
            frontier = set(pareto_frontier([(p["performance"], p["fairness"]) for p in pts]))
            pts = [p for p in pts if (p["performance"], p["fairness"]) in frontier]
        series.append({
            "method": method,
            "performance": [p["performance"] for p in pts],
            "fairness": [p["fairness"] for p in pts],
            "index": [p["index"] for p in pts],
            "seed": [p["seed"] for p in pts],
            "epoch": [p["epoch"] for p in pts],
        })
    return {"series": series, "pareto_only": pareto_only,
            "criterion": {"kind": criterion.kind, "threshold": criterion.threshold,
                          "utopia": list(criterion.utopia)}}


# ---------------------------------------------------------------------------
# Run-directory ingestion

def load_runs(results_dir) -> tuple[list[dict], int]:
    """Scan a results tree for finalized runs; returns (runs, skipped count).

    A run directory holds manifest.json (with finalized=true, method, index,
    seed) and epochs.jsonl."""
    results_dir = Path(results_dir)
    runs, skipped = [], 0
    if not results_dir.is_dir():
        return runs, skipped
    for manifest_path in sorted(results_dir.glob("*/manifest.json")):
        manifest = json.loads(manifest_path.read_text())
        if not manifest.get("finalized"):
            skipped += 1
            continue
        rows = []
        epochs_path = manifest_path.parent / "epochs.jsonl"
        if epochs_path.exists():
            for line in epochs_path.read_text().splitlines():
                if line.strip():
                    row = json.loads(line)
                    if "epoch" in row:
                        rows.append(row)
        if not rows:
            skipped += 1
            continue
        runs.append({"method": manifest["method"], "index": manifest["index"],
                     "seed": manifest["seed"], "rows": rows,
                     "dir": str(manifest_path.parent)})
    return runs, skipped


def analyze_runs(runs: list[dict], criterion: SelectionCriterion) -> tuple[ResultsTable, dict]:
    """Full pipeline over loaded runs: per-method sweep selection, cross-seed
    aggregation, and selection metadata."""
    if not runs:
        raise EmptyInputError("no finalized runs to analyze")
    by_method: dict[str, list[dict]] = {}
    for r in runs:
        by_method.setdefault(r["method"], []).append(r)
    rows, selection = {}, {}
    for method in sorted(by_method):
        chosen = select_across_hyperparameters(by_method[method], criterion)
        pts = [(d["test_performance"], d["test_fairness"]) for d in chosen["per_seed"]]
        rows[method] = aggregate_runs(pts, criterion.utopia)
        selection[method] = {"index": chosen["index"],
                             "per_seed": chosen["per_seed"]}
    meta = {"criterion": {"kind": criterion.kind, "threshold": criterion.threshold,
                          "utopia": list(criterion.utopia)}}
    return ResultsTable(rows=rows, metadata=meta), {"selection": selection, **meta}
