"""Markdown + CSV report bundle."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import ClusterModel
from .ingest import GENRES, POST_IMPRESSION_STAGES
from .metrics import IndexTable
from .mining import Rule, read_rules_csv, write_rules_csv


def category_deviations(centroid: np.ndarray, categories: Sequence[str], top: int = 3
                        ) -> tuple[list[tuple[str, float]], list[tuple[str, float]]]:
    """Largest positive and most negative standardized centroid coordinates."""
    order = np.argsort(centroid, kind="stable")
    pos = [(categories[i], float(centroid[i])) for i in order[::-1][:top] if centroid[i] > 0]
    neg = [(categories[i], float(centroid[i])) for i in order[:top] if centroid[i] < 0]
    return pos, neg


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def render_markdown(table: IndexTable, rules: Sequence[Rule], model: ClusterModel,
                    categories: Sequence[str] | None = None, max_rules: int = 50) -> str:
    categories = list(categories or model.categories or [f"cat{i + 1}" for i in range(model.centroids.shape[1])])
    sizes = model.sizes()
    out = ["# Segmentation report", ""]
    if model.report is not None:
        r = model.report
        out += [f"k = {model.k}; WCSS = {r.wcss:.4g}; BCSS = {r.bcss:.4g}; TSS = {r.tss:.4g}; "
                f"iterations = {r.iterations}; converged = {r.converged}", ""]
    cells = table.as_dict()
    stages = [s.canonical for s in POST_IMPRESSION_STAGES]
    for K in model.labels:
        pos, neg = category_deviations(model.centroids[K - 1], categories)
        out.append(f"## Cluster {K} ({sizes.get(K, 0)} users)")
        out.append("")
        out.append("Above average: " + (", ".join(f"{c} (+{v:.2f})" for c, v in pos) or "none"))
        out.append("Below average: " + (", ".join(f"{c} ({v:.2f})" for c, v in neg) or "none"))
        out.append("")
        out.append("| genre | " + " | ".join(stages) + " |")
        out.append("|---" * (len(stages) + 1) + "|")
        for g in GENRES:
            vals = [_fmt(cells[(K, g.value, s)].index) if (K, g.value, s) in cells else "n/a" for s in stages]
            out.append(f"| {g.value} | " + " | ".join(vals) + " |")
        out.append("")
    out.append("## Rules")
    out.append("")
    if not rules:
        out.append("no rules passed filters")
    else:
        out.append("| antecedent | consequent | left support | confidence | lift |")
        out.append("|---|---|---|---|---|")
        for r in list(rules)[:max_rules]:
            out.append(f"| {', '.join(r.antecedent)} | {r.consequent} | {r.left_support:.3g} | "
                       f"{r.confidence:.3g} | {r.lift:.3g} |")
        if len(rules) > max_rules:
            out.append(f"\n{len(rules) - max_rules} more rules in rules.csv")
    out.append("")
    return "\n".join(out)


@dataclass
class ReportBundle:
    table: IndexTable
    rules: list[Rule]
    centroids: np.ndarray
    categories: list[str]


def write_bundle(out_dir: str | Path, table: IndexTable, rules: Sequence[Rule], model: ClusterModel,
                 categories: Sequence[str] | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    categories = list(categories or model.categories or [f"cat{i + 1}" for i in range(model.centroids.shape[1])])
    paths = {"report": out / "report.md", "index": out / "index.csv", "rules": out / "rules.csv",
             "centroids": out / "centroids.csv"}
    paths["report"].write_text(render_markdown(table, rules, model, categories))
    table.write_csv(paths["index"])
    write_rules_csv(rules, paths["rules"])
    with open(paths["centroids"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", *categories])
        for K, row in enumerate(model.centroids, 1):
            w.writerow([K, *(repr(float(v)) for v in row)])
    return paths


def read_bundle(out_dir: str | Path) -> ReportBundle:
    out = Path(out_dir)
    with open(out / "centroids.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    categories = rows[0][1:]
    centroids = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return ReportBundle(IndexTable.read_csv(out / "index.csv"), read_rules_csv(out / "rules.csv"),
                        centroids, categories)
