"""Command line entry point: ``adseg <subcommand>``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import clustering, features, ingest, metrics, mining, report, synth
from .errors import AdsegError

log = logging.getLogger("adseg")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


# -- helpers -----------------------------------------------------------------

def _log_paths(paths: Sequence[str | Path]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".jsonl", ".csv", ".json")))
        else:
            out.append(p)
    return out


def _window(start: str | None, end: str | None):
    if start is None and end is None:
        return None
    return (ingest.parse_timestamp(start) if start else None,
            ingest.parse_timestamp(end) if end else None)


def _standardize_profiles(profiles):
    X = np.vstack([p.pct for p in profiles])
    scaler = features.ZScoreStandardizer().fit(X)
    for p, z in zip(profiles, scaler.transform(X)):
        p.z = z
    return scaler


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, default=str))


# -- stages (shared by subcommands and the pipeline) ---------------------------

def stage_ingest(logs, fmt, registry_path, out, *, lenient=False, window=None, threads=1, seed=None):
    registry = ingest.load_registry(registry_path) if registry_path else None
    paths = _log_paths(logs)
    if not paths:
        raise AdsegError("ingest: no log files found")
    store, stats = ingest.ingest_files(paths, fmt, lenient=lenient, window=window,
                                       registry=registry, threads=threads)
    store.save(out, seed=seed)
    funnel = store.funnel_report()
    return store, {"files": len(paths), "parsed": stats.parsed, "skipped": stats.skipped,
                   "errors": stats.errors[:20], "stored": len(store), "users": len(store.user_apps),
                   "funnel_violations": {a: r["violations"] for a, r in funnel.items() if r["violations"]}}


def stage_profile(store, catalog_path, out, *, categories_path=None, allow_any_k=False):
    categories = features.read_category_list(categories_path) if categories_path else None
    if categories is None and not allow_any_k:
        categories = features.DEFAULT_CATEGORIES
    catalog = features.load_catalog(catalog_path, categories, allow_any_k=allow_any_k)
    profiles, excluded = features.profile_users(store.user_apps, catalog)
    if len(profiles) < 2:
        raise features.TooFewProfiles(f"only {len(profiles)} users have catalogued apps")
    scaler = _standardize_profiles(profiles)
    features.write_profiles(out, profiles, scaler, catalog.categories, excluded)
    return profiles, scaler, catalog, {"profiled": len(profiles), "excluded": len(excluded),
                                       "catalogued_apps": len(catalog),
                                       "constant_categories": [catalog.categories[i] for i in
                                                               np.flatnonzero(scaler.zero_variance_)]}


def stage_cluster(profiles, meta, out, *, k=10, seed=0, restarts=10, max_iter=300, tol=1e-8,
                  assignments=None):
    model, rep = clustering.kmeans_fit(profiles, k, seed, restarts, max_iter, tol)
    model.categories = list(meta.get("categories", []))
    model.standardizer = meta.get("standardizer")
    model.save(out, assignments)
    return model, {"k": k, "sizes": model.sizes(), **rep.to_dict()}


def stage_index(store, model, registry, out):
    matrix = metrics.build_matrix(store, registry)
    table = metrics.index_table(matrix, model.assignment, registry, clusters=model.labels)
    table.write_csv(out)
    return table, {"cells": len(table), "undefined": sum(not c.defined for c in table.cells),
                   "coverage_gap": matrix.coverage_gap()}


def stage_mine(store, model, registry, out, *, genre="all", min_left_support=1e-5, lift=1.5,
               class4_from="sigma", max_antecedent=3, baskets_out=None):
    db = mining.build_baskets(store, model.assignment, registry, genre, class4_from=class4_from)
    rules = mining.mine_rules(db, min_left_support, lift, max_antecedent=max_antecedent) if len(db) else []
    mining.write_rules_csv(rules, out)
    if baskets_out:
        db.save(baskets_out)
    return rules, db, {"genre": genre, "baskets": len(db), "skipped_unclustered": db.skipped_unclustered,
                       "rules": len(rules), "app_mean": db.app_mean, "app_sd": db.app_sd}


# -- subcommands ---------------------------------------------------------------

def cmd_ingest(a):
    _, summary = stage_ingest(a.logs, a.format, a.registry, a.out, lenient=a.lenient,
                              window=_window(a.window_start, a.window_end), threads=a.threads,
                              seed=a.seed)
    _emit(summary)


def cmd_profile(a):
    store = ingest.FirstOccurrenceStore.load(a.store)
    *_, summary = stage_profile(store, a.catalog, a.out, categories_path=a.categories,
                                allow_any_k=a.allow_any_k)
    _emit(summary)


def cmd_cluster(a):
    profiles, meta = features.read_profiles(a.profiles)
    _, summary = stage_cluster(profiles, meta, a.out, k=a.k, seed=a.seed, restarts=a.restarts,
                               max_iter=a.max_iter, tol=a.tol, assignments=a.assignments)
    _emit(summary)


def cmd_index(a):
    store = ingest.FirstOccurrenceStore.load(a.store)
    model = clustering.ClusterModel.load(a.model)
    _, summary = stage_index(store, model, ingest.load_registry(a.registry), a.out)
    _emit(summary)


def cmd_mine(a):
    store = ingest.FirstOccurrenceStore.load(a.store)
    model = clustering.ClusterModel.load(a.model)
    baskets_out = a.baskets_out or Path(a.out).with_suffix(".baskets.jsonl")
    *_, summary = stage_mine(store, model, ingest.load_registry(a.registry), a.out, genre=a.genre,
                             min_left_support=a.min_left_support, lift=a.lift,
                             class4_from=a.class4_from, max_antecedent=a.max_antecedent,
                             baskets_out=baskets_out)
    _emit(summary)


def cmd_select(a):
    rules = mining.read_rules_csv(a.rules)
    db = mining.BasketDatabase.load(a.baskets)
    sel = mining.select_rule_set(rules, db, a.coverage)
    if a.out:
        Path(a.out).write_text(json.dumps(sel.to_dict(), indent=1))
    _emit(sel.to_dict())


def cmd_synth(a):
    spec = synth.SynthSpec.load(a.spec)
    if a.seed is not None:
        spec.seed = a.seed
    result = synth.generate(spec)
    paths = result.write(a.out)
    _emit({"users": len(result.users), "pairs": result.n_pairs,
           **{k: str(v) for k, v in paths.items()}})


def cmd_report(a):
    table = metrics.IndexTable.read_csv(a.index)
    rules = mining.read_rules_csv(a.rules)
    model = clustering.ClusterModel.load(a.model)
    paths = report.write_bundle(a.out, table, rules, model)
    _emit({k: str(v) for k, v in paths.items()})


PIPELINE_DEFAULTS = {
    "format": None, "categories": None, "k": 10, "seed": 0, "restarts": 10, "max_iter": 300,
    "tol": 1e-8, "genres": ["finance", "lifestyle", "entertainment"], "min_left_support": 1e-5,
    "lift": 1.5, "coverage": 0.5, "class4_from": "sigma", "max_antecedent": 3, "lenient": False,
    "window": None, "allow_any_k": False,
}


def run_pipeline(config: dict, base: Path = Path("."), *, threads: int = 1) -> dict:
    """Run every stage from a config dict, writing artifacts under ``config['out']``."""
    cfg = {**PIPELINE_DEFAULTS, **config}
    _check_thresholds(cfg["k"], cfg["min_left_support"], cfg["lift"], cfg["coverage"])
    out = (base / cfg.get("out", "adseg-out")).resolve()
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    timings = {}

    def rel(p):
        return p if p is None else str((base / p).resolve())

    if cfg.get("synth") is not None:
        spec_src = cfg["synth"]
        spec = (synth.SynthSpec.from_dict(spec_src) if isinstance(spec_src, dict)
                else synth.SynthSpec.load(rel(spec_src)))
        spec.seed = cfg["seed"]
        paths = synth.generate(spec).write(out / "synth")
        cfg.setdefault("logs", [str(paths["logs"])])
        cfg.setdefault("registry", str(paths["registry"]))
        cfg.setdefault("catalog", str(paths["catalog"]))
        cfg["categories"] = cfg["categories"] or str(paths["categories"])
        timings["synth"] = time.perf_counter() - t0
    missing = [key for key in ("logs", "registry", "catalog") if not cfg.get(key)]
    if missing:
        raise AdsegError(f"pipeline: config missing {missing}")
    logs = [rel(p) for p in ([cfg["logs"]] if isinstance(cfg["logs"], str) else cfg["logs"])]
    registry_path, catalog_path = rel(cfg["registry"]), rel(cfg["catalog"])
    window = _window(*cfg["window"]) if cfg["window"] else None

    t = time.perf_counter()
    store, s_ingest = stage_ingest(logs, cfg["format"], registry_path, out / "store.jsonl",
                                   lenient=cfg["lenient"], window=window, threads=threads,
                                   seed=cfg["seed"])
    timings["ingest"] = time.perf_counter() - t
    t = time.perf_counter()
    profiles, scaler, catalog, s_profile = stage_profile(
        store, catalog_path, out / "profiles.jsonl", categories_path=rel(cfg["categories"]),
        allow_any_k=cfg["allow_any_k"])
    timings["profile"] = time.perf_counter() - t
    t = time.perf_counter()
    _, meta = features.read_profiles(out / "profiles.jsonl")
    model, s_cluster = stage_cluster(profiles, meta, out / "model.json", k=cfg["k"], seed=cfg["seed"],
                                     restarts=cfg["restarts"], max_iter=cfg["max_iter"], tol=cfg["tol"])
    timings["cluster"] = time.perf_counter() - t
    registry = ingest.load_registry(registry_path)
    t = time.perf_counter()
    table, s_index = stage_index(store, model, registry, out / "index.csv")
    timings["index"] = time.perf_counter() - t

    t = time.perf_counter()
    rules_by_genre, selections, s_mine, all_rules = {}, {}, {}, []
    for genre in cfg["genres"]:
        rules, db, s = stage_mine(store, model, registry, out / f"rules-{genre}.csv", genre=genre,
                                  min_left_support=cfg["min_left_support"], lift=cfg["lift"],
                                  class4_from=cfg["class4_from"], max_antecedent=cfg["max_antecedent"],
                                  baskets_out=out / f"baskets-{genre}.jsonl")
        s_mine[genre] = s
        rules_by_genre[genre] = [{"antecedent": list(r.antecedent), "consequent": r.consequent,
                                  "left_support": r.left_support, "support": r.support,
                                  "confidence": r.confidence, "lift": r.lift} for r in rules]
        all_rules.extend(rules)
        try:
            selections[genre] = mining.select_rule_set(rules, db, cfg["coverage"]).to_dict()
        except (mining.NoQualifyingSet, mining.EmptyDatabase) as exc:
            selections[genre] = {"error": f"{type(exc).__name__}: {exc}"}
    timings["mine"] = time.perf_counter() - t
    all_rules.sort(key=mining.rule_sort_key)
    bundle = report.write_bundle(out / "report", table, all_rules, model, catalog.categories)

    summary = {
        "seed": cfg["seed"],
        "ingest": s_ingest, "profile": s_profile,
        "clusters": {"sizes": model.sizes(), "wcss": s_cluster["wcss"], "bcss": s_cluster["bcss"],
                     "tss": s_cluster["tss"], "iterations": s_cluster["iterations"],
                     "converged": s_cluster["converged"]},
        "index": [c.__dict__ for c in table.cells],
        "index_summary": s_index,
        "mining": s_mine, "rules": rules_by_genre, "selection": selections,
        "timings": timings, "elapsed": time.perf_counter() - t0,
    }
    artifacts = sorted(p for p in out.rglob("*") if p.is_file() and p.parent.name != "logs"
                       and p.name != "summary.json")
    summary["artifacts"] = {str(p.relative_to(out)): _sha256(p) for p in artifacts}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=str))
    return summary


def cmd_pipeline(a):
    path = Path(a.config)
    config = json.loads(path.read_text())
    if a.seed is not None:
        config["seed"] = a.seed
    if a.lenient:
        config["lenient"] = True
    summary = run_pipeline(config, path.parent, threads=a.threads)
    _emit({k: summary[k] for k in ("seed", "clusters", "timings", "elapsed")})


# -- argument parsing ----------------------------------------------------------

def _check_thresholds(k=None, min_left_support=None, lift=None, coverage=None, error=None):
    def fail(msg):
        if error:
            error(msg)
        raise AdsegError(msg)
    if k is not None and k < 1:
        fail("--k must be >= 1")
    if min_left_support is not None and not 0 < min_left_support <= 1:
        fail("--min-left-support must lie in (0, 1]")
    if lift is not None and lift < 0:
        fail("--lift must be >= 0")
    if coverage is not None and not 0 < coverage <= 1:
        fail("--coverage must lie in (0, 1]")


def build_parser() -> argparse.ArgumentParser:
    def add_globals(p, suppress):
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        p.add_argument("--seed", type=int, default=d(None), help="random seed for every stage")
        p.add_argument("--threads", type=int, default=d(1), help="worker processes for ingest")
        p.add_argument("--lenient", action="store_true", default=d(False),
                       help="skip malformed log lines instead of failing")
        p.add_argument("-v", "--verbose", action="store_true", default=d(False))

    parser = argparse.ArgumentParser(prog="adseg", description="App-profile user segmentation for ad targeting")
    add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        add_globals(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = command("ingest", cmd_ingest, "parse logs into a first-occurrence store")
    p.add_argument("logs", nargs="+", help="log files or directories")
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--registry", help="advert registry TSV; unknown adverts become line errors")
    p.add_argument("--window-start")
    p.add_argument("--window-end")
    p.add_argument("--out", required=True)

    p = command("profile", cmd_profile, "category-percentage profiles per user")
    p.add_argument("--store", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--categories", help="category list file, one name per line")
    p.add_argument("--allow-any-k", action="store_true")
    p.add_argument("--out", required=True)

    p = command("cluster", cmd_cluster, "k-means on standardized profiles")
    p.add_argument("--profiles", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--assignments")
    p.add_argument("--out", required=True)

    p = command("index", cmd_index, "index values per cluster, genre and stage")
    p.add_argument("--store", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--out", required=True)

    p = command("mine", cmd_mine, "association rules on cohort baskets")
    p.add_argument("--store", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--genre", choices=["finance", "lifestyle", "entertainment", "all"], default="all")
    p.add_argument("--min-left-support", type=float, default=1e-5)
    p.add_argument("--lift", type=float, default=1.5)
    p.add_argument("--class4-from", choices=["sigma", "2sigma"], default="sigma")
    p.add_argument("--max-antecedent", type=int, default=3)
    p.add_argument("--baskets-out")
    p.add_argument("--out", required=True)

    p = command("select", cmd_select, "greedy rule set reaching a basket coverage")
    p.add_argument("--rules", required=True)
    p.add_argument("--baskets", required=True)
    p.add_argument("--coverage", type=float, default=0.5)
    p.add_argument("--out")

    p = command("synth", cmd_synth, "generate a synthetic population")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)

    p = command("pipeline", cmd_pipeline, "run every stage from a JSON config")
    p.add_argument("--config", required=True)

    p = command("report", cmd_report, "markdown + CSV report bundle")
    p.add_argument("--index", required=True)
    p.add_argument("--rules", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if a.command == "cluster" and a.seed is None:
        a.seed = 0
    if a.threads < 1:
        parser.print_usage(sys.stderr)
        print("adseg: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        _check_thresholds(getattr(a, "k", None), getattr(a, "min_left_support", None),
                          getattr(a, "lift", None), getattr(a, "coverage", None))
    except AdsegError as exc:
        parser.print_usage(sys.stderr)
        print(f"adseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        a.func(a)
    except AdsegError as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        if module == "errors":
            module = a.command
        prefix = "" if str(exc).startswith(f"{module}:") else f"{module}: "
        print(f"adseg {prefix}{exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"adseg {a.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def run(argv: Sequence[str] | None = None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
