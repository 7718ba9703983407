"""Per-cluster index values over advert reach sets."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DataError
from .ingest import (GENRES, POST_IMPRESSION_STAGES, STAGES, AdGenre, FirstOccurrenceStore,
                     InteractionStage, UnregisteredAdvert)


class UndefinedIndex(DataError):
    pass


@dataclass
class InteractionMatrix:
    """Reach sets per advert: ``reach[advert][stage]`` is the set of users with that stage."""

    reach: dict[str, dict[InteractionStage, set[str]]] = field(default_factory=dict)
    registry: Mapping[str, AdGenre] = field(default_factory=dict)

    def impressed(self, advert: str) -> set[str]:
        return self.reach.get(advert, {}).get(InteractionStage.IMPRESSION, set())

    def users_at(self, advert: str, stage: InteractionStage) -> set[str]:
        return self.reach.get(advert, {}).get(stage, set())

    def adverts(self, genre: AdGenre | str | None = None) -> list[str]:
        if genre is None:
            return sorted(self.registry)
        genre = AdGenre(genre)
        return sorted(a for a, g in self.registry.items() if g == genre)

    def coverage_gap(self) -> dict[str, dict[str, int]]:
        """Users recorded at a stage without an impression for the same advert."""
        out = {}
        for advert, stages in sorted(self.reach.items()):
            imp = stages.get(InteractionStage.IMPRESSION, set())
            gaps = {s.canonical: len(users - imp) for s, users in stages.items()
                    if s != InteractionStage.IMPRESSION and users - imp}
            if gaps:
                out[advert] = gaps
        return out

    def merge(self, other: "InteractionMatrix") -> "InteractionMatrix":
        reach: dict[str, dict[InteractionStage, set[str]]] = {}
        for m in (self, other):
            for advert, stages in m.reach.items():
                dst = reach.setdefault(advert, {})
                for s, users in stages.items():
                    dst.setdefault(s, set()).update(users)
        return InteractionMatrix(reach, {**self.registry, **other.registry})


def build_matrix(store: FirstOccurrenceStore, registry: Mapping[str, AdGenre | str]) -> InteractionMatrix:
    registry = {a: AdGenre(g) for a, g in registry.items()}
    reach: dict[str, dict[InteractionStage, set[str]]] = {}
    for user, advert, stage in store.records:
        if advert not in registry:
            raise UnregisteredAdvert(f"advert {advert!r} is not in the registry")
        reach.setdefault(advert, {}).setdefault(stage, set()).add(user)
    return InteractionMatrix(reach, registry)


@dataclass
class _Counts:
    """Events and impressions per cluster label for one (advert set, stage)."""

    events: dict[int, int]
    impressions: dict[int, int]


def _cluster_counts(matrix: InteractionMatrix, assignment: Mapping[str, int],
                    adverts: Iterable[str], stage: InteractionStage) -> _Counts:
    events: dict[int, int] = defaultdict(int)
    imps: dict[int, int] = defaultdict(int)
    for advert in adverts:
        for user in matrix.impressed(advert):
            K = assignment.get(user)
            if K is not None:
                imps[K] += 1
        for user in matrix.users_at(advert, stage):
            K = assignment.get(user)
            if K is not None:
                events[K] += 1
    return _Counts(events, imps)


def index_value(matrix: InteractionMatrix, assignment: Mapping[str, int], K: int,
                adverts: Iterable[str], stage: InteractionStage | str) -> float:
    """Cluster K's stage rate over the advert set divided by the rate over all clusters.

    Users absent from ``assignment`` count in neither rate. Raises
    ``UndefinedIndex`` when either rate has a zero denominator.
    """
    adverts = list(adverts)
    if not adverts:
        raise ValueError("advert set must be non-empty")
    stage = stage if isinstance(stage, InteractionStage) else InteractionStage.parse(stage)
    c = _cluster_counts(matrix, assignment, adverts, stage)
    return _ratio(c, K)[0]


def _ratio(c: _Counts, K: int) -> tuple[float, float]:
    n_imp = c.impressions.get(K, 0)
    all_imp = sum(c.impressions.values())
    all_events = sum(c.events.values())
    if n_imp == 0:
        raise UndefinedIndex(f"cluster {K} has no impressions")
    if all_imp == 0 or all_events == 0:
        raise UndefinedIndex("global interaction rate is zero")
    global_rate = all_events / all_imp
    return (c.events.get(K, 0) / n_imp) / global_rate, global_rate


@dataclass(frozen=True)
class IndexCell:
    cluster: int
    genre: str
    stage: str
    cluster_events: int
    cluster_impressions: int
    global_rate: float | None
    index: float | None

    @property
    def defined(self) -> bool:
        return self.index is not None


@dataclass
class IndexTable:
    cells: list[IndexCell]

    def __len__(self) -> int:
        return len(self.cells)

    def get(self, cluster: int, genre: str, stage: str) -> IndexCell:
        for c in self.cells:
            if c.cluster == cluster and c.genre == genre and c.stage == stage:
                return c
        raise KeyError((cluster, genre, stage))

    def as_dict(self) -> dict[tuple[int, str, str], IndexCell]:
        return {(c.cluster, c.genre, c.stage): c for c in self.cells}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(INDEX_COLUMNS)
            for c in self.cells:
                w.writerow([c.cluster, c.genre, c.stage, c.cluster_events, c.cluster_impressions,
                            "" if c.global_rate is None else repr(c.global_rate),
                            "" if c.index is None else repr(c.index)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "IndexTable":
        cells = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                cells.append(IndexCell(int(row["cluster"]), row["genre"], row["stage"],
                                       int(row["cluster_events"]), int(row["cluster_impressions"]),
                                       float(row["global_rate"]) if row["global_rate"] else None,
                                       float(row["index"]) if row["index"] else None))
        return cls(cells)


INDEX_COLUMNS = ("cluster", "genre", "stage", "cluster_events", "cluster_impressions",
                 "global_rate", "index")


def index_table(matrix: InteractionMatrix, assignment: Mapping[str, int],
                registry: Mapping[str, AdGenre | str] | None = None,
                clusters: Iterable[int] | None = None,
                stages: Iterable[InteractionStage] = POST_IMPRESSION_STAGES) -> IndexTable:
    """One cell per (cluster, genre, stage), ordered by cluster, genre, then funnel stage."""
    registry = {a: AdGenre(g) for a, g in (registry or matrix.registry).items()}
    labels = sorted(set(clusters) if clusters is not None else set(assignment.values()))
    stages = list(stages)
    cells = []
    by_genre = {g: sorted(a for a, gg in registry.items() if gg == g) for g in GENRES}
    counts = {(g, s): _cluster_counts(matrix, assignment, by_genre[g], s)
              for g in GENRES for s in stages}
    for K in labels:
        for g in GENRES:
            for s in stages:
                c = counts[g, s]
                try:
                    ind, rate = _ratio(c, K)
                except UndefinedIndex:
                    all_imp = sum(c.impressions.values())
                    ind, rate = None, (sum(c.events.values()) / all_imp if all_imp else None)
                cells.append(IndexCell(K, g.value, s.canonical, c.events.get(K, 0),
                                       c.impressions.get(K, 0), rate, ind))
    return IndexTable(cells)


def index_standard_error(events: Mapping[int, int], impressions: Mapping[int, int], K: int) -> float:
    """Delta-method standard error of cluster K's index.

    Treats impression counts as fixed and events in each cluster as
    independent binomials at their observed rates.
    """
    a = {k: events.get(k, 0) for k in impressions}
    A = sum(a.values())
    N = sum(impressions.values())
    n_K = impressions[K]
    if n_K == 0 or A == 0:
        return math.nan
    var = 0.0
    for k, n_k in impressions.items():
        if n_k == 0:
            continue
        p = a[k] / n_k
        grad = (N / (n_K * A)) * ((1.0 if k == K else 0.0) - a[K] / A)
        var += grad * grad * n_k * p * (1 - p)
    return math.sqrt(var)


def table_standard_errors(matrix: InteractionMatrix, assignment: Mapping[str, int],
                          table: IndexTable) -> dict[tuple[int, str, str], float]:
    out = {}
    registry = matrix.registry
    cache = {}
    for c in table.cells:
        key = (c.genre, c.stage)
        if key not in cache:
            adverts = [a for a, g in registry.items() if AdGenre(g).value == c.genre]
            cache[key] = _cluster_counts(matrix, assignment, adverts, InteractionStage.parse(c.stage))
        cnt = cache[key]
        out[c.cluster, c.genre, c.stage] = index_standard_error(cnt.events, cnt.impressions, c.cluster)
    return out
