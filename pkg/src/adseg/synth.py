"""Synthetic populations with planted clusters, funnel rates and rules.

Everything is drawn up front from one seeded generator into arrays, so log
lines, records and reach sets can all be produced from the same draw.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.stats import truncnorm

from .errors import DataError
from .features import DEFAULT_CATEGORIES, AppCatalog
from .ingest import (GENRES, STAGES, AdGenre, InteractionRecord, InteractionStage,
                     format_timestamp, parse_timestamp)
from .metrics import InteractionMatrix
from .mining import APP_CLASSES, TIME_CLASSES, app_count_class, app_count_stats

N_FUNNEL = len(STAGES) - 1  # stages after the impression


class InvalidSpec(DataError):
    pass


@dataclass
class ClusterSpec:
    weight: float = 1.0
    home_categories: list[int] = field(default_factory=list)
    preference_ratio: float = 5.0
    app_count_mean: float = 20.0
    app_count_sd: float = 5.0
    # genre -> marginal reach probability for Tap..VideoComplete
    rates: dict[str, list[float]] = field(default_factory=dict)


@dataclass
class PlantedRule:
    """Multiply the reach probability of ``stage`` for impressions in a cohort.

    Downstream stages keep their unboosted marginal probabilities, so only
    ``stage`` carries the uplift.
    """

    cluster: int
    app_class: str | None = None
    time: str | None = None
    stage: str = "playvideo"
    factor: float = 3.0
    genre: str | None = None


DEFAULT_RATES = [0.30, 0.24, 0.20, 0.16, 0.12, 0.09, 0.07]
DEFAULT_ADVERTS = {
    "finance": ["Advert1", "Advert2", "Advert3"],
    "lifestyle": ["Advert4", "Advert5", "Advert6"],
    "entertainment": ["Advert7", "Advert8", "Advert9", "Advert10"],
}


@dataclass
class SynthSpec:
    n_users: int
    clusters: list[ClusterSpec]
    seed: int = 0
    categories: list[str] = field(default_factory=lambda: list(DEFAULT_CATEGORIES))
    catalog_size: int = 820
    adverts: dict[str, list[str]] = field(default_factory=lambda: {g: list(a) for g, a in DEFAULT_ADVERTS.items()})
    impressions_per_user: float = 1.5
    duplicate_rate: float = 0.05
    corrupt_rate: float = 0.0
    window_start: str = "2014-05-02T00:00"
    window_end: str = "2014-06-22T23:59"
    planted_rules: list[PlantedRule] = field(default_factory=list)
    n_publishers: int = 6
    n_sites: int = 3

    def validate(self) -> None:
        if self.n_users < 1:
            raise InvalidSpec("n_users must be >= 1")
        if not self.clusters:
            raise InvalidSpec("at least one cluster is required")
        if any(c.weight < 0 for c in self.clusters) or sum(c.weight for c in self.clusters) <= 0:
            raise InvalidSpec("cluster weights must be non-negative with a positive sum")
        n_cat = len(self.categories)
        if self.catalog_size < n_cat:
            raise InvalidSpec("catalog_size must cover every category")
        for i, c in enumerate(self.clusters, 1):
            if any(not 0 <= h < n_cat for h in c.home_categories):
                raise InvalidSpec(f"cluster {i}: home category out of range")
            if c.preference_ratio <= 0 or c.app_count_mean <= 0 or c.app_count_sd < 0:
                raise InvalidSpec(f"cluster {i}: bad app-count or preference parameters")
            for g in GENRES:
                r = self.rates_for(i, g.value)
                if len(r) != N_FUNNEL or any(not 0 <= p <= 1 for p in r):
                    raise InvalidSpec(f"cluster {i} {g.value}: need {N_FUNNEL} probabilities in [0, 1]")
                if any(b > a for a, b in zip(r, r[1:])):
                    raise InvalidSpec(f"cluster {i} {g.value}: funnel rates must be non-increasing")
        for g in self.adverts:
            AdGenre.parse(g)
        if not any(self.adverts.values()):
            raise InvalidSpec("advert roster is empty")
        if self.impressions_per_user < 1:
            raise InvalidSpec("impressions_per_user must be >= 1")
        for rate in (self.duplicate_rate, self.corrupt_rate):
            if not 0 <= rate <= 1:
                raise InvalidSpec("duplicate/corrupt rates must lie in [0, 1]")
        if parse_timestamp(self.window_end) <= parse_timestamp(self.window_start):
            raise InvalidSpec("study window is empty")
        for rule in self.planted_rules:
            if not 1 <= rule.cluster <= len(self.clusters):
                raise InvalidSpec(f"planted rule cluster {rule.cluster} out of range")
            if rule.app_class is not None and rule.app_class not in APP_CLASSES:
                raise InvalidSpec(f"unknown app class {rule.app_class!r}")
            if rule.time is not None and rule.time not in TIME_CLASSES:
                raise InvalidSpec(f"unknown time class {rule.time!r}")
            s = InteractionStage.parse(rule.stage)
            if s == InteractionStage.IMPRESSION or rule.factor <= 0:
                raise InvalidSpec("planted rule must boost a post-impression stage by a positive factor")
            for g in GENRES:
                if rule.genre is not None and AdGenre.parse(rule.genre) != g:
                    continue
                p = [1.0] + self.rates_for(rule.cluster, g.value)
                if p[s] * rule.factor > p[s - 1] + 1e-12:
                    raise InvalidSpec(f"boosted {rule.stage} rate exceeds the previous stage's rate")

    def rates_for(self, cluster: int, genre: str) -> list[float]:
        return list(self.clusters[cluster - 1].rates.get(genre, DEFAULT_RATES))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        d = dict(d)
        try:
            d["clusters"] = [ClusterSpec(**c) for c in d["clusters"]]
            d["planted_rules"] = [PlantedRule(**r) for r in d.get("planted_rules", [])]
            spec = cls(**d)
        except (KeyError, TypeError) as exc:
            raise InvalidSpec(f"bad spec: {exc}") from None
        return spec

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def planted_spec(n_users: int, k: int = 10, *, seed: int = 0, preference_ratio: float = 5.0,
                 homes_per_cluster: int = 2, app_count: tuple[float, float] = (20.0, 5.0),
                 rates: Mapping[int, Mapping[str, list[float]]] | None = None, **kwargs) -> SynthSpec:
    """Spec with k equally weighted clusters on disjoint home categories."""
    n_cat = len(kwargs.get("categories", DEFAULT_CATEGORIES))
    clusters = []
    for i in range(k):
        homes = [(i * homes_per_cluster + j) % n_cat for j in range(homes_per_cluster)]
        r = dict((rates or {}).get(i + 1, {}))
        clusters.append(ClusterSpec(1.0, homes, preference_ratio, app_count[0], app_count[1], r))
    return SynthSpec(n_users=n_users, clusters=clusters, seed=seed, **kwargs)


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


def synth_catalog(spec: SynthSpec) -> tuple[AppCatalog, np.ndarray]:
    """Catalog with apps spread round-robin over categories; returns (catalog, category per app)."""
    n_cat = len(spec.categories)
    cat_of = np.arange(spec.catalog_size) % n_cat
    mapping, seen = {}, np.zeros(n_cat, dtype=int)
    for j, k in enumerate(cat_of):
        seen[k] += 1
        mapping[f"{_slug(spec.categories[k])}{seen[k]}"] = int(k)
    return AppCatalog(tuple(spec.categories), mapping), cat_of


def time_class_shares(spec: SynthSpec) -> dict[str, float]:
    """Exact share of window minutes falling in each time-of-day class."""
    start, end = parse_timestamp(spec.window_start), parse_timestamp(spec.window_end)
    total = int((end - start).total_seconds() // 60) + 1
    minute_of_day = (start.hour * 60 + start.minute + np.arange(total)) % 1440
    hour = minute_of_day // 60
    night = ((hour < 6) | (hour >= 22)).sum()
    day = ((hour >= 6) & (hour < 17)).sum()
    return {"night": night / total, "daytime": day / total, "evening": (total - night - day) / total}


@dataclass
class SynthResult:
    spec: SynthSpec
    catalog: AppCatalog
    users: list[str]
    cluster: np.ndarray          # 1-based planted cluster per user
    apps: list[tuple[str, ...]]  # sorted app ids per user
    app_class: list[str]
    app_mean: float
    app_sd: float
    adverts: list[str]
    advert_genre: list[str]
    pair_user: np.ndarray        # index into users
    pair_advert: np.ndarray      # index into adverts
    pair_minute: np.ndarray      # impression minute offset from window start
    pair_reach: np.ndarray       # deepest stage reached (0 = impression only)
    pair_boost: np.ndarray       # planted rule applied
    pair_cond: np.ndarray        # per-pair conditional step probabilities (n_pairs x 7)
    emit: dict = field(default_factory=dict, repr=False)

    @property
    def n_pairs(self) -> int:
        return len(self.pair_user)

    def registry(self) -> dict[str, AdGenre]:
        return {a: AdGenre(g) for a, g in zip(self.adverts, self.advert_genre)}

    def assignment(self) -> dict[str, int]:
        return {u: int(k) for u, k in zip(self.users, self.cluster)}

    def pair_reach_prob(self, stage: InteractionStage) -> np.ndarray:
        """Planted probability that each pair reaches ``stage``."""
        return np.prod(self.pair_cond[:, :int(stage)], axis=1)

    def time_class(self) -> list[str]:
        hours = (self._start().hour * 60 + self._start().minute + self.pair_minute) % 1440 // 60
        return np.where((hours < 6) | (hours >= 22), "night",
                        np.where(hours < 17, "daytime", "evening")).tolist()

    def _start(self) -> datetime:
        return parse_timestamp(self.spec.window_start)

    def to_matrix(self) -> InteractionMatrix:
        """Reach sets straight from the planted draw (no duplicates, no corruption)."""
        reach: dict[str, dict[InteractionStage, set[str]]] = {}
        for a, advert in enumerate(self.adverts):
            sel = np.flatnonzero(self.pair_advert == a)
            users = np.asarray(self.users, dtype=object)[self.pair_user[sel]]
            depth = self.pair_reach[sel]
            reach[advert] = {s: set(users[depth >= int(s)]) for s in STAGES if (depth >= int(s)).any()}
        return InteractionMatrix(reach, self.registry())

    # -- emission ----------------------------------------------------------

    def _events(self) -> Iterator[tuple[int, int, int, int, int]]:
        """(pair, stage, minute, publisher, site) including duplicates, in emission order."""
        e = self.emit
        for p in range(self.n_pairs):
            minute = int(self.pair_minute[p])
            offsets = e["stage_offsets"][p]
            for s in range(int(self.pair_reach[p]) + 1):
                yield p, s, minute + int(offsets[s]), int(e["pub"][p]), int(e["site"][p])
            if e["dup"][p]:
                shift = int(e["dup_shift"][p])
                for s in range(int(e["dup_depth"][p]) + 1):
                    yield p, s, minute + shift + int(offsets[s]), int(e["pub"][p]), int(e["site"][p])

    def records(self) -> Iterator[InteractionRecord]:
        start = self._start()
        app_sets = [frozenset(a) for a in self.apps]
        for p, s, minute, pub, site in self._events():
            u = int(self.pair_user[p])
            yield InteractionRecord(self.users[u], app_sets[u], start + timedelta(minutes=minute),
                                    STAGES[s], self.adverts[int(self.pair_advert[p])],
                                    f"Pub{pub}", f"Site{site}")

    def lines(self, corrupt: bool = True) -> Iterator[str]:
        """JSONL log lines; with ``corrupt`` a seeded share is replaced by malformed rows."""
        corrupt_mask = self.emit.get("corrupt") if corrupt else None
        for i, rec in enumerate(self.records()):
            if corrupt_mask is not None and i < len(corrupt_mask) and corrupt_mask[i]:
                d = rec.to_json()
                d["ts"] = d["ts"][:-2] + "75"
                yield json.dumps(d)
            else:
                yield json.dumps(rec.to_json())

    def truth(self) -> dict:
        return {
            "app_mean": self.app_mean, "app_sd": self.app_sd,
            "users": [{"user": u, "cluster": int(k), "apps": list(a), "app_class": c}
                      for u, k, a, c in zip(self.users, self.cluster, self.apps, self.app_class)],
            "pairs": [{"user": self.users[int(u)], "advert": self.adverts[int(a)],
                       "stages": [STAGES[s].canonical for s in range(int(r) + 1)],
                       "boosted": bool(b)}
                      for u, a, r, b in zip(self.pair_user, self.pair_advert, self.pair_reach,
                                            self.pair_boost)],
        }

    def write(self, out_dir: str | Path, lines_per_file: int = 200_000) -> dict[str, Path]:
        """Write logs (sharded JSONL), truth, catalog, category list, registry and spec."""
        out = Path(out_dir)
        (out / "logs").mkdir(parents=True, exist_ok=True)
        for old in (out / "logs").glob("part-*.jsonl"):
            old.unlink()
        shard, fh, n = 0, None, 0
        for line in self.lines():
            if fh is None or n >= lines_per_file:
                if fh:
                    fh.close()
                fh = open(out / "logs" / f"part-{shard:04d}.jsonl", "w", encoding="utf-8")
                shard, n = shard + 1, 0
            fh.write(line + "\n")
            n += 1
        if fh:
            fh.close()
        paths = {"logs": out / "logs", "truth": out / "truth.json", "catalog": out / "catalog.tsv",
                 "categories": out / "categories.txt", "registry": out / "registry.tsv",
                 "spec": out / "spec.json"}
        paths["truth"].write_text(json.dumps(self.truth()))
        with open(paths["catalog"], "w", encoding="utf-8") as fh:
            for app, k in self.catalog.app_category.items():
                fh.write(f"{app}\t{self.catalog.categories[k]}\n")
        paths["categories"].write_text("\n".join(self.catalog.categories) + "\n")
        with open(paths["registry"], "w", encoding="utf-8") as fh:
            for a, g in zip(self.adverts, self.advert_genre):
                fh.write(f"{a}\t{g}\n")
        paths["spec"].write_text(json.dumps(self.spec.to_dict(), indent=1))
        return paths


def _draw_counts(rng, mean, sd, size, cap) -> np.ndarray:
    if sd == 0:
        return np.full(size, int(round(min(max(mean, 1), cap))))
    lo, hi = max(1.0, mean - 3 * sd), min(float(cap), mean + 3 * sd)
    x = truncnorm.rvs((lo - mean) / sd, (hi - mean) / sd, loc=mean, scale=sd, size=size,
                      random_state=rng)
    return np.clip(np.rint(x), np.ceil(lo), np.floor(hi)).astype(int)


def generate(spec: SynthSpec) -> SynthResult:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n_users, len(spec.clusters)
    catalog, cat_of = synth_catalog(spec)
    app_ids = np.asarray(list(catalog.app_category), dtype=object)
    n_cat = len(spec.categories)
    per_cat = np.bincount(cat_of, minlength=n_cat)

    weights = np.array([c.weight for c in spec.clusters], dtype=float)
    cluster = rng.choice(k, size=n, p=weights / weights.sum()) + 1
    width = len(str(n))
    users = [f"u{i:0{width}d}" for i in range(1, n + 1)]

    # app sets: draw with replacement from the cluster's app distribution, then dedupe
    counts = np.zeros(n, dtype=int)
    for K in range(1, k + 1):
        idx = np.flatnonzero(cluster == K)
        counts[idx] = _draw_counts(rng, spec.clusters[K - 1].app_count_mean,
                                   spec.clusters[K - 1].app_count_sd, len(idx), spec.catalog_size)
    apps: list[tuple[str, ...]] = [()] * n
    for K in range(1, k + 1):
        c = spec.clusters[K - 1]
        pref = np.ones(n_cat)
        pref[c.home_categories] = c.preference_ratio
        p_app = (pref / per_cat)[cat_of]
        p_app /= p_app.sum()
        idx = np.flatnonzero(cluster == K)
        draws = rng.choice(spec.catalog_size, size=int(counts[idx].sum()), p=p_app)
        bounds = np.concatenate([[0], np.cumsum(counts[idx])])
        for j, u in enumerate(idx):
            apps[u] = tuple(sorted(app_ids[np.unique(draws[bounds[j]:bounds[j + 1]])]))
    sizes = [len(a) for a in apps]
    app_mean, app_sd = app_count_stats(sizes)
    app_class = [app_count_class(s, app_mean, app_sd) for s in sizes]

    # impressions: each user sees m distinct adverts
    adverts = [a for g in GENRES for a in spec.adverts.get(g.value, [])]
    advert_genre = [g.value for g in GENRES for _ in spec.adverts.get(g.value, [])]
    n_ads = len(adverts)
    m = np.minimum(n_ads, 1 + rng.poisson(spec.impressions_per_user - 1, size=n))
    order = np.argsort(rng.random((n, n_ads)), axis=1)
    pair_user = np.repeat(np.arange(n), m)
    pair_advert = order[np.arange(n_ads)[None, :] < m[:, None]]
    start, end = parse_timestamp(spec.window_start), parse_timestamp(spec.window_end)
    span = int((end - start).total_seconds() // 60) + 1
    n_pairs = len(pair_user)
    pair_minute = rng.integers(0, span, size=n_pairs)

    # funnel: conditional step probabilities per pair, with planted boosts
    genre_idx = np.array([[g.value for g in GENRES].index(advert_genre[a]) for a in range(n_ads)])
    marg = np.zeros((k, len(GENRES), N_FUNNEL + 1))
    for K in range(1, k + 1):
        for gi, g in enumerate(GENRES):
            marg[K - 1, gi] = [1.0] + spec.rates_for(K, g.value)
    pair_marg = marg[cluster[pair_user] - 1, genre_idx[pair_advert]].copy()
    hours = (start.hour * 60 + start.minute + pair_minute) % 1440 // 60
    pair_time = np.where((hours < 6) | (hours >= 22), "night", np.where(hours < 17, "daytime", "evening"))
    user_class = np.asarray(app_class)
    pair_boost = np.zeros(n_pairs, dtype=bool)
    boosted_marg = pair_marg.copy()
    for rule in spec.planted_rules:
        hit = cluster[pair_user] == rule.cluster
        if rule.app_class is not None:
            hit &= user_class[pair_user] == rule.app_class
        if rule.time is not None:
            hit &= pair_time == rule.time
        if rule.genre is not None:
            hit &= genre_idx[pair_advert] == [g.value for g in GENRES].index(AdGenre.parse(rule.genre).value)
        s = int(InteractionStage.parse(rule.stage))
        boosted_marg[hit, s] = pair_marg[hit, s] * rule.factor
        pair_boost |= hit
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = boosted_marg[:, 1:] / boosted_marg[:, :-1]
    cond = np.nan_to_num(cond, nan=0.0)
    steps = rng.random((n_pairs, N_FUNNEL)) < cond
    pair_reach = np.cumprod(steps, axis=1).sum(axis=1)

    # emission details, all drawn now so output is a pure function of the seed
    emit = {
        "pub": rng.integers(1, spec.n_publishers + 1, size=n_pairs),
        "site": rng.integers(1, spec.n_sites + 1, size=n_pairs),
        "stage_offsets": np.concatenate([np.zeros((n_pairs, 1), dtype=int),
                                         np.cumsum(rng.integers(0, 3, size=(n_pairs, N_FUNNEL)), axis=1)],
                                        axis=1),
        "dup": rng.random(n_pairs) < spec.duplicate_rate,
        "dup_depth": rng.integers(0, N_FUNNEL + 1, size=n_pairs),
    }
    emit["dup_depth"] = np.minimum(emit["dup_depth"], pair_reach)
    # duplicates land later but inside the window
    latest = span - 1 - emit["stage_offsets"][:, -1] - pair_minute
    emit["dup_shift"] = np.maximum(1, (rng.random(n_pairs) * np.maximum(latest, 1)).astype(int))
    emit["dup"] &= latest >= 1
    n_events = int((pair_reach + 1).sum() + (emit["dup"] * (emit["dup_depth"] + 1)).sum())
    emit["corrupt"] = rng.random(n_events) < spec.corrupt_rate

    return SynthResult(spec, catalog, users, cluster, apps, app_class, app_mean, app_sd,
                       adverts, advert_genre, pair_user, pair_advert, pair_minute, pair_reach,
                       pair_boost, cond, emit)


def expected_index(spec: SynthSpec, K: int, genre: str, stage: InteractionStage | str,
                   class_shares: Mapping[int, Mapping[str, float]] | None = None) -> float:
    """Closed-form cluster index under the planted model.

    Exposure per cluster is proportional to its weight because adverts are
    drawn independently of cluster. Planted rules need ``class_shares``
    (cluster -> app class -> share), since app classes depend on the realized
    population mean and sd.
    """
    stage = stage if isinstance(stage, InteractionStage) else InteractionStage.parse(stage)
    if stage == InteractionStage.IMPRESSION:
        return 1.0
    genre = AdGenre.parse(genre).value
    weights = np.array([c.weight for c in spec.clusters], dtype=float)
    weights /= weights.sum()
    times = time_class_shares(spec)
    p = np.array([([1.0] + spec.rates_for(k, genre))[stage] for k in range(1, len(weights) + 1)])
    for rule in spec.planted_rules:
        if InteractionStage.parse(rule.stage) != stage:
            continue
        if rule.genre is not None and AdGenre.parse(rule.genre).value != genre:
            continue
        if rule.app_class is not None and class_shares is None:
            raise ValueError("planted rules on app classes need class_shares")
        share = times[rule.time] if rule.time else 1.0
        if rule.app_class is not None:
            share *= class_shares[rule.cluster].get(rule.app_class, 0.0)
        p[rule.cluster - 1] *= 1 + (rule.factor - 1) * share
    overall = float((weights * p).sum())
    if overall == 0:
        return float("nan")
    return float(p[K - 1] / overall)


def class_shares(result: SynthResult) -> dict[int, dict[str, float]]:
    out = {}
    cls = np.asarray(result.app_class)
    for K in range(1, len(result.spec.clusters) + 1):
        sel = cls[result.cluster == K]
        out[K] = {c: float((sel == c).mean()) if len(sel) else 0.0 for c in APP_CLASSES}
    return out


def expected_rule_lift(result: SynthResult, antecedent: Sequence[str], consequent: str,
                       genre: str | None = None) -> float:
    """Lift implied by planted probabilities given the realized cohort tags.

    Ratio of the mean planted consequent probability over baskets matching the
    antecedent to the mean over all baskets.
    """
    stage = InteractionStage.parse(consequent)
    prob = result.pair_reach_prob(stage)
    sel = np.ones(result.n_pairs, dtype=bool)
    if genre is not None and genre != "all":
        g = AdGenre.parse(genre).value
        sel &= np.asarray(result.advert_genre, dtype=object)[result.pair_advert] == g
    tags_time = np.asarray(result.time_class())
    tags_class = np.asarray(result.app_class)[result.pair_user]
    tags_cluster = result.cluster[result.pair_user]
    match = sel.copy()
    for item in antecedent:
        if item in TIME_CLASSES:
            match &= tags_time == item
        elif item in APP_CLASSES:
            match &= tags_class == item
        elif item.startswith("cluster"):
            match &= tags_cluster == int(item[7:])
        else:
            raise ValueError(f"not a cohort item: {item!r}")
    return float(prob[match].mean() / prob[sel].mean())
