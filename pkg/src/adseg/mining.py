"""Cohort baskets and consequent-constrained association rules."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import DataError
from .ingest import AdGenre, FirstOccurrenceStore, InteractionStage, UnregisteredAdvert

APP_CLASSES = ("class1", "class2", "class3", "class4")
TIME_CLASSES = ("night", "daytime", "evening")
INTERACTION_ITEMS = tuple(s.item for s in InteractionStage)
DEFAULT_CONSEQUENTS = ("playvideo", "video50", "video100")


class EmptyDatabase(DataError):
    pass


class NoQualifyingSet(DataError):
    pass


# -- cohort classes ----------------------------------------------------------

def app_count_class(n_apps: float, mean: float, sd: float, class4_from: str = "sigma") -> str:
    """Bucket an app count relative to the population mean and sd.

    Intervals are left-closed. ``class4_from`` picks where the top class
    starts (``"sigma"``: mean+sd, ``"2sigma"``: mean+2sd); the middle class
    extends up to it. Negative boundaries clamp to 0.
    """
    if sd == 0:
        return "class3"
    if class4_from == "sigma":
        top = mean + sd
    elif class4_from == "2sigma":
        top = mean + 2 * sd
    else:
        raise ValueError(f"class4_from must be 'sigma' or '2sigma', got {class4_from!r}")
    if n_apps < max(0.0, mean - 2 * sd):
        return "class1"
    if n_apps < max(0.0, mean - sd):
        return "class2"
    if n_apps < top:
        return "class3"
    return "class4"


def time_of_day_class(ts: datetime) -> str:
    h = ts.hour
    if h < 6 or h >= 22:
        return "night"
    if h < 17:
        return "daytime"
    return "evening"


def app_count_stats(counts: Iterable[int]) -> tuple[float, float]:
    """Population mean and sd (divisor n)."""
    counts = list(counts)
    if not counts:
        return 0.0, 0.0
    mean = sum(counts) / len(counts)
    var = sum((c - mean) ** 2 for c in counts) / len(counts)
    return mean, math.sqrt(var)


def item_dimension(item: str) -> str:
    """Cohort dimension of an antecedent item; unknown items form their own dimension."""
    if item in APP_CLASSES:
        return "app_class"
    if item in TIME_CLASSES:
        return "time"
    if item.startswith("cluster") and item[7:].isdigit():
        return "cluster"
    return item


# -- baskets -----------------------------------------------------------------

@dataclass(frozen=True)
class Basket:
    items: frozenset[str]
    user: str = ""
    advert: str = ""

    def to_json(self) -> dict:
        return {"user": self.user, "advert": self.advert, "items": sorted(self.items)}


@dataclass
class BasketDatabase:
    baskets: list[Basket]
    app_mean: float = 0.0
    app_sd: float = 0.0
    skipped_unclustered: int = 0

    def __len__(self) -> int:
        return len(self.baskets)

    def __iter__(self):
        return iter(self.baskets)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for b in self.baskets:
                fh.write(json.dumps(b.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "BasketDatabase":
        baskets = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    baskets.append(Basket(frozenset(obj["items"]), obj.get("user", ""), obj.get("advert", "")))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"{path} line {lineno}: bad basket ({exc})") from None
        return cls(baskets)


def build_baskets(store: FirstOccurrenceStore, assignment: Mapping[str, int],
                  registry: Mapping[str, AdGenre | str], genre: AdGenre | str | None = None,
                  adverts: Iterable[str] | None = None, *, class4_from: str = "sigma",
                  app_stats: tuple[float, float] | None = None) -> BasketDatabase:
    """One basket per impressed (user, advert) pair of a clustered user.

    App-count classes use the mean/sd of app-union sizes over every user in
    the store unless ``app_stats`` is given. Time of day comes from the first
    impression.
    """
    if genre is not None and str(genre).lower() != "all":
        genre = AdGenre(str(genre).lower())
    else:
        genre = None
    wanted = set(adverts) if adverts is not None else None
    mean, sd = app_stats if app_stats is not None else app_count_stats(
        len(a) for a in store.user_apps.values())
    stages_of: dict[tuple[str, str], list[InteractionStage]] = {}
    for (user, advert, stage) in store.records:
        if advert not in registry:
            raise UnregisteredAdvert(f"advert {advert!r} is not in the registry")
        stages_of.setdefault((user, advert), []).append(stage)
    baskets, skipped = [], 0
    for (user, advert) in sorted(stages_of):
        if genre is not None and AdGenre(registry[advert]) != genre:
            continue
        if wanted is not None and advert not in wanted:
            continue
        first = store.get(user, advert, InteractionStage.IMPRESSION)
        if first is None:
            continue
        K = assignment.get(user)
        if K is None:
            skipped += 1
            continue
        items = {f"cluster{K}",
                 app_count_class(len(store.user_apps[user]), mean, sd, class4_from),
                 time_of_day_class(first.timestamp)}
        items.update(s.item for s in stages_of[user, advert])
        baskets.append(Basket(frozenset(items), user, advert))
    return BasketDatabase(baskets, mean, sd, skipped)


# -- rules -------------------------------------------------------------------

@dataclass(frozen=True)
class Rule:
    antecedent: tuple[str, ...]
    consequent: str
    left_support: float
    support: float
    confidence: float
    lift: float
    n_baskets: int
    antecedent_count: int = field(default=0, compare=False)
    rule_count: int = field(default=0, compare=False)

    @property
    def key(self) -> tuple[tuple[str, ...], str]:
        return (self.antecedent, self.consequent)

    def __str__(self) -> str:
        return (f"{{{', '.join(self.antecedent)}}} -> {self.consequent} "
                f"(left support {self.left_support:.3g}, confidence {self.confidence:.3g}, "
                f"lift {self.lift:.3g})")


def _popcount(x: int) -> int:
    return x.bit_count()


def _make_rule(antecedent, consequent, n_ant, n_rule, n_cons, n) -> Rule:
    left_support = n_ant / n
    support = n_rule / n
    return Rule(tuple(antecedent), consequent, left_support, support, n_rule / n_ant,
                support / (left_support * (n_cons / n)), n, n_ant, n_rule)


def rule_sort_key(r: Rule):
    return (-r.lift, -r.support, r.antecedent, r.consequent)


def _item_masks(baskets: Sequence[frozenset[str]]) -> dict[str, int]:
    masks: dict[str, int] = {}
    for i, items in enumerate(baskets):
        bit = 1 << i
        for item in items:
            masks[item] = masks.get(item, 0) | bit
    return masks


def frequent_antecedents(masks: Mapping[str, int], candidates: Iterable[str], n: int,
                         min_left_support: float, max_len: int,
                         dimension: Callable[[str], str] = item_dimension) -> dict[tuple[str, ...], int]:
    """Level-wise Apriori over antecedent items; returns itemset -> basket bitmask.

    An itemset never holds two items of the same dimension.
    """
    level = {}
    for item in sorted(candidates):
        m = masks.get(item, 0)
        if _popcount(m) / n >= min_left_support:
            level[(item,)] = m
    frequent = dict(level)
    size = 1
    while level and size < max_len:
        keys = sorted(level)
        nxt = {}
        for i, a in enumerate(keys):
            for b in keys[i + 1:]:
                if a[:-1] != b[:-1]:
                    break
                cand = a + (b[-1],)
                dims = [dimension(x) for x in cand]
                if len(set(dims)) != len(dims):
                    continue
                if any(sub not in level for sub in combinations(cand, size)):
                    continue
                m = level[a] & level[b]
                count = _popcount(m)
                assert count <= min(_popcount(level[a]), _popcount(level[b]))
                if count / n >= min_left_support:
                    nxt[cand] = m
        frequent.update(nxt)
        level = nxt
        size += 1
    return frequent


def mine_rules(D: Iterable[Basket | Iterable[str]], min_left_support: float = 1e-5,
               lift_floor: float = 1.5, consequents: Iterable[str] = DEFAULT_CONSEQUENTS,
               max_antecedent: int = 3, antecedent_items: Iterable[str] | None = None,
               dimension: Callable[[str], str] = item_dimension) -> list[Rule]:
    """Rules A -> B with B a single consequent item.

    Kept when left support >= ``min_left_support``, confidence >= the
    consequent's relative support, and lift > ``lift_floor``. Antecedents
    default to every item that is neither an interaction item nor a
    consequent. Sorted by lift, then support (both descending), then
    antecedent.
    """
    baskets = [b.items if isinstance(b, Basket) else frozenset(b) for b in D]
    n = len(baskets)
    if n == 0:
        raise EmptyDatabase("basket database is empty")
    consequents = list(dict.fromkeys(consequents))
    masks = _item_masks(baskets)
    # lift > floor checked on exact counts: n_rule*n/(n_ant*n_cons) > p/q
    floor = Fraction(lift_floor)
    if antecedent_items is None:
        excluded = set(INTERACTION_ITEMS) | set(consequents)
        antecedent_items = [i for i in masks if i not in excluded]
    else:
        antecedent_items = [i for i in antecedent_items if i not in consequents]
    itemsets = frequent_antecedents(masks, antecedent_items, n, min_left_support,
                                    max_antecedent, dimension)
    rules = []
    for cons in consequents:
        cmask = masks.get(cons, 0)
        n_cons = _popcount(cmask)
        if n_cons == 0:
            continue
        for ant, amask in itemsets.items():
            n_ant = _popcount(amask)
            n_rule = _popcount(amask & cmask)
            if n_rule == 0 or n_rule * n < n_cons * n_ant:
                continue
            if n_rule * n * floor.denominator > floor.numerator * n_ant * n_cons:
                rules.append(_make_rule(ant, cons, n_ant, n_rule, n_cons, n))
    rules.sort(key=rule_sort_key)
    return rules


class AssociationRuleMiner(BaseEstimator):
    """Estimator wrapper around :func:`mine_rules`; ``fit`` takes baskets."""

    def __init__(self, min_left_support: float = 1e-5, lift_floor: float = 1.5,
                 consequents: tuple[str, ...] = DEFAULT_CONSEQUENTS, max_antecedent: int = 3):
        self.min_left_support = min_left_support
        self.lift_floor = lift_floor
        self.consequents = consequents
        self.max_antecedent = max_antecedent

    def fit(self, X, y=None):
        if not 0 < self.min_left_support <= 1:
            raise ValueError("min_left_support must lie in (0, 1]")
        if self.lift_floor < 0:
            raise ValueError("lift_floor must be >= 0")
        X = list(X)
        self.rules_ = mine_rules(X, self.min_left_support, self.lift_floor, self.consequents,
                                 self.max_antecedent)
        self.n_baskets_ = len(X)
        return self

    def predict(self, X) -> list[list[Rule]]:
        """Rules whose antecedent each basket satisfies."""
        check_is_fitted(self, "rules_")
        out = []
        for b in X:
            items = b.items if isinstance(b, Basket) else frozenset(b)
            out.append([r for r in self.rules_ if set(r.antecedent) <= items])
        return out


RULE_COLUMNS = ("antecedent", "consequent", "left_support", "support", "confidence", "lift", "n_baskets")


def write_rules_csv(rules: Iterable[Rule], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RULE_COLUMNS)
        for r in rules:
            w.writerow([";".join(r.antecedent), r.consequent, repr(r.left_support), repr(r.support),
                        repr(r.confidence), repr(r.lift), r.n_baskets])


def read_rules_csv(path: str | Path) -> list[Rule]:
    rules = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            n = int(row["n_baskets"])
            ls, sup = float(row["left_support"]), float(row["support"])
            rules.append(Rule(tuple(x for x in row["antecedent"].split(";") if x), row["consequent"],
                              ls, sup, float(row["confidence"]), float(row["lift"]), n,
                              round(ls * n), round(sup * n)))
    return rules


# -- rule-set selection ------------------------------------------------------

@dataclass
class RuleSelection:
    rules: list[Rule]
    coverage: float
    mean_lift: float
    target: float
    covered: int
    n_baskets: int

    @property
    def target_met(self) -> bool:
        return self.coverage >= self.target

    def to_dict(self) -> dict:
        return {"rules": [{"antecedent": list(r.antecedent), "consequent": r.consequent,
                           "lift": r.lift, "left_support": r.left_support} for r in self.rules],
                "coverage": self.coverage, "mean_lift": self.mean_lift, "target": self.target,
                "target_met": self.target_met, "covered": self.covered, "n_baskets": self.n_baskets}


def select_rule_set(rules: Sequence[Rule], D: Iterable[Basket | Iterable[str]],
                    min_coverage: float) -> RuleSelection:
    """Greedy set cover over baskets matched by rule antecedents.

    Repeatedly adds the rule covering the most not-yet-covered baskets (ties:
    higher lift, then input order) until coverage reaches ``min_coverage`` or
    no rule adds coverage. Mean lift is weighted by each rule's antecedent
    basket count and must exceed 1.
    """
    if not rules:
        raise NoQualifyingSet("no rules to select from")
    baskets = [b.items if isinstance(b, Basket) else frozenset(b) for b in D]
    n = len(baskets)
    if n == 0:
        raise EmptyDatabase("basket database is empty")
    masks = _item_masks(baskets)
    full = (1 << n) - 1
    cover = []
    for r in rules:
        m = full
        for item in r.antecedent:
            m &= masks.get(item, 0)
        cover.append(m)
    chosen: list[int] = []
    covered = 0
    while _popcount(covered) / n < min_coverage:
        best, best_key = None, None
        for i, m in enumerate(cover):
            if i in chosen:
                continue
            gain = _popcount(m & ~covered)
            if gain == 0:
                continue
            key = (gain, rules[i].lift, -i)
            if best_key is None or key > best_key:
                best, best_key = i, key
        if best is None:
            break
        chosen.append(best)
        covered |= cover[best]
    weights = [_popcount(cover[i]) for i in chosen]
    total = sum(weights)
    mean_lift = sum(w * rules[i].lift for w, i in zip(weights, chosen)) / total if total else 0.0
    if not chosen or mean_lift <= 1:
        raise NoQualifyingSet(f"selected rules have mean lift {mean_lift:.3g} (need > 1)")
    return RuleSelection([rules[i] for i in chosen], _popcount(covered) / n, mean_lift,
                         min_coverage, _popcount(covered), n)
