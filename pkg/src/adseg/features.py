"""App catalog, category-percentage profiles and z-score standardization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DataError

N_CATEGORIES = 22

# 21 categories visible in the published cluster profiles plus a remainder slot
DEFAULT_CATEGORIES = (
    "games", "sports", "social networking", "lifestyles", "finance", "medical",
    "weather", "health/fitness", "navigation", "news", "travel", "photo/video",
    "reference", "entertainment", "utilities", "music", "business", "food/drink",
    "productivity", "education", "books", "other",
)

# numerical floor below which a population sd is treated as exactly zero
ZERO_SD = 1e-12


class CatalogError(DataError):
    pass


class DuplicateApp(CatalogError):
    pass


class UnknownCategory(CatalogError):
    pass


class WrongCategoryCount(CatalogError):
    pass


class NoCataloguedApps(DataError):
    pass


class TooFewProfiles(DataError):
    pass


@dataclass(frozen=True)
class AppCatalog:
    categories: tuple[str, ...]
    app_category: Mapping[str, int]  # app id -> 0-based category index

    def __len__(self) -> int:
        return len(self.app_category)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def category_of(self, app: str) -> str | None:
        k = self.app_category.get(app)
        return None if k is None else self.categories[k]

    def category_vectors(self) -> tuple[list[str], np.ndarray]:
        """Binary membership matrix C (categories x apps) over the sorted app universe."""
        apps = sorted(self.app_category)
        C = np.zeros((self.n_categories, len(apps)), dtype=np.int8)
        for j, app in enumerate(apps):
            C[self.app_category[app], j] = 1
        return apps, C


def read_category_list(path: str | Path) -> tuple[str, ...]:
    with open(path, encoding="utf-8") as fh:
        names = tuple(line.strip() for line in fh if line.strip())
    if len(set(names)) != len(names):
        raise CatalogError(f"{path}: duplicate category names")
    return names


def load_catalog(path: str | Path, categories: Iterable[str] | None = None, *,
                 allow_any_k: bool = False) -> AppCatalog:
    """Load an ``app_id<TAB>category_name`` file.

    Unless ``allow_any_k``, the category list must have 22 entries and every
    one of them must be used by at least one app.
    """
    names = tuple(categories) if categories is not None else None
    index = {n: i for i, n in enumerate(names)} if names is not None else {}
    app_category: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 2 or not parts[0].strip():
                raise CatalogError(f"{path} line {lineno}: expected app_id<TAB>category")
            app, cat = parts[0].strip(), parts[1].strip()
            if cat not in index:
                if names is not None:
                    raise UnknownCategory(f"{path} line {lineno}: unknown category {cat!r}")
                index[cat] = len(index)
            k = index[cat]
            if app_category.get(app, k) != k:
                raise DuplicateApp(f"{path} line {lineno}: app {app!r} listed under two categories")
            app_category[app] = k
    if names is None:
        names = tuple(sorted(index, key=index.get))
    used = set(app_category.values())
    if not allow_any_k:
        if len(names) != N_CATEGORIES or len(used) != N_CATEGORIES:
            raise WrongCategoryCount(
                f"{path}: catalog uses {len(used)} of {len(names)} categories, expected {N_CATEGORIES}")
    return AppCatalog(categories=names, app_category=app_category)


def write_catalog(catalog: AppCatalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for app, k in catalog.app_category.items():
            fh.write(f"{app}\t{catalog.categories[k]}\n")


@dataclass
class CategoryProfile:
    user_id: str
    pct: np.ndarray
    n_apps: int
    z: np.ndarray | None = field(default=None, repr=False)


def category_counts(apps: Iterable[str], catalog: AppCatalog) -> np.ndarray:
    counts = np.zeros(catalog.n_categories, dtype=np.int64)
    for app in set(apps):
        k = catalog.app_category.get(app)
        if k is not None:
            counts[k] += 1
    return counts


def category_percentages(apps: Iterable[str], catalog: AppCatalog, user_id: str = "") -> CategoryProfile:
    """Share of a user's catalogued apps falling in each category.

    Uncatalogued apps are dropped from both the counts and the total.
    """
    counts = category_counts(apps, catalog)
    n = int(counts.sum())
    if n == 0:
        raise NoCataloguedApps(f"user {user_id!r} has no catalogued apps")
    return CategoryProfile(user_id=user_id, pct=counts / n, n_apps=n)


class AppCategoryMapper(TransformerMixin, BaseEstimator):
    """Stateless transformer from app sets to category-percentage rows."""

    def __init__(self, catalog: AppCatalog | None = None):
        self.catalog = catalog

    def fit(self, X=None, y=None):
        if self.catalog is None:
            raise ValueError("AppCategoryMapper needs a catalog")
        self.n_features_out_ = self.catalog.n_categories
        return self

    def transform(self, X: Iterable[Iterable[str]]) -> np.ndarray:
        check_is_fitted(self, "n_features_out_")
        return np.vstack([category_percentages(apps, self.catalog).pct for apps in X])

    def get_feature_names_out(self, input_features=None):
        return np.asarray(self.catalog.categories, dtype=object)


def profile_users(user_apps: Mapping[str, Iterable[str]], catalog: AppCatalog
                  ) -> tuple[list[CategoryProfile], list[str]]:
    """Profiles for every user with at least one catalogued app, plus excluded user ids."""
    profiles, excluded = [], []
    for user in sorted(user_apps):
        try:
            profiles.append(category_percentages(user_apps[user], catalog, user))
        except NoCataloguedApps:
            excluded.append(user)
    return profiles, excluded


class ZScoreStandardizer(TransformerMixin, BaseEstimator):
    """Population z-score per column (divisor n); constant columns map to 0.

    ``partial_fit`` merges running (count, mean, M2) triples, so shards can be
    fitted separately and combined with ``merge``.
    """

    def __init__(self, zero_sd: float = ZERO_SD):
        self.zero_sd = zero_sd

    def _reset(self):
        for attr in ("n_samples_seen_", "mean_", "m2_", "scale_", "zero_variance_"):
            if hasattr(self, attr):
                delattr(self, attr)

    def fit(self, X, y=None):
        self._reset()
        X = check_array(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise TooFewProfiles(f"need at least 2 profiles, got {X.shape[0]}")
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n_b = X.shape[0]
        mean_b = X.mean(axis=0)
        m2_b = ((X - mean_b) ** 2).sum(axis=0)
        if not hasattr(self, "n_samples_seen_"):
            self.n_samples_seen_, self.mean_, self.m2_ = n_b, mean_b, m2_b
        else:
            self._combine(n_b, mean_b, m2_b)
        self._finish()
        return self

    def _combine(self, n_b, mean_b, m2_b):
        n_a = self.n_samples_seen_
        n = n_a + n_b
        delta = mean_b - self.mean_
        self.mean_ = self.mean_ + delta * (n_b / n)
        self.m2_ = self.m2_ + m2_b + delta ** 2 * (n_a * n_b / n)
        self.n_samples_seen_ = n

    def _finish(self):
        var = self.m2_ / self.n_samples_seen_
        self.scale_ = np.sqrt(var)
        self.zero_variance_ = self.scale_ < self.zero_sd
        self.n_features_in_ = self.mean_.shape[0]

    def merge(self, other: "ZScoreStandardizer") -> "ZScoreStandardizer":
        out = ZScoreStandardizer(self.zero_sd)
        out.n_samples_seen_, out.mean_, out.m2_ = self.n_samples_seen_, self.mean_.copy(), self.m2_.copy()
        out._combine(other.n_samples_seen_, other.mean_, other.m2_)
        out._finish()
        return out

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=np.float64)
        safe = np.where(self.zero_variance_, 1.0, self.scale_)
        Z = (X - self.mean_) / safe
        Z[:, self.zero_variance_] = 0.0
        return Z

    def inverse_transform(self, Z):
        check_is_fitted(self, "scale_")
        Z = check_array(Z, dtype=np.float64)
        X = Z * self.scale_ + self.mean_
        X[:, self.zero_variance_] = self.mean_[self.zero_variance_]
        return X

    def to_dict(self) -> dict:
        return {"n": int(self.n_samples_seen_), "mean": self.mean_.tolist(),
                "sd": self.scale_.tolist(), "m2": self.m2_.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ZScoreStandardizer":
        out = cls()
        out.n_samples_seen_ = d["n"]
        out.mean_ = np.asarray(d["mean"], dtype=np.float64)
        out.m2_ = np.asarray(d["m2"], dtype=np.float64)
        out._finish()
        return out


def fit_standardizer(profiles: Iterable[CategoryProfile | np.ndarray]):
    """Return ``(mean, sd, zero_variance_mask)`` over the population."""
    rows = [p.pct if isinstance(p, CategoryProfile) else np.asarray(p, dtype=float) for p in profiles]
    if len(rows) < 2:
        raise TooFewProfiles(f"need at least 2 profiles, got {len(rows)}")
    sc = ZScoreStandardizer().fit(np.vstack(rows))
    return sc.mean_, sc.scale_, sc.zero_variance_


def standardize(profile: CategoryProfile | np.ndarray, mean, sd) -> np.ndarray:
    x = profile.pct if isinstance(profile, CategoryProfile) else np.asarray(profile, dtype=float)
    mean, sd = np.asarray(mean, dtype=float), np.asarray(sd, dtype=float)
    flat = sd < ZERO_SD
    z = (x - mean) / np.where(flat, 1.0, sd)
    z[flat] = 0.0
    return z


def unstandardize(z, mean, sd) -> np.ndarray:
    mean, sd = np.asarray(mean, dtype=float), np.asarray(sd, dtype=float)
    x = np.asarray(z, dtype=float) * sd + mean
    return np.where(sd < ZERO_SD, mean, x)


# profile files: JSONL rows {"user","n_apps","pct","z"} with a stats sidecar

def write_profiles(path: str | Path, profiles: list[CategoryProfile], scaler: ZScoreStandardizer,
                   categories: tuple[str, ...], excluded: list[str] = ()) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(json.dumps({"user": p.user_id, "n_apps": p.n_apps,
                                 "pct": p.pct.tolist(), "z": p.z.tolist()}) + "\n")
    sidecar = {"categories": list(categories), "standardizer": scaler.to_dict(),
               "excluded_users": list(excluded)}
    stats_path(path).write_text(json.dumps(sidecar, indent=1))


def stats_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".stats.json")


def read_profiles(path: str | Path) -> tuple[list[CategoryProfile], dict]:
    profiles = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                profiles.append(CategoryProfile(obj["user"], np.asarray(obj["pct"], dtype=float),
                                                int(obj["n_apps"]), np.asarray(obj["z"], dtype=float)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path} line {lineno}: bad profile row ({exc})") from None
    sp = stats_path(path)
    meta = json.loads(sp.read_text()) if sp.exists() else {}
    return profiles, meta
