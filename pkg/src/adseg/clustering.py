"""Lloyd's k-means over standardized category profiles."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DataError

log = logging.getLogger(__name__)

SMALL_CLUSTER_FRACTION = 0.005
_CHUNK = 4096


class TooFewDistinctPoints(DataError):
    pass


class DegenerateK(DataError):
    pass


def nearest_centroid(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """0-based index of the nearest centroid (lowest index on ties) and its squared distance.

    Distances come from the BLAS expansion; rows whose two best candidates are
    within rounding of each other are recomputed exactly so ties resolve to the
    lowest index.
    """
    n, k = X.shape[0], centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    c_sq = (centroids ** 2).sum(axis=1)
    for start in range(0, n, _CHUNK):
        block = X[start:start + _CHUNK]
        x_sq = (block ** 2).sum(axis=1)
        dist = x_sq[:, None] - 2.0 * block @ centroids.T + c_sq[None, :]
        if k > 1:
            two = np.partition(dist, 1, axis=1)[:, :2]
            slack = 1e-9 * (x_sq + c_sq.max()) + 1e-300
            close = np.flatnonzero(two[:, 1] - two[:, 0] <= slack)
        else:
            close = np.arange(len(block))
        idx = dist.argmin(axis=1)
        best = dist[np.arange(len(block)), idx]
        if len(close):
            exact = ((block[close][:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            idx[close] = exact.argmin(axis=1)
            best[close] = exact[np.arange(len(close)), idx[close]]
        far = np.setdiff1d(np.arange(len(block)), close, assume_unique=True)
        if len(far):
            best[far] = ((block[far] - centroids[idx[far]]) ** 2).sum(axis=1)
        labels[start:start + _CHUNK] = idx
        d2[start:start + _CHUNK] = best
    return labels, d2


def _cluster_means(X: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(labels, minlength=k)
    onehot = sparse.csr_matrix((np.ones(len(labels)), (labels, np.arange(len(labels)))),
                               shape=(k, len(labels)))
    sums = onehot @ X
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    return means, counts


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    centroids[0] = X[rng.integers(n)]
    closest = ((X - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise TooFewDistinctPoints(f"only {i} distinct points available for k={k}")
        idx = rng.choice(n, p=closest / total)
        centroids[i] = X[idx]
        closest = np.minimum(closest, ((X - centroids[i]) ** 2).sum(axis=1))
    return centroids


@dataclass
class LloydRun:
    centroids: np.ndarray
    labels: np.ndarray  # 0-based
    wcss: float
    history: list[float]
    n_iter: int
    converged: bool
    n_repairs: int = 0


def lloyd(X: np.ndarray, init: np.ndarray, max_iter: int = 300, tol: float = 1e-8) -> LloydRun:
    """Plain Lloyd iterations from the given centroids.

    ``history[t]`` is the WCSS of the assignment made in iteration t; the
    last entry is the WCSS of the returned labels against the returned
    centroids.
    """
    k = init.shape[0]
    centroids = init.astype(np.float64, copy=True)
    history: list[float] = []
    converged = False
    repairs = 0
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, d2 = nearest_centroid(X, centroids)
        history.append(float(d2.sum()))
        new, counts = _cluster_means(X, labels, k)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            # reseed each emptied centroid at the point farthest from its own centroid
            own = ((X - new[labels]) ** 2).sum(axis=1)
            for j in empty:
                far = int(own.argmax())
                new[j] = X[far]
                own[far] = -1.0
                repairs += 1
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol and not len(empty):
            converged = True
            break
    labels, d2 = nearest_centroid(X, centroids)
    wcss = float(d2.sum())
    history.append(wcss)
    return LloydRun(centroids, labels, wcss, history, n_iter, converged, repairs)


@dataclass
class ValidationReport:
    wcss: float
    bcss: float
    tss: float
    iterations: int = 0
    converged: bool = True
    sizes: list[int] = field(default_factory=list)

    @property
    def identity_gap(self) -> float:
        """Relative violation of wcss + bcss = tss."""
        if self.tss == 0:
            return abs(self.wcss + self.bcss)
        return abs(self.wcss + self.bcss - self.tss) / self.tss

    def to_dict(self) -> dict:
        return asdict(self)


def sums_of_squares(X: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    """(wcss, bcss, tss) with 0-based labels; bcss is the size-weighted centroid dispersion."""
    grand = X.mean(axis=0)
    tss = float(((X - grand) ** 2).sum())
    wcss = float(((X - centroids[labels]) ** 2).sum())
    sizes = np.bincount(labels, minlength=centroids.shape[0])
    bcss = float((sizes * ((centroids - grand) ** 2).sum(axis=1)).sum())
    return wcss, bcss, tss


class LloydKMeans(ClusterMixin, BaseEstimator):
    """k-means (Lloyd) with k-means++ seeding and best-of-``n_init`` restarts.

    Labels returned by ``predict``/``labels_`` run from 1 to ``n_clusters``.
    """

    def __init__(self, n_clusters: int = 10, n_init: int = 10, max_iter: int = 300,
                 tol: float = 1e-8, random_state: int | None = None):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        k = self.n_clusters
        if k is None or k < 1:
            raise DegenerateK(f"k must be >= 1, got {k}")
        n_distinct = len(np.unique(X, axis=0))
        if n_distinct < k:
            raise TooFewDistinctPoints(f"{n_distinct} distinct points for k={k}")
        seeds = np.random.SeedSequence(self.random_state).spawn(max(1, self.n_init))
        best: LloydRun | None = None
        restart_wcss, histories = [], []
        for ss in seeds:
            run = lloyd(X, kmeans_plusplus(X, k, np.random.default_rng(ss)), self.max_iter, self.tol)
            restart_wcss.append(run.wcss)
            histories.append(run.history)
            if best is None or run.wcss < best.wcss:
                best = run
        self.cluster_centers_ = best.centroids
        self.labels_ = best.labels + 1
        self.inertia_ = best.wcss
        self.n_iter_ = best.n_iter
        self.converged_ = best.converged
        self.wcss_history_ = best.history
        self.restart_wcss_ = restart_wcss
        self.restart_histories_ = histories
        self.n_features_in_ = X.shape[1]
        wcss, bcss, tss = sums_of_squares(X, best.centroids, best.labels)
        self.report_ = ValidationReport(wcss, bcss, tss, best.n_iter, best.converged,
                                        np.bincount(best.labels, minlength=k).tolist())
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return nearest_centroid(X, self.cluster_centers_)[0] + 1

    def score(self, X, y=None):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return -float(nearest_centroid(X, self.cluster_centers_)[1].sum())


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignment: dict[str, int]
    params: dict = field(default_factory=dict)
    report: ValidationReport | None = None
    categories: list[str] = field(default_factory=list)
    standardizer: dict | None = None

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def labels(self) -> list[int]:
        return list(range(1, self.k + 1))

    def sizes(self) -> dict[int, int]:
        out = {K: 0 for K in self.labels}
        for K in self.assignment.values():
            out[K] += 1
        return out

    def assign(self, z) -> int:
        z = np.asarray(z, dtype=np.float64).reshape(1, -1)
        return int(nearest_centroid(z, self.centroids)[0][0]) + 1

    def to_dict(self) -> dict:
        return {
            "format": "adseg-model", "version": 1,
            "centroids": self.centroids.tolist(),
            "params": self.params,
            "stats": self.report.to_dict() if self.report else None,
            "categories": self.categories,
            "standardizer": self.standardizer,
        }

    def save(self, path: str | Path, assignments_path: str | Path | None = None) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        write_assignments(assignments_path or default_assignments_path(path), self.assignment)

    @classmethod
    def load(cls, path: str | Path, assignments_path: str | Path | None = None) -> "ClusterModel":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("format") != "adseg-model":
            raise DataError(f"{path}: not a model file")
        report = ValidationReport(**d["stats"]) if d.get("stats") else None
        ap = Path(assignments_path or default_assignments_path(path))
        assignment = read_assignments(ap) if ap.exists() else {}
        return cls(np.asarray(d["centroids"], dtype=np.float64), assignment, d.get("params", {}),
                   report, d.get("categories", []), d.get("standardizer"))


def default_assignments_path(model_path: str | Path) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".assignments.jsonl")


def write_assignments(path: str | Path, assignment: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user in sorted(assignment):
            fh.write(json.dumps({"user": user, "cluster": int(assignment[user])}) + "\n")


def read_assignments(path: str | Path) -> dict[str, int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["user"]] = int(obj["cluster"])
    return out


def _as_matrix(profiles) -> tuple[list[str], np.ndarray]:
    if isinstance(profiles, np.ndarray):
        return [str(i) for i in range(len(profiles))], profiles
    users = [p.user_id for p in profiles]
    return users, np.vstack([p.z for p in profiles])


def kmeans_fit(profiles, k: int = 10, seed: int | None = 0, restarts: int = 10,
               max_iter: int = 300, tol: float = 1e-8) -> tuple[ClusterModel, ValidationReport]:
    """Fit k-means on standardized profiles (objects with ``user_id``/``z`` or a matrix)."""
    users, X = _as_matrix(profiles)
    est = LloydKMeans(k, restarts, max_iter, tol, seed).fit(X)
    assignment = dict(zip(users, (int(v) for v in est.labels_)))
    params = {"k": k, "seed": seed, "restarts": restarts, "max_iter": max_iter, "tol": tol,
              "n_iter": est.n_iter_, "converged": est.converged_,
              "restart_wcss": est.restart_wcss_, "wcss_history": est.wcss_history_}
    model = ClusterModel(est.cluster_centers_, assignment, params, est.report_)
    n = len(users)
    for K, size in model.sizes().items():
        if size < SMALL_CLUSTER_FRACTION * n:
            log.warning("cluster %d holds %d of %d users (< %.1f%%)", K, size, n,
                        100 * SMALL_CLUSTER_FRACTION)
    return model, est.report_


def assign(model: ClusterModel, profile) -> int:
    z = profile.z if hasattr(profile, "z") else profile
    return model.assign(z)


def validate(model: ClusterModel, profiles: Sequence | np.ndarray) -> ValidationReport:
    """Recompute sums of squares from scratch using nearest-centroid assignment."""
    _, X = _as_matrix(profiles)
    labels, _ = nearest_centroid(X, model.centroids)
    wcss, bcss, tss = sums_of_squares(X, model.centroids, labels)
    stats = model.report
    return ValidationReport(wcss, bcss, tss,
                            stats.iterations if stats else 0, stats.converged if stats else True,
                            np.bincount(labels, minlength=model.k).tolist())
