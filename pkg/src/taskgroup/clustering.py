"""Task grouping by clustering rows of the task embedding matrix.

Every algorithm returns a GroupingSolution whose group indices are dense in
[0, K) and numbered by first appearance in task order, so equal partitions
serialize identically.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .linalg import jacobi_eigh

NOISE = -1
ALGORITHMS = ("kmeans", "ward", "spectral", "dbscan", "ssc", "metadata", "all_in_one", "singletons")


class ClusteringError(ValueError):
    pass


@dataclass
class GroupingSolution:
    assignments: np.ndarray
    algorithm: str
    K: int = 0
    seed: int | None = None
    objective_value: float | None = None
    task_ids: list[str] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.assignments = canonical_labels(np.asarray(self.assignments, dtype=np.int64))
        self.K = int(self.assignments.max()) + 1 if self.assignments.size else 0
        if self.task_ids is not None and len(self.task_ids) != len(self.assignments):
            raise ClusteringError("task_ids length differs from assignments")
        self.validate()

    @property
    def num_tasks(self) -> int:
        return len(self.assignments)

    def groups(self) -> list[list[int]]:
        return [np.flatnonzero(self.assignments == k).tolist() for k in range(self.K)]

    def validate(self) -> None:
        a = self.assignments
        if a.size and (a.min() < 0 or set(np.unique(a)) != set(range(self.K))):
            raise ClusteringError("group indices must be dense in [0, K)")

    def to_tsv(self, path: str | Path) -> None:
        ids = self.task_ids or [str(i) for i in range(self.num_tasks)]
        lines = [f"# algorithm: {self.algorithm}", f"# K: {self.K}", f"# seed: {self.seed}",
                 f"# objective: {_fmt(self.objective_value)}",
                 f"# metadata: {json.dumps(self.metadata, sort_keys=True, default=_jsonable)}",
                 "task_id\tgroup"]
        lines += [f"{t}\t{g}" for t, g in zip(ids, self.assignments.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_tsv(cls, path: str | Path) -> "GroupingSolution":
        header: dict[str, str] = {}
        ids, groups = [], []
        for line in Path(path).read_text().splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                header[key] = value
            elif line and not line.startswith("task_id\t"):
                t, g = line.split("\t")
                ids.append(t)
                groups.append(int(g))
        seed = None if header.get("seed", "None") == "None" else int(header["seed"])
        obj = None if header.get("objective", "None") == "None" else float(header["objective"])
        return cls(np.array(groups), header.get("algorithm", "unknown"), seed=seed, objective_value=obj,
                   task_ids=ids, metadata=json.loads(header.get("metadata", "{}")))


def _fmt(x) -> str:
    return "None" if x is None else repr(float(x))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel so groups are numbered by first appearance; NOISE stays NOISE."""
    out = np.full(labels.shape, NOISE, dtype=np.int64)
    mapping: dict[int, int] = {}
    for i, lab in enumerate(labels.tolist()):
        if lab == NOISE:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def _as_matrix(E) -> np.ndarray:
    values = getattr(E, "values", E)
    X = np.asarray(values, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ClusteringError(f"expected a non-empty 2-D matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ClusteringError("embedding matrix has non-finite entries")
    return X


def _task_ids(E) -> list[str] | None:
    ids = getattr(E, "task_ids", None)
    return list(ids) if ids is not None else None


def _check_k(K: int, T: int, lowest: int = 1) -> None:
    if not lowest <= K <= T:
        raise ClusteringError(f"K must satisfy {lowest} <= K <= {T} (number of tasks), got {K}")


def sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def sse(X: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for k in np.unique(labels):
        pts = X[labels == k]
        total += float(((pts - pts.mean(0)) ** 2).sum())
    return total


# ----------------------------------------------------------------------------
# k-means
# ----------------------------------------------------------------------------

def kmeans_plusplus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    T = len(X)
    centers = [int(rng.integers(T))]
    d2 = sq_distances(X, X[centers])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(T))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, T - 1)
        centers.append(idx)
        d2 = np.minimum(d2, sq_distances(X, X[[idx]])[:, 0])
    return X[centers].copy()


@dataclass
class LloydResult:
    labels: np.ndarray
    centers: np.ndarray
    sse_history: list[float]
    iterations: int


def lloyd(X: np.ndarray, centers: np.ndarray, max_iters: int = 300) -> LloydResult:
    """Alternate assignment and mean update until assignments stop changing.

    An emptied cluster takes the point farthest from its current centroid.
    ``sse_history[i]`` is the SSE after iteration i's update step.
    """
    K = len(centers)
    centers = centers.copy()
    labels = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d = sq_distances(X, centers)
        new = d.argmin(1)
        counts = np.bincount(new, minlength=K)
        for k in np.flatnonzero(counts == 0):
            own = d[np.arange(len(X)), new]
            # only donors that keep at least one member
            sizes = np.bincount(new, minlength=K)
            own = np.where(sizes[new] > 1, own, -1.0)
            far = int(own.argmax())
            if own[far] < 0:
                break
            new[far] = k
            d[far] = np.inf
            d[far, k] = 0.0
        for k in range(K):
            members = new == k
            if members.any():
                centers[k] = X[members].mean(0)
        history.append(float(sq_distances(X, centers)[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            labels = new
            break
        labels = new
    return LloydResult(labels, centers, history, it)


def kmeans(E, K: int, seed: int = 0, restarts: int = 10, max_iters: int = 300) -> GroupingSolution:
    """Best of ``restarts`` seeded k-means++ / Lloyd runs by SSE (ties: earliest restart)."""
    X = _as_matrix(E)
    _check_k(K, len(X))
    rng = np.random.default_rng(seed)
    best: LloydResult | None = None
    best_sse = math.inf
    best_restart = -1
    for r in range(max(1, restarts)):
        res = lloyd(X, kmeans_plusplus(X, K, rng), max_iters)
        value = res.sse_history[-1]
        if value < best_sse - 1e-12:
            best, best_sse, best_restart = res, value, r
    assert best is not None
    return GroupingSolution(best.labels, "kmeans", seed=seed, objective_value=best_sse, task_ids=_task_ids(E),
                            metadata={"restarts": restarts, "best_restart": best_restart,
                                      "iterations": best.iterations})


def k_sweep(E, ks: Sequence[int], seed: int = 0, restarts: int = 10) -> list[GroupingSolution]:
    return [kmeans(E, k, seed, restarts) for k in ks]


# ----------------------------------------------------------------------------
# Ward agglomerative
# ----------------------------------------------------------------------------

def ward_agglomerative(E, K: int) -> GroupingSolution:
    """Bottom-up merging by smallest increase in within-cluster SSE, cut at K clusters."""
    X = _as_matrix(E)
    T = len(X)
    _check_k(K, T)
    members: dict[int, list[int]] = {i: [i] for i in range(T)}
    centroid = {i: X[i].copy() for i in range(T)}
    merges: list[tuple[int, int, float]] = []
    next_id = T
    labels_at_k = None
    while len(members) > 1:
        if len(members) == K:
            labels_at_k = _labels_from(members, T)
        ids = sorted(members)
        C = np.array([centroid[i] for i in ids])
        n = np.array([len(members[i]) for i in ids], dtype=np.float64)
        cost = sq_distances(C, C) * (n[:, None] * n[None, :]) / (n[:, None] + n[None, :])
        cost[np.tril_indices(len(ids))] = np.inf
        a, b = np.unravel_index(int(np.argmin(cost)), cost.shape)
        ia, ib = ids[a], ids[b]
        merges.append((ia, ib, float(cost[a, b])))
        members[next_id] = members.pop(ia) + members.pop(ib)
        centroid[next_id] = (centroid.pop(ia) * n[a] + centroid.pop(ib) * n[b]) / (n[a] + n[b])
        next_id += 1
    if labels_at_k is None:
        labels_at_k = _labels_from(members, T)
    return GroupingSolution(labels_at_k, "ward", objective_value=sse(X, labels_at_k), task_ids=_task_ids(E),
                            metadata={"merge_costs": [m[2] for m in merges],
                                      "merges": [[m[0], m[1]] for m in merges]})


def _labels_from(members: dict[int, list[int]], T: int) -> np.ndarray:
    labels = np.empty(T, dtype=np.int64)
    for k, cid in enumerate(sorted(members, key=lambda c: min(members[c]))):
        labels[members[cid]] = k
    return labels


# ----------------------------------------------------------------------------
# spectral
# ----------------------------------------------------------------------------

def rbf_affinity(X: np.ndarray, bandwidth: float | None = None) -> tuple[np.ndarray, float]:
    d2 = sq_distances(X, X)
    if bandwidth is None:
        iu = np.triu_indices(len(X), 1)
        bandwidth = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 0.0
    if not bandwidth > 0:
        raise ClusteringError("degenerate affinity: all points identical (zero bandwidth)")
    A = np.exp(-d2 / (2.0 * bandwidth ** 2))
    np.fill_diagonal(A, 0.0)
    return A, bandwidth


def normalized_laplacian(A: np.ndarray) -> np.ndarray:
    deg = A.sum(1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(len(A)) - inv[:, None] * A * inv[None, :]


def spectral_from_affinity(A: np.ndarray, K: int, seed: int = 0, restarts: int = 10) -> tuple[np.ndarray, dict]:
    L = normalized_laplacian(A)
    w, V = jacobi_eigh(L)
    vals, vecs = w[:K], V[:, :K]
    residual = float(max(np.linalg.norm(L @ vecs[:, j] - vals[j] * vecs[:, j]) for j in range(K)))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    U = vecs / np.where(norms > 0, norms, 1.0)
    labels = kmeans(U, K, seed, restarts).assignments
    return labels, {"eigenvalues": vals.tolist(), "eigen_residual": residual}


def spectral(E, K: int, seed: int = 0, bandwidth: float | None = None, restarts: int = 10) -> GroupingSolution:
    """RBF affinity (median pairwise distance bandwidth by default), symmetric
    normalized Laplacian, K smallest eigenvectors row-normalized, then k-means."""
    X = _as_matrix(E)
    _check_k(K, len(X), lowest=2)
    A, bw = rbf_affinity(X, bandwidth)
    labels, info = spectral_from_affinity(A, K, seed, restarts)
    info["bandwidth"] = bw
    return GroupingSolution(labels, "spectral", seed=seed, objective_value=sse(X, labels),
                            task_ids=_task_ids(E), metadata=info)


# ----------------------------------------------------------------------------
# DBSCAN
# ----------------------------------------------------------------------------

def dbscan_labels(X: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Core/border/noise labeling; neighbourhoods include the point itself."""
    d2 = sq_distances(X, X)
    neigh = [np.flatnonzero(row <= eps * eps) for row in d2]
    core = np.array([len(n) >= min_pts for n in neigh])
    labels = np.full(len(X), NOISE, dtype=np.int64)
    cluster = 0
    for i in range(len(X)):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        queue = [i]
        while queue:
            p = queue.pop()
            if not core[p]:
                continue
            for q in neigh[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                    queue.append(int(q))
        cluster += 1
    return labels


def dbscan(E, eps: float, min_pts: int) -> GroupingSolution:
    """DBSCAN; noise tasks are then attached to the cluster with the nearest centroid.

    The raw labels (with -1 for noise) are kept in ``metadata["raw_labels"]``.
    """
    if not eps > 0 or min_pts < 1:
        raise ClusteringError("need eps > 0 and min_pts >= 1")
    X = _as_matrix(E)
    raw = dbscan_labels(X, eps, min_pts)
    if (raw == NOISE).all():
        raise ClusteringError(f"every task is noise at eps={eps}, min_pts={min_pts}; "
                              "increase eps or decrease min_pts")
    labels = raw.copy()
    noise = np.flatnonzero(raw == NOISE)
    if noise.size:
        ks = np.unique(raw[raw != NOISE])
        C = np.array([X[raw == k].mean(0) for k in ks])
        labels[noise] = ks[sq_distances(X[noise], C).argmin(1)]
    return GroupingSolution(labels, "dbscan", objective_value=sse(X, labels), task_ids=_task_ids(E),
                            metadata={"raw_labels": raw.tolist(), "eps": eps, "min_pts": min_pts,
                                      "noise": noise.tolist()})


# ----------------------------------------------------------------------------
# sparse subspace clustering
# ----------------------------------------------------------------------------

def lasso_cd(D: np.ndarray, y: np.ndarray, lam: float, tol: float = 1e-8,
             max_sweeps: int = 10_000) -> tuple[np.ndarray, list[float]]:
    """min_c ||y - D c||^2 + lam * ||c||_1 by cyclic coordinate descent.

    Returns the coefficients and the objective after every sweep.
    """
    n = D.shape[1]
    c = np.zeros(n)
    col_sq = (D * D).sum(0)
    r = y.astype(np.float64).copy()
    history = []
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(n):
            if col_sq[j] == 0:
                continue
            old = c[j]
            rho = D[:, j] @ r + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam / 2.0, 0.0) / col_sq[j]
            if new != old:
                r -= D[:, j] * (new - old)
                c[j] = new
                biggest = max(biggest, abs(new - old))
        history.append(float(r @ r + lam * np.abs(c).sum()))
        if biggest <= tol:
            break
    return c, history


def self_representation(X: np.ndarray, lam: float, tol: float = 1e-8,
                        max_sweeps: int = 10_000) -> tuple[np.ndarray, list[list[float]]]:
    """[T, T] coefficient matrix with zero diagonal: row i codes e_i by the other rows."""
    T = len(X)
    C = np.zeros((T, T))
    histories = []
    for i in range(T):
        others = np.array([j for j in range(T) if j != i], dtype=np.int64)
        c, hist = lasso_cd(X[others].T, X[i], lam, tol, max_sweeps)
        C[i, others] = c
        histories.append(hist)
    return C, histories


def ssc(E, sparsity_weight: float, K: int, seed: int = 0, tol: float = 1e-8,
        max_sweeps: int = 10_000, normalize: bool = True) -> GroupingSolution:
    """Sparse self-representation, affinity |C| + |C|^T, spectral clustering on it.

    With ``normalize`` rows are scaled to unit length first. Subspace membership
    does not depend on scale, and on raw rows a point much longer than its
    same-subspace neighbours can pick up small cross-subspace coefficients at
    any sparsity weight.
    """
    if not sparsity_weight > 0:
        raise ClusteringError(f"sparsity weight must be positive, got {sparsity_weight}")
    X = _as_matrix(E)
    _check_k(K, len(X), lowest=2)
    Z = X
    if normalize:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        Z = X / np.where(norms > 0, norms, 1.0)
    C, histories = self_representation(Z, sparsity_weight, tol, max_sweeps)
    A = np.abs(C) + np.abs(C).T
    if np.abs(C).max(initial=0.0) < 1e-10:
        warnings.warn("sparse self-representation is all zeros; sparsity weight too large", RuntimeWarning)
    labels, info = spectral_from_affinity(A, K, seed)
    info.update({"sparsity_weight": sparsity_weight, "normalize": normalize, "coefficients": C,
                 "sweeps": [len(h) for h in histories]})
    return GroupingSolution(labels, "ssc", seed=seed, objective_value=sse(X, labels), task_ids=_task_ids(E),
                            metadata=info)


# ----------------------------------------------------------------------------
# fixed groupings
# ----------------------------------------------------------------------------

def metadata_grouping(values: Sequence[str], task_ids: Sequence[str] | None = None,
                      key: str | None = None) -> GroupingSolution:
    """One group per distinct value (e.g. event modality or cell type)."""
    distinct = sorted(set(values))
    labels = np.array([distinct.index(v) for v in values])
    return GroupingSolution(labels, "metadata", task_ids=list(task_ids) if task_ids else None,
                            metadata={"key": key, "values": distinct})


def all_in_one(num_tasks: int, task_ids: Sequence[str] | None = None) -> GroupingSolution:
    return GroupingSolution(np.zeros(num_tasks, dtype=np.int64), "all_in_one",
                            task_ids=list(task_ids) if task_ids else None)


def singletons(num_tasks: int, task_ids: Sequence[str] | None = None) -> GroupingSolution:
    return GroupingSolution(np.arange(num_tasks), "singletons", task_ids=list(task_ids) if task_ids else None)


# ----------------------------------------------------------------------------
# agreement
# ----------------------------------------------------------------------------

def _pairs(counts: np.ndarray) -> int:
    c = counts.astype(np.int64)
    return int((c * (c - 1) // 2).sum())


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected pair-counting agreement of two partitions of the same tasks.

    Pair counts are integers and the ratio is formed in integer arithmetic, so
    rational results such as -1/2 come out exactly.
    """
    ids_a = getattr(a, "task_ids", None)
    ids_b = getattr(b, "task_ids", None)
    if ids_a is not None and ids_b is not None and list(ids_a) != list(ids_b):
        raise ClusteringError("partitions cover different task sets")
    la = np.asarray(getattr(a, "assignments", a))
    lb = np.asarray(getattr(b, "assignments", b))
    if la.shape != lb.shape:
        raise ClusteringError(f"partitions have different sizes: {la.shape} vs {lb.shape}")
    n = len(la)
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    table = np.zeros((ia.max(initial=-1) + 1, ib.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    index = _pairs(table)
    sa, sb = _pairs(table.sum(1)), _pairs(table.sum(0))
    total = n * (n - 1) // 2
    # (index - sa*sb/total) / ((sa+sb)/2 - sa*sb/total), scaled by 2*total
    num = 2 * total * index - 2 * sa * sb
    den = total * (sa + sb) - 2 * sa * sb
    if den == 0:
        return 1.0 if np.array_equal(canonical_labels(ia), canonical_labels(ib)) else 0.0
    return num / den
