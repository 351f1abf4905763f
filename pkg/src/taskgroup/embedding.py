"""Task representation matrix built from classification-head weights, plus PCA."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .linalg import jacobi_eigh
from .model import TrainedModel, head_weight_vector


@dataclass
class TaskEmbeddingMatrix:
    values: np.ndarray          # [T, d], row i is task i's embedding
    task_ids: list[str]
    source: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or len(self.values) != len(self.task_ids):
            raise ValueError("embedding rows must match task ids")
        if not np.isfinite(self.values).all():
            raise ValueError("embedding matrix has non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def normalized(self) -> "TaskEmbeddingMatrix":
        """Copy with every row scaled to unit L2 norm (zero rows left as is)."""
        norms = np.linalg.norm(self.values, axis=1, keepdims=True)
        return TaskEmbeddingMatrix(self.values / np.where(norms > 0, norms, 1.0), list(self.task_ids), self.source)

    def to_tsv(self, path: str | Path) -> None:
        write_matrix(path, self.values, self.task_ids, [f"e{j}" for j in range(self.values.shape[1])])

    @classmethod
    def from_tsv(cls, path: str | Path, source: str = "") -> "TaskEmbeddingMatrix":
        ids, values, _ = read_matrix(path)
        return cls(values, ids, source or str(path))


def extract_embeddings(model: TrainedModel, source: str = "") -> TaskEmbeddingMatrix:
    """Stack every head's last-layer weight vector, in head order."""
    rows = [head_weight_vector(model, i) for i in range(model.num_tasks)]
    ids = list(model.task_ids) or [str(i) for i in range(model.num_tasks)]
    return TaskEmbeddingMatrix(np.vstack(rows), ids, source)


@dataclass
class PCAResult:
    components: np.ndarray          # [n, d] orthonormal rows
    projected: np.ndarray           # [T, n]
    explained_variance: np.ndarray  # [n], non-increasing
    mean: np.ndarray                # [d]
    total_variance: float


def pca(E, n_components: int) -> PCAResult:
    """Principal components of the rows of ``E`` (sample covariance, T - 1 denominator).

    Each component's largest-magnitude entry is made positive.
    """
    X = np.asarray(getattr(E, "values", E), dtype=np.float64)
    T, d = X.shape
    if T < 2:
        raise ValueError("PCA needs at least two rows")
    if not 1 <= n_components <= min(T, d):
        raise ValueError(f"n_components must be in [1, {min(T, d)}], got {n_components}")
    mean = X.mean(0)
    Xc = X - mean
    cov = Xc.T @ Xc / (T - 1)
    w, V = jacobi_eigh(cov)
    order = np.argsort(-w, kind="stable")[:n_components]
    comps = V[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    var = np.maximum(w[order], 0.0)
    return PCAResult(comps, Xc @ comps.T, var, mean, float(np.trace(cov)))


def write_matrix(path: str | Path, values: np.ndarray, row_ids: Sequence[str], col_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["task_id", *col_names])
        for rid, row in zip(row_ids, values):
            w.writerow([rid, *(repr(float(v)) for v in row)])


def read_matrix(path: str | Path) -> tuple[list[str], np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    header, body = rows[0], rows[1:]
    ids = [r[0] for r in body]
    values = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    return ids, values, header[1:]


def save_projection(path: str | Path, result: PCAResult, task_ids: Sequence[str]) -> None:
    write_matrix(path, result.projected, task_ids, [f"pc{j + 1}" for j in range(result.projected.shape[1])])
