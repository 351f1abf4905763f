"""Dense symmetric eigendecomposition by cyclic Jacobi rotations."""
from __future__ import annotations

import numpy as np


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """n-1 (or n) rounds of disjoint index pairs covering every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            p, q = np.array(pairs).T
            rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and column eigenvectors of symmetric ``a``.

    Each sweep visits every off-diagonal pair once, grouped into rounds of
    disjoint pairs that are rotated together. Stops when the off-diagonal
    Frobenius norm falls below ``tol`` times the matrix norm.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-10 * max(1.0, np.abs(a).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    a = (a + a.T) / 2
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a) or 1.0
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            big = np.abs(theta) > 1e150
            safe = np.where(big, 1.0, theta)
            t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                         np.sign(safe) / (np.abs(safe) + np.sqrt(safe * safe + 1.0)))
            t = np.where(theta == 0, 1.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # columns, then rows: A <- J^T A J with J acting on (p, q) pairs
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]
