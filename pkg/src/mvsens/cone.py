"""Exact quadratic programming over the nonnegative orthant.

Solves max_{v >= 0} 2 v.d - v' M v for PD M by enumerating active sets
(2^K subsets, K small), vectorized over many right-hand sides d.  This one
primitive drives both the dual form of the coherent supremum and the
cone-projection statistic behind the chi-bar-squared distribution.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = ["orthant_qp_batch", "orthant_qp_single", "orthant_sup_batch"]

MAX_DIM = 14


@lru_cache(maxsize=None)
def _subset_table(k: int):
    """All nonempty subsets of range(k) with their complements."""
    out = []
    idx = np.arange(k)
    for mask in range(1, 2**k):
        members = tuple(int(i) for i in idx[(mask >> idx) & 1 == 1])
        rest = tuple(int(i) for i in idx if i not in members)
        out.append((members, rest))
    return out


def _subset_inverses(M: np.ndarray):
    k = M.shape[0]
    table = []
    for F, off in _subset_table(k):
        Fa = np.asarray(F)
        try:
            inv = np.linalg.inv(M[np.ix_(Fa, Fa)])
        except np.linalg.LinAlgError:
            continue
        cross = M[np.ix_(Fa, np.asarray(off))] if off else None
        table.append((Fa, np.asarray(off), inv, cross))
    return table


def _qp_small(M: np.ndarray, d: np.ndarray, tol: float):
    """Orthant QP for k <= 3 with explicit active sets (hot path)."""
    k = len(d)
    atol = tol * max(1.0, float(np.abs(d).max()))
    cands = []  # (value, {index: lam})
    if all(di <= atol for di in d):
        cands.append((0.0, {}))
    for i in range(k):
        lam = d[i] / M[i, i]
        if lam < -atol:
            continue
        if all(M[j, i] * lam - d[j] >= -atol for j in range(k) if j != i):
            cands.append((d[i] * lam, {i: lam}))
    if k >= 2:
        for i in range(k):
            for j in range(i + 1, k):
                det = M[i, i] * M[j, j] - M[i, j] * M[j, i]
                if det <= 0:
                    continue
                li = (M[j, j] * d[i] - M[i, j] * d[j]) / det
                lj = (M[i, i] * d[j] - M[j, i] * d[i]) / det
                if li < -atol or lj < -atol:
                    continue
                ok = all(
                    M[o, i] * li + M[o, j] * lj - d[o] >= -atol
                    for o in range(k)
                    if o != i and o != j
                )
                if ok:
                    cands.append((d[i] * li + d[j] * lj, {i: li, j: lj}))
    if k == 3:
        try:
            lam = np.linalg.solve(M, d)
        except np.linalg.LinAlgError:
            lam = None
        if lam is not None and all(l >= -atol for l in lam):
            cands.append((float(d @ lam), {0: lam[0], 1: lam[1], 2: lam[2]}))
    if not cands:
        if tol > 1e-3:
            raise np.linalg.LinAlgError("orthant QP failed: matrix too ill-conditioned")
        return _qp_small(M, d, tol * 1e3)
    val, sol = max(cands, key=lambda c: c[0])
    v = np.zeros(k)
    for i, li in sol.items():
        v[i] = max(li, 0.0)
    vmax = float(v.max(initial=0.0))
    support = int((v > 1e-12 * max(vmax, 1.0)).sum())
    return val, v, support


def orthant_qp_single(M: np.ndarray, d: np.ndarray, tol: float = 1e-9):
    """Single right-hand-side orthant QP; returns (value, v, support)."""
    k = len(d)
    if k <= 3:
        return _qp_small(np.asarray(M, dtype=float), np.asarray(d, dtype=float), tol)
    atol = tol * max(float(np.abs(d).max(initial=0.0)), 1.0)
    if np.all(d <= atol):
        return 0.0, np.zeros(k), 0
    best_val, best_v = -np.inf, None
    for Fa, off, inv, cross in _subset_inverses(np.asarray(M, dtype=float)):
        lam = inv @ d[Fa]
        if np.any(lam < -atol):
            continue
        if off.size and np.any(lam @ cross - d[off] < -atol):
            continue
        val = float(lam @ d[Fa])
        if val > best_val:
            best_val = val
            best_v = (Fa, lam)
    if best_v is None:
        if tol > 1e-3:
            raise np.linalg.LinAlgError("orthant QP failed: matrix too ill-conditioned")
        return orthant_qp_single(M, d, tol * 1e3)
    v = np.zeros(k)
    v[best_v[0]] = np.clip(best_v[1], 0.0, None)
    support = int((v > 1e-12 * max(v.max(initial=0.0), 1.0)).sum())
    return best_val, v, support


def orthant_qp_batch(M: np.ndarray, D: np.ndarray, tol: float = 1e-9):
    """For each row d of D, maximize 2 v.d - v'Mv subject to v >= 0.

    Returns (values, v, support): values[b] = d_F' M_FF^{-1} d_F at the
    optimal free set F, v[b] the maximizer, support[b] the count of strictly
    positive components.  The optimum is unique for PD M; each active set is
    checked against the exact KKT system (v_F >= 0, (Mv - d) >= 0 off F).
    """
    M = np.asarray(M, dtype=float)
    D = np.atleast_2d(np.asarray(D, dtype=float))
    n, k = D.shape
    if k > MAX_DIM:
        raise ValueError(f"orthant QP enumerates 2^K active sets; K={k} exceeds {MAX_DIM}")
    atol = tol * np.maximum(np.abs(D).max(axis=1), 1.0)
    values = np.full(n, -np.inf)
    vopt = np.zeros((n, k))
    values[np.all(D <= atol[:, None], axis=1)] = 0.0
    for Fa, off, inv, cross in _subset_inverses(M):
        lam_F = D[:, Fa] @ inv  # (n, |F|); inv is symmetric
        ok = (lam_F >= -atol[:, None]).all(axis=1)
        if off.size:
            ok &= ((lam_F @ cross - D[:, off]) >= -atol[:, None]).all(axis=1)
        idx = np.flatnonzero(ok)
        if not idx.size:
            continue
        val = np.einsum("ij,ij->i", lam_F[idx], D[np.ix_(idx, Fa)])
        better = val > values[idx]
        upd = idx[better]
        if upd.size:
            values[upd] = val[better]
            vopt[upd] = 0.0
            vopt[np.ix_(upd, Fa)] = np.clip(lam_F[upd], 0.0, None)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        if tol > 1e-3:
            raise np.linalg.LinAlgError("orthant QP failed: matrix too ill-conditioned")
        v2, l2, _ = orthant_qp_batch(M, D[bad], tol=tol * 1e3)
        values[bad] = v2
        vopt[bad] = l2
    support = (vopt > 1e-12 * np.maximum(np.abs(vopt).max(axis=1, keepdims=True), 1.0)).sum(axis=1)
    return values, vopt, support


def orthant_sup_batch(sigma: np.ndarray, D: np.ndarray):
    """Signed supremum over the nonnegative orthant of v.d / sqrt(v'Sigma v).

    When some coordinate of d is positive, the squared supremum equals the
    orthant-QP value with M = Sigma (strong duality); when d <= 0 the
    supremum is nonpositive and attained at the best single coordinate,
    max_k d_k / sqrt(Sigma_kk).

    Returns (sup, v) with v a maximizing direction (scale-free).
    """
    sigma = np.asarray(sigma, dtype=float)
    D = np.atleast_2d(np.asarray(D, dtype=float))
    sd = np.sqrt(np.diag(sigma))
    values, lam, _ = orthant_qp_batch(sigma, D)
    sup = np.sqrt(np.maximum(values, 0.0))
    neg = np.all(D <= 0.0, axis=1)
    if neg.any():
        ratios = D[neg] / sd
        kbest = np.argmax(ratios, axis=1)
        sup[neg] = ratios[np.arange(len(kbest)), kbest]
        lam[neg] = np.eye(len(sd))[kbest]
    return sup, lam


def orthant_sup_single(sigma: np.ndarray, d: np.ndarray):
    """Single-instance signed cone supremum; returns (sup, v)."""
    sigma = np.asarray(sigma, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.all(d <= 0.0):
        ratios = d / np.sqrt(np.diag(sigma))
        kbest = int(np.argmax(ratios))
        v = np.zeros(len(d))
        v[kbest] = 1.0
        return float(ratios[kbest]), v
    val, v, _ = orthant_qp_single(sigma, d)
    return float(np.sqrt(max(val, 0.0))), v
