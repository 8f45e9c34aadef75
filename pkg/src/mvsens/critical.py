"""Worst-case critical values for the coherent-cone test.

Two stages: bound each pairwise statistic correlation over the feasible
probability set, then maximize the chi-bar-squared upper quantile over
correlation matrices inside the box.  With two outcomes the maximizer is the
lower corner exactly; beyond that, coordinate ascent on a common-random-
numbers Monte Carlo quantile with a Perlman-bound fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .chibar import (
    ChiBarSpec,
    chibar_quantile,
    chibar_weights,
    counter_rng,
    perlman_quantile,
)
from .cone import orthant_qp_batch
from .feasible import correlation_from_cov, project_onto_PGamma, uniform_probs
from .study import MatchedStudy, ScoreMatrix

__all__ = [
    "CorrelationBox",
    "CriticalOpts",
    "WorstCaseQuantile",
    "correlation_bounds",
    "correlation_box",
    "worst_case_quantile",
    "chibar_critical_value",
]

CORR_CLIP = 1.0 - 1e-6


@dataclass
class CriticalOpts:
    corr_starts: int = 4
    corr_iters: int = 120
    widen: float = 0.01
    n_mc: int = 200_000
    mc_seed: int = 1234
    ascent_starts: tuple = ("lower", "mid", "upper")
    ascent_step: float = 0.1
    ascent_min_step: float = 0.005
    ascent_max_sweeps: int = 12


@dataclass(frozen=True)
class CorrelationBox:
    """Elementwise bounds on the statistic correlation matrix at a gamma."""

    lower: np.ndarray
    upper: np.ndarray
    gamma: float

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_2d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.shape[0] != lo.shape[1]:
            raise ValueError("bounds must be square matrices of equal shape")
        if np.any(lo > hi + 1e-12):
            raise ValueError("lower bound exceeds upper bound")
        for m in (lo, hi):
            if not np.allclose(np.diag(m), 1.0, atol=1e-12):
                raise ValueError("bound diagonals must be 1")
            if np.abs(m[~np.eye(len(m), dtype=bool)]).max(initial=0.0) >= 1.0:
                raise ValueError("off-diagonal bounds must lie in (-1, 1)")

    @property
    def K(self) -> int:
        return self.lower.shape[0]

    @property
    def degenerate(self) -> bool:
        return bool(np.allclose(self.lower, self.upper, atol=1e-12))


def _moment_pieces(q, rho, starts):
    qr = q * rho[:, None]
    mu_i = np.add.reduceat(qr, starts, axis=0)
    cross = np.add.reduceat(qr[:, :, None] * q[:, None, :], starts, axis=0)
    sigma = cross.sum(axis=0) - np.einsum("ik,il->kl", mu_i, mu_i)
    return 0.5 * (sigma + sigma.T), mu_i


def _corr_and_grad(q, rho, starts, strat, k, l):
    sigma, mu_i = _moment_pieces(q, rho, starts)
    skk, sll, skl = sigma[k, k], sigma[l, l], sigma[k, l]
    if skk <= 0 or sll <= 0:
        raise np.linalg.LinAlgError("degenerate outcome variance on the feasible set")
    denom = np.sqrt(skk * sll)
    r = skl / denom
    qa, qb = q[:, k], q[:, l]
    ma, mb = mu_i[strat, k], mu_i[strat, l]
    d_skl = qa * qb - qa * mb - qb * ma
    d_skk = 2.0 * qa * (qa / 2.0 - ma)  # qa^2 - 2 qa ma
    d_sll = 2.0 * qb * (qb / 2.0 - mb)
    grad = (d_skl - 0.5 * r * denom * (d_skk / skk + d_sll / sll)) / denom
    return r, grad


def _ascend_correlation(q, study, gamma, k, l, rho0, sign, iters):
    """Monotone projected gradient on sign * correlation from rho0."""
    starts, strat = study.starts, study.stratum_of_unit
    rho = rho0
    r, grad = _corr_and_grad(q, rho, starts, strat, k, l)
    best = sign * r
    step = 1.0
    for _ in range(iters):
        g = sign * grad
        gn = float(np.linalg.norm(g))
        if gn < 1e-14:
            break
        step = min(step * 4.0, 10.0 / gn)
        improved = False
        while step * gn > 1e-12:
            cand = project_onto_PGamma(rho + step * g, gamma, study.sizes)
            rc, gc = _corr_and_grad(q, cand, starts, strat, k, l)
            if sign * rc > best + 1e-14:
                rho, best, grad = cand, sign * rc, gc
                improved = True
                break
            step *= 0.25
        if not improved:
            break
    return sign * best


class _PairCorrObjective:
    """Correlation of statistics (k, l) over per-pair mean shifts m."""

    def __init__(self, q1: np.ndarray, k: int, l: int):
        self.ab = q1[:, k] * q1[:, l]
        self.aa = q1[:, k] ** 2
        self.bb = q1[:, l] ** 2

    def __call__(self, m: np.ndarray):
        w2 = 1.0 - m * m
        skl, skk, sll = self.ab @ w2, self.aa @ w2, self.bb @ w2
        if skk <= 0 or sll <= 0:
            raise np.linalg.LinAlgError("degenerate outcome variance on the feasible set")
        denom = np.sqrt(skk * sll)
        r = skl / denom
        dskl, dskk, dsll = -2.0 * self.ab * m, -2.0 * self.aa * m, -2.0 * self.bb * m
        grad = (dskl - 0.5 * r * denom * (dskk / skk + dsll / sll)) / denom
        return r, grad


def _ascend_pair_corr(fn: _PairCorrObjective, m0, delta, sign, iters):
    m = m0
    r, grad = fn(m)
    best = sign * r
    step = 1.0
    for _ in range(iters):
        g = sign * grad
        gn = float(np.linalg.norm(g))
        if gn < 1e-14:
            break
        step = min(step * 4.0, 10.0 / gn)
        improved = False
        while step * gn > 1e-12:
            cand = np.clip(m + step * g, -delta, delta)
            rc, gc = fn(cand)
            if sign * rc > best + 1e-14:
                m, best, grad = cand, sign * rc, gc
                improved = True
                break
            step *= 0.25
        if not improved:
            break
    return sign * best


def correlation_bounds(
    study: MatchedStudy,
    scores: ScoreMatrix,
    gamma: float,
    k: int,
    l: int,
    opts: CriticalOpts | None = None,
) -> tuple[float, float]:
    """Bracket the correlation of statistics k and l over feasible
    probabilities at gamma: multi-start projected gradient, then widen by a
    safety margin.  The returned interval always contains the value at the
    uniform probabilities."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    opts = opts or CriticalOpts()
    q = scores.q
    rng = np.random.default_rng(2024_0 + 31 * k + l)
    if study.all_pairs:
        delta = (gamma - 1.0) / (gamma + 1.0)
        fn = _PairCorrObjective(np.ascontiguousarray(q[0::2]), k, l)
        r_u, _ = fn(np.zeros(study.I))
        if gamma == 1.0:
            return float(r_u), float(r_u)
        starts = [np.zeros(study.I)]
        for _ in range(max(0, opts.corr_starts - 1)):
            starts.append(rng.uniform(-delta, delta, size=study.I))
        lo, hi = r_u, r_u
        for m0 in starts:
            hi = max(hi, _ascend_pair_corr(fn, m0, delta, +1.0, opts.corr_iters))
            lo = min(lo, _ascend_pair_corr(fn, m0, delta, -1.0, opts.corr_iters))
    else:
        rho_u = uniform_probs(study).rho
        r_u, _ = _corr_and_grad(q, rho_u, study.starts, study.stratum_of_unit, k, l)
        if gamma == 1.0:
            return float(r_u), float(r_u)
        starts = [rho_u]
        for _ in range(max(0, opts.corr_starts - 1)):
            raw = rng.dirichlet(np.ones(2), size=study.N)[:, 0]
            starts.append(project_onto_PGamma(raw, gamma, study.sizes))
        lo, hi = r_u, r_u
        for rho0 in starts:
            hi = max(hi, _ascend_correlation(q, study, gamma, k, l, rho0, +1.0, opts.corr_iters))
            lo = min(lo, _ascend_correlation(q, study, gamma, k, l, rho0, -1.0, opts.corr_iters))
    lo = max(lo - opts.widen, -CORR_CLIP)
    hi = min(hi + opts.widen, CORR_CLIP)
    return float(lo), float(hi)


def correlation_box(
    study: MatchedStudy, scores: ScoreMatrix, gamma: float, opts: CriticalOpts | None = None
) -> CorrelationBox:
    K = scores.K
    lo = np.eye(K)
    hi = np.eye(K)
    for k in range(K):
        for l in range(k + 1, K):
            a, b = correlation_bounds(study, scores, gamma, k, l, opts)
            lo[k, l] = lo[l, k] = a
            hi[k, l] = hi[l, k] = b
    return CorrelationBox(lo, hi, gamma)


@dataclass
class WorstCaseQuantile:
    """Deviate-scale critical value c (the square root of the maximized
    chi-bar-squared upper quantile) and the correlation matrix attaining it."""

    c: float
    corr: np.ndarray
    quantile_sq: float
    perlman_fallback: bool = False
    evaluations: int = 0


def _repair_correlation(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    a = (v * np.clip(w, 1e-6, None)) @ v.T
    d = np.sqrt(np.diag(a))
    out = a / np.outer(d, d)
    np.fill_diagonal(out, 1.0)
    return out


def _statcorr_to_spec(c_stat: np.ndarray) -> ChiBarSpec:
    """The large-sample reference uses the inverse statistic covariance;
    weights see it only through its correlation structure."""
    return ChiBarSpec(correlation_from_cov(np.linalg.inv(c_stat)))


def _quantile_exact_2d(rho_stat: float, alpha: float) -> float:
    spec = ChiBarSpec(np.array([[1.0, -rho_stat], [-rho_stat, 1.0]]))
    return chibar_quantile(1.0 - alpha, chibar_weights(spec))


class _MCQuantile:
    """Common-random-numbers Monte Carlo quantile of the reference
    distribution as a function of the statistic correlation matrix."""

    def __init__(self, k: int, n: int, seed: int, alpha: float):
        self.z = counter_rng(seed, stream=7).standard_normal((int(n), k))
        self.alpha = alpha
        self.count = 0

    def __call__(self, c_stat: np.ndarray) -> float:
        spec = _statcorr_to_spec(c_stat)
        metric = np.linalg.inv(spec.corr)
        x = self.z @ np.linalg.cholesky(spec.corr).T
        vals, _, _ = orthant_qp_batch(metric, x @ metric)
        self.count += 1
        return float(np.quantile(np.maximum(vals, 0.0), 1.0 - self.alpha))


class _AnalyticQuantile:
    """Exact quantile through the closed-form face weights (K <= 3)."""

    def __init__(self, alpha: float):
        self.alpha = alpha
        self.count = 0

    def __call__(self, c_stat: np.ndarray) -> float:
        self.count += 1
        return chibar_quantile(1.0 - self.alpha, chibar_weights(_statcorr_to_spec(c_stat)))


def _box_point(box: CorrelationBox, which: str) -> np.ndarray:
    if which == "lower":
        c = box.lower.copy()
    elif which == "upper":
        c = box.upper.copy()
    else:
        c = 0.5 * (box.lower + box.upper)
    np.fill_diagonal(c, 1.0)
    return c


def _clip_to_box(c: np.ndarray, box: CorrelationBox) -> np.ndarray:
    out = np.clip(c, box.lower, box.upper)
    np.fill_diagonal(out, 1.0)
    return 0.5 * (out + out.T)


def _feasible_start(box: CorrelationBox, which: str) -> np.ndarray | None:
    c = _box_point(box, which)
    for _ in range(4):
        if np.linalg.eigvalsh(c)[0] > 1e-8:
            return c
        c = _clip_to_box(_repair_correlation(c), box)
    return None


def worst_case_quantile(
    box: CorrelationBox, alpha: float, opts: CriticalOpts | None = None
) -> WorstCaseQuantile:
    """Maximize the 1 - alpha quantile of the reference distribution over
    correlation matrices in the box; returns the deviate-scale critical
    value sqrt(quantile).

    K = 2 is exact (the lower corner attains the maximum); larger K uses
    multi-start coordinate ascent on a CRN Monte Carlo quantile, capped by
    the always-valid Perlman bound, which is also the fallback if no
    feasible start is found.
    """
    if not 0.0 < alpha <= 0.5:
        raise ValueError(f"alpha must be in (0, 0.5], got {alpha}")
    opts = opts or CriticalOpts()
    K = box.K
    if K == 1:
        q = float(stats.chi2.ppf(1.0 - 2.0 * alpha, 1))
        return WorstCaseQuantile(float(np.sqrt(q)), np.eye(1), q)
    if K == 2:
        rho = float(box.lower[0, 1])
        q = _quantile_exact_2d(rho, alpha)
        c = np.array([[1.0, rho], [rho, 1.0]])
        return WorstCaseQuantile(float(np.sqrt(q)), c, q)

    perl = perlman_quantile(alpha, K)
    mc = _AnalyticQuantile(alpha) if K <= 3 else _MCQuantile(K, opts.n_mc, opts.mc_seed, alpha)
    pairs = [(i, j) for i in range(K) for j in range(i + 1, K)]

    best_q, best_c = -np.inf, None
    for which in opts.ascent_starts:
        c = _feasible_start(box, which)
        if c is None:
            continue
        q = mc(c)
        step = opts.ascent_step
        for _ in range(opts.ascent_max_sweeps):
            moved = False
            for i, j in pairs:
                for delta in (-step, step):
                    cand = c.copy()
                    cand[i, j] = cand[j, i] = np.clip(
                        c[i, j] + delta, box.lower[i, j], box.upper[i, j]
                    )
                    if cand[i, j] == c[i, j]:
                        continue
                    if np.linalg.eigvalsh(cand)[0] <= 1e-8:
                        cand = _clip_to_box(_repair_correlation(cand), box)
                        if np.linalg.eigvalsh(cand)[0] <= 1e-8:
                            continue
                    qc = mc(cand)
                    if qc > q + 1e-12:
                        c, q = cand, qc
                        moved = True
                        break
            if not moved:
                step *= 0.5
                if step < opts.ascent_min_step:
                    break
        if q > best_q:
            best_q, best_c = q, c
        if box.degenerate:
            break
    if best_c is None:
        return WorstCaseQuantile(
            float(np.sqrt(perl)), _repair_correlation(_box_point(box, "mid")), perl, True, mc.count
        )
    q = min(best_q, perl)
    return WorstCaseQuantile(float(np.sqrt(q)), best_c, float(q), False, mc.count)


def chibar_critical_value(
    study: MatchedStudy,
    scores: ScoreMatrix,
    gamma: float,
    alpha: float,
    opts: CriticalOpts | None = None,
) -> WorstCaseQuantile:
    """Convenience wrapper: correlation box at gamma, then the worst-case
    deviate-scale critical value over it."""
    box = correlation_box(study, scores, gamma, opts)
    return worst_case_quantile(box, alpha, opts)
