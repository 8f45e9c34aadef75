"""The chi-bar-squared reference distribution.

Sampling reduces each draw of a correlated normal vector to a cone projection
solved by the exact orthant QP; mixture weights count the strictly positive
coordinates of that projection.  Weights depend on the covariance only
through its correlation matrix, with closed forms for K <= 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.optimize import brentq

from .cone import orthant_qp_batch


def _chi2_cdf(c: float, df: int) -> float:
    # regularized lower incomplete gamma; avoids scipy.stats call overhead
    return float(special.gammainc(0.5 * df, 0.5 * c))


def _chi2_sf(c: float, df: int) -> float:
    return float(special.gammaincc(0.5 * df, 0.5 * c))


def _chi2_ppf(p: float, df: int) -> float:
    return 2.0 * float(special.gammaincinv(0.5 * df, p))

__all__ = [
    "ChiBarSpec",
    "ChiBarWeights",
    "chibar_sample",
    "chibar_weights",
    "chibar_cdf",
    "chibar_quantile",
    "perlman_pvalue",
    "perlman_quantile",
    "chi2_tail",
]


def counter_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; distinct (seed, stream) pairs give
    independent reproducible streams safe for parallel use."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))


@dataclass(frozen=True)
class ChiBarSpec:
    """Correlation matrix of the underlying normal vector."""

    corr: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.corr, dtype=float))
        object.__setattr__(self, "corr", c)
        if c.shape[0] != c.shape[1]:
            raise ValueError("correlation matrix must be square")
        if not np.allclose(np.diag(c), 1.0, atol=1e-10):
            raise ValueError("correlation matrix must have unit diagonal")
        if not np.allclose(c, c.T, atol=1e-10):
            raise ValueError("correlation matrix must be symmetric")
        if np.linalg.eigvalsh(c)[0] <= 1e-12:
            raise np.linalg.LinAlgError("correlation matrix is not positive definite")

    @property
    def K(self) -> int:
        return self.corr.shape[0]


@dataclass(frozen=True)
class ChiBarWeights:
    """Mixture weights w_0..w_K over chi-square components (df = index)."""

    w: np.ndarray
    method: str
    se: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "w", w)
        if np.any(w < -1e-12):
            raise ValueError("negative mixture weight")
        tol = 1e-12 if self.se is None else 3.0 * float(np.sqrt((self.se**2).sum()) + 1e-12)
        if abs(w.sum() - 1.0) > max(tol, 1e-12):
            raise ValueError(f"weights sum to {w.sum()}, not 1")

    @property
    def K(self) -> int:
        return len(self.w) - 1


def _cone_values_and_support(spec: ChiBarSpec, x: np.ndarray):
    w_metric = np.linalg.inv(spec.corr)
    vals, _, support = orthant_qp_batch(w_metric, x @ w_metric)
    return np.maximum(vals, 0.0), support


def chibar_sample(spec: ChiBarSpec, n: int, seed: int = 0, stream: int = 0) -> np.ndarray:
    """n independent draws of x'C^{-1}x minus the squared distance from x to
    the nonnegative orthant in the C^{-1} metric, x ~ N(0, C)."""
    rng = counter_rng(seed, stream)
    L = np.linalg.cholesky(spec.corr)
    x = rng.standard_normal((int(n), spec.K)) @ L.T
    vals, _ = _cone_values_and_support(spec, x)
    return vals


def _orthant_prob(corr: np.ndarray) -> float:
    """P(N(0, corr) >= 0 coordinatewise), closed form through dimension 3."""
    k = corr.shape[0]
    if k == 0:
        return 1.0
    if k == 1:
        return 0.5
    if k == 2:
        return 0.25 + float(np.arcsin(corr[0, 1])) / (2.0 * np.pi)
    if k == 3:
        s = np.arcsin(corr[0, 1]) + np.arcsin(corr[0, 2]) + np.arcsin(corr[1, 2])
        return 0.125 + float(s) / (4.0 * np.pi)
    raise ValueError("closed-form orthant probability only through dimension 3")


def _corr_of(cov: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(cov))
    c = cov / np.outer(d, d)
    np.fill_diagonal(c, 1.0)
    return c


def _face_weights(corr: np.ndarray) -> np.ndarray:
    """Exact mixture weights for K <= 3 by face decomposition.

    The projection lands on the face spanned by F iff its free part (normal
    with covariance (W_FF)^{-1}) is positive and the complementary
    multipliers (an independent normal with the Schur-complement covariance)
    are nonnegative; both events are orthants of dimension <= 3.
    """
    K = corr.shape[0]
    W = np.linalg.inv(corr)
    w = np.zeros(K + 1)
    w[0] = _orthant_prob(_corr_of(W))
    for mask in range(1, 2**K):
        F = np.flatnonzero((mask >> np.arange(K)) & 1)
        off = np.setdiff1d(np.arange(K), F)
        cov_free = np.linalg.inv(W[np.ix_(F, F)])
        p = _orthant_prob(_corr_of(cov_free))
        if off.size:
            schur = W[np.ix_(off, off)] - W[np.ix_(off, F)] @ cov_free @ W[np.ix_(F, off)]
            p *= _orthant_prob(_corr_of(schur))
        w[len(F)] += p
    return w


def _face_weights_3(corr: np.ndarray) -> np.ndarray:
    """Hand-rolled K = 3 face weights (hot path of the critical-value search).

    Same decomposition as _face_weights: single-coordinate faces pair the
    scalar free part (probability 1/2) with a bivariate multiplier orthant;
    two-coordinate faces pair a bivariate free orthant (correlation
    -W_ij / sqrt(W_ii W_jj)) with a scalar multiplier (probability 1/2).
    """
    W = np.linalg.inv(corr)
    two_pi = 2.0 * np.pi
    w1 = 0.0
    w2 = 0.0
    for i in range(3):
        j, k = [a for a in range(3) if a != i]
        # multipliers for F = {i}: 2x2 Schur complement of W at rows {j,k}
        sjj = W[j, j] - W[j, i] * W[i, j] / W[i, i]
        skk = W[k, k] - W[k, i] * W[i, k] / W[i, i]
        sjk = W[j, k] - W[j, i] * W[i, k] / W[i, i]
        w1 += 0.5 * (0.25 + np.arcsin(sjk / np.sqrt(sjj * skk)) / two_pi)
        # free part for F = {j, k}: corr of inv(W_FF) is -W_jk/sqrt(W_jj W_kk)
        w2 += 0.5 * (0.25 + np.arcsin(-W[j, k] / np.sqrt(W[j, j] * W[k, k])) / two_pi)
    return np.array([_orthant_prob(_corr_of(W)), w1, w2, _orthant_prob(corr)])


def chibar_weights(
    spec: ChiBarSpec, n: int = 100_000, seed: int = 0, method: str = "auto"
) -> ChiBarWeights:
    """Mixture weights: w_i is the probability that the cone projection of a
    draw has exactly i strictly positive coordinates.  Closed forms for
    K <= 3 (checked against Monte Carlo in the test suite); Monte Carlo with
    standard errors otherwise."""
    if method not in ("auto", "analytic", "mc"):
        raise ValueError(f"unknown weight method {method!r}")
    if method != "mc":
        if spec.K == 1:
            return ChiBarWeights(np.array([0.5, 0.5]), "analytic")
        if spec.K == 2:
            return ChiBarWeights(_face_weights(spec.corr), "analytic")
        if spec.K == 3:
            return ChiBarWeights(_face_weights_3(spec.corr), "analytic")
        if method == "analytic":
            raise ValueError("analytic weights implemented only for K <= 3")
    n = int(n)
    if n < 10_000:
        raise ValueError("Monte Carlo weights need n >= 10000")
    rng = counter_rng(seed, stream=1)
    L = np.linalg.cholesky(spec.corr)
    x = rng.standard_normal((n, spec.K)) @ L.T
    _, support = _cone_values_and_support(spec, x)
    w = np.bincount(support, minlength=spec.K + 1) / n
    se = np.sqrt(w * (1.0 - w) / n)
    return ChiBarWeights(w, f"monte-carlo(n={n}, seed={seed})", se)


def chi2_tail(c: float, df: int) -> float:
    """P(chi2_df >= c) with the df = 0 point-mass convention: the mass sits
    at zero, so the closed tail at c <= 0 is 1 and it is 0 beyond."""
    if df == 0:
        return 1.0 if c <= 0 else 0.0
    return _chi2_sf(c, df)


def chibar_cdf(c: float, weights: ChiBarWeights) -> float:
    """Mixture CDF sum_i w_i P(chi2_i <= c), point mass at zero for i = 0."""
    if c < 0:
        return 0.0
    total = float(weights.w[0])
    for i in range(1, len(weights.w)):
        total += float(weights.w[i]) * _chi2_cdf(c, i)
    return min(total, 1.0)


def chibar_quantile(p: float, weights: ChiBarWeights) -> float:
    """Generalized inverse of the mixture CDF; returns 0 for p <= w_0."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    if p <= weights.w[0]:
        return 0.0
    # the chi2_K component stochastically dominates the mixture
    hi = _chi2_ppf(p, weights.K) + 1e-9
    while chibar_cdf(hi, weights) < p:
        hi = hi * 2.0 + 1.0
        if hi > 1e8:
            raise RuntimeError("quantile bracket expansion failed")
    return float(brentq(lambda c: chibar_cdf(c, weights) - p, 0.0, hi, xtol=1e-10))


def perlman_pvalue(c: float, k: int) -> float:
    """Correlation-free upper bound 0.5 {P(chi2_{K-1} >= c) + P(chi2_K >= c)}
    on the chi-bar tail beyond c (c on the squared scale).  With the
    point-mass convention, the K = 1 bound at c = 0 evaluates to 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if c < 0:
        return 1.0
    return 0.5 * (chi2_tail(c, k - 1) + chi2_tail(c, k))


def perlman_quantile(alpha: float, k: int) -> float:
    """c solving perlman_pvalue(c, k) = alpha (squared scale)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    hi = 1.0
    while perlman_pvalue(hi, k) > alpha:
        hi *= 2.0
    return float(brentq(lambda c: perlman_pvalue(c, k) - alpha, 0.0, hi, xtol=1e-10))
