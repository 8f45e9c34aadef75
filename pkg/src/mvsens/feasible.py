"""Feasible assignment probabilities under the odds-ratio bound.

For sensitivity parameter gamma >= 1 the per-stratum probabilities must be
nonnegative, sum to one, and satisfy max <= gamma * min (the auxiliary scale
variable of the fractional-programming reformulation is eliminated
analytically).  Everything here is a pure function of immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .study import MatchedStudy, ScoreMatrix

__all__ = [
    "ProbVector",
    "Moments",
    "uniform_probs",
    "compute_moments",
    "project_onto_PGamma",
    "extreme_points_pairs",
    "min_linear",
    "projection_kkt_residual",
]

SUM_TOL = 1e-10
RATIO_TOL = 1e-9
PD_EIG_TOL = 1e-12
PD_RIDGE = 1e-10


def _as_layout(obj) -> tuple[np.ndarray, np.ndarray]:
    """(sizes, starts) from a MatchedStudy, ProbVector, or sizes array."""
    if isinstance(obj, (MatchedStudy, ProbVector)):
        return obj.sizes, obj.starts
    sizes = np.asarray(obj, dtype=np.int64)
    return sizes, np.concatenate(([0], np.cumsum(sizes)[:-1]))


@dataclass(frozen=True)
class ProbVector:
    """Unit-level treatment probabilities (stratum-major) with their gamma."""

    rho: np.ndarray
    gamma: float
    sizes: np.ndarray
    starts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float))
        self.validate()

    def validate(self):
        if self.gamma < 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        sums = np.add.reduceat(self.rho, self.starts)
        if np.any(np.abs(sums - 1.0) > SUM_TOL):
            raise ValueError("stratum probabilities do not sum to 1")
        if np.any(self.rho < -SUM_TOL):
            raise ValueError("negative probability")
        mx = np.maximum.reduceat(self.rho, self.starts)
        mn = np.minimum.reduceat(self.rho, self.starts)
        if np.any(mx > self.gamma * mn * (1 + RATIO_TOL) + SUM_TOL):
            raise ValueError("per-stratum max/min ratio exceeds gamma")


def uniform_probs(study: MatchedStudy) -> ProbVector:
    """The randomized-design probabilities 1/n_i, feasible for every gamma."""
    rho = np.repeat(1.0 / study.sizes, study.sizes)
    return ProbVector(rho, 1.0, study.sizes, study.starts)


@dataclass(frozen=True)
class Moments:
    """Mean vector and covariance matrix of the statistic under given probs."""

    mu: np.ndarray
    sigma: np.ndarray

    def ensure_pd(self) -> tuple[np.ndarray, bool]:
        """Covariance for downstream solvers: ridge tiny-eigenvalue cases.

        Returns (matrix, ridged flag).  Raises if the matrix is degenerate
        even relative to its trace (identically zero score column).
        """
        tr = float(np.trace(self.sigma))
        if tr <= 0:
            raise np.linalg.LinAlgError("covariance has nonpositive trace (degenerate outcome)")
        eigmin = float(np.linalg.eigvalsh(self.sigma)[0])
        if eigmin > PD_EIG_TOL * tr:
            return self.sigma, False
        return self.sigma + PD_RIDGE * tr * np.eye(len(self.mu)), True


def _moment_arrays(q: np.ndarray, rho: np.ndarray, starts: np.ndarray, sizes: np.ndarray):
    qr = q * rho[:, None]
    mu_i = np.add.reduceat(qr, starts, axis=0)  # (I, K) per-stratum means
    cross = np.add.reduceat(qr[:, :, None] * q[:, None, :], starts, axis=0)
    sigma = cross.sum(axis=0) - np.einsum("ik,il->kl", mu_i, mu_i)
    return mu_i.sum(axis=0), 0.5 * (sigma + sigma.T), mu_i


def compute_moments(scores: ScoreMatrix, probs: ProbVector) -> Moments:
    """Exact mean and covariance of T = sum of treated-unit scores, using
    independence across strata."""
    mu, sigma, _ = _moment_arrays(scores.q, probs.rho, probs.starts, probs.sizes)
    return Moments(mu, sigma)


def correlation_from_cov(sigma: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(sigma))
    c = sigma / np.outer(d, d)
    np.fill_diagonal(c, 1.0)
    return c


def _pair_bounds(gamma: float) -> tuple[float, float]:
    return 1.0 / (1.0 + gamma), gamma / (1.0 + gamma)


def _project_pairs(raw: np.ndarray, gamma: float) -> np.ndarray:
    lo, hi = _pair_bounds(gamma)
    x1 = np.clip((raw[0::2] - raw[1::2] + 1.0) / 2.0, lo, hi)
    out = np.empty_like(raw)
    out[0::2] = x1
    out[1::2] = 1.0 - x1
    return out


def _box_simplex_project(a: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Euclidean projection onto {lo <= x <= hi, sum x = 1} by bisection on
    the simplex multiplier."""
    t_lo, t_hi = np.min(a) - hi, np.max(a) - lo
    for _ in range(100):
        t = 0.5 * (t_lo + t_hi)
        s = np.clip(a - t, lo, hi).sum()
        if s > 1.0:
            t_lo = t
        else:
            t_hi = t
    return np.clip(a - 0.5 * (t_lo + t_hi), lo, hi)


def _project_stratum(a: np.ndarray, gamma: float) -> np.ndarray:
    n = len(a)
    if n == 2:
        return _project_pairs(a, gamma)

    def objective(s: float) -> float:
        x = _box_simplex_project(a, s, gamma * s)
        return float(np.sum((x - a) ** 2))

    # F(s) is convex (partial minimization over a convex set); golden section
    s_lo, s_hi = 1.0 / (n * gamma), 1.0 / n
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = s_hi - phi * (s_hi - s_lo)
    x2 = s_lo + phi * (s_hi - s_lo)
    f1, f2 = objective(x1), objective(x2)
    for _ in range(90):
        if f1 <= f2:
            s_hi, x2, f2 = x2, x1, f1
            x1 = s_hi - phi * (s_hi - s_lo)
            f1 = objective(x1)
        else:
            s_lo, x1, f1 = x1, x2, f2
            x2 = s_lo + phi * (s_hi - s_lo)
            f2 = objective(x2)
    s = 0.5 * (s_lo + s_hi)
    return _box_simplex_project(a, s, gamma * s)


def project_onto_PGamma(raw, gamma: float, layout) -> np.ndarray:
    """Per-stratum Euclidean projection of an arbitrary vector onto the
    feasible set at gamma.  ``layout`` is a study, ProbVector, or sizes array.
    """
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    raw = np.asarray(raw, dtype=float)
    sizes, starts = _as_layout(layout)
    if np.all(sizes == 2):
        return _project_pairs(raw, gamma)
    out = np.empty_like(raw)
    for s, n in zip(starts, sizes):
        out[s : s + n] = _project_stratum(raw[s : s + n], gamma)
    return out


def projection_kkt_residual(x: np.ndarray, a: np.ndarray, gamma: float, layout) -> float:
    """Max KKT violation of a claimed projection (test support).

    Stationarity: 2(x-a) + tau - nu + omega = 0 with nu on the lower-active
    set, omega on the upper-active set, and sum(nu) = gamma * sum(omega) from
    the free scale variable.
    """
    sizes, starts = _as_layout(layout)
    worst = 0.0
    for s, n in zip(starts, sizes):
        xs, as_ = x[s : s + n], a[s : s + n]
        smin = xs.min()
        low = np.isclose(xs, smin, rtol=0, atol=1e-7)
        up = np.isclose(xs, gamma * smin, rtol=0, atol=1e-7)
        if gamma == 1.0:
            worst = max(worst, float(np.abs(xs - 1.0 / n).max()))
            continue
        grad = 2.0 * (xs - as_)
        free = ~(low | up)
        if free.any():
            tau = -grad[free].mean()
            worst = max(worst, float(np.abs(grad[free] + tau).max()))
        else:
            # tau from the scale-stationarity equation sum(nu) = gamma*sum(omega)
            nl, nu_ = int(low.sum()), int(up.sum())
            tau = -(np.sum(grad[low]) + gamma * np.sum(grad[up])) / (nl + gamma * nu_)
        nu = np.where(low, grad + tau, 0.0)
        om = np.where(up & ~low, -(grad + tau), 0.0)
        worst = max(worst, float(max(0.0, -nu.min(initial=0.0), -om.min(initial=0.0))))
        worst = max(worst, abs(float(nu.sum() - gamma * om.sum())) / (1 + abs(float(nu.sum()))))
        worst = max(worst, abs(float(xs.sum() - 1.0)))
    return worst


def extreme_points_pairs(gamma: float, n_pairs: int) -> Iterator[ProbVector]:
    """All vertices of the feasible set for a study of matched pairs."""
    if n_pairs > 20:
        raise ValueError(f"vertex enumeration guarded at 20 pairs, got {n_pairs}")
    sizes = np.full(n_pairs, 2)
    starts = np.arange(0, 2 * n_pairs, 2)
    lo, hi = _pair_bounds(gamma)
    if lo == hi:
        rho = np.full(2 * n_pairs, 0.5)
        yield ProbVector(rho, gamma, sizes, starts)
        return
    for mask in range(2**n_pairs):
        bits = (mask >> np.arange(n_pairs)) & 1
        x1 = np.where(bits == 1, hi, lo)
        rho = np.empty(2 * n_pairs)
        rho[0::2] = x1
        rho[1::2] = 1.0 - x1
        yield ProbVector(rho, gamma, sizes, starts)


def min_linear(coef: np.ndarray, gamma: float, layout) -> float:
    """Exact minimum of coef . rho over the feasible set (vertex search).

    Vertices put h units at the upper level gamma*s and the rest at s with
    s = 1/(gamma*h + n - h); minimizing over h after sorting is exact.
    """
    sizes, starts = _as_layout(layout)
    coef = np.asarray(coef, dtype=float)
    if np.all(sizes == 2):
        c1, c2 = coef[0::2], coef[1::2]
        lo = np.minimum(c1, c2)
        hi = np.maximum(c1, c2)
        return float(np.sum((gamma * lo + hi) / (1.0 + gamma)))
    total = 0.0
    for s, n in zip(starts, sizes):
        c = np.sort(coef[s : s + n])
        pref = np.concatenate(([0.0], np.cumsum(c)))
        h = np.arange(n)
        vals = (gamma * pref[h] + (pref[n] - pref[h])) / (gamma * h + (n - h))
        total += float(vals.min())
    return total
