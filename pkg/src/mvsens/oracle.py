"""Exact small-instance ground truth by enumeration.

Enumerates every treatment assignment compatible with the stratified design,
weights them by the biased-assignment model for a confounder vector u, and
derives exact statistic distributions and worst-case p-values.  Guarded to
toy sizes; this is test apparatus and a debugging aid, not a production path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cone import orthant_sup_batch
from .feasible import ProbVector, compute_moments, uniform_probs
from .study import MatchedStudy, ScoreMatrix, observed_statistics

__all__ = [
    "AssignmentSpace",
    "ConfounderVector",
    "AssignmentDist",
    "DistTable",
    "biased_probs",
    "unit_probs_from_assignment_dist",
    "exact_statistic_distribution",
    "exact_worst_case_pvalue",
]

MAX_ASSIGNMENTS = 1_000_000
MAX_UNITS_FOR_U_SEARCH = 16


@dataclass(frozen=True)
class AssignmentSpace:
    """All assignments with one treated unit per stratum, as local indices."""

    sizes: np.ndarray
    starts: np.ndarray
    local: np.ndarray  # (n_assignments, I) treated unit within stratum

    @classmethod
    def from_study(cls, study: MatchedStudy) -> "AssignmentSpace":
        size = int(np.prod(study.sizes.astype(object)))
        if size > MAX_ASSIGNMENTS:
            raise ValueError(f"assignment space has {size} elements; guard is {MAX_ASSIGNMENTS}")
        grids = np.meshgrid(*[np.arange(n) for n in study.sizes], indexing="ij")
        local = np.stack([g.ravel() for g in grids], axis=1)
        return cls(study.sizes, study.starts, local)

    @property
    def size(self) -> int:
        return self.local.shape[0]

    @property
    def global_index(self) -> np.ndarray:
        return self.local + self.starts

    def observed_row(self, study: MatchedStudy) -> int:
        local = study.treated_index - study.starts
        return int(np.flatnonzero(np.all(self.local == local, axis=1))[0])


@dataclass(frozen=True)
class ConfounderVector:
    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        object.__setattr__(self, "u", u)
        if np.any(u < 0) or np.any(u > 1):
            raise ValueError("confounder values must lie in [0, 1]")


@dataclass(frozen=True)
class AssignmentDist:
    space: AssignmentSpace
    probs: np.ndarray
    gamma: float


def biased_probs(space: AssignmentSpace, u: ConfounderVector | np.ndarray, gamma: float) -> AssignmentDist:
    """P(Z = z) proportional to exp(log(gamma) * z.u) over the design."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    uvec = u.u if isinstance(u, ConfounderVector) else ConfounderVector(np.asarray(u)).u
    logits = np.log(gamma) * uvec[space.global_index].sum(axis=1) if gamma > 1 else np.zeros(space.size)
    logits -= logits.max()
    w = np.exp(logits)
    return AssignmentDist(space, w / w.sum(), float(gamma))


def unit_probs_from_assignment_dist(dist: AssignmentDist) -> ProbVector:
    """Marginal treatment probability of each unit under the distribution."""
    rho = np.zeros(int(dist.space.sizes.sum()))
    for i, (s, n) in enumerate(zip(dist.space.starts, dist.space.sizes)):
        rho[s : s + n] = np.bincount(dist.space.local[:, i], weights=dist.probs, minlength=n)
    return ProbVector(rho, dist.gamma, dist.space.sizes, dist.space.starts)


@dataclass(frozen=True)
class DistTable:
    """Exact distribution of a scalar statistic: sorted atoms with masses."""

    values: np.ndarray
    probs: np.ndarray

    @property
    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def pvalue_geq(self, v: float) -> float:
        """P(X >= v), counting atoms equal to v (within a tiny tolerance)."""
        cut = v - 1e-9 * (1.0 + abs(v))
        idx = np.searchsorted(self.values, cut, side="left")
        return float(self.probs[idx:].sum())

    def quantile(self, p: float) -> float:
        idx = np.searchsorted(self.cdf, p, side="left")
        return float(self.values[min(idx, len(self.values) - 1)])


def _assignment_statistics(study: MatchedStudy, scores: ScoreMatrix, space: AssignmentSpace) -> np.ndarray:
    """Statistic vectors T(z) for every assignment, (n_assignments, K)."""
    T = np.zeros((space.size, study.K))
    for i, s in enumerate(space.starts):
        T += scores.q[s + space.local[:, i]]
    return T


def _statistic_values(study, scores, space, dist, statistic) -> np.ndarray:
    T = _assignment_statistics(study, scores, space)
    kind = statistic[0] if isinstance(statistic, tuple) else statistic
    if kind == "coherent":
        rho = unit_probs_from_assignment_dist(dist)
        mom = compute_moments(scores, rho)
        sigma, _ = mom.ensure_pd()
        sup, _ = orthant_sup_batch(sigma, T - mom.mu)
        return sup
    if kind == "linear":
        lam = np.asarray(statistic[1], dtype=float)
        return T @ lam
    if kind == "outcome":
        return T[:, int(statistic[1])]
    raise ValueError(f"unknown statistic {statistic!r}")


def exact_statistic_distribution(
    study: MatchedStudy,
    scores: ScoreMatrix,
    dist: AssignmentDist,
    statistic="coherent",
) -> DistTable:
    """Exact null distribution of the statistic over all assignments.

    ``statistic`` is "coherent" (the cone-restricted standardized supremum,
    standardized at the unit marginals of ``dist``), ("linear", lam), or
    ("outcome", k).  Observed responses are held fixed, as under the sharp
    null.
    """
    vals = _statistic_values(study, scores, dist.space, dist, statistic)
    order = np.argsort(vals, kind="stable")
    v, p = vals[order], dist.probs[order]
    uniq, inverse = np.unique(v, return_inverse=True)
    mass = np.zeros(len(uniq))
    np.add.at(mass, inverse, p)
    return DistTable(uniq, mass)


def exact_worst_case_pvalue(
    study: MatchedStudy,
    scores: ScoreMatrix,
    gamma: float,
    statistic="coherent",
    n_random_check: int = 0,
    seed: int = 0,
) -> float:
    """Largest exact p-value over confounder vectors at the given gamma.

    Sum statistics attain the worst case at a vertex of the unit cube, so
    the search enumerates u in {0, 1}^N (guarded); ``n_random_check``
    additional uniform draws can assert no interior improvement.
    """
    space = AssignmentSpace.from_study(study)
    if study.N > MAX_UNITS_FOR_U_SEARCH:
        raise ValueError(f"u-vertex search guarded at N={MAX_UNITS_FOR_U_SEARCH}, got {study.N}")
    obs_row = space.observed_row(study)
    kind = statistic[0] if isinstance(statistic, tuple) else statistic
    fixed_mask = None
    if kind != "coherent":
        # sum statistics do not depend on the assignment distribution
        vals = _statistic_values(study, scores, space, None, statistic)
        t_obs = vals[obs_row]
        fixed_mask = vals >= t_obs - 1e-9 * (1.0 + abs(t_obs))

    def pvalue_at(u: np.ndarray) -> float:
        dist = biased_probs(space, u, gamma)
        if fixed_mask is not None:
            return float(dist.probs[fixed_mask].sum())
        vals = _statistic_values(study, scores, space, dist, statistic)
        t_obs = vals[obs_row]
        mask = vals >= t_obs - 1e-9 * (1.0 + abs(t_obs))
        return float(dist.probs[mask].sum())

    if gamma == 1.0:
        return pvalue_at(np.zeros(study.N))
    best = 0.0
    for mask in range(2**study.N):
        u = ((mask >> np.arange(study.N)) & 1).astype(float)
        best = max(best, pvalue_at(u))
    if n_random_check > 0:
        rng = np.random.default_rng(seed)
        for _ in range(n_random_check):
            p = pvalue_at(rng.uniform(size=study.N))
            if p > best + 1e-9:
                raise AssertionError(
                    f"interior confounder beat the vertex search: {p} > {best}"
                )
    return best
