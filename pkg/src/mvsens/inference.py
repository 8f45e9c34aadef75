"""User-facing sensitivity inference.

Global tests at a given gamma, the changepoint search over gamma, closed
testing for per-outcome conclusions, and the Bonferroni baseline.  Method
names: "chibar" (adaptive coherent combination against its worst-case
reference quantile), "equal-weight" (fixed all-ones combination against the
normal quantile), "per-outcome-max" (best single outcome against a
Bonferroni-corrected normal quantile), "user-finite" (user-supplied
directions, Bonferroni over their count).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .critical import CriticalOpts, chibar_critical_value
from .game import GameResult, LambdaSpec, SolveOptions, solve_worst_case
from .study import MatchedStudy, ScoreMatrix

__all__ = [
    "METHODS",
    "GammaRecord",
    "ChangepointResult",
    "ClosedTestingResult",
    "ClosedChangepoints",
    "SensitivityReport",
    "global_test",
    "changepoint_gamma",
    "closed_testing",
    "closed_testing_changepoints",
    "bonferroni_per_outcome",
    "bonferroni_changepoints",
]

METHODS = ("chibar", "equal-weight", "per-outcome-max", "user-finite")


@dataclass
class GammaRecord:
    gamma: float
    method: str
    a_star: float
    b_star: float
    critical_value: float
    reject: bool
    lambda_star: np.ndarray | None
    outcomes: tuple | None = None  # outcome subset tested, None = all
    warnings: list = field(default_factory=list)
    info: dict = field(default_factory=dict)


@dataclass
class ChangepointResult:
    """Largest gamma at which the test still rejects, to grid resolution.

    status: "interior" (changepoint inside the grid), "below_min" (no
    rejection even at gamma_min), "at_max" (rejection everywhere; the
    changepoint is at least gamma_max).
    """

    value: float
    status: str
    resolution: float
    warnings: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)  # (gamma, reject)

    def __str__(self) -> str:
        if self.status == "below_min":
            return f"< {self.value:g}"
        if self.status == "at_max":
            return f">= {self.value:g}"
        return f"{self.value:g}"


@dataclass
class ClosedTestingResult:
    reject: dict  # outcome index -> bool
    subset_records: dict  # frozenset of outcome indices -> GammaRecord
    warnings: list = field(default_factory=list)


@dataclass
class ClosedChangepoints:
    per_outcome: dict  # outcome index -> ChangepointResult
    per_subset: dict  # frozenset -> ChangepointResult


@dataclass
class SensitivityReport:
    records: list
    changepoint: ChangepointResult | None = None
    per_outcome_closed: dict | None = None
    per_outcome_bonferroni: dict | None = None
    warnings: list = field(default_factory=list)


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 0.5:
        raise ValueError(f"alpha must be in (0, 0.5], got {alpha}")


def _lambda_spec(method: str, k: int, lam_vectors) -> LambdaSpec:
    if method == "chibar":
        return LambdaSpec.cone()
    if method == "equal-weight":
        return LambdaSpec.equal_weight(k)
    if method == "per-outcome-max":
        return LambdaSpec.basis(k)
    if method == "user-finite":
        if lam_vectors is None:
            raise ValueError("user-finite method needs lam_vectors")
        return LambdaSpec.finite(lam_vectors)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def global_test(
    study: MatchedStudy,
    scores: ScoreMatrix,
    gamma: float,
    alpha: float,
    method: str = "chibar",
    lam_vectors=None,
    solver_opts: SolveOptions | None = None,
    crit_opts: CriticalOpts | None = None,
    fast: bool = False,
    outcomes: tuple | None = None,
) -> GammaRecord:
    """One-sided sensitivity test of the global null at one gamma.

    ``fast`` lets the solver stop as soon as the decision against the
    critical value is certified; a_star/b_star are then only bounds adequate
    for the decision.  ``outcomes`` restricts the test to a subset of score
    columns (used by closed testing).
    """
    _check_alpha(alpha)
    warnings: list[str] = []
    sc = scores if outcomes is None else scores.restrict(list(outcomes))
    k = sc.K
    info: dict = {}
    if method == "chibar":
        wc = chibar_critical_value(study, sc, gamma, alpha, crit_opts)
        critical = wc.c
        info.update(
            quantile_sq=wc.quantile_sq,
            worst_corr=wc.corr.tolist(),
            perlman_fallback=wc.perlman_fallback,
        )
        if wc.perlman_fallback:
            warnings.append("correlation-quantile search stalled; Perlman bound used")
    elif method == "equal-weight":
        critical = float(stats.norm.ppf(1.0 - alpha))
        if sc.scheme == "user-supplied":
            warnings.append(
                "equal weighting assumes outcome statistics on a common scale; "
                "user-supplied scores are not checked"
            )
    elif method == "per-outcome-max":
        critical = float(stats.norm.ppf(1.0 - alpha / k))
    elif method == "user-finite":
        n_dir = len(np.atleast_2d(np.asarray(lam_vectors)))
        critical = float(stats.norm.ppf(1.0 - alpha / n_dir))
    else:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")

    opts = solver_opts or SolveOptions()
    if fast:
        opts = SolveOptions(**{**opts.__dict__, "decision_threshold": critical, "keep_trace": False})
    res = solve_worst_case(study, sc, gamma, _lambda_spec(method, k, lam_vectors), opts)
    reject = bool(res.decided) if res.decided is not None else bool(res.a_star >= critical)
    if res.ridged:
        warnings.append("near-singular covariance ridged; check for degenerate outcomes")
    if not res.converged and not fast:
        warnings.append("solver hit iteration limit; worst case may be loose")
    info["iterations"] = res.iterations
    return GammaRecord(
        gamma=float(gamma),
        method=method,
        a_star=res.a_star,
        b_star=res.b_star,
        critical_value=critical,
        reject=reject,
        lambda_star=res.lambda_star,
        outcomes=outcomes,
        warnings=warnings,
        info=info,
    )


def changepoint_gamma(
    study: MatchedStudy,
    scores: ScoreMatrix,
    alpha: float,
    method: str = "chibar",
    gamma_min: float = 1.0,
    gamma_max: float = 10.0,
    resolution: float = 0.01,
    lam_vectors=None,
    solver_opts: SolveOptions | None = None,
    crit_opts: CriticalOpts | None = None,
    outcomes: tuple | None = None,
) -> ChangepointResult:
    """Bisect for the largest gamma at which the test rejects.

    Bisection assumes rejection is monotone non-increasing in gamma; the
    evaluations collected along the way are audited afterwards and any
    non-monotone pattern triggers a conservative fallback (largest evaluated
    gamma preceded only by rejections) plus a warning.
    """
    _check_alpha(alpha)
    evals: dict[float, GammaRecord] = {}

    def rejected(g: float) -> bool:
        g = round(float(g), 12)
        if g not in evals:
            evals[g] = global_test(
                study, scores, g, alpha, method,
                lam_vectors=lam_vectors, solver_opts=solver_opts, crit_opts=crit_opts,
                fast=True, outcomes=outcomes,
            )
        return evals[g].reject

    def records() -> list:
        return [evals[g] for g in sorted(evals)]

    if not rejected(gamma_min):
        return ChangepointResult(gamma_min, "below_min", resolution, evaluations=records())
    if rejected(gamma_max):
        return ChangepointResult(gamma_max, "at_max", resolution, evaluations=records())
    lo, hi = gamma_min, gamma_max
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if rejected(mid):
            lo = mid
        else:
            hi = mid
    warnings = []
    value = lo
    seq = records()
    flips = [
        (r1.gamma, r2.gamma)
        for r1, r2 in zip(seq, seq[1:])
        if (not r1.reject) and r2.reject
    ]
    if flips:
        warnings.append(
            f"rejection not monotone in gamma near {flips[0]}; "
            "reporting largest gamma preceded only by rejections"
        )
        value = gamma_min
        for rec in seq:
            if not rec.reject:
                break
            value = rec.gamma
    return ChangepointResult(value, "interior", resolution, warnings, seq)


def closed_testing(
    study: MatchedStudy,
    scores: ScoreMatrix,
    gamma: float,
    alpha: float,
    method: str = "chibar",
    solver_opts: SolveOptions | None = None,
    crit_opts: CriticalOpts | None = None,
) -> ClosedTestingResult:
    """Closed testing over all nonempty outcome subsets.

    Each intersection hypothesis is tested at level alpha with the chosen
    method restricted to its outcomes; an individual outcome is rejected iff
    every subset containing it is rejected.
    """
    K = scores.K
    if K > 12:
        raise ValueError(f"closed testing enumerates 2^K subsets; K={K} > 12")
    _check_alpha(alpha)
    subset_records = {}
    for r in range(1, K + 1):
        for S in itertools.combinations(range(K), r):
            subset_records[frozenset(S)] = global_test(
                study, scores, gamma, alpha, method,
                solver_opts=solver_opts, crit_opts=crit_opts, fast=True, outcomes=S,
            )
    reject = {
        k: all(rec.reject for S, rec in subset_records.items() if k in S) for k in range(K)
    }
    return ClosedTestingResult(reject, subset_records)


def closed_testing_changepoints(
    study: MatchedStudy,
    scores: ScoreMatrix,
    alpha: float,
    method: str = "chibar",
    gamma_min: float = 1.0,
    gamma_max: float = 10.0,
    resolution: float = 0.01,
    solver_opts: SolveOptions | None = None,
    crit_opts: CriticalOpts | None = None,
) -> ClosedChangepoints:
    """Per-outcome changepoints under closed testing: the changepoint of
    outcome k is the smallest changepoint among subsets containing k."""
    K = scores.K
    if K > 12:
        raise ValueError(f"closed testing enumerates 2^K subsets; K={K} > 12")
    subset_cp = {}
    for r in range(1, K + 1):
        for S in itertools.combinations(range(K), r):
            subset_cp[frozenset(S)] = changepoint_gamma(
                study, scores, alpha, method, gamma_min, gamma_max, resolution,
                solver_opts=solver_opts, crit_opts=crit_opts, outcomes=S,
            )
    out = {}
    for k in range(K):
        relevant = [cp for S, cp in subset_cp.items() if k in S]
        if any(cp.status == "below_min" for cp in relevant):
            out[k] = ChangepointResult(gamma_min, "below_min", resolution)
        elif all(cp.status == "at_max" for cp in relevant):
            out[k] = ChangepointResult(gamma_max, "at_max", resolution)
        else:
            out[k] = ChangepointResult(
                min(cp.value for cp in relevant), "interior", resolution,
                warnings=sum((cp.warnings for cp in relevant), []),
            )
    return ClosedChangepoints(out, subset_cp)


def bonferroni_per_outcome(
    study: MatchedStudy,
    scores: ScoreMatrix,
    gamma: float,
    alpha: float,
    solver_opts: SolveOptions | None = None,
) -> dict[int, GammaRecord]:
    """K univariate worst-case tests against the alpha/K normal quantile."""
    _check_alpha(alpha)
    out = {}
    for k in range(scores.K):
        out[k] = global_test(
            study, scores, gamma, alpha / scores.K, "equal-weight",
            solver_opts=solver_opts, fast=True, outcomes=(k,),
        )
    return out


def bonferroni_changepoints(
    study: MatchedStudy,
    scores: ScoreMatrix,
    alpha: float,
    gamma_min: float = 1.0,
    gamma_max: float = 10.0,
    resolution: float = 0.01,
    solver_opts: SolveOptions | None = None,
) -> dict[int, ChangepointResult]:
    return {
        k: changepoint_gamma(
            study, scores, alpha / scores.K, "equal-weight",
            gamma_min, gamma_max, resolution, solver_opts=solver_opts, outcomes=(k,),
        )
        for k in range(scores.K)
    }
