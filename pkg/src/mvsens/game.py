"""Worst-case bias versus best coherent combination, solved as a game.

The outer player picks feasible assignment probabilities to minimize the
standardized deviate of the combined statistic; the inner player picks the
combination weights from a cone or finite set to maximize it.  The clipped
squared deviate is convex in the probabilities, so projected subgradient
descent with the inner supremum solved exactly at each iterate finds the
global optimum.

All-pairs studies run in a reduced parameterization: the only free quantity
per pair is the mean shift m_i = 2 rho_i1 - 1 in [-delta, delta] with
delta = (gamma - 1)/(gamma + 1), for which projection is an elementwise clip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cone import orthant_sup_single
from .feasible import (
    PD_EIG_TOL,
    PD_RIDGE,
    ProbVector,
    compute_moments,
    min_linear,
    project_onto_PGamma,
    uniform_probs,
)
from .study import MatchedStudy, ScoreMatrix, observed_statistics, pair_differences

__all__ = [
    "LambdaSpec",
    "GameResult",
    "SolveOptions",
    "coherent_sup",
    "finite_sup",
    "subgradient",
    "solve_worst_case",
]


@dataclass(frozen=True)
class LambdaSpec:
    """Weight-vector constraint set: the nonnegative cone, a finite set of
    directions, or the whole space minus zero (directionally invalid, kept
    only as a negative control)."""

    kind: str  # "cone" | "finite" | "unconstrained"
    vectors: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("cone", "finite", "unconstrained"):
            raise ValueError(f"unknown lambda set kind {self.kind!r}")
        if self.kind == "finite":
            vecs = np.atleast_2d(np.asarray(self.vectors, dtype=float))
            if vecs.shape[0] == 0:
                raise ValueError("finite lambda set is empty")
            if np.any(~np.any(vecs != 0.0, axis=1)):
                raise ValueError("lambda set must exclude the zero vector")
            object.__setattr__(self, "vectors", vecs)

    @classmethod
    def cone(cls) -> "LambdaSpec":
        return cls("cone")

    @classmethod
    def finite(cls, vectors) -> "LambdaSpec":
        return cls("finite", vectors)

    @classmethod
    def singleton(cls, vector) -> "LambdaSpec":
        return cls("finite", np.atleast_2d(vector))

    @classmethod
    def equal_weight(cls, k: int) -> "LambdaSpec":
        return cls("finite", np.ones((1, k)))

    @classmethod
    def basis(cls, k: int) -> "LambdaSpec":
        return cls("finite", np.eye(k))

    @classmethod
    def unconstrained(cls) -> "LambdaSpec":
        return cls("unconstrained")

    @property
    def size(self) -> int | None:
        return None if self.vectors is None else len(self.vectors)


def coherent_sup(t_minus_mu, sigma) -> tuple[float, np.ndarray]:
    """Supremum of the standardized deviate over the nonnegative cone.

    Positive case via the dual orthant QP; when every coordinate of d is
    nonpositive the signed supremum is max_k d_k / sqrt(sigma_kk) and no
    descent iterations are needed downstream.
    """
    sup, lam = orthant_sup_single(np.asarray(sigma, dtype=float), np.asarray(t_minus_mu, float))
    return sup, lam


def finite_sup(t_minus_mu, sigma, vectors) -> tuple[float, np.ndarray]:
    """Exhaustive signed maximum of the deviate over a finite direction set."""
    d = np.asarray(t_minus_mu, dtype=float)
    vecs = np.atleast_2d(np.asarray(vectors, dtype=float))
    denom = np.einsum("lk,kj,lj->l", vecs, np.asarray(sigma, float), vecs)
    if np.any(denom <= 0):
        raise np.linalg.LinAlgError("direction with nonpositive variance")
    ratios = (vecs @ d) / np.sqrt(denom)
    best = int(np.argmax(ratios))
    return float(ratios[best]), vecs[best]


def _unconstrained_sup(t_minus_mu, sigma) -> tuple[float, np.ndarray]:
    d = np.asarray(t_minus_mu, dtype=float)
    h = np.linalg.solve(sigma, d)
    val = float(np.sqrt(max(d @ h, 0.0)))
    lam = h if np.any(h != 0) else np.eye(len(d))[0]
    return val, lam


def inner_sup(t_minus_mu, sigma, spec: LambdaSpec) -> tuple[float, np.ndarray]:
    if spec.kind == "cone":
        return coherent_sup(t_minus_mu, sigma)
    if spec.kind == "finite":
        return finite_sup(t_minus_mu, sigma, spec.vectors)
    return _unconstrained_sup(t_minus_mu, sigma)


def _subgrad_arrays(q, rho, starts, strat, lam, resid, h2):
    """Gradient of (lam.(t-mu))^2 / lam'Sigma lam at fixed lam, per unit."""
    v = q @ lam
    vbar = np.add.reduceat(v * rho, starts)
    h1 = resid * resid
    dh1 = -2.0 * v * resid
    dh2 = v * v - 2.0 * v * vbar[strat]
    return (h2 * dh1 - h1 * dh2) / (h2 * h2)


def subgradient(study: MatchedStudy, scores: ScoreMatrix, probs: ProbVector, lam) -> np.ndarray:
    """Subgradient of the clipped squared deviate at probs, for the inner
    maximizer lam (which must attain the supremum there with a positive
    deviate)."""
    lam = np.asarray(lam, dtype=float)
    t = observed_statistics(study, scores)
    mom = compute_moments(scores, probs)
    resid = float(lam @ (t - mom.mu))
    h2 = float(lam @ mom.sigma @ lam)
    if h2 <= 0:
        raise np.linalg.LinAlgError("combined-score variance is nonpositive")
    return _subgrad_arrays(
        scores.q, probs.rho, study.starts, study.stratum_of_unit, lam, resid, h2
    )


@dataclass
class SolveOptions:
    max_iter: int = 5000
    rel_tol: float = 1e-8
    patience: int = 50
    t0: float | None = None
    seed: int = 0
    restarts: int = 0
    polish_iter: int = 80
    decision_threshold: float | None = None  # deviate-scale critical value
    keep_trace: bool = True


@dataclass
class GameResult:
    """Outcome of the outer minimization.

    a_star is the worst-case deviate (signed; nonpositive when some feasible
    probability vector kills the test), b_star = max(0, a_star)^2 the value
    of the convex surrogate.  With a decision threshold, ``decided`` records
    the certified comparison of a_star against it; bounds can certify the
    decision well before the minimum itself has converged.
    """

    a_star: float
    b_star: float
    lambda_star: np.ndarray
    rho_star: ProbVector
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    decided: bool | None = None
    lower_bound: float = -np.inf
    ridged: bool = False


def _ensure_pd_inline(sigma: np.ndarray):
    tr = float(np.trace(sigma))
    if tr <= 0:
        raise np.linalg.LinAlgError("covariance has nonpositive trace (degenerate outcome)")
    if float(np.linalg.eigvalsh(sigma)[0]) > PD_EIG_TOL * tr:
        return sigma, False
    return sigma + PD_RIDGE * tr * np.eye(sigma.shape[0]), True


class _RhoGeometry:
    """Generic strata: iterate over the full probability vector."""

    def __init__(self, study: MatchedStudy, scores: ScoreMatrix, gamma: float, spec: LambdaSpec):
        self.q = scores.q
        self.t = observed_statistics(study, scores)
        self.starts = study.starts
        self.strat = study.stratum_of_unit
        self.sizes = study.sizes
        self.gamma = gamma
        self.spec = spec
        self.ridged = False
        self.x0 = uniform_probs(study).rho

    def eval(self, rho):
        qr = self.q * rho[:, None]
        mu_i = np.add.reduceat(qr, self.starts, axis=0)
        cross = np.add.reduceat(qr[:, :, None] * self.q[:, None, :], self.starts, axis=0)
        sigma = cross.sum(axis=0) - np.einsum("ik,il->kl", mu_i, mu_i)
        sigma, ridged = _ensure_pd_inline(0.5 * (sigma + sigma.T))
        self.ridged |= ridged
        d = self.t - mu_i.sum(axis=0)
        value, lam = inner_sup(d, sigma, self.spec)
        return value, lam, d, sigma

    def value(self, rho) -> float:
        value, _, _, _ = self.eval(rho)
        return max(0.0, value) ** 2

    def grad(self, rho, lam, d, sigma):
        resid = float(lam @ d)
        h2 = float(lam @ sigma @ lam)
        return _subgrad_arrays(self.q, rho, self.starts, self.strat, lam, resid, h2)

    def project(self, rho):
        return project_onto_PGamma(rho, self.gamma, self.sizes)

    def lin_min(self, g) -> float:
        return min_linear(g, self.gamma, self.sizes)

    def to_rho(self, rho):
        return rho


class _PairGeometry:
    """All-pairs fast path: iterate over per-pair mean shifts."""

    def __init__(self, study: MatchedStudy, scores: ScoreMatrix, gamma: float, spec: LambdaSpec):
        self.q1 = np.ascontiguousarray(scores.q[0::2])  # (I, K), second unit is its negative
        self.t = observed_statistics(study, scores)
        self.delta = (gamma - 1.0) / (gamma + 1.0)
        self.spec = spec
        self.ridged = False
        self.x0 = np.zeros(study.I)

    def eval(self, m):
        w2 = 1.0 - m * m
        mu = m @ self.q1
        sigma = (self.q1 * w2[:, None]).T @ self.q1
        sigma, ridged = _ensure_pd_inline(0.5 * (sigma + sigma.T))
        self.ridged |= ridged
        d = self.t - mu
        value, lam = inner_sup(d, sigma, self.spec)
        return value, lam, d, sigma

    def value(self, m) -> float:
        value, _, _, _ = self.eval(m)
        return max(0.0, value) ** 2

    def grad(self, m, lam, d, sigma):
        v = self.q1 @ lam
        resid = float(lam @ d)
        h1 = resid * resid
        h2 = float(lam @ sigma @ lam)
        dh1 = -2.0 * v * resid
        dh2 = -2.0 * (v * v) * m
        return (h2 * dh1 - h1 * dh2) / (h2 * h2)

    def project(self, m):
        return np.clip(m, -self.delta, self.delta)

    def lin_min(self, g) -> float:
        return -self.delta * float(np.abs(g).sum())

    def to_rho(self, m):
        rho = np.empty(2 * len(m))
        rho[0::2] = (1.0 + m) / 2.0
        rho[1::2] = (1.0 - m) / 2.0
        return rho


def _armijo_polish(geom, x, fx, iters):
    """Monotone projected-gradient refinement of the best iterate."""
    step = 1.0
    for _ in range(iters):
        value, lam, d, sigma = geom.eval(x)
        if value <= 0:
            return x, 0.0
        fx = min(fx, value * value)
        g = geom.grad(x, lam, d, sigma)
        gn = float(np.linalg.norm(g))
        if gn == 0:
            break
        step = min(step * 4.0, 1e3 / gn)
        improved = False
        while step * gn > 1e-14:
            cand = geom.project(x - step * g)
            fc = geom.value(cand)
            if fc < fx - 1e-14 * (1 + abs(fx)):
                x, fx = cand, fc
                improved = True
                break
            step *= 0.25
        if not improved:
            break
    return x, fx


@dataclass
class _RunState:
    best_b: float = np.inf
    best_x: np.ndarray | None = None
    best_lam: np.ndarray | None = None
    lower: float = -np.inf
    trace: list = field(default_factory=list)
    iterations: int = 0
    early_exit_value: float | None = None
    early_exit_lam: np.ndarray | None = None
    decided: bool | None = None
    converged: bool = False


def _descend(geom, x0, gamma, opts, state: _RunState):
    thr = opts.decision_threshold
    thr_sq = None if thr is None else max(0.0, thr) ** 2
    x = x0
    stall = 0
    for n_iter in range(1, opts.max_iter + 1):
        state.iterations += 1
        value, lam, d, sigma = geom.eval(x)
        if value <= 0:
            state.early_exit_value = float(value)
            state.early_exit_lam = lam
            state.best_b, state.best_x, state.best_lam = 0.0, x, lam
            state.lower = 0.0
            if opts.keep_trace:
                state.trace.append(0.0)
            if thr is not None:
                state.decided = value >= thr
            state.converged = True
            return
        b = value * value
        stall = 0 if b < state.best_b * (1 - opts.rel_tol) else stall + 1
        if b < state.best_b:
            state.best_b, state.best_x, state.best_lam = b, x, lam
        if opts.keep_trace:
            state.trace.append(state.best_b)
        g = geom.grad(x, lam, d, sigma)
        state.lower = max(state.lower, b + geom.lin_min(g) - float(g @ x))
        if thr_sq is not None:
            if state.best_b < thr_sq:
                state.decided = False
                state.converged = gamma == 1.0
                return
            if state.lower >= thr_sq:
                state.decided = True
                state.converged = gamma == 1.0
                return
        if gamma == 1.0:
            state.converged = True
            return
        if stall >= opts.patience:
            state.converged = True
            break
        t0 = opts.t0 if opts.t0 is not None else 1.0 / (1.0 + float(np.linalg.norm(g)))
        x = geom.project(x - (t0 / np.sqrt(n_iter)) * g)

    if opts.polish_iter > 0:
        state.best_x, state.best_b = _armijo_polish(geom, state.best_x, state.best_b, opts.polish_iter)
        value, lam, _, _ = geom.eval(state.best_x)
        if value <= 0:
            state.early_exit_value = float(value)
            state.early_exit_lam = lam
            state.best_b, state.best_lam = 0.0, lam
            state.lower = 0.0
            state.converged = True
        else:
            state.best_b = min(state.best_b, value * value)
            state.best_lam = lam
    if thr is not None and state.decided is None:
        a = state.early_exit_value if state.early_exit_value is not None else np.sqrt(state.best_b)
        state.decided = a >= thr


def solve_worst_case(
    study: MatchedStudy,
    scores: ScoreMatrix,
    gamma: float,
    lam_spec: LambdaSpec | None = None,
    opts: SolveOptions | None = None,
) -> GameResult:
    """Minimize the clipped squared deviate over feasible probabilities.

    Projected subgradient descent from the uniform start with step schedule
    t0 / sqrt(n), exact inner supremum at each iterate, early exit as soon
    as any iterate drives the supremum nonpositive, then a monotone
    refinement pass.  A decision threshold (deviate scale) enables certified
    early stopping: the best iterate upper-bounds the minimum while the
    subgradient plane, minimized exactly over the polytope, lower-bounds it.
    Optional random restarts rerun the descent from projected random starts.
    """
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    spec = lam_spec or LambdaSpec.cone()
    opts = opts or SolveOptions()
    geom_cls = _PairGeometry if study.all_pairs else _RhoGeometry
    geom = geom_cls(study, scores, gamma, spec)

    starts = [geom.x0]
    if opts.restarts > 0 and gamma > 1.0:
        rng = np.random.default_rng(opts.seed)
        for _ in range(opts.restarts):
            raw = geom.x0 + rng.normal(scale=1.0, size=geom.x0.shape)
            starts.append(geom.project(raw))

    state = _RunState()
    for x0 in starts:
        _descend(geom, x0, gamma, opts, state)
        if state.early_exit_value is not None or state.decided is not None:
            break

    def wrap(x):
        return ProbVector(geom.to_rho(x), gamma, study.sizes, study.starts)

    if state.early_exit_value is not None:
        return GameResult(
            a_star=state.early_exit_value,
            b_star=0.0,
            lambda_star=state.early_exit_lam,
            rho_star=wrap(state.best_x),
            iterations=state.iterations,
            converged=True,
            trace=state.trace,
            decided=state.decided,
            lower_bound=0.0,
            ridged=geom.ridged,
        )
    a = float(np.sqrt(state.best_b))
    if state.decided is None and opts.decision_threshold is not None:
        state.decided = a >= opts.decision_threshold
    return GameResult(
        a_star=a,
        b_star=float(state.best_b),
        lambda_star=state.best_lam,
        rho_star=wrap(state.best_x),
        iterations=state.iterations,
        converged=state.converged,
        trace=state.trace,
        decided=state.decided,
        lower_bound=state.lower,
        ridged=geom.ridged,
    )
