"""Simulation harness: Type I error tables, power curves over gamma, and
population-limit design-sensitivity estimates for paired data with
equicorrelated normal noise.

Every random quantity derives from the scenario seed through counter-based
substreams, so identical scenarios reproduce byte-identical tables at any
thread count.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .chibar import counter_rng
from .critical import CorrelationBox, CriticalOpts, correlation_box, worst_case_quantile
from .game import LambdaSpec, SolveOptions, solve_worst_case
from .inference import GammaRecord, _check_alpha
from .study import (
    MatchedStudy,
    ScoreMatrix,
    StudyError,
    huber_pair_scores,
    study_from_pair_differences,
)

__all__ = [
    "SimScenario",
    "PowerTable",
    "DesignSensitivity",
    "generate_paired_data",
    "power_curve",
    "type1_table",
    "unconstrained_test",
    "design_sensitivity_estimate",
    "load_scenarios",
    "parse_scenarios",
]

SIM_METHODS = ("chibar", "equal-weight", "per-outcome-max", "unconstrained")


@dataclass(frozen=True)
class SimScenario:
    name: str
    mode: str  # "power" | "type1" | "design"
    I: int
    K: int
    tau: tuple
    rho_out: float
    methods: tuple = ("chibar", "equal-weight", "per-outcome-max")
    kappa: float = 2.5
    gamma: float = 1.0
    gamma_grid: tuple = ()
    alpha: float = 0.05
    replicates: int = 500
    seed: int = 20240101

    def __post_init__(self):
        if self.mode not in ("power", "type1", "design"):
            raise ValueError(f"unknown scenario mode {self.mode!r}")
        if len(self.tau) != self.K:
            raise ValueError("tau length must equal K")
        if self.K > 1 and not (-1.0 / (self.K - 1) < self.rho_out < 1.0):
            raise ValueError("equicorrelation out of the positive-definite range")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        for m in self.methods:
            if m not in SIM_METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {SIM_METHODS}")
        _check_alpha(self.alpha)


@dataclass
class PowerTable:
    scenario: SimScenario
    rows: list  # dicts: method, gamma, rejections, replicates, power, se


@dataclass
class DesignSensitivity:
    method: str
    value: float
    spread: float
    per_seed: list
    flags: list = field(default_factory=list)


def _noise_chol(k: int, rho: float) -> np.ndarray:
    c = (1.0 - rho) * np.eye(k) + rho * np.ones((k, k))
    return np.linalg.cholesky(c)


def generate_paired_data(scn: SimScenario, rep_index: int) -> MatchedStudy:
    """Matched pairs whose treated-minus-control differences are
    tau + equicorrelated standard normal noise, reproducible from
    (seed, rep_index)."""
    rng = counter_rng(scn.seed, stream=rep_index)
    eps = rng.standard_normal((scn.I, scn.K)) @ _noise_chol(scn.K, scn.rho_out).T
    return study_from_pair_differences(np.asarray(scn.tau) + eps)


def _sim_solver_opts(critical: float) -> SolveOptions:
    return SolveOptions(
        max_iter=1500, patience=40, polish_iter=25,
        decision_threshold=critical, keep_trace=False,
    )


def _sim_crit_opts() -> CriticalOpts:
    return CriticalOpts(
        corr_starts=2, corr_iters=40, n_mc=20_000,
        ascent_starts=("lower",), ascent_step=0.08,
        ascent_min_step=0.02, ascent_max_sweeps=3,
    )


class _ChibarCriticalCache:
    """Deviate-scale chibar critical values memoized on a conservatively
    rounded correlation box (lower bounds floored, upper bounds ceiled to a
    coarse grid, so the cached box contains the true one)."""

    def __init__(self, alpha: float, opts: CriticalOpts, grid: float = 0.04):
        self.alpha = alpha
        self.opts = opts
        self.grid = grid
        self.store: dict = {}

    def critical(self, study: MatchedStudy, scores: ScoreMatrix, gamma: float) -> float:
        box = correlation_box(study, scores, gamma, self.opts)
        if scores.K <= 2:
            return worst_case_quantile(box, self.alpha, self.opts).c
        lo = np.maximum(np.floor(box.lower / self.grid) * self.grid, -1.0 + 1e-6)
        hi = np.minimum(np.ceil(box.upper / self.grid) * self.grid, 1.0 - 1e-6)
        np.fill_diagonal(lo, 1.0)
        np.fill_diagonal(hi, 1.0)
        key = (round(gamma, 9), lo.tobytes(), hi.tobytes())
        if key not in self.store:
            wide = CorrelationBox(lo, hi, gamma)
            self.store[key] = worst_case_quantile(wide, self.alpha, self.opts).c
        return self.store[key]


def _decide(study, scores, gamma, method, alpha, cache: _ChibarCriticalCache) -> bool:
    k = scores.K
    if method == "chibar":
        critical = cache.critical(study, scores, gamma)
        spec = LambdaSpec.cone()
    elif method == "equal-weight":
        critical = float(stats.norm.ppf(1.0 - alpha))
        spec = LambdaSpec.equal_weight(k)
    elif method == "per-outcome-max":
        critical = float(stats.norm.ppf(1.0 - alpha / k))
        spec = LambdaSpec.basis(k)
    elif method == "unconstrained":
        critical = float(np.sqrt(stats.chi2.ppf(1.0 - alpha, k)))
        spec = LambdaSpec.unconstrained()
    else:
        raise ValueError(f"unknown method {method!r}")
    res = solve_worst_case(study, scores, gamma, spec, _sim_solver_opts(critical))
    return bool(res.decided)


def _binomial_rows(scenario, counts, gammas):
    rows = []
    n = scenario.replicates
    for m in scenario.methods:
        for g in gammas:
            c = counts[(m, g)]
            p = c / n
            rows.append({
                "method": m, "gamma": g, "rejections": c, "replicates": n,
                "power": p, "se": float(np.sqrt(p * (1 - p) / n)),
            })
    return rows


def _run_grid(scn: SimScenario, gammas, threads: int | None, crit_opts) -> PowerTable:
    cache = _ChibarCriticalCache(scn.alpha, crit_opts or _sim_crit_opts())

    def one_rep(rep: int):
        study = generate_paired_data(scn, rep)
        scores = huber_pair_scores(study, scn.kappa)
        return [
            (m, g, _decide(study, scores, g, m, scn.alpha, cache))
            for g in gammas
            for m in scn.methods
        ]

    counts = {(m, g): 0 for m in scn.methods for g in gammas}
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_rep, range(scn.replicates)))
    else:
        results = [one_rep(r) for r in range(scn.replicates)]
    for rep_out in results:
        for m, g, rej in rep_out:
            counts[(m, g)] += int(rej)
    return PowerTable(scn, _binomial_rows(scn, counts, gammas))


def power_curve(scn: SimScenario, threads: int | None = None,
                crit_opts: CriticalOpts | None = None) -> PowerTable:
    """Rejection rates for each method over the scenario's gamma grid."""
    if not scn.gamma_grid:
        raise ValueError("power scenario needs a gamma_grid")
    return _run_grid(scn, tuple(scn.gamma_grid), threads, crit_opts)


def type1_table(scn: SimScenario, threads: int | None = None,
                crit_opts: CriticalOpts | None = None) -> PowerTable:
    """Rejection rates under a true null (all effects nonpositive) at the
    scenario's single gamma."""
    if any(t > 0 for t in scn.tau):
        raise ValueError("type1 scenario requires all tau <= 0")
    return _run_grid(scn, (scn.gamma,), threads, crit_opts)


def unconstrained_test(study: MatchedStudy, scores: ScoreMatrix, gamma: float,
                       alpha: float, solver_opts: SolveOptions | None = None) -> GammaRecord:
    """Sign-unrestricted combination against the chi-square quantile.

    Not a valid test of the one-sided null (directional control is lost);
    provided as the negative control for the Type I error tables."""
    _check_alpha(alpha)
    critical = float(np.sqrt(stats.chi2.ppf(1.0 - alpha, scores.K)))
    res = solve_worst_case(study, scores, gamma, LambdaSpec.unconstrained(), solver_opts)
    reject = bool(res.decided) if res.decided is not None else bool(res.a_star >= critical)
    return GammaRecord(
        gamma=float(gamma), method="unconstrained", a_star=res.a_star, b_star=res.b_star,
        critical_value=critical, reject=reject, lambda_star=res.lambda_star,
        warnings=["not a valid one-sided test; negative control only"],
        info={"iterations": res.iterations},
    )


# ---------------------------------------------------------------------------
# Design sensitivity: population-limit sign of the worst-case deviate.
#
# For pairs, some feasible probabilities drive every combined deviate
# nonpositive iff for every nonnegative weighting w of the outcomes,
# w.t <= delta * sum_i |w.q_i| with delta = (gamma-1)/(gamma+1) (linear
# separation over the box of per-pair mean shifts).  The crossing gamma of
# that sign is the design sensitivity of the corresponding test.
# ---------------------------------------------------------------------------


def _simplex_grid(k: int, max_points: int = 3000) -> np.ndarray:
    """Barycentric grid over the weight simplex, >= 2000 points when k > 1."""
    if k == 1:
        return np.ones((1, 1))
    from itertools import product as iproduct
    from math import comb

    n = 2
    while n < 200 and comb(n + k, k - 1) <= max_points:
        n += 1
    pts = []
    for c in iproduct(range(n + 1), repeat=k - 1):
        if sum(c) <= n:
            pts.append([x / n for x in c] + [1.0 - sum(c) / n])
    return np.asarray(pts)


class _PopulationScores:
    """Treated-side pair scores and their weighted absolute sums for one
    population-scale draw."""

    def __init__(self, scn: SimScenario, seed_index: int, population_i: int):
        rng = counter_rng(scn.seed, stream=100_000 + seed_index)
        eps = rng.standard_normal((population_i, scn.K)) @ _noise_chol(scn.K, scn.rho_out).T
        y = np.asarray(scn.tau) + eps
        s = np.median(np.abs(y), axis=0)
        if np.any(s <= 0):
            raise StudyError("degenerate outcome in design-sensitivity draw")
        self.q = np.sign(y) * np.minimum(np.abs(y) / s, scn.kappa)
        self.t = self.q.sum(axis=0)

    def abs_sum(self, w: np.ndarray) -> np.ndarray:
        """sum_i |w.q_i| for each row w, chunked over pairs."""
        w2 = np.atleast_2d(w)
        out = np.zeros(len(w2))
        for chunk in np.array_split(self.q, max(1, len(self.q) // 8000)):
            out += np.abs(chunk @ w2.T).sum(axis=0)
        return out


def _sign_rejects(pop: _PopulationScores, method: str, gamma: float, grid: np.ndarray) -> bool:
    delta = (gamma - 1.0) / (gamma + 1.0)
    if method == "equal-weight":
        w = np.ones(pop.q.shape[1])
        return float(pop.t @ w - delta * pop.abs_sum(w)[0]) > 0
    if method == "per-outcome-max":
        margins = pop.t - delta * np.abs(pop.q).sum(axis=0)
        return bool(np.max(margins) > 0)
    if method == "chibar":
        margins = grid @ pop.t - delta * pop.abs_sum(grid)
        return bool(np.max(margins) > 0)
    raise ValueError(f"design sensitivity not defined for method {method!r}")


def design_sensitivity_estimate(
    scn: SimScenario,
    method: str,
    population_i: int = 200_000,
    n_seeds: int = 5,
    bracket: float = 0.05,
    gamma_max: float = 20.0,
) -> DesignSensitivity:
    """Estimate the gamma below which power tends to one and above which it
    tends to zero: generate a population-scale draw, bisect gamma for the
    sign change of the worst-case deviate, and average over seeds."""
    if method not in ("chibar", "equal-weight", "per-outcome-max"):
        raise ValueError(f"design sensitivity not defined for method {method!r}")
    flags: list[str] = []
    per_seed = []
    grid = _simplex_grid(scn.K) if method == "chibar" else np.empty((0, scn.K))
    for s in range(n_seeds):
        pop = _PopulationScores(scn, s, population_i)
        if not _sign_rejects(pop, method, 1.0, grid):
            per_seed.append(1.0)
            flags.append(f"seed {s}: no rejection even at gamma = 1")
            continue
        if _sign_rejects(pop, method, gamma_max, grid):
            per_seed.append(gamma_max)
            flags.append(f"seed {s}: rejection persists at gamma = {gamma_max}")
            continue
        lo, hi = 1.0, gamma_max
        while hi - lo > bracket:
            mid = 0.5 * (lo + hi)
            if _sign_rejects(pop, method, mid, grid):
                lo = mid
            else:
                hi = mid
        per_seed.append(0.5 * (lo + hi))
    arr = np.asarray(per_seed)
    return DesignSensitivity(method, float(arr.mean()), float(arr.max() - arr.min()), per_seed, flags)


# ---------------------------------------------------------------------------
# Scenario files: flat key = value lines, '#' comments.  Values that vary
# across cells (tau, rho) take ';'-separated variants expanded as a grid.
# ---------------------------------------------------------------------------


def _parse_gamma_grid(text: str) -> tuple:
    text = text.strip()
    m = re.fullmatch(r"([-\d.eE]+)\s*:\s*([-\d.eE]+)\s*:\s*([-\d.eE]+)", text)
    if m:
        start, stop, step = (float(g) for g in m.groups())
        n = int(round((stop - start) / step)) + 1
        return tuple(round(start + i * step, 10) for i in range(n))
    return tuple(float(v) for v in text.split(","))


def parse_scenarios(text: str, base_name: str = "scenario") -> list[SimScenario]:
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"scenario line {lineno}: expected key = value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        kv[key] = val

    def need(key: str) -> str:
        if key not in kv:
            raise ValueError(f"scenario missing required key {key!r}")
        return kv[key]

    mode = need("mode")
    K = int(need("K"))
    taus = [tuple(float(x) for x in var.split(",")) for var in need("tau").split(";")]
    rhos = [float(r) for r in kv.get("rho", "0").split(";")]
    methods = tuple(m.strip() for m in kv.get("methods", "chibar,equal-weight,per-outcome-max").split(","))
    out = []
    for tau in taus:
        for rho in rhos:
            label = kv.get("name", base_name)
            if len(taus) > 1 or len(rhos) > 1:
                label += f"[tau={','.join(f'{t:g}' for t in tau)};rho={rho:g}]"
            out.append(
                SimScenario(
                    name=label,
                    mode=mode,
                    I=int(need("I")),
                    K=K,
                    tau=tau,
                    rho_out=rho,
                    methods=methods,
                    kappa=float(kv.get("kappa", 2.5)),
                    gamma=float(kv.get("gamma", 1.0)),
                    gamma_grid=_parse_gamma_grid(kv["gamma_grid"]) if "gamma_grid" in kv else (),
                    alpha=float(kv.get("alpha", 0.05)),
                    replicates=int(kv.get("replicates", 500)),
                    seed=int(kv.get("seed", 20240101)),
                )
            )
    return out


def load_scenarios(path) -> list[SimScenario]:
    import os

    with open(path) as fh:
        text = fh.read()
    return parse_scenarios(text, os.path.splitext(os.path.basename(str(path)))[0])
