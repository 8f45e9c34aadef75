"""Matched-study data model and outcome score construction.

A study is a collection of independent strata, each containing exactly one
treated unit and at least one control.  All downstream code indexes units in
stratum-major order, which is fixed once at ingestion.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Stratum",
    "MatchedStudy",
    "ScoreMatrix",
    "StudyError",
    "load_study",
    "study_from_arrays",
    "study_from_pair_differences",
    "dump_study_json",
    "huber_pair_scores",
    "aligned_rank_scores",
    "user_scores",
    "observed_statistics",
]

DEFAULT_KAPPA = 2.5


class StudyError(ValueError):
    """Raised when input data violates the matched design or score scheme."""


@dataclass(frozen=True)
class Stratum:
    treated: np.ndarray  # (n_i,) bool
    outcomes: np.ndarray  # (n_i, K) float

    def __post_init__(self):
        if self.treated.sum() != 1:
            raise StudyError(
                f"stratum must contain exactly one treated unit, got {int(self.treated.sum())}"
            )
        if len(self.treated) < 2:
            raise StudyError("stratum must contain at least 2 units")


@dataclass(frozen=True)
class MatchedStudy:
    """Immutable matched study: outcomes, treatment indicators, strata layout.

    Units are stored stratum-major; ``starts[i]:starts[i] + sizes[i]`` slices
    stratum ``i`` out of any unit-indexed array.
    """

    outcomes: np.ndarray  # (N, K)
    treated: np.ndarray  # (N,) bool
    sizes: np.ndarray  # (I,) int
    starts: np.ndarray = field(init=False)

    def __post_init__(self):
        outcomes = np.ascontiguousarray(np.asarray(self.outcomes, dtype=float))
        treated = np.asarray(self.treated, dtype=bool)
        sizes = np.asarray(self.sizes, dtype=np.int64)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "treated", treated)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "starts", np.concatenate(([0], np.cumsum(sizes)[:-1])))
        self._validate()
        for arr in (self.outcomes, self.treated, self.sizes, self.starts):
            arr.setflags(write=False)

    def _validate(self):
        if self.sizes.size == 0:
            raise StudyError("study has no strata")
        if np.any(self.sizes < 2):
            i = int(np.argmax(self.sizes < 2)) + 1
            raise StudyError(f"stratum {i} has {int(self.sizes[i - 1])} unit(s); need at least 2")
        if self.outcomes.ndim != 2 or self.outcomes.shape[0] != int(self.sizes.sum()):
            raise StudyError("outcome matrix shape does not match strata sizes")
        if not np.all(np.isfinite(self.outcomes)):
            raise StudyError("outcomes contain non-finite values")
        counts = np.add.reduceat(self.treated.astype(np.int64), self.starts)
        if np.any(counts != 1):
            i = int(np.argmax(counts != 1)) + 1
            word = "no treated unit" if counts[i - 1] == 0 else f"{int(counts[i - 1])} treated units"
            raise StudyError(f"stratum {i} has {word}; need exactly one")

    @property
    def I(self) -> int:
        return len(self.sizes)

    @property
    def N(self) -> int:
        return len(self.treated)

    @property
    def K(self) -> int:
        return self.outcomes.shape[1]

    @property
    def all_pairs(self) -> bool:
        return bool(np.all(self.sizes == 2))

    @property
    def treated_index(self) -> np.ndarray:
        """Global unit index of the treated unit in each stratum."""
        return np.flatnonzero(self.treated)

    @property
    def stratum_of_unit(self) -> np.ndarray:
        return np.repeat(np.arange(self.I), self.sizes)

    def strata(self) -> list[Stratum]:
        return [
            Stratum(self.treated[s : s + n].copy(), self.outcomes[s : s + n].copy())
            for s, n in zip(self.starts, self.sizes)
        ]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MatchedStudy):
            return NotImplemented
        return (
            np.array_equal(self.sizes, other.sizes)
            and np.array_equal(self.treated, other.treated)
            and np.array_equal(self.outcomes, other.outcomes)
        )


def study_from_arrays(stratum_ids, treated, outcomes) -> MatchedStudy:
    """Build a study from flat per-unit arrays, renumbering strata 1..I in
    first-appearance order and sorting units stratum-major."""
    stratum_ids = np.asarray(stratum_ids)
    treated = np.asarray(treated)
    outcomes = np.atleast_2d(np.asarray(outcomes, dtype=float))
    if outcomes.shape[0] != len(stratum_ids):
        raise StudyError("outcome rows do not match stratum ids")
    _, first_pos, inverse = np.unique(stratum_ids, return_index=True, return_inverse=True)
    # renumber by first appearance, keep original within-stratum order
    order_of_label = np.argsort(np.argsort(first_pos))
    new_id = order_of_label[inverse]
    perm = np.argsort(new_id, kind="stable")
    sizes = np.bincount(new_id)
    return MatchedStudy(outcomes[perm], treated[perm].astype(bool), sizes)


def study_from_pair_differences(diffs) -> MatchedStudy:
    """Pairs whose treated-minus-control differences are the rows of ``diffs``.

    Control outcomes are set to zero and the treated unit is listed first;
    pair statistics depend on the data only through the differences.
    """
    diffs = np.atleast_2d(np.asarray(diffs, dtype=float))
    n_pairs, K = diffs.shape
    outcomes = np.zeros((2 * n_pairs, K))
    outcomes[0::2] = diffs
    treated = np.zeros(2 * n_pairs, dtype=bool)
    treated[0::2] = True
    return MatchedStudy(outcomes, treated, np.full(n_pairs, 2))


def _parse_treated(value: str, row: int) -> int:
    v = value.strip()
    if v not in ("0", "1"):
        raise StudyError(f"row {row}: treated must be 0 or 1, got {value!r}")
    return int(v)


def load_study(path, fmt: str | None = None) -> MatchedStudy:
    """Load a study from CSV (columns stratum_id, treated, y1..yK) or from
    the JSON produced by ``dump_study_json``.  Format is inferred from the
    file extension unless given explicitly."""
    path = str(path)
    if fmt is None:
        fmt = "json" if path.endswith(".json") else "csv"
    if fmt == "json":
        with open(path) as fh:
            return study_from_json(json.load(fh))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StudyError("empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "stratum_id" or header[1] != "treated":
            raise StudyError(
                "header must be: stratum_id, treated, y1..yK; got " + ", ".join(header)
            )
        ids, zs, ys = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise StudyError(f"row {lineno}: expected {len(header)} columns, got {len(row)}")
            ids.append(row[0].strip())
            zs.append(_parse_treated(row[1], lineno))
            try:
                ys.append([float(c) for c in row[2:]])
            except ValueError:
                raise StudyError(f"row {lineno}: non-numeric outcome value") from None
    if not ids:
        raise StudyError("empty file")
    return study_from_arrays(np.asarray(ids), np.asarray(zs), np.asarray(ys))


def study_to_json(study: MatchedStudy) -> dict:
    return {
        "strata": [
            {
                "units": [
                    {"treated": bool(z), "outcomes": [float(y) for y in ys]}
                    for z, ys in zip(study.treated[s : s + n], study.outcomes[s : s + n])
                ]
            }
            for s, n in zip(study.starts, study.sizes)
        ]
    }


def study_from_json(obj: dict) -> MatchedStudy:
    strata = obj.get("strata")
    if not strata:
        raise StudyError("empty study JSON")
    treated, outcomes, sizes = [], [], []
    for st in strata:
        units = st["units"]
        sizes.append(len(units))
        for u in units:
            treated.append(bool(u["treated"]))
            outcomes.append([float(y) for y in u["outcomes"]])
    return MatchedStudy(np.asarray(outcomes, dtype=float), np.asarray(treated), np.asarray(sizes))


def dump_study_json(study: MatchedStudy, path) -> None:
    with open(path, "w") as fh:
        json.dump(study_to_json(study), fh, indent=1)


@dataclass(frozen=True)
class ScoreMatrix:
    """Per-unit, per-outcome scores q (stratum-major N x K)."""

    q: np.ndarray
    scheme: str

    def __post_init__(self):
        q = np.ascontiguousarray(np.asarray(self.q, dtype=float))
        object.__setattr__(self, "q", q)
        q.setflags(write=False)

    @property
    def K(self) -> int:
        return self.q.shape[1]

    def restrict(self, columns) -> "ScoreMatrix":
        """Scores for an outcome subset, preserving column order given."""
        cols = np.asarray(columns, dtype=np.int64)
        return ScoreMatrix(self.q[:, cols], self.scheme)

    def degenerate_columns(self) -> np.ndarray:
        return np.flatnonzero(~np.any(self.q != 0.0, axis=0))


def pair_differences(study: MatchedStudy) -> np.ndarray:
    """First-listed-minus-second differences for an all-pairs study."""
    if not study.all_pairs:
        raise StudyError("pair differences require all strata of size 2")
    return study.outcomes[0::2] - study.outcomes[1::2]


def huber_pair_scores(study: MatchedStudy, kappa: float = DEFAULT_KAPPA) -> ScoreMatrix:
    """Huber m-statistic scores for paired data.

    For pair i with within-pair difference d_ik, the first unit receives
    sign(d_ik) * min(|d_ik| / s_k, kappa) and the second its negative, where
    s_k is the median of |d_ik| over pairs.  The treated-units sum of these
    scores equals the usual trimmed pair statistic regardless of which side
    was treated.
    """
    if kappa <= 0:
        raise StudyError("kappa must be positive")
    d = pair_differences(study)
    s = np.median(np.abs(d), axis=0)
    bad = np.flatnonzero(s <= 0)
    if bad.size:
        raise StudyError(f"outcome {bad[0] + 1}: zero median absolute pair difference")
    first = np.sign(d) * np.minimum(np.abs(d) / s, kappa)
    q = np.empty((study.N, study.K))
    q[0::2] = first
    q[1::2] = -first
    return ScoreMatrix(q, f"pair-huber(kappa={kappa:g})")


def aligned_rank_scores(study: MatchedStudy) -> ScoreMatrix:
    """Aligned-rank scores for general strata.

    Per outcome: subtract the stratum mean from every response, rank the
    aligned responses across all N units (ties get average ranks), then
    center the ranks within each stratum so stratum score sums are zero.
    A constant outcome column yields an all-zero score column, which is
    flagged as degenerate by downstream moment checks.
    """
    from scipy.stats import rankdata

    strat = study.stratum_of_unit
    q = np.empty((study.N, study.K))
    for k in range(study.K):
        y = study.outcomes[:, k]
        means = np.add.reduceat(y, study.starts) / study.sizes
        aligned = y - means[strat]
        ranks = rankdata(aligned)
        centered = ranks - (np.add.reduceat(ranks, study.starts) / study.sizes)[strat]
        q[:, k] = centered
    # constant columns align to all-ties, whose centered ranks are exactly 0
    q[:, np.ptp(study.outcomes, axis=0) == 0] = 0.0
    return ScoreMatrix(q, "aligned-rank")


def user_scores(study: MatchedStudy, q) -> ScoreMatrix:
    """Wrap user-supplied scores after dimension and finiteness checks."""
    q = np.asarray(q, dtype=float)
    if q.shape != (study.N, study.K):
        raise StudyError(f"score matrix must be {study.N}x{study.K}, got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise StudyError("scores contain non-finite values")
    sm = ScoreMatrix(q, "user-supplied")
    bad = sm.degenerate_columns()
    if bad.size:
        raise StudyError(f"degenerate outcome {bad[0] + 1}: score column is identically zero")
    return sm


def observed_statistics(study: MatchedStudy, scores: ScoreMatrix) -> np.ndarray:
    """Observed statistic vector t, the treated-unit column sums of q."""
    return scores.q[study.treated].sum(axis=0)
