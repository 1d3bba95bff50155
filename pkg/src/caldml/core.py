"""Data model, fold partitioning, and estimator arithmetic shared by all modules.

The estimator works on per-observation pseudo-outcomes: doubly-robust scores
whose sample mean estimates the average treatment effect. Everything here is
deliberately dependency-light (numpy for arrays, pandas only for CSV I/O) and
all containers are immutable after construction, so they can be shared freely
across worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from numpy.typing import NDArray

# Critical value used for the 95% confidence interval throughout.
Z95: float = 1.96

# Safety clip applied to propensities immediately before pseudo-outcome
# computation. Small enough that a calibrator pushing scores to 0/1 still
# produces the pathological blow-up it should, large enough to avoid division
# by zero.
EPS_CLIP: float = 1e-12

# Named sub-stream tags so fold shuffling, data generation and learner
# randomness never alias each other.
STREAM_DATA: int = 11
STREAM_FOLDS: int = 23
STREAM_LEARNER: int = 37
STREAM_SUBSAMPLE: int = 53


def derive_seed(base: int, *tags: int) -> int:
    """Derive an independent child seed from a base seed and integer tags.

    Uses numpy's splittable SeedSequence so that streams keyed by different
    tag tuples are statistically independent and reproducible across runs and
    worker counts.
    """
    ss = np.random.SeedSequence([int(base) & 0xFFFFFFFF, *[int(t) for t in tags]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(base: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *tags))


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """N observations of (covariates, binary treatment, real outcome)."""

    covariates: NDArray[np.float64]
    treatment: NDArray[np.int64]
    outcome: NDArray[np.float64]
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim != 2:
            raise ValueError("covariates must be a 2-d array")
        d = np.asarray(self.treatment)
        y = np.asarray(self.outcome, dtype=float)
        n = x.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one observation")
        if len(d) != n or len(y) != n:
            raise ValueError("covariates, treatment and outcome must have identical length")
        if not np.isin(d, (0, 1)).all():
            raise ValueError("treatment must be binary 0/1")
        if not np.isfinite(x).all():
            raise ValueError("covariates contain non-finite values")
        if not np.isfinite(y).all():
            raise ValueError("outcome contains non-finite values")
        if self.feature_names is not None and len(self.feature_names) != x.shape[1]:
            raise ValueError("feature_names length must match covariate count")
        object.__setattr__(self, "covariates", _as_readonly(x))
        object.__setattr__(self, "treatment", _as_readonly(d.astype(np.int64)))
        object.__setattr__(self, "outcome", _as_readonly(y))
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def q(self) -> int:
        return self.covariates.shape[1]

    def subset(self, indices: NDArray[np.int64]) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(
            self.covariates[idx],
            self.treatment[idx],
            self.outcome[idx],
            self.feature_names,
        )


@dataclass(frozen=True)
class FoldPlan:
    """K-way partition of observation indices with J-way sub-partitions."""

    outer: tuple[NDArray[np.int64], ...]
    inner: tuple[tuple[NDArray[np.int64], ...], ...]
    seed: int

    @property
    def n(self) -> int:
        return sum(len(f) for f in self.outer)

    @property
    def k(self) -> int:
        return len(self.outer)

    @property
    def j(self) -> int:
        return len(self.inner[0])

    def training_indices(self, k: int) -> NDArray[np.int64]:
        """All indices outside outer fold ``k``."""
        others = [f for i, f in enumerate(self.outer) if i != k]
        return np.sort(np.concatenate(others))

    def apply_permutation(self, perm: NDArray[np.int64]) -> "FoldPlan":
        """Relabel every index i as perm[i]; used by invariance tests."""
        p = np.asarray(perm)
        outer = tuple(np.sort(p[f]) for f in self.outer)
        inner = tuple(tuple(np.sort(p[s]) for s in subs) for subs in self.inner)
        return FoldPlan(outer=outer, inner=inner, seed=self.seed)


def make_fold_plan(n: int, k: int, j: int, seed: int) -> FoldPlan:
    """Shuffle {0..n-1} into K balanced folds, each split into J balanced sub-folds.

    Deterministic given ``seed``. Fold sizes at each level differ by at most
    one. Raises on k*j > n so that every sub-fold is non-empty.
    """
    if k < 1 or j < 1:
        raise ValueError("k and j must be positive")
    if k * j > n:
        raise ValueError(f"cannot split n={n} into k={k} folds of j={j} sub-folds")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFF))
    perm = rng.permutation(n)
    outer_raw = np.array_split(perm, k)
    outer = tuple(np.sort(f).astype(np.int64) for f in outer_raw)
    inner = tuple(
        tuple(np.sort(s).astype(np.int64) for s in np.array_split(f, j))
        for f in outer_raw
    )
    return FoldPlan(outer=outer, inner=inner, seed=int(seed))


@dataclass(frozen=True)
class NuisanceEstimates:
    """Cross-fitted nuisance predictions, stored post safety clip."""

    mu1: NDArray[np.float64]
    mu0: NDArray[np.float64]
    propensity_raw: NDArray[np.float64]
    propensity_cal: NDArray[np.float64]

    def __post_init__(self) -> None:
        n = len(self.mu1)
        for name in ("mu1", "mu0", "propensity_raw", "propensity_cal"):
            v = np.asarray(getattr(self, name), dtype=float)
            if len(v) != n:
                raise ValueError("all nuisance vectors must share one length")
            if not np.isfinite(v).all():
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, _as_readonly(v))
        for name in ("propensity_raw", "propensity_cal"):
            p = getattr(self, name)
            if (p <= 0).any() or (p >= 1).any():
                raise ValueError(f"{name} must lie strictly inside (0,1); clip upstream")


@dataclass(frozen=True)
class AteResult:
    """Point estimate, uncertainty, and per-observation diagnostics."""

    theta_hat: float
    se: float
    ci_low: float
    ci_high: float
    pseudo_outcomes: NDArray[np.float64]
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.se < 0:
            raise ValueError("se must be non-negative")
        if not (self.ci_low <= self.theta_hat <= self.ci_high):
            raise ValueError("confidence interval must bracket the point estimate")
        object.__setattr__(self, "pseudo_outcomes", _as_readonly(np.asarray(self.pseudo_outcomes, dtype=float)))
        object.__setattr__(self, "diagnostics", dict(self.diagnostics))

    def covers(self, theta: float) -> bool:
        return self.ci_low <= theta <= self.ci_high

    def with_diagnostics(self, extra: Mapping[str, float]) -> "AteResult":
        merged = dict(self.diagnostics)
        merged.update(extra)
        return AteResult(self.theta_hat, self.se, self.ci_low, self.ci_high,
                         self.pseudo_outcomes, merged)


def clip_propensity(p: NDArray[np.float64], eps: float = EPS_CLIP) -> NDArray[np.float64]:
    """Clip probabilities into [eps, 1-eps]."""
    if not 0 < eps < 0.5:
        raise ValueError("clip must lie in (0, 0.5)")
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)


def pseudo_outcome(d: float, y: float, mu1: float, mu0: float, pi: float) -> float:
    """Doubly-robust score for a single observation.

    Requires pi strictly inside (0,1); a value on the boundary signals a
    missing safety clip upstream.
    """
    if not 0.0 < pi < 1.0:
        raise ValueError(f"propensity must lie strictly in (0,1), got {pi}")
    return mu1 - mu0 + d * (y - mu1) / pi - (1.0 - d) * (y - mu0) / (1.0 - pi)


def pseudo_outcomes(
    d: NDArray[np.int64],
    y: NDArray[np.float64],
    mu1: NDArray[np.float64],
    mu0: NDArray[np.float64],
    pi: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Vectorised pseudo-outcome over aligned arrays."""
    pi = np.asarray(pi, float)
    if (pi <= 0).any() or (pi >= 1).any():
        raise ValueError("propensity must lie strictly in (0,1); clip upstream")
    d = np.asarray(d, float)
    return mu1 - mu0 + d * (y - mu1) / pi - (1.0 - d) * (y - mu0) / (1.0 - pi)


def estimate_ate_from_pseudo(
    tau: NDArray[np.float64],
    raw_se: bool = False,
    diagnostics: Mapping[str, float] | None = None,
) -> AteResult:
    """Aggregate pseudo-outcomes into the point estimate and its 95% CI.

    se defaults to sqrt((mean(tau^2) - theta^2) / N), the standard error of
    the mean. ``raw_se=True`` drops the final /N divisor and reports the
    standard deviation of the scores instead (the literal printed formula).
    """
    t = np.asarray(tau, dtype=float)
    if t.size == 0:
        raise ValueError("tau must be non-empty")
    if not np.isfinite(t).all():
        raise ValueError("tau contains non-finite values")
    theta = float(np.mean(t))
    var = max(float(np.mean(t * t) - theta * theta), 0.0)
    se = float(np.sqrt(var if raw_se else var / t.size))
    return AteResult(
        theta_hat=theta,
        se=se,
        ci_low=theta - Z95 * se,
        ci_high=theta + Z95 * se,
        pseudo_outcomes=t,
        diagnostics=dict(diagnostics or {}),
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def read_dataset_csv(path: str, treatment_col: str, outcome_col: str) -> Dataset:
    """Load a dataset from a headered CSV.

    One column is the 0/1 treatment flag, one the real outcome; every other
    numeric column becomes a covariate. Floats are parsed with round-trip
    precision so that write -> read is bitwise faithful.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    for col in (treatment_col, outcome_col):
        if col not in df.columns:
            raise ValueError(f"column {col!r} not found in {path}")
    d = df[treatment_col].to_numpy()
    if not np.isin(d, (0, 1)).all():
        raise ValueError(f"treatment column {treatment_col!r} must contain only 0/1")
    y = df[outcome_col].to_numpy(dtype=float)
    feat_cols = [c for c in df.columns if c not in (treatment_col, outcome_col)]
    if not feat_cols:
        raise ValueError("no covariate columns left after removing treatment/outcome")
    x = df[feat_cols].to_numpy(dtype=float)
    return Dataset(x, d.astype(np.int64), y, tuple(feat_cols))


def write_dataset_csv(data: Dataset, path: str, treatment_col: str = "d",
                      outcome_col: str = "y") -> None:
    """Write a dataset as CSV with full float precision (17 significant digits)."""
    names = data.feature_names or tuple(f"x{i + 1}" for i in range(data.q))
    with open(path, "w", newline="") as fh:
        fh.write(",".join([treatment_col, outcome_col, *names]) + "\n")
        for i in range(data.n):
            row = [str(int(data.treatment[i])), format(data.outcome[i], ".17g")]
            row.extend(format(v, ".17g") for v in data.covariates[i])
            fh.write(",".join(row) + "\n")
