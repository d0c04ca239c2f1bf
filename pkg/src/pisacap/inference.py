"""Confidence-interval engines for the subgroup average treatment effect.

The primary engine approximates the distribution of the subgroup pivot by
multiplier perturbation with N(1,1) weights, holding the fitted subgroup
score fixed, over a subset of adaptive size m: full size for efficiency
when the subgroup boundary is well behaved, a smaller subset for safety
when it is not.  Naive normal-approximation, sample-split, and oracle
baselines are provided for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from statistics import NormalDist

import numpy as np

from .crossfit import (
    crossfit_nuisances,
    logistic_propensity_learner,
    spline_outcome_learner,
)
from .data import Dataset, RngStream, make_folds
from .errors import (
    DegeneratePerturbationError,
    EmptySubgroupError,
    VarianceUndefinedError,
)
from .subgroup import CateModel, cate_refitter, fit_cate_dr, membership

_SPLIT_PERM, _SPLIT_FOLDS_I, _SPLIT_FOLDS_E = 0, 1, 2
_ORACLE_DATA, _ORACLE_FOLDS = 0, 1


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved knobs of the estimation pipeline.

    Defaults mirror the benchmark setup: five folds, propensity clipping at
    0.01, threshold zero, 95% two-sided intervals, 2000 perturbation draws.
    """

    c: float = 0.0
    alpha: float = 0.05
    Q: int = 5
    clip_eps: float = 0.01
    M: int = 2000
    delta_denom: float = 0.5
    redraw_cap: int = 100
    cate_kind: str = "linear"
    cate_params: dict = field(default_factory=dict)
    outcome_degree: int = 3
    outcome_knots: int = 4
    selector_C: float = 0.5
    selector_M_pilot: int = 200
    grid_divisors: tuple = (1, 2, 4, 8)

    def outcome_learner(self):
        return spline_outcome_learner(self.outcome_degree, self.outcome_knots)

    def propensity_learner(self):
        return logistic_propensity_learner()


@dataclass(frozen=True)
class PisaEstimate:
    """Subgroup mean of pseudo-outcomes over an index subset."""

    value: float
    subset: np.ndarray
    m: int
    subgroup_size_in_subset: int


@dataclass(frozen=True)
class ConfidenceInterval:
    """Method-tagged interval with the inputs needed to reproduce it."""

    lower: float
    upper: float
    alpha: float
    method: str
    point: PisaEstimate | None = None
    m: int | None = None
    M: int | None = None
    seed: str | None = None
    redraw_count: int = 0
    subgroup_size: int | None = None

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "estimate": None if self.point is None else self.point.value,
            "lower": self.lower,
            "upper": self.upper,
            "alpha": self.alpha,
            "m": self.m,
            "M": self.M,
            "seed": self.seed,
            "subgroup_size": self.subgroup_size,
            "redraw_count": self.redraw_count,
        }


def _seed_tag(rng: RngStream | None) -> str | None:
    if rng is None:
        return None
    return f"{rng.master_seed}:" + "/".join(str(x) for x in rng.path)


def pivotal_pisa(psi, member, subset) -> PisaEstimate:
    """Subgroup mean of psi over the subset; the pivot the engine recenters."""
    psi = np.asarray(psi, dtype=float)
    member = np.asarray(member, dtype=bool)
    subset = np.asarray(subset, dtype=int)
    mem_s = member[subset]
    n_s = int(mem_s.sum())
    if n_s < 1:
        raise EmptySubgroupError("subset contains no subgroup members")
    value = float(psi[subset][mem_s].sum() / n_s)
    return PisaEstimate(
        value=value, subset=subset, m=int(subset.shape[0]), subgroup_size_in_subset=n_s
    )


def perturb_once(
    psi, member, subset, rng=None, v=None, delta_denom=0.5, redraw_cap=100
) -> float:
    """One multiplier-perturbed subgroup mean over the subset.

    ``v`` injects a fixed multiplier vector aligned with ``subset`` (test
    hook); otherwise N(1,1) multipliers come from ``rng``.  Draws whose
    member-weight denominator is at most ``delta_denom`` are discarded and
    redrawn, up to ``redraw_cap`` times.
    """
    psi = np.asarray(psi, dtype=float)
    member = np.asarray(member, dtype=bool)
    subset = np.asarray(subset, dtype=int)
    mem_s = member[subset].astype(float)
    psi_mem = psi[subset] * mem_s
    if mem_s.sum() < 1:
        raise EmptySubgroupError("subset contains no subgroup members")
    if v is not None:
        v = np.asarray(v, dtype=float)
        den = float(v @ mem_s)
        if den <= delta_denom:
            raise DegeneratePerturbationError(
                f"injected multipliers give denominator {den} <= {delta_denom}"
            )
        return float(v @ psi_mem / den)
    for _ in range(redraw_cap):
        v = rng.gen.standard_normal(subset.shape[0]) + 1.0
        den = float(v @ mem_s)
        if den > delta_denom:
            return float(v @ psi_mem / den)
    raise DegeneratePerturbationError(
        f"denominator stayed <= {delta_denom} after {redraw_cap} redraws"
    )


def empirical_quantile(samples, gamma) -> float:
    """Order-statistic quantile: the ceil(gamma * len)-th smallest value."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("empty sample")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0,1), got {gamma}")
    k = min(max(int(math.ceil(gamma * samples.size)), 1), samples.size)
    return float(np.partition(samples, k - 1)[k - 1])


def _perturbed_values(psi_mem, mem_s, M, rng, delta_denom, redraw_cap, v_table=None):
    """M perturbed subgroup means plus the count of discarded draws."""
    m = mem_s.shape[0]
    if v_table is not None:
        V = np.asarray(v_table, dtype=float)
        if V.shape != (M, m):
            raise ValueError(f"multiplier table must have shape ({M}, {m})")
        den = V @ mem_s
        if np.any(den <= delta_denom):
            raise DegeneratePerturbationError(
                "injected multiplier table hits the denominator guard"
            )
        return V @ psi_mem / den, 0
    V = rng.gen.standard_normal((M, m)) + 1.0
    num = V @ psi_mem
    den = V @ mem_s
    redraws = 0
    bad = den <= delta_denom
    tries = 0
    while bad.any():
        tries += 1
        if tries > redraw_cap:
            raise DegeneratePerturbationError(
                f"denominator guard still failing after {redraw_cap} redraw rounds"
            )
        redraws += int(bad.sum())
        Vb = rng.gen.standard_normal((int(bad.sum()), m)) + 1.0
        num[bad] = Vb @ psi_mem
        den[bad] = Vb @ mem_s
        bad = den <= delta_denom
    return num / den, redraws


def perturbation_ci(
    psi,
    member,
    subset,
    M,
    alpha,
    rng,
    delta_denom=0.5,
    redraw_cap=100,
    v_table=None,
) -> ConfidenceInterval:
    """Multiplier-perturbation interval for the subgroup average.

    Recenters M perturbed subgroup means at the pivot, scales by sqrt(m),
    and inverts the empirical quantiles: the upper interval endpoint uses
    the lower quantile and vice versa, which keeps lower <= upper.
    """
    if M < 100 and v_table is None:
        raise ValueError(f"M must be at least 100, got {M}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0,1), got {alpha}")
    point = pivotal_pisa(psi, member, subset)
    subset = point.subset
    member = np.asarray(member, dtype=bool)
    mem_s = member[subset].astype(float)
    psi_mem = np.asarray(psi, dtype=float)[subset] * mem_s
    vals, redraws = _perturbed_values(
        psi_mem, mem_s, M, rng, delta_denom, redraw_cap, v_table=v_table
    )
    root_m = math.sqrt(point.m)
    centered = root_m * (vals - point.value)
    c_hi = empirical_quantile(centered, 1.0 - alpha / 2.0)
    c_lo = empirical_quantile(centered, alpha / 2.0)
    return ConfidenceInterval(
        lower=point.value - c_hi / root_m,
        upper=point.value - c_lo / root_m,
        alpha=alpha,
        method="perturbation",
        point=point,
        m=point.m,
        M=M,
        seed=_seed_tag(rng),
        redraw_count=redraws,
        subgroup_size=point.subgroup_size_in_subset,
    )


def select_subset(n, m, rng) -> np.ndarray:
    """Uniform subset of size m without replacement; identity when m == n."""
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    if m == n:
        return np.arange(n)
    return np.sort(rng.gen.choice(n, size=m, replace=False))


def choose_m_from_spreads(grid, spreads, C) -> int:
    """Largest grid size whose spread has not grown past (1+C) times the
    smallest grid size's spread; falls back to the smallest size.

    Growth of the scaled spread along the grid is the instability signal;
    a spread below the baseline is evidence of stability, so only the
    upward excursion s_k > (1+C) * s_K disqualifies a size.
    """
    grid = list(grid)
    base = spreads[-1]
    for m_k, s_k in zip(grid, spreads):
        if s_k <= (1.0 + C) * base:
            return m_k
    return grid[-1]


def _pilot_spread(
    psi, member, subset, M_pilot, alpha, rng, c, refit, delta_denom, redraw_cap
):
    """Quantile spread of sqrt(m)-scaled pilot statistics on one subset.

    With a refit closure the multipliers drive a re-estimate of the
    subgroup score only: each draw refreshes membership on the subset and
    the pilot statistic is the unweighted subgroup mean under the
    refreshed membership.  A score mass near the threshold then shifts
    the statistic by an amount that does not shrink with m, so the
    sqrt(m)-scaled spread grows along the grid exactly when full-size
    evaluation is unsafe.  The spread is measured symmetrically about the
    pivot (twice the larger quantile magnitude) since boundary flips move
    the statistic to one side.  Without a refit closure the pilot falls
    back to the plain conditional perturbation, whose scaled spread is
    stable in m by construction.
    """
    psi = np.asarray(psi, dtype=float)
    member = np.asarray(member, dtype=bool)
    point = pivotal_pisa(psi, member, subset)
    m = point.m
    psi_s = psi[subset]
    mem_s = member[subset].astype(float)
    if refit is None:
        vals, _ = _perturbed_values(
            psi_s * mem_s, mem_s, M_pilot, rng, delta_denom, redraw_cap
        )
        centered = math.sqrt(m) * (vals - point.value)
        hi = empirical_quantile(centered, 1.0 - alpha / 2.0)
        lo = empirical_quantile(centered, alpha / 2.0)
        return hi - lo
    vals = np.empty(M_pilot)
    V = rng.gen.standard_normal((M_pilot, m)) + 1.0
    pending = list(range(M_pilot))
    tries = 0
    while pending:
        W = V[pending]
        scores = np.asarray(refit(subset, W), dtype=float)
        if scores.ndim == 1:
            scores = scores[None, :]
        mem_star = scores >= c
        counts = mem_star.sum(axis=1)
        sums = mem_star @ psi_s
        ok = counts > 0
        for row, j in enumerate(pending):
            if ok[row]:
                vals[j] = sums[row] / counts[row]
        pending = [j for row, j in enumerate(pending) if not ok[row]]
        if pending:
            tries += 1
            if tries > redraw_cap:
                raise DegeneratePerturbationError(
                    f"pilot subgroup kept emptying after {redraw_cap} redraws"
                )
            V[pending] = rng.gen.standard_normal((len(pending), m)) + 1.0
    centered = math.sqrt(m) * (vals - point.value)
    hi = empirical_quantile(centered, 1.0 - alpha / 2.0)
    lo = empirical_quantile(centered, alpha / 2.0)
    return 2.0 * max(abs(hi), abs(lo))


def select_m_adaptive(
    psi,
    member,
    grid=None,
    C=0.5,
    M_pilot=200,
    alpha=0.05,
    rng=None,
    c=0.0,
    refit=None,
    delta_denom=0.5,
    redraw_cap=100,
    spreads=None,
) -> int:
    """Data-adaptive perturbation size from a spread-stability rule.

    Runs a pilot perturbation at each candidate size and compares the
    sqrt(m)-scaled quantile spreads against the smallest size's spread:
    when the subgroup boundary is well behaved the scaled spreads are
    stable and the full size wins; a boundary concentration makes the
    spread grow with m (via the refit-refreshed membership) and pushes the
    choice down the grid.  ``spreads`` injects precomputed spreads for the
    rule alone (test hook).  Without a ``refit`` closure the pilots cannot
    see boundary instability and the rule will typically keep the full
    size; supply one (see ``subgroup.cate_refitter``) whenever the score
    model can be re-estimated.
    """
    psi = np.asarray(psi, dtype=float)
    n = psi.shape[0]
    if grid is None:
        grid = [n // d for d in (1, 2, 4, 8)]
    grid = sorted({int(m) for m in grid if m >= 1}, reverse=True)
    if not grid:
        raise ValueError("empty candidate grid")
    if C <= 0:
        raise ValueError("C must be positive")
    if spreads is None:
        member = np.asarray(member, dtype=bool)
        spreads = []
        for k, m_k in enumerate(grid):
            sub_rng = rng.child(k)
            subset = select_subset(n, m_k, sub_rng)
            spreads.append(
                _pilot_spread(
                    psi,
                    member,
                    subset,
                    M_pilot,
                    alpha,
                    sub_rng,
                    c,
                    refit,
                    delta_denom,
                    redraw_cap,
                )
            )
    else:
        spreads = list(spreads)
        if len(spreads) != len(grid):
            raise ValueError("spreads must align with the grid")
    return choose_m_from_spreads(grid, spreads, C)


def _z_quantile(alpha):
    return NormalDist().inv_cdf(1.0 - alpha / 2.0)


def _normal_interval(psi_members, alpha, method, seed=None):
    n_s = psi_members.shape[0]
    if n_s < 1:
        raise EmptySubgroupError("subgroup is empty")
    if n_s < 2:
        raise VarianceUndefinedError("subgroup has fewer than two rows")
    est = float(psi_members.mean())
    half = _z_quantile(alpha) * float(psi_members.std(ddof=0)) / math.sqrt(n_s)
    point = PisaEstimate(
        value=est, subset=np.arange(n_s), m=n_s, subgroup_size_in_subset=n_s
    )
    return ConfidenceInterval(
        lower=est - half,
        upper=est + half,
        alpha=alpha,
        method=method,
        point=point,
        seed=seed,
        subgroup_size=n_s,
    )


def naive_ci(psi, member, alpha=0.05) -> ConfidenceInterval:
    """In-sample normal-approximation interval treating membership as fixed.

    This is the analysis whose undercoverage motivates the perturbation
    engine; it is provided as the comparison baseline.
    """
    psi = np.asarray(psi, dtype=float)
    member = np.asarray(member, dtype=bool)
    return _normal_interval(psi[member], alpha, "naive")


@dataclass(frozen=True)
class PipelineFit:
    """Cross-fitted nuisances plus the fitted subgroup model and membership."""

    folds: object
    nuis: object
    cate: CateModel
    subgroup: object


def fit_nuisance_and_cate(data: Dataset, config: PipelineConfig, rng: RngStream, cate=None):
    """Folds, cross-fitted nuisances, and the subgroup score model.

    ``cate`` overrides the score model (externally supplied predictions or
    a frozen model); by default the score is fit on the whole dataset by
    regressing pseudo-outcomes on covariates with the configured learner.
    """
    folds = make_folds(data.n, config.Q, rng)
    nuis = crossfit_nuisances(
        data,
        folds,
        outcome_learner=config.outcome_learner(),
        propensity_learner=config.propensity_learner(),
        clip_eps=config.clip_eps,
    )
    if cate is None:
        cate = fit_cate_dr(data, nuis, config.cate_kind, **config.cate_params)
    return folds, nuis, cate


def fit_pipeline(data: Dataset, config: PipelineConfig, rng: RngStream, cate=None):
    """fit_nuisance_and_cate plus membership at the configured threshold."""
    folds, nuis, cate = fit_nuisance_and_cate(data, config, rng, cate=cate)
    spec = membership(cate, config.c)
    return PipelineFit(folds=folds, nuis=nuis, cate=cate, subgroup=spec)


def sample_split_ci(
    data: Dataset, config: PipelineConfig, rng: RngStream, return_cate=False
):
    """Out-of-sample baseline: identify on a random half, evaluate on the rest.

    The evaluation half gets its own cross-fitted pseudo-outcomes and a
    normal-approximation interval with membership frozen at the
    identification half's score model.  The method's own target is the
    half-data subgroup average, not the full-data one; the method tag
    records that.
    """
    if data.n < 4:
        raise ValueError("sample splitting needs at least four rows")
    perm = rng.child(_SPLIT_PERM).gen.permutation(data.n)
    half = data.n // 2
    ident, evaln = np.sort(perm[:half]), np.sort(perm[half:])
    fit_i = fit_pipeline(data.subset(ident), config, rng.child(_SPLIT_FOLDS_I))
    data_e = data.subset(evaln)
    folds_e = make_folds(data_e.n, config.Q, rng.child(_SPLIT_FOLDS_E))
    nuis_e = crossfit_nuisances(
        data_e,
        folds_e,
        outcome_learner=config.outcome_learner(),
        propensity_learner=config.propensity_learner(),
        clip_eps=config.clip_eps,
    )
    member_e = fit_i.cate.predict(data_e.z) >= config.c
    if not member_e.any():
        raise EmptySubgroupError("evaluation half contains no subgroup members")
    ci = _normal_interval(
        nuis_e.psi[member_e], config.alpha, "sample-split", seed=_seed_tag(rng)
    )
    if return_cate:
        return ci, fit_i.cate
    return ci


def oracle_ci(data_generator, cate: CateModel, config: PipelineConfig, rng: RngStream):
    """Simulation-only baseline: evaluate the frozen score on a fresh sample.

    ``data_generator(rng) -> Dataset`` draws from the same population; the
    frozen score model defines membership there, so no selection links the
    subgroup to the evaluation data.
    """
    fresh = data_generator(rng.child(_ORACLE_DATA))
    folds = make_folds(fresh.n, config.Q, rng.child(_ORACLE_FOLDS))
    nuis = crossfit_nuisances(
        fresh,
        folds,
        outcome_learner=config.outcome_learner(),
        propensity_learner=config.propensity_learner(),
        clip_eps=config.clip_eps,
    )
    member = cate.predict(fresh.z) >= config.c
    if not member.any():
        raise EmptySubgroupError("fresh sample contains no subgroup members")
    return _normal_interval(nuis.psi[member], config.alpha, "oracle", seed=_seed_tag(rng))
