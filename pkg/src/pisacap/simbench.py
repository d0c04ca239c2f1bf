"""Simulation benchmark: data-generating processes, per-replication truth,
and the Monte Carlo coverage study driver.

Four settings cross a regular against a nonregular covariate law with a
linear against a spline subgroup working model.  The nonregular law places
a point mass exactly at the subgroup boundary, which is what breaks naive
full-size in-sample evaluation.  Coverage is measured per replication
against the subgroup average implied by that replication's fitted score
function, computed by fresh Monte Carlo draws from the covariate law.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .data import Dataset, RngStream
from .errors import PisacapError
from .inference import (
    PipelineConfig,
    fit_pipeline,
    naive_ci,
    oracle_ci,
    perturbation_ci,
    sample_split_ci,
    select_m_adaptive,
    select_subset,
)
from .subgroup import CateModel, cate_refitter


class TruePisa(NamedTuple):
    value: float
    se: float


SETTINGS = ("A", "B", "C", "D")
_SETTING_LABEL = {s: i for i, s in enumerate(SETTINGS)}
_CATE_KIND = {"A": "linear", "B": "spline", "C": "linear", "D": "spline"}

# replication-local stream labels
_L_DATA, _L_PIPE, _L_TRUTH, _L_SPLIT, _L_ORACLE, _L_SELECT, _L_SPLIT_TRUTH = range(7)
_L_PERTURB = {1: 10, 2: 11, 4: 12, 8: 13, "adaptive": 14, "int": 15}

MIXTURE_VALUES = (-1.0, -0.8, 0.0, 0.8, 1.0)
MIXTURE_PROBS = (1 / 16, 1 / 16, 3 / 4, 1 / 16, 1 / 16)


@dataclass(frozen=True)
class DgpSpec:
    """One benchmark setting: sample size, noise scale, and threshold."""

    setting: str
    n: int = 1000
    noise_sd: float = 0.4
    c: float = 0.0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting '{self.setting}'")
        if self.n < 1 or self.noise_sd <= 0:
            raise ValueError("n must be positive and noise_sd > 0")

    @property
    def cate_kind(self) -> str:
        return _CATE_KIND[self.setting]


def draw_mixture_z2(rng: RngStream, size=None):
    """Half-uniform, half-discrete covariate with a point mass at zero."""
    scalar = size is None
    n = 1 if scalar else int(size)
    t = rng.gen.random(n) < 0.5
    u = rng.gen.uniform(-1.0, 1.0, n)
    x = rng.gen.choice(MIXTURE_VALUES, size=n, p=MIXTURE_PROBS)
    z2 = np.where(t, u, x)
    return float(z2[0]) if scalar else z2


def _z2_values(z):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        return z
    return z[:, 1]


def true_cate(setting: str, z):
    """Exact treatment-effect function of each setting."""
    z2 = _z2_values(z)
    if setting in ("A", "B"):
        return np.where(z2 >= 0.0, 1.0, 0.0) - 0.06
    if setting in ("C", "D"):
        return (z2 - 0.95 * np.sign(z2)) * (np.abs(z2) <= 0.95)
    raise ValueError(f"unknown setting '{setting}'")


def true_baseline(setting: str, z):
    """Exact control-arm mean outcome function of each setting."""
    z2 = _z2_values(z)
    if setting in ("A", "B"):
        return np.where(z2 >= 0.0, 1.0, 0.0) - 0.06
    if setting in ("C", "D"):
        return (z2 >= 0.0) * np.abs(z2) ** (1.0 / 3.0)
    raise ValueError(f"unknown setting '{setting}'")


class _TrueCate:
    """Predictor wrapper exposing the exact treatment-effect function."""

    def __init__(self, setting):
        self.setting = setting

    def predict(self, Z):
        return true_cate(self.setting, Z)


def true_cate_model(spec: DgpSpec, data: Dataset) -> CateModel:
    values = np.asarray(true_cate(spec.setting, data.z), dtype=float)
    values.setflags(write=False)
    return CateModel(
        source="true-dgp", insample_values=values, predictor=_TrueCate(spec.setting)
    )


def draw_covariates(spec: DgpSpec, rng: RngStream, size: int) -> np.ndarray:
    z1 = rng.gen.uniform(-1.0, 1.0, size)
    if spec.setting in ("A", "B"):
        z2 = rng.gen.uniform(-1.0, 1.0, size)
    else:
        z2 = draw_mixture_z2(rng, size)
    return np.column_stack([z1, z2])


def draw_dataset(spec: DgpSpec, rng: RngStream) -> Dataset:
    """One sample: logistic treatment assignment, additive outcome model."""
    z = draw_covariates(spec, rng, spec.n)
    lin = 0.5 * (z[:, 0] + z[:, 1])
    prob = 1.0 / (1.0 + np.exp(-lin))
    g = (rng.gen.random(spec.n) < prob).astype(int)
    noise = rng.gen.normal(0.0, spec.noise_sd, spec.n)
    y = true_baseline(spec.setting, z) + g * true_cate(spec.setting, z) + noise
    return Dataset(y, g, z)


def true_pisa(cate: CateModel, spec: DgpSpec, n_mc=1_000_000, rng=None) -> TruePisa:
    """Subgroup average implied by a frozen score model, via fresh draws.

    Monte Carlo over the covariate law: mean of the true effect among
    covariate draws the score model sends into the subgroup.  Returns the
    estimate with its standard error.
    """
    if not cate.can_predict:
        raise PisacapError(
            "true subgroup average needs a score model that predicts at new points"
        )
    total_w = 0.0
    total_wd = 0.0
    total_wd2 = 0.0
    total = 0
    chunk = 200_000
    remaining = int(n_mc)
    while remaining > 0:
        size = min(chunk, remaining)
        remaining -= size
        z = draw_covariates(spec, rng, size)
        inside = cate.predict(z) >= spec.c
        d = true_cate(spec.setting, z)[inside]
        total_w += float(inside.sum())
        total_wd += float(d.sum())
        total_wd2 += float((d * d).sum())
        total += size
    if total_w == 0:
        raise PisacapError("score model sends no covariate draws into the subgroup")
    value = total_wd / total_w
    var_d = max(total_wd2 / total_w - value * value, 0.0)
    # ratio-estimator error: within-subgroup spread over the effective count
    se = (var_d / total_w) ** 0.5
    return TruePisa(value=value, se=se)


@dataclass(frozen=True)
class SimulationConfig:
    """Study-level knobs on top of the estimation pipeline defaults."""

    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    n: int = 1000
    noise_sd: float = 0.4
    n_mc: int = 1_000_000
    subgroup_source: str = "fitted"  # or "true": membership from the exact effect

    def spec_for(self, setting: str) -> DgpSpec:
        return DgpSpec(
            setting=setting, n=self.n, noise_sd=self.noise_sd, c=self.pipeline.c
        )


def parse_method(token: str):
    """Normalize a method token into (name, m_policy).

    Tokens: naive | split | oracle | adaptive | m=n | m=n/2 | m=n/4 | m=n/8
    or m=<int> for an explicit subset size.
    """
    tok = token.strip().lower()
    if tok in ("naive",):
        return "naive", None
    if tok in ("split", "sample-split", "ss"):
        return "split", None
    if tok == "oracle":
        return "oracle", None
    if tok == "adaptive":
        return "perturb", "adaptive"
    if tok == "m=n":
        return "perturb", ("div", 1)
    if tok.startswith("m=n/"):
        return "perturb", ("div", int(tok[4:]))
    if tok.startswith("m="):
        return "perturb", ("int", int(tok[2:]))
    raise ValueError(f"unknown method token '{token}'")


def _policy_m(policy, n):
    if policy == "adaptive":
        return None
    kind, v = policy
    return max(n // v, 1) if kind == "div" else v


def _policy_label(policy):
    if policy == "adaptive":
        return _L_PERTURB["adaptive"]
    kind, v = policy
    if kind == "div" and v in _L_PERTURB:
        return _L_PERTURB[v]
    return _L_PERTURB["int"]


def _perturb_record(pipe, config, policy, data, nuis, rng):
    n = data.n
    base = rng.child(_policy_label(policy))
    selected = None
    if policy == "adaptive":
        refit = cate_refitter(
            data, nuis, config.pipeline.cate_kind, **config.pipeline.cate_params
        )
        selected = select_m_adaptive(
            nuis.psi,
            pipe.subgroup.member,
            grid=[max(n // d, 1) for d in config.pipeline.grid_divisors],
            C=config.pipeline.selector_C,
            M_pilot=config.pipeline.selector_M_pilot,
            alpha=config.pipeline.alpha,
            rng=rng.child(_L_SELECT),
            c=config.pipeline.c,
            refit=refit,
            delta_denom=config.pipeline.delta_denom,
            redraw_cap=config.pipeline.redraw_cap,
        )
        m = selected
    else:
        m = _policy_m(policy, n)
    subset = select_subset(n, m, base.child(0))
    ci = perturbation_ci(
        nuis.psi,
        pipe.subgroup.member,
        subset,
        M=config.pipeline.M,
        alpha=config.pipeline.alpha,
        rng=base.child(1),
        delta_denom=config.pipeline.delta_denom,
        redraw_cap=config.pipeline.redraw_cap,
    )
    return ci, selected


def run_replication(spec: DgpSpec, methods, config: SimulationConfig, rng: RngStream):
    """One benchmark repetition: draw, fit, infer, and score coverage.

    Per-method failures are recorded in the method's entry instead of
    aborting the repetition.  The returned dict carries the shared truth
    and one record per requested method token.
    """
    pipeline = replace(config.pipeline, cate_kind=spec.cate_kind, c=spec.c)
    config = replace(config, pipeline=pipeline)
    data = draw_dataset(spec, rng.child(_L_DATA))
    forced_cate = None
    if config.subgroup_source == "true":
        forced_cate = true_cate_model(spec, data)
    elif config.subgroup_source != "fitted":
        raise ValueError(f"unknown subgroup_source '{config.subgroup_source}'")
    pipe = fit_pipeline(data, pipeline, rng.child(_L_PIPE), cate=forced_cate)
    truth = true_pisa(pipe.cate, spec, n_mc=config.n_mc, rng=rng.child(_L_TRUTH))

    out = {
        "setting": spec.setting,
        "truth": truth.value,
        "truth_se": truth.se,
        "subgroup_size": pipe.subgroup.size,
        "methods": {},
    }
    for token in methods:
        name, policy = parse_method(token)
        record = {"method": token, "m_policy": _policy_text(policy, name)}
        t0 = time.perf_counter()
        try:
            if name == "naive":
                ci = naive_ci(pipe.nuis.psi, pipe.subgroup.member, pipeline.alpha)
                record.update(_ci_fields(ci, truth.value))
            elif name == "split":
                ci, cate_i = sample_split_ci(
                    data, pipeline, rng.child(_L_SPLIT), return_cate=True
                )
                record.update(_ci_fields(ci, truth.value))
                split_truth = true_pisa(
                    cate_i, spec, n_mc=config.n_mc, rng=rng.child(_L_SPLIT_TRUTH)
                )
                record["split_target_truth"] = split_truth.value
                record["split_target_covered"] = bool(ci.covers(split_truth.value))
            elif name == "oracle":
                ci = oracle_ci(
                    lambda r: draw_dataset(spec, r),
                    pipe.cate,
                    pipeline,
                    rng.child(_L_ORACLE),
                )
                record.update(_ci_fields(ci, truth.value))
            else:
                ci, selected = _perturb_record(pipe, config, policy, data, pipe.nuis, rng)
                record.update(_ci_fields(ci, truth.value))
                if selected is not None:
                    record["selected_m"] = selected
        except PisacapError as exc:
            record["error"] = f"{type(exc).__name__}: {exc}"
        record["runtime"] = time.perf_counter() - t0
        out["methods"][token] = record
    return out


def _policy_text(policy, name):
    if name != "perturb":
        return "-"
    if policy == "adaptive":
        return "adaptive"
    kind, v = policy
    if kind == "div":
        return "n" if v == 1 else f"n/{v}"
    return str(v)


def _ci_fields(ci, truth):
    return {
        "estimate": ci.point.value if ci.point is not None else None,
        "lower": ci.lower,
        "upper": ci.upper,
        "alpha": ci.alpha,
        "m": ci.m,
        "M": ci.M,
        "subgroup_size": ci.subgroup_size,
        "redraw_count": ci.redraw_count,
        "truth": truth,
        "covered": bool(ci.covers(truth)),
        "length": ci.length,
    }


@dataclass(frozen=True)
class StudyRow:
    """Aggregate of one (setting, method) cell of the coverage study."""

    setting: str
    method: str
    m_policy: str
    reps: int
    ecp: float
    cil: float
    failures: int
    mean_selected_m: float | None
    runtime: float

    def to_record(self) -> dict:
        return {
            "setting": self.setting,
            "method": self.method,
            "m_policy": self.m_policy,
            "reps": self.reps,
            "ecp": self.ecp,
            "cil": self.cil,
            "failures": self.failures,
            "mean_selected_m": self.mean_selected_m,
        }


def _replication_args(settings, methods, reps, config, master_seed):
    for setting in settings:
        for rep in range(reps):
            yield setting, rep, methods, config, master_seed


def _run_one(args):
    setting, rep, methods, config, master_seed = args
    rng = RngStream(master_seed, path=(_SETTING_LABEL[setting], rep))
    return setting, rep, run_replication(config.spec_for(setting), methods, config, rng)


def run_study(
    settings, methods, reps, config: SimulationConfig, master_seed=0, threads=1
):
    """Aggregate replications into the coverage table.

    Each replication owns an RNG stream addressed by (setting, repetition),
    so the table is bit-identical for any worker count.  Failed method
    records are excluded from coverage and length with a reported count.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    for token in methods:
        parse_method(token)
    args = list(_replication_args(settings, methods, reps, config, master_seed))
    results = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for setting, rep, rec in pool.map(_run_one, args, chunksize=4):
                results[(setting, rep)] = rec
    else:
        for a in args:
            setting, rep, rec = _run_one(a)
            results[(setting, rep)] = rec
    rows = []
    for setting in settings:
        recs = [results[(setting, rep)] for rep in range(reps)]
        for token in methods:
            entries = [r["methods"][token] for r in recs]
            ok = [e for e in entries if "error" not in e]
            failures = len(entries) - len(ok)
            covered = [e["covered"] for e in ok]
            lengths = [e["length"] for e in ok]
            selected = [e["selected_m"] for e in ok if "selected_m" in e]
            rows.append(
                StudyRow(
                    setting=setting,
                    method=token,
                    m_policy=entries[0]["m_policy"] if entries else "-",
                    reps=len(ok),
                    ecp=100.0 * float(np.mean(covered)) if ok else float("nan"),
                    cil=float(np.mean(lengths)) if ok else float("nan"),
                    failures=failures,
                    mean_selected_m=float(np.mean(selected)) if selected else None,
                    runtime=float(sum(e["runtime"] for e in entries)),
                )
            )
    return rows
