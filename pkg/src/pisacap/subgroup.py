"""In-sample subgroup identification and membership.

The subgroup score function is fit on the whole dataset (no cross-fitting;
the object under study is the full-data fit) or ingested from an external
prediction file, then thresholded at c with an inclusive boundary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .crossfit import NuisancePredictions
from .data import Dataset
from .errors import (
    AlignmentError,
    BlackBoxPredictorError,
    EmptySubgroupError,
    FoldCompositionError,
    ParseError,
    SchemaError,
)
from .learners import (
    fit_linear,
    fit_local_polynomial,
    fit_spline_regression,
    fit_tree,
)

CATE_KINDS = ("linear", "spline", "tree", "localpoly")


@dataclass(frozen=True)
class CateModel:
    """Subgroup score function and its values at the sample rows.

    ``source`` records how the scores were produced (dr-<kind>, t-learner,
    external, ...).  External models carry predicted values only, so
    ``predict`` at new covariates is unavailable for them.
    """

    source: str
    insample_values: np.ndarray
    predictor: object = None

    @property
    def can_predict(self) -> bool:
        return self.predictor is not None

    def predict(self, Z) -> np.ndarray:
        if self.predictor is None:
            raise BlackBoxPredictorError(
                f"CATE model with source '{self.source}' has predicted values only"
            )
        return np.asarray(self.predictor.predict(Z), dtype=float)


@dataclass(frozen=True)
class SubgroupSpec:
    """Thresholded membership: member[i] is insample_values[i] >= c."""

    c: float
    member: np.ndarray
    size: int


def _fit_cate_learner(Z, target, learner_kind, **params):
    if learner_kind == "linear":
        return fit_linear(Z, target, **params)
    if learner_kind == "spline":
        return fit_spline_regression(Z, target, **params)
    if learner_kind == "tree":
        return fit_tree(Z, target, **params)
    if learner_kind == "localpoly":
        if Z.shape[1] != 1:
            raise ValueError(
                f"local polynomial subgroup models need a single covariate, got p={Z.shape[1]}"
            )
        return fit_local_polynomial(Z[:, 0], target, **params)
    raise ValueError(f"unknown CATE learner kind '{learner_kind}'")


def _predict_cate(fit, Z):
    if fit.kind == "localpoly":
        return fit.predict(np.atleast_2d(np.asarray(Z, dtype=float))[:, 0])
    return fit.predict(Z)


class _FitPredictor:
    def __init__(self, fit):
        self.fit = fit

    def predict(self, Z):
        return _predict_cate(self.fit, Z)


def fit_cate_dr(
    data: Dataset, nuis: NuisancePredictions, learner_kind="linear", **params
) -> CateModel:
    """Fit the subgroup score by regressing pseudo-outcomes on covariates.

    Uses the whole dataset, which is exactly the in-sample object whose
    evaluation needs debiasing downstream.
    """
    fit = _fit_cate_learner(data.z, nuis.psi, learner_kind, **params)
    values = _predict_cate(fit, data.z)
    values.setflags(write=False)
    return CateModel(
        source=f"dr-{learner_kind}",
        insample_values=values,
        predictor=_FitPredictor(fit),
    )


class _TLearnerPredictor:
    def __init__(self, fit1, fit0):
        self.fit1 = fit1
        self.fit0 = fit0

    def predict(self, Z):
        return np.asarray(self.fit1.predict(Z), dtype=float) - np.asarray(
            self.fit0.predict(Z), dtype=float
        )


def fit_cate_tlearner(data: Dataset, outcome_learner) -> CateModel:
    """Per-arm outcome fits on the full data; score is their difference."""
    if not data.has_both_arms():
        raise FoldCompositionError("dataset does not contain both treatment arms")
    fits = {}
    for arm in (1, 0):
        rows = np.flatnonzero(data.g == arm)
        fits[arm] = outcome_learner(data.z[rows], data.y[rows])
    predictor = _TLearnerPredictor(fits[1], fits[0])
    values = np.asarray(predictor.predict(data.z), dtype=float)
    values.setflags(write=False)
    return CateModel(source="t-learner", insample_values=values, predictor=predictor)


def load_blackbox(path, data: Dataset) -> CateModel:
    """Ingest externally computed subgroup scores aligned to the dataset rows.

    CSV with header ``id,dhat``; ids must match the dataset ids in order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        if header != ["id", "dhat"]:
            raise SchemaError(f"{path}: header must be id,dhat, got {header}")
        ids, vals = [], []
        for rownum, cells in enumerate(reader, start=1):
            if len(cells) != 2:
                raise SchemaError(f"{path}: row {rownum} has {len(cells)} cells")
            try:
                ids.append(int(cells[0]))
                vals.append(float(cells[1]))
            except ValueError as exc:
                raise ParseError(f"{path}: row {rownum}: {exc}") from None
            if not math.isfinite(vals[-1]):
                raise ParseError(f"{path}: row {rownum}: non-finite dhat")
    if len(vals) != data.n:
        raise AlignmentError(
            f"{path}: {len(vals)} prediction rows for a dataset of {data.n} rows"
        )
    if not np.array_equal(np.asarray(ids), data.ids):
        raise AlignmentError(f"{path}: id column does not match dataset row ids")
    values = np.asarray(vals, dtype=float)
    values.setflags(write=False)
    return CateModel(source="external", insample_values=values, predictor=None)


def export_blackbox(cate: CateModel, data: Dataset, path) -> None:
    """Write insample scores in the id,dhat format load_blackbox reads."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "dhat"])
        for i in range(data.n):
            writer.writerow([int(data.ids[i]), repr(float(cate.insample_values[i]))])


def membership(cate: CateModel, c: float) -> SubgroupSpec:
    """Inclusive thresholding of the insample scores at c.

    Raises EmptySubgroupError when no row qualifies, since downstream
    inference is undefined on an empty subgroup.
    """
    member = cate.insample_values >= c
    size = int(member.sum())
    if size == 0:
        raise EmptySubgroupError(f"no rows with subgroup score >= {c}")
    member = member.copy()
    member.setflags(write=False)
    return SubgroupSpec(c=float(c), member=member, size=size)


def boundary_diagnostic(cate: CateModel, c: float, bandwidth: float) -> float:
    """Fraction of rows whose score sits within ``bandwidth`` of the threshold.

    A large value signals a boundary concentration, the situation in which
    full-size in-sample evaluation is untrustworthy.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return float(np.mean(np.abs(cate.insample_values - c) <= bandwidth))


def cate_refitter(data: Dataset, nuis: NuisancePredictions, learner_kind, **params):
    """Multiplier-refit closure for the adaptive perturbation-size selector.

    Returns ``refit(indices, weights) -> scores`` re-estimating the subgroup
    score on the given rows under multiplier weights and evaluating it at
    those same rows.  Linear and spline working models solve the weighted
    normal equations directly (signed weights allowed); tree and local
    polynomial models refit with weights truncated at zero.
    """
    Z = data.z
    psi = nuis.psi
    if learner_kind == "linear":
        design = np.column_stack([np.ones(data.n), Z])
    elif learner_kind == "spline":
        base = fit_spline_regression(Z, psi, **params)
        design = base.design(Z)
    elif learner_kind in ("tree", "localpoly"):
        design = None
    else:
        raise ValueError(f"unknown CATE learner kind '{learner_kind}'")

    if design is not None:

        def refit(indices, weights):
            # weights: (m,) for one draw or (J, m) for a batch of draws
            W = np.atleast_2d(np.asarray(weights, dtype=float))
            D = design[indices]
            k = D.shape[1]
            target = psi[indices]
            WD = W[:, :, None] * D[None, :, :]
            G = np.matmul(D.T, WD)
            b = np.matmul(D.T, (W * target)[:, :, None])
            eye = np.eye(k)
            for ridge in (1e-8, 1e-6, 1e-4):
                try:
                    coef = np.linalg.solve(G + ridge * eye, b)[..., 0]
                    break
                except np.linalg.LinAlgError:
                    continue
            else:
                coef = np.stack(
                    [np.linalg.lstsq(G[j], b[j, :, 0], rcond=None)[0] for j in range(G.shape[0])]
                )
            scores = coef @ D.T
            return scores[0] if np.asarray(weights).ndim == 1 else scores

    else:

        def refit(indices, weights):
            W = np.atleast_2d(np.asarray(weights, dtype=float))
            out = np.empty((W.shape[0], len(indices)))
            for j in range(W.shape[0]):
                w = np.clip(W[j], 0.0, None)
                fit = _fit_cate_learner(
                    Z[indices], psi[indices], learner_kind, sample_weight=w, **params
                )
                out[j] = _predict_cate(fit, Z[indices])
            return out[0] if np.asarray(weights).ndim == 1 else out

    return refit
