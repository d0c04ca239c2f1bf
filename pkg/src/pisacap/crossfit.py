"""Cross-fitted nuisance estimation and doubly-robust pseudo-outcomes.

For each fold, outcome models for both arms and a propensity model are
trained on the complement and used to predict the held-out rows, so no
row's prediction ever touches its own fold.  The pseudo-outcome combines
the outcome-model contrast with inverse-propensity-weighted residuals; its
subgroup means stay consistent when either the outcome models or the
propensity model is correct.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset, FoldAssignment
from .errors import FoldCompositionError
from .learners import fit_logistic, fit_spline_regression


@dataclass(frozen=True)
class NuisancePredictions:
    """Per-row fold-excluded predictions and pseudo-outcomes.

    hhat1/hhat0 are predicted outcomes under treatment/control, pihat1 the
    clipped treated-arm propensity, psi the pseudo-outcome.  All arrays are
    row-aligned with the dataset the folds were built for.
    """

    hhat1: np.ndarray
    hhat0: np.ndarray
    pihat1: np.ndarray
    psi: np.ndarray
    folds: FoldAssignment
    clip_eps: float

    @property
    def n(self) -> int:
        return self.psi.shape[0]


def pseudo_outcome(obs, h1: float, h0: float, pi1: float) -> float:
    """Doubly-robust pseudo-outcome for a single observation.

    h1 - h0 + g/pi1 * (y - h1) - (1-g)/(1-pi1) * (y - h0), with pi1 already
    clipped into (0, 1).  Subtracting the control-arm residual term is what
    makes the subgroup mean robust to a wrong propensity (or wrong outcome)
    model; flipping that sign breaks the property.
    """
    if not 0.0 < pi1 < 1.0:
        raise ValueError(f"propensity must lie in (0,1), got {pi1}")
    return float(
        h1
        - h0
        + obs.g / pi1 * (obs.y - h1)
        - (1 - obs.g) / (1.0 - pi1) * (obs.y - h0)
    )


def pseudo_outcomes(y, g, hhat1, hhat0, pihat1) -> np.ndarray:
    """Vectorized pseudo-outcome over row-aligned arrays."""
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    return (
        hhat1
        - hhat0
        + g / pihat1 * (y - hhat1)
        - (1.0 - g) / (1.0 - pihat1) * (y - hhat0)
    )


def spline_outcome_learner(degree=3, n_knots=4):
    """Outcome learner factory: additive B-spline least squares."""

    def fit(X, y):
        return fit_spline_regression(X, y, degree=degree, n_knots=n_knots)

    return fit


class _LogisticPropensity:
    def __init__(self, fit):
        self._fit = fit

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        design = np.column_stack([np.ones(X.shape[0]), X])
        return self._fit.predict_proba(design)


def logistic_propensity_learner(max_iter=50, tol=1e-8):
    """Propensity learner factory: main-effects logistic regression."""

    def fit(X, g):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        design = np.column_stack([np.ones(X.shape[0]), X])
        return _LogisticPropensity(fit_logistic(design, g, max_iter=max_iter, tol=tol))

    return fit


def crossfit_nuisances(
    data: Dataset,
    folds: FoldAssignment,
    outcome_learner=None,
    propensity_learner=None,
    clip_eps: float = 0.01,
) -> NuisancePredictions:
    """Cross-fitted outcome/propensity predictions and pseudo-outcomes.

    ``outcome_learner(X, y)`` must return an object with ``predict``;
    ``propensity_learner(X, g)`` one with ``predict_proba``.  Outcome models
    are fit separately per arm on each training complement.  Propensities
    are clipped into [clip_eps, 1 - clip_eps].  A training complement
    missing an arm raises FoldCompositionError naming the fold.
    """
    if outcome_learner is None:
        outcome_learner = spline_outcome_learner()
    if propensity_learner is None:
        propensity_learner = logistic_propensity_learner()
    if not 0.0 < clip_eps < 0.5:
        raise ValueError(f"clip_eps must lie in (0, 0.5), got {clip_eps}")
    n = data.n
    if folds.n != n:
        raise ValueError("fold assignment does not match dataset size")
    hhat1 = np.empty(n)
    hhat0 = np.empty(n)
    pihat1 = np.empty(n)
    for q in range(1, folds.Q + 1):
        test = folds.fold_indices(q)
        train = folds.train_indices(q)
        g_train = data.g[train]
        if g_train.min() == g_train.max():
            raise FoldCompositionError(
                f"training complement of fold {q} contains a single treatment arm"
            )
        Z_test = data.z[test]
        for arm, target in ((1, hhat1), (0, hhat0)):
            rows = train[g_train == arm]
            model = outcome_learner(data.z[rows], data.y[rows])
            target[test] = model.predict(Z_test)
        prop = propensity_learner(data.z[train], data.g[train])
        pihat1[test] = np.clip(prop.predict_proba(Z_test), clip_eps, 1.0 - clip_eps)
    psi = pseudo_outcomes(data.y, data.g, hhat1, hhat0, pihat1)
    for arr in (hhat1, hhat0, pihat1, psi):
        arr.setflags(write=False)
    return NuisancePredictions(
        hhat1=hhat1,
        hhat0=hhat0,
        pihat1=pihat1,
        psi=psi,
        folds=folds,
        clip_eps=clip_eps,
    )


def dump_nuisances(nuis: NuisancePredictions, data: Dataset, path) -> None:
    """Diagnostic CSV with columns id,hhat1,hhat0,pihat1,psi."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "hhat1", "hhat0", "pihat1", "psi"])
        for i in range(nuis.n):
            writer.writerow(
                [
                    int(data.ids[i]),
                    repr(float(nuis.hhat1[i])),
                    repr(float(nuis.hhat0[i])),
                    repr(float(nuis.pihat1[i])),
                    repr(float(nuis.psi[i])),
                ]
            )
