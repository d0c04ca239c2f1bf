"""Self-contained regression primitives.

Logistic regression (Newton/IRLS), linear least squares, additive B-spline
regression, CART-style regression trees, and local polynomial smoothing.
These back the nuisance models and the subgroup working models.  Every fit
is deterministic: identical inputs give bit-identical parameters, and fit
objects are immutable after construction so concurrent predict calls are
safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, SeparationError

PREDICT_CHUNK = 200_000


def _sigmoid(t):
    out = np.empty_like(t, dtype=float)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class LinearFit:
    """Ordinary least squares fit; intercept stored first in coef."""

    coef: np.ndarray
    kind: str = "linear"

    @property
    def p(self) -> int:
        return self.coef.shape[0] - 1

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.coef[0] + X @ self.coef[1:]


def fit_linear(X, y, sample_weight=None) -> LinearFit:
    """Least squares of y on an intercept plus the columns of X.

    ``sample_weight`` may carry signed multiplier weights; the fit then
    solves the weighted normal equations (the perturbed score equations)
    with a tiny ridge guard.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    D = np.column_stack([np.ones(X.shape[0]), X])
    if sample_weight is None:
        coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    else:
        coef = _weighted_normal_solve(D, y, np.asarray(sample_weight, dtype=float))
    coef = np.asarray(coef, dtype=float)
    coef.setflags(write=False)
    return LinearFit(coef=coef)


def _weighted_normal_solve(D, y, w, ridge=1e-8):
    G = D.T @ (w[:, None] * D)
    b = D.T @ (w * y)
    G = G + ridge * np.eye(G.shape[0])
    try:
        return np.linalg.solve(G, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(G, b, rcond=None)[0]


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticFit:
    """Newton-solved logistic regression on a caller-supplied design matrix."""

    coef: np.ndarray
    n_iter: int
    gradient_norm: float
    kind: str = "logistic"

    def predict_proba(self, X) -> np.ndarray:
        """P(label=1 | x); values in the open interval (0,1)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return _sigmoid(X @ self.coef)


def fit_logistic(X, y, max_iter=50, tol=1e-8, coef_bound=30.0) -> LogisticFit:
    """Maximum-likelihood logistic regression via damped Newton iterations.

    ``X`` is the full design including any intercept column; ``y`` holds
    {0,1} labels with both classes present.  Returns once the sup-norm of
    the log-likelihood gradient is at most ``tol``.  A coefficient
    escaping ``coef_bound`` in absolute value raises SeparationError;
    exhausting ``max_iter`` raises ConvergenceError carrying the final
    gradient norm.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if set(np.unique(y)) != {0.0, 1.0}:
        raise ValueError("labels must contain both classes 0 and 1")
    if n <= k:
        raise ValueError(f"need n > number of design columns ({n} <= {k})")

    beta = np.zeros(k)
    eta = X @ beta
    loglik = -n * np.log(2.0)
    grad = X.T @ (y - 0.5)
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= tol:
            beta = beta.copy()
            beta.setflags(write=False)
            return LogisticFit(coef=beta, n_iter=it - 1, gradient_norm=gnorm)
        mu = _sigmoid(eta)
        w = mu * (1.0 - mu)
        H = X.T @ (w[:, None] * X)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        # halve the step while the log-likelihood measurably worsens; near the
        # optimum the full Newton step is accepted even when the improvement
        # falls below float resolution
        scale = 1.0
        slack = 1e-10 * (abs(loglik) + 1.0)
        for _ in range(40):
            cand = beta + scale * step
            eta_c = X @ cand
            ll_c = float(np.sum(y * eta_c - np.logaddexp(0.0, eta_c)))
            if ll_c >= loglik - slack or scale < 1e-8:
                break
            scale *= 0.5
        beta, eta, loglik = cand, eta_c, ll_c
        if float(np.max(np.abs(beta))) > coef_bound:
            raise SeparationError(
                f"coefficient magnitude exceeded {coef_bound}; classes look separated"
            )
        mu = _sigmoid(eta)
        grad = X.T @ (y - mu)
    gnorm = float(np.max(np.abs(grad)))
    if gnorm <= tol:
        beta = beta.copy()
        beta.setflags(write=False)
        return LogisticFit(coef=beta, n_iter=max_iter, gradient_norm=gnorm)
    raise ConvergenceError(
        f"logistic fit stopped after {max_iter} iterations with gradient sup-norm {gnorm:.3e}",
        gradient_norm=gnorm,
    )


# ---------------------------------------------------------------------------
# B-splines
# ---------------------------------------------------------------------------


def bspline_knot_vector(a, b, degree, interior_knots):
    interior = np.asarray(interior_knots, dtype=float)
    return np.concatenate([np.full(degree + 1, a), interior, np.full(degree + 1, b)])


def bspline_basis(x, degree, interior_knots, bounds) -> np.ndarray:
    """Evaluate the B-spline basis at x via the Cox-de Boor recursion.

    Returns an array of shape (len(x), degree + 1 + len(interior_knots)).
    Queries outside [a, b] are clamped to the boundary.  The basis is a
    partition of unity on [a, b] and every entry is nonnegative.
    """
    a, b = bounds
    if not a < b:
        raise ValueError(f"need a < b, got [{a}, {b}]")
    interior = np.asarray(interior_knots, dtype=float)
    if interior.size and (interior.min() <= a or interior.max() >= b):
        raise ValueError("interior knots must lie strictly inside (a, b)")
    x = np.clip(np.asarray(x, dtype=float).ravel(), a, b)
    t = bspline_knot_vector(a, b, degree, interior)
    nb = len(t) - degree - 1

    # degree-0 indicators, right-closed on the final interval so x=b lands inside
    B = np.zeros((x.shape[0], len(t) - 1))
    for i in range(len(t) - 1):
        if t[i] == t[i + 1]:
            continue
        hit = (x >= t[i]) & (x < t[i + 1])
        if t[i + 1] == b:
            hit |= x == b
        B[hit, i] = 1.0
    for k in range(1, degree + 1):
        Bk = np.zeros((x.shape[0], len(t) - k - 1))
        for i in range(len(t) - k - 1):
            d1 = t[i + k] - t[i]
            if d1 > 0:
                Bk[:, i] += (x - t[i]) / d1 * B[:, i]
            d2 = t[i + k + 1] - t[i + 1]
            if d2 > 0:
                Bk[:, i] += (t[i + k + 1] - x) / d2 * B[:, i + 1]
        B = Bk
    return B[:, :nb]


def quantile_interior_knots(x, n_knots, degree) -> np.ndarray:
    """Interior knots at equispaced quantiles, multiplicity capped at degree."""
    x = np.asarray(x, dtype=float)
    probs = np.arange(1, n_knots + 1) / (n_knots + 1)
    knots = np.quantile(x, probs)
    a, b = float(x.min()), float(x.max())
    knots = knots[(knots > a) & (knots < b)]
    if knots.size == 0:
        return knots
    vals, counts = np.unique(knots, return_counts=True)
    counts = np.minimum(counts, max(degree, 1))
    return np.repeat(vals, counts)


@dataclass(frozen=True)
class SplineFit:
    """Additive B-spline least squares fit.

    One univariate basis per covariate; the first basis function of each
    block is dropped in favor of a single global intercept, which leaves
    the fitted span unchanged (each block sums to one).
    """

    degree: int
    bounds: tuple
    knots: tuple
    coef: np.ndarray
    ridge_fallback: bool
    kind: str = "spline"

    @property
    def p(self) -> int:
        return len(self.bounds)

    def design(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.p:
            raise ValueError(f"expected {self.p} covariates, got {X.shape[1]}")
        cols = [np.ones((X.shape[0], 1))]
        for j in range(self.p):
            Bj = bspline_basis(X[:, j], self.degree, self.knots[j], self.bounds[j])
            cols.append(Bj[:, 1:])
        return np.hstack(cols)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(X.shape[0])
        for lo in range(0, X.shape[0], PREDICT_CHUNK):
            hi = min(lo + PREDICT_CHUNK, X.shape[0])
            out[lo:hi] = self.design(X[lo:hi]) @ self.coef
        return out


def fit_spline_regression(x, y, degree=3, n_knots=4, sample_weight=None) -> SplineFit:
    """Least squares on an additive B-spline basis with quantile knots.

    Accepts a 1-d or (n, p) covariate array.  A rank-deficient design falls
    back to a tiny ridge solve (lambda = 1e-8) and flags the fit.  Signed
    ``sample_weight`` triggers the weighted normal equations instead.
    """
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    bounds, knots = [], []
    for j in range(X.shape[1]):
        col = X[:, j]
        a, b = float(col.min()), float(col.max())
        if a == b:
            # degenerate column: widen so the basis stays well defined
            a, b = a - 0.5, b + 0.5
        bounds.append((a, b))
        knots.append(quantile_interior_knots(col, n_knots, degree))
    shell = SplineFit(
        degree=degree,
        bounds=tuple(bounds),
        knots=tuple(np.asarray(k) for k in knots),
        coef=np.zeros(1),
        ridge_fallback=False,
    )
    D = shell.design(X)
    if D.shape[0] <= D.shape[1]:
        raise ValueError(
            f"need more rows than basis columns ({D.shape[0]} <= {D.shape[1]})"
        )
    ridge_used = False
    if sample_weight is not None:
        coef = _weighted_normal_solve(D, y, np.asarray(sample_weight, dtype=float))
    else:
        coef, _, rank, _ = np.linalg.lstsq(D, y, rcond=None)
        if rank < D.shape[1]:
            coef = _weighted_normal_solve(D, y, np.ones(D.shape[0]))
            ridge_used = True
    coef = np.asarray(coef, dtype=float)
    coef.setflags(write=False)
    return SplineFit(
        degree=degree,
        bounds=shell.bounds,
        knots=shell.knots,
        coef=coef,
        ridge_fallback=ridge_used,
    )


# ---------------------------------------------------------------------------
# regression trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    value: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class TreeFit:
    """Binary CART regression tree with variance-reduction splits."""

    root: TreeNode
    min_leaf: int
    max_depth: int
    kind: str = "tree"

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(X.shape[0])
        self._fill(self.root, X, np.arange(X.shape[0]), out)
        return out

    def _fill(self, node, X, idx, out):
        if node.is_leaf:
            out[idx] = node.value
            return
        goes_left = X[idx, node.feature] <= node.threshold
        self._fill(node.left, X, idx[goes_left], out)
        self._fill(node.right, X, idx[~goes_left], out)


def _weighted_mean(y, w):
    tw = w.sum()
    if tw <= 0:
        return float(y.mean())
    return float((w * y).sum() / tw)


def _best_split(X, y, w, min_leaf):
    """Smallest total weighted SSE split; ties favor the lowest feature index,
    then the smallest threshold.  Returns (feature, threshold, sse) or None."""
    n, p = X.shape
    best = None
    for j in range(p):
        order = np.argsort(X[:, j], kind="stable")
        xs, ys, ws = X[order, j], y[order], w[order]
        distinct = np.flatnonzero(np.diff(xs) > 0)
        if distinct.size == 0:
            continue
        cw = np.cumsum(ws)
        cwy = np.cumsum(ws * ys)
        cwyy = np.cumsum(ws * ys * ys)
        tot_w, tot_wy, tot_wyy = cw[-1], cwy[-1], cwyy[-1]
        counts = distinct + 1
        ok = (counts >= min_leaf) & (n - counts >= min_leaf)
        if not ok.any():
            continue
        cand = distinct[ok]
        lw, lwy, lwyy = cw[cand], cwy[cand], cwyy[cand]
        rw, rwy, rwyy = tot_w - lw, tot_wy - lwy, tot_wyy - lwyy
        with np.errstate(divide="ignore", invalid="ignore"):
            sse = (lwyy - np.where(lw > 0, lwy**2 / lw, 0.0)) + (
                rwyy - np.where(rw > 0, rwy**2 / rw, 0.0)
            )
        k = int(np.argmin(sse))
        thr = 0.5 * (xs[cand[k]] + xs[cand[k] + 1])
        entry = (float(sse[k]), j, float(thr))
        if best is None or entry[0] < best[0]:
            best = entry
    if best is None:
        return None
    return best[1], best[2], best[0]


def _grow(X, y, w, depth, min_leaf, max_depth):
    value = _weighted_mean(y, w)
    if depth >= max_depth or y.shape[0] < 2 * min_leaf or np.all(y == y[0]):
        return TreeNode(value=value)
    found = _best_split(X, y, w, min_leaf)
    if found is None:
        return TreeNode(value=value)
    j, thr, sse = found
    parent_sse = float((w * (y - value) ** 2).sum())
    if not sse < parent_sse - 1e-12:
        return TreeNode(value=value)
    goes_left = X[:, j] <= thr
    return TreeNode(
        feature=j,
        threshold=thr,
        value=value,
        left=_grow(X[goes_left], y[goes_left], w[goes_left], depth + 1, min_leaf, max_depth),
        right=_grow(X[~goes_left], y[~goes_left], w[~goes_left], depth + 1, min_leaf, max_depth),
    )


def fit_tree(X, y, min_leaf=20, max_depth=4, sample_weight=None) -> TreeFit:
    """CART regression tree: leaf means, deterministic tie-breaking.

    ``max_depth=0`` yields a root-only tree predicting the global mean.
    Nonnegative ``sample_weight`` reweights both leaf means and the split
    criterion.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.shape[0] < 2 * min_leaf and max_depth > 0:
        raise ValueError(f"need at least 2*min_leaf={2 * min_leaf} rows, got {y.shape[0]}")
    if sample_weight is None:
        w = np.ones(y.shape[0])
    else:
        w = np.asarray(sample_weight, dtype=float)
        if (w < 0).any():
            raise ValueError("tree fitting requires nonnegative weights")
    root = _grow(X, y, w, 0, min_leaf, max_depth)
    return TreeFit(root=root, min_leaf=min_leaf, max_depth=max_depth)


# ---------------------------------------------------------------------------
# local polynomial smoothing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalPolyFit:
    """Loess-style local polynomial smoother for a single covariate.

    At each query point a tricube-weighted polynomial of the stored degree
    is solved on the points inside the bandwidth window; with a span rule
    the window adapts to the k nearest neighbors.
    """

    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    degree: int
    bandwidth: float | None
    span: float
    base_weight: np.ndarray | None = field(default=None, repr=False)
    kind: str = "localpoly"

    def predict(self, x0) -> np.ndarray:
        q = np.asarray(x0, dtype=float).ravel()
        out = np.empty(q.shape[0])
        n = self.x.shape[0]
        k_span = max(int(np.ceil(self.span * n)), self.degree + 1)
        for i, xq in enumerate(q):
            d = np.abs(self.x - xq)
            if self.bandwidth is not None:
                h = self.bandwidth
            else:
                h = np.partition(d, k_span - 1)[k_span - 1]
            if h <= 0:
                h = d[d > 0].min() if (d > 0).any() else 1.0
            w = np.clip(1.0 - (d / h) ** 3, 0.0, None) ** 3
            if (w > 0).sum() < self.degree + 1:
                # widen to the nearest degree+1 points
                h = np.partition(d, self.degree)[self.degree] * (1.0 + 1e-12) + 1e-300
                w = np.clip(1.0 - (d / h) ** 3, 0.0, None) ** 3
                w[d <= h] = np.maximum(w[d <= h], 1e-12)
            if self.base_weight is not None:
                w = w * self.base_weight
            out[i] = self._solve_local(xq, w)
        return out

    def _solve_local(self, xq, w):
        use = w > 0
        xs = self.x[use] - xq
        ys = self.y[use]
        ws = w[use]
        V = np.vander(xs, N=self.degree + 1, increasing=True)
        sw = np.sqrt(ws)
        beta, *_ = np.linalg.lstsq(sw[:, None] * V, sw * ys, rcond=None)
        return float(beta[0])


def fit_local_polynomial(
    x, y, bandwidth=None, degree=2, span=0.75, sample_weight=None
) -> LocalPolyFit:
    """Local polynomial regression for 1-d covariates.

    ``bandwidth=None`` selects the loess-style span rule (window reaching
    the ceil(span * n) nearest neighbors); degree must be 0, 1, or 2.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have matching length")
    if degree not in (0, 1, 2):
        raise ValueError("degree must be 0, 1, or 2")
    if bandwidth is not None and bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    base = None
    if sample_weight is not None:
        base = np.asarray(sample_weight, dtype=float)
        if (base < 0).any():
            raise ValueError("local polynomial fitting requires nonnegative weights")
    xs = x.copy()
    ys = y.copy()
    xs.setflags(write=False)
    ys.setflags(write=False)
    return LocalPolyFit(
        x=xs, y=ys, degree=degree, bandwidth=bandwidth, span=span, base_weight=base
    )
