"""Nonparametric estimators built on the local-linear engine.

Conditional mean and variance (two-step, squared-residual regression),
Nadaraya-Watson conditional moments, a clipped kernel propensity estimate,
the resistant-population variance in both homoscedastic and heteroscedastic
modes, and leave-one-out cross-validated bandwidth selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AllCandidatesFailed,
    EmptyNeighborhood,
    InsufficientLocalData,
)
from .kernels import (
    BandwidthSet,
    KernelSpec,
    _as_matrix,
    _product_weights,
    batch_local_linear,
    local_linear_fit,
)

DEFAULT_PI_CLIP = 0.05


@dataclass
class Dataset:
    """Observational sample: outcome y, binary treatment z, covariates x."""

    y: np.ndarray
    z: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.z = np.asarray(self.z, dtype=float).ravel()
        self.x = _as_matrix(self.x)
        n, d = self.x.shape
        if self.y.shape[0] != n or self.z.shape[0] != n:
            raise ValueError("y, z, x must have matching lengths")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.x))):
            raise ValueError("non-finite values in outcome or covariates")
        if not np.all((self.z == 0) | (self.z == 1)):
            raise ValueError("treatment indicator must be 0/1")
        if n < 2 * (d + 1):
            raise ValueError(f"need at least {2 * (d + 1)} rows for d={d}")
        if self.z.sum() == 0 or self.z.sum() == n:
            raise ValueError("both treatment arms must be nonempty")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass
class ResistantSample:
    """Sample from the resistant population, used only to calibrate the
    conditional variance of the control potential outcome."""

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.x = _as_matrix(self.x)
        m, d = self.x.shape
        if self.y.shape[0] != m:
            raise ValueError("y and x must have matching lengths")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.x))):
            raise ValueError("non-finite values in resistant sample")
        if m < d + 1:
            raise ValueError(f"resistant sample needs at least {d + 1} rows")

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass
class MomentEstimates:
    """Plug-in conditional moments at one evaluation point."""

    m_hat: float
    sigma2_hat: float
    pi_hat: float
    sigma02_hat: float
    f_hat: float


def fit_mean(data: Dataset, x, h1: float, spec: KernelSpec) -> float:
    """Local-linear estimate of E(Y | X = x)."""
    return local_linear_fit(data.x, data.y, None, x, h1, spec).intercept


def loo_residuals(X, y, mask, rows, h: float, spec: KernelSpec):
    """Leave-one-out residuals y_i - m_hat_{-i}(X_i) at the given sample rows.

    Uses the linear-smoother identity (y - yhat)/(1 - w_self). Removing the
    self-weight keeps squared residuals centered on the conditional variance
    even when local effective sample sizes are small (the self-fit shrinkage
    of plain residuals biases variance estimates downward in higher
    dimensions). Rows whose fit fails or is dominated by the self-weight are
    flagged invalid.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    rows = np.asarray(rows)
    fit = batch_local_linear(X, y, mask, X[rows], h, spec)
    e1 = np.zeros((1, d + 1, 1))
    e1[0, 0, 0] = 1.0
    with np.errstate(all="ignore"):
        c = np.linalg.solve(
            np.where(fit.ok[:, None, None], fit.normal_matrix, np.eye(d + 1)), e1
        )[:, :, 0]
    w_self = c[:, 0] * float(spec.k(0.0)[0]) ** d
    denom = 1.0 - w_self
    ok = fit.ok & (denom > 1e-3) & (fit.effective_n >= d + 2)
    resid = np.full(rows.shape[0], np.nan)
    resid[ok] = (y[rows][ok] - fit.intercept[ok]) / denom[ok]
    return resid, ok


def mean_residuals(data: Dataset, h1: float, spec: KernelSpec, *, loo: bool = True):
    """Residuals from the mean fit at every sample point.

    Leave-one-out by default; `loo=False` gives the plain residuals
    y_i - m_hat(X_i). Points where the local fit fails are flagged invalid
    rather than fatal; callers decide whether partial residuals are
    acceptable.
    """
    if loo:
        return loo_residuals(data.x, data.y, None, np.arange(data.n), h1, spec)
    fit = batch_local_linear(data.x, data.y, None, data.x, h1, spec)
    e = data.y - fit.intercept
    return e, fit.ok


def fit_cond_variance(
    data: Dataset,
    x,
    h1: float,
    h2: float,
    spec: KernelSpec,
    *,
    residuals=None,
    residual_mask=None,
) -> float:
    """Two-step conditional variance: local-linear fit of squared mean-fit
    residuals at x, with negative intercepts clamped to zero.

    `residuals` lets callers reuse a cached residual pass; otherwise the
    residuals are recomputed here with bandwidth h1.
    """
    if residuals is None:
        residuals, residual_mask = mean_residuals(data, h1, spec)
    if residual_mask is None:
        e2 = np.square(residuals)
        mask = None
    else:
        e2 = np.square(np.where(residual_mask, residuals, 0.0))
        mask = np.asarray(residual_mask, dtype=float)
    fit = local_linear_fit(data.x, e2, mask, x, h2, spec)
    return max(0.0, fit.intercept)


def nw_moment(X, values, mask, x, h_v: float, spec: KernelSpec) -> float:
    """Kernel-weighted (Nadaraya-Watson) average of `values` at x."""
    X = _as_matrix(X)
    values = np.asarray(values, dtype=float)
    n = X.shape[0]
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=float)
    u = (X - np.atleast_1d(np.asarray(x, dtype=float))[None, :]) / h_v
    w = np.prod(spec.k(u), axis=1) * mask
    denom = w.sum()
    if denom <= 0:
        raise EmptyNeighborhood(f"no kernel mass at x={x} with h={h_v}")
    return float((w @ values) / denom)


def batch_nw(X, values, mask, points, h: float, spec: KernelSpec, *, chunk: int = 512):
    """Nadaraya-Watson averages at many points; returns (values, ok)."""
    X = _as_matrix(X)
    P = _as_matrix(points)
    values = np.asarray(values, dtype=float)
    n = X.shape[0]
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=float)
    m = P.shape[0]
    out = np.full(m, np.nan)
    ok = np.zeros(m, dtype=bool)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        W = _product_weights(spec, X[None, :, :] - P[lo:hi, None, :], h)
        W *= mask
        denom = W.sum(axis=1)
        good = denom > 0
        out[lo:hi][good] = (W @ values)[good] / denom[good]
        ok[lo:hi] = good
    return out, ok


def batch_kernel_density(X, points, h: float, spec: KernelSpec, *, chunk: int = 512):
    """Product-kernel density estimates at many points."""
    X = _as_matrix(X)
    P = _as_matrix(points)
    n, d = X.shape
    m = P.shape[0]
    out = np.zeros(m)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        W = _product_weights(spec, X[None, :, :] - P[lo:hi, None, :], h)
        out[lo:hi] = W.sum(axis=1) / (n * h**d)
    return out


def fit_propensity(
    data: Dataset, x, h5: float, spec: KernelSpec, pi_clip: float = DEFAULT_PI_CLIP
) -> float:
    """Kernel propensity estimate, clipped into [pi_clip, 1 - pi_clip]."""
    p = nw_moment(data.x, data.z, None, x, h5, spec)
    return float(np.clip(p, pi_clip, 1.0 - pi_clip))


def kernel_density(X, x, h: float, spec: KernelSpec) -> float:
    """Product-kernel density estimate f_hat(x) with bandwidth h."""
    X = _as_matrix(X)
    n, d = X.shape
    u = (X - np.atleast_1d(np.asarray(x, dtype=float))[None, :]) / h
    return float(np.prod(spec.k(u), axis=1).sum() / (n * h**d))


def _global_linear_residuals(y, X):
    X = _as_matrix(X)
    G = np.concatenate([np.ones((X.shape[0], 1)), X], axis=1)
    coef, *_ = np.linalg.lstsq(G, y, rcond=None)
    return y - G @ coef


def fit_resistant_variance(
    resistant: ResistantSample,
    x,
    h_r1: float,
    h_r2: float,
    spec: KernelSpec,
    mode: str = "heteroscedastic",
) -> float:
    """Conditional variance of the resistant population's outcome at x.

    heteroscedastic: the two-step residual-regression estimator applied to
    the resistant sample with its own bandwidths. homoscedastic: the sample
    variance of the residuals from a single global linear fit, constant in x.
    """
    if mode == "homoscedastic":
        r = _global_linear_residuals(resistant.y, resistant.x)
        if r.size < 2:
            return 0.0
        return max(0.0, float(np.var(r, ddof=1)))
    if mode != "heteroscedastic":
        raise ValueError(f"unknown resistant variance mode {mode!r}")
    resid, ok = loo_residuals(
        resistant.x, resistant.y, None, np.arange(resistant.m), h_r1, spec
    )
    if not np.any(ok):
        raise InsufficientLocalData("resistant residual pass failed everywhere")
    e2 = np.where(ok, resid, 0.0) ** 2
    out = local_linear_fit(resistant.x, e2, ok.astype(float), x, h_r2, spec)
    return max(0.0, out.intercept)


def loo_scores(X, y, mask, spec: KernelSpec, grid, eval_idx=None):
    """Leave-one-out mean squared prediction error for each candidate h.

    Uses the exact linear-smoother identity e_loo = (y - yhat)/(1 - w_self);
    a candidate fails (score None) if any scored point has no valid
    leave-one-out fit. `eval_idx` restricts scoring to a subset of the
    masked points (same subset for every candidate).
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=float)
    idx = np.flatnonzero(mask > 0) if eval_idx is None else np.asarray(eval_idx)
    k0d = float(spec.k(0.0)[0]) ** d

    scores = {}
    for h in grid:
        fit = batch_local_linear(X, y, mask, X[idx], float(h), spec)
        if not np.all(fit.ok):
            scores[float(h)] = None
            continue
        e1 = np.zeros((1, d + 1, 1))
        e1[0, 0, 0] = 1.0
        c = np.linalg.solve(fit.normal_matrix, e1)[:, :, 0]  # (m, d+1)
        w_self = c[:, 0] * k0d
        denom = 1.0 - w_self
        # Self-weight at 1 means the point is alone in its own neighborhood.
        if np.any(denom <= 1e-10) or np.any(fit.effective_n < d + 2):
            scores[float(h)] = None
            continue
        resid = (y[idx] - fit.intercept) / denom
        scores[float(h)] = float(np.mean(resid**2))
    return scores


def select_bandwidth_cv(X, y, mask, spec: KernelSpec, grid, eval_idx=None) -> float:
    """Grid bandwidth minimizing the leave-one-out squared prediction error.

    Deterministic: score ties (up to float noise relative to the response
    scale) resolve to the largest candidate bandwidth.
    """
    grid = [float(h) for h in np.atleast_1d(np.asarray(grid, dtype=float))]
    if not grid:
        raise ValueError("candidate grid is empty")
    scores = loo_scores(X, y, mask, spec, grid, eval_idx)
    valid = {h: s for h, s in scores.items() if s is not None}
    if not valid:
        raise AllCandidatesFailed(sorted(scores))
    best = min(valid.values())
    y_scale = max(1.0, float(np.std(np.asarray(y, dtype=float))))
    tol = max((1e-9 * y_scale) ** 2, 1e-12 * best)
    tied = [h for h, s in valid.items() if s <= best + tol]
    return max(tied)


def rot_bandwidth(X, mask=None) -> float:
    """Rule-of-thumb anchor: geometric mean of per-coordinate std times
    n^(-1/(d+4))."""
    X = _as_matrix(X)
    if mask is not None:
        X = X[np.asarray(mask) > 0]
    n, d = X.shape
    stds = np.std(X, axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    scale = float(np.exp(np.mean(np.log(stds))))
    return scale * n ** (-1.0 / (d + 4))


def default_cv_grid(X, mask=None, num: int = 20) -> np.ndarray:
    """Log-spaced candidate grid on [0.25, 4] times the rule-of-thumb h."""
    h0 = rot_bandwidth(X, mask)
    return np.geomspace(0.25 * h0, 4.0 * h0, num)


def undersmooth(h: float, gamma: float = 1.1) -> float:
    """Shrink a bandwidth toward faster decay: h^gamma below one,
    h^(1/gamma) above one, with gamma > 1."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    if gamma <= 1:
        raise ValueError("gamma must exceed 1")
    return h**gamma if h < 1.0 else h ** (1.0 / gamma)


def _interior_eval_idx(X, mask, cap: int = 400, lo: float = 0.05, hi: float = 0.95):
    """Deterministic scoring subset for pipeline bandwidth selection: masked
    points whose every coordinate lies inside the masked sample's inner
    quantile range, strided down to at most `cap` points."""
    X = _as_matrix(X)
    rows = np.flatnonzero(mask > 0) if mask is not None else np.arange(X.shape[0])
    sub = X[rows]
    ql = np.quantile(sub, lo, axis=0)
    qh = np.quantile(sub, hi, axis=0)
    inner = np.all((sub >= ql) & (sub <= qh), axis=1)
    idx = rows[inner] if inner.any() else rows
    stride = max(1, int(np.ceil(idx.size / cap)))
    return idx[::stride]


def select_bandwidths(
    data: Dataset,
    spec: KernelSpec,
    *,
    grid=None,
    num: int = 20,
    eval_cap: int = 400,
) -> BandwidthSet:
    """Cross-validate each stage bandwidth on its own regression problem.

    h1 on the pooled mean fit, h2 on the squared residuals from that fit,
    h3/h4 on the arm-wise mean fits, h5 on the treatment indicator; h_v
    follows h2. Candidates are scored on a deterministic interior subset of
    the sample so that a handful of isolated tail points cannot invalidate
    every candidate in higher dimensions.
    """
    X, y, z = data.x, data.y, data.z

    def cv(target, mask):
        g = default_cv_grid(X, mask, num) if grid is None else grid
        idx = _interior_eval_idx(X, mask, cap=eval_cap)
        return select_bandwidth_cv(X, target, mask, spec, g, eval_idx=idx)

    h1 = cv(y, None)
    e, ok = mean_residuals(data, h1, spec)
    e2 = np.where(ok, e, 0.0) ** 2
    h2 = cv(e2, ok.astype(float))
    h3 = cv(y, z)
    h4 = cv(y, 1.0 - z)
    h5 = cv(z, None)
    return BandwidthSet(h1=h1, h2=h2, h3=h3, h4=h4, h5=h5, d=data.d)


def undersmooth_bandwidths(bw: BandwidthSet, gamma: float = 1.1) -> BandwidthSet:
    """Apply the undersmoothing power map to the estimation bandwidths
    h1..h4 (h5 and h_v only need consistency, not undersmoothing)."""
    return BandwidthSet(
        h1=undersmooth(bw.h1, gamma),
        h2=undersmooth(bw.h2, gamma),
        h3=undersmooth(bw.h3, gamma),
        h4=undersmooth(bw.h4, gamma),
        h5=bw.h5,
        h_v=bw.h_v,
        alpha2=bw.alpha2,
        alpha3=bw.alpha3,
        alpha4=bw.alpha4,
        d=bw.d,
    )
