"""Two-point treatment-effect identification at a point or on a grid.

Assembles the plug-in moments into the squared identification bias and the
two candidate effect curves: the variance gap between the study sample and
the resistant population, rescaled by the propensity, bounds how far the
naive regression difference can sit from the effect on the treated, and the
constrained group fit keeps the plug-in gap estimate non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InsufficientLocalData, InvalidPropensity
from .kernels import BandwidthSet, KernelSpec, _as_matrix, batch_local_linear
from .smoothers import (
    DEFAULT_PI_CLIP,
    Dataset,
    MomentEstimates,
    ResistantSample,
    batch_kernel_density,
    batch_nw,
    fit_resistant_variance,
    loo_residuals,
    rot_bandwidth,
)

# Negative squared-bias values larger than this are genuine (vacuous
# constraint); anything closer to zero is float noise from the boundary case.
_NOISE_CLAMP = 1e-10


def delta_squared(beta_C: float, sigma2: float, sigma02: float, pi: float) -> float:
    """Squared identification bias: beta^2 - (sigma2 - sigma02)/(pi(1-pi)).

    Clamped at zero; the plug-in construction guarantees non-negativity up to
    float noise, and the population quantity is a square.
    """
    if not (0.0 < pi < 1.0):
        raise InvalidPropensity(f"propensity must lie in (0, 1), got {pi}")
    value = beta_C * beta_C - (sigma2 - sigma02) / (pi * (1.0 - pi))
    return max(0.0, value)


@dataclass
class TwoPointFit:
    """Per-point estimate bundle: constrained and unconstrained mean gaps,
    variance-gap threshold, squared bias, and the two candidate effects."""

    x: np.ndarray
    beta_C: float
    beta_U: float
    s_hat: float
    delta2: float
    tau_minus: float
    tau_plus: float
    boundary_flag: bool
    moments: MomentEstimates


@dataclass
class PointFailure:
    """Recorded estimation failure at one grid point."""

    x: np.ndarray
    stage: str
    reason: str


@dataclass
class ResidualCaches:
    """Residual passes shared across grid points.

    e: pooled mean-fit residuals (stage-one bandwidth), NaN where the local
    fit failed. e_arm: own-arm mean-fit residuals used by the variance
    plug-ins, NaN where unavailable or outside the computed window.
    """

    e: np.ndarray
    valid: np.ndarray
    e_arm: Optional[np.ndarray] = None
    arm_valid: Optional[np.ndarray] = None


def _window_mask(X, points, radius: float, chunk: int = 1024) -> np.ndarray:
    """Sample rows within sup-norm `radius` of at least one evaluation point."""
    X = _as_matrix(X)
    P = _as_matrix(points)
    need = np.zeros(X.shape[0], dtype=bool)
    for lo in range(0, P.shape[0], chunk):
        D = np.abs(X[None, :, :] - P[lo : lo + chunk, None, :]).max(axis=2)
        need |= np.any(D <= radius, axis=0)
    return need


def prepare_residual_caches(
    data: Dataset,
    bw: BandwidthSet,
    spec: KernelSpec,
    *,
    points=None,
    need_arm: bool = False,
) -> ResidualCaches:
    """Run the residual passes once, restricted to sample rows that can carry
    kernel weight at the requested evaluation points."""
    radius = spec.support_radius * max(bw.h2, bw.h_v, bw.h3, bw.h4)
    n = data.n
    if points is None:
        need = np.ones(n, dtype=bool)
    else:
        need = _window_mask(data.x, points, radius)
        if need.mean() > 0.7:
            need = np.ones(n, dtype=bool)

    e = np.full(n, np.nan)
    valid = np.zeros(n, dtype=bool)
    idx = np.flatnonzero(need)
    if idx.size:
        resid, ok = loo_residuals(data.x, data.y, None, idx, bw.h1, spec)
        e[idx[ok]] = resid[ok]
        valid[idx[ok]] = True

    e_arm = None
    arm_valid = None
    if need_arm:
        e_arm = np.full(n, np.nan)
        arm_valid = np.zeros(n, dtype=bool)
        for z_val, h_arm in ((1.0, bw.h3), (0.0, bw.h4)):
            arm = data.z == z_val
            rows = np.flatnonzero(arm & need)
            if not rows.size:
                continue
            resid, ok = loo_residuals(
                data.x, data.y, arm.astype(float), rows, h_arm, spec
            )
            e_arm[rows[ok]] = resid[ok]
            arm_valid[rows[ok]] = True
    return ResidualCaches(e=e, valid=valid, e_arm=e_arm, arm_valid=arm_valid)


def default_resistant_bandwidths(resistant: ResistantSample):
    """Rule-of-thumb bandwidth pair for the resistant-sample variance fit."""
    h = rot_bandwidth(resistant.x)
    return h, h


@dataclass
class _GridEstimates:
    """Vectorized stage outputs at every evaluation point."""

    fits: list  # TwoPointFit | PointFailure per point
    caches: ResidualCaches


def _estimate_points(
    data: Dataset,
    resistant: ResistantSample,
    points,
    bw: BandwidthSet,
    spec: KernelSpec,
    pi_clip: float,
    resistant_mode: str,
    resistant_bandwidths,
    caches: Optional[ResidualCaches] = None,
) -> _GridEstimates:
    P = _as_matrix(points)
    if P.shape[1] != data.d:
        raise ValueError(f"evaluation points have dimension {P.shape[1]}, data has {data.d}")
    m = P.shape[0]
    d = data.d

    if caches is None:
        caches = prepare_residual_caches(data, bw, spec, points=P)
    e2 = np.where(caches.valid, caches.e, 0.0) ** 2
    res_mask = caches.valid.astype(float)

    # Stage outputs, batched over evaluation points.
    mean_fit = batch_local_linear(data.x, data.y, None, P, bw.h1, spec)
    var_fit = batch_local_linear(data.x, e2, res_mask, P, bw.h2, spec)
    sigma2 = np.maximum(0.0, var_fit.intercept)
    pi_raw, pi_ok = batch_nw(data.x, data.z, None, P, bw.h5, spec)
    pi_hat = np.clip(pi_raw, pi_clip, 1.0 - pi_clip)
    f_hat = batch_kernel_density(data.x, P, bw.h2, spec)

    if resistant_bandwidths is None:
        h_r1, h_r2 = default_resistant_bandwidths(resistant)
    else:
        h_r1, h_r2 = resistant_bandwidths
    if resistant_mode == "homoscedastic":
        s0 = fit_resistant_variance(resistant, P[0], h_r1, h_r2, spec, "homoscedastic")
        sigma02 = np.full(m, s0)
        sigma02_ok = np.ones(m, dtype=bool)
    else:
        rres, rok = loo_residuals(
            resistant.x, resistant.y, None, np.arange(resistant.m), h_r1, spec
        )
        re2 = np.where(rok, rres, 0.0) ** 2
        s0_fit = batch_local_linear(
            resistant.x, re2, rok.astype(float), P, h_r2, spec
        )
        sigma02 = np.maximum(0.0, s0_fit.intercept)
        sigma02_ok = s0_fit.ok

    arm1 = batch_local_linear(data.x, data.y, data.z, P, bw.h3, spec)
    arm0 = batch_local_linear(data.x, data.y, 1.0 - data.z, P, bw.h4, spec)

    s_hat = (sigma2 - sigma02) / (pi_hat * (1.0 - pi_hat))
    beta_U = arm1.intercept - arm0.intercept
    boundary = (s_hat > 0) & (beta_U * beta_U < s_hat)

    beta_C = beta_U.copy()
    if np.any(boundary):
        root = np.sqrt(s_hat[boundary])
        beta_C[boundary] = np.where(beta_U[boundary] >= 0, root, -root)

    fits: list = []
    e1 = np.zeros(d + 1)
    e1[0] = 1.0
    for j in range(m):
        stage = None
        if not var_fit.ok[j]:
            stage = "cond_variance"
        elif not pi_ok[j]:
            stage = "propensity"
        elif not sigma02_ok[j]:
            stage = "resistant_variance"
        elif not (arm1.ok[j] and arm0.ok[j]):
            stage = "group_fit"
        if stage is not None:
            fits.append(PointFailure(P[j].copy(), stage, "insufficient local data"))
            continue

        d2 = beta_C[j] * beta_C[j] - s_hat[j]
        d2 = 0.0 if d2 < _NOISE_CLAMP else d2
        root = np.sqrt(d2)
        moments = MomentEstimates(
            m_hat=float(mean_fit.intercept[j]) if mean_fit.ok[j] else float("nan"),
            sigma2_hat=float(sigma2[j]),
            pi_hat=float(pi_hat[j]),
            sigma02_hat=float(sigma02[j]),
            f_hat=float(f_hat[j]),
        )
        fits.append(
            TwoPointFit(
                x=P[j].copy(),
                beta_C=float(beta_C[j]),
                beta_U=float(beta_U[j]),
                s_hat=float(s_hat[j]),
                delta2=float(d2),
                tau_minus=float(beta_C[j] - root),
                tau_plus=float(beta_C[j] + root),
                boundary_flag=bool(boundary[j]),
                moments=moments,
            )
        )
    return _GridEstimates(fits=fits, caches=caches)


def two_point_estimate(
    data: Dataset,
    resistant: ResistantSample,
    x,
    bw: BandwidthSet,
    spec: KernelSpec,
    pi_clip: float = DEFAULT_PI_CLIP,
    *,
    resistant_mode: str = "heteroscedastic",
    resistant_bandwidths=None,
) -> TwoPointFit:
    """Run the full estimation pipeline at one point.

    Stages: pooled mean fit and residuals, conditional variance of the study
    outcome, clipped kernel propensity, resistant-population variance, the
    constrained two-arm fit, then the squared bias and the two candidate
    effects. Local-data failures raise InsufficientLocalData annotated with
    the failing stage.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = _estimate_points(
        data, resistant, x[None, :], bw, spec, pi_clip, resistant_mode, resistant_bandwidths
    )
    fit = out.fits[0]
    if isinstance(fit, PointFailure):
        raise InsufficientLocalData(f"[stage={fit.stage}] {fit.reason} at x={fit.x}")
    return fit


def estimate_grid(
    data: Dataset,
    resistant: ResistantSample,
    grid,
    bw: BandwidthSet,
    spec: KernelSpec,
    pi_clip: float = DEFAULT_PI_CLIP,
    *,
    resistant_mode: str = "heteroscedastic",
    resistant_bandwidths=None,
    caches: Optional[ResidualCaches] = None,
) -> list:
    """Pointwise two-point estimates over a grid.

    Per-point failures are embedded as PointFailure records instead of
    aborting the run; the shared residual pass is computed once.
    """
    grid = _as_matrix(grid)
    if grid.shape[0] == 0:
        raise ValueError("evaluation grid is empty")
    out = _estimate_points(
        data, resistant, grid, bw, spec, pi_clip, resistant_mode, resistant_bandwidths, caches
    )
    return out.fits
