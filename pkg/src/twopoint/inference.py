"""Asymptotic variances and regime-switching confidence intervals.

The squared-bias estimate concentrates on a boundary at the no-hidden-bias
null, so interval construction is a two-regime procedure: a threshold test on
the squared bias picks between intervals centered at the two candidate
effects (interior regime) and a single fallback interval centered at the
unconstrained mean gap (boundary regime).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import (
    DegenerateVariance,
    EmptyNeighborhood,
    InvalidPropensity,
    ZeroDelta,
    ZeroDensity,
)
from .estimate import PointFailure, ResidualCaches, TwoPointFit, prepare_residual_caches
from .kernels import BandwidthSet, KernelSpec, batch_local_linear, _as_matrix
from .smoothers import Dataset, MomentEstimates, batch_kernel_density, batch_nw

_SCALE_FLOOR = 1e-6


@dataclass
class VarComponents:
    """Plug-in ingredients of the asymptotic variance formulas at one point."""

    nu0_sq: float
    nu1_sq: float
    lambda_sq: float
    eta0: float
    eta1: float
    f_hat: float
    pi_hat: float
    sigma2_hat: float
    beta_hat: float
    theta_K_d: float
    alpha2_d: float
    alpha3_d: float
    alpha4_d: float


@dataclass
class CiPair:
    """Confidence intervals for the two candidate effects.

    Interior regime: intervals centered at tau_minus and tau_plus with their
    own variances. Boundary regime: both intervals equal, centered at the
    unconstrained mean gap.
    """

    ci_minus: tuple
    ci_plus: tuple
    regime: str
    v_delta: float
    v_tau_minus: Optional[float]
    v_tau_plus: Optional[float]
    v_beta_U: Optional[float]
    alpha_level: float
    delta_exponent: float
    v_delta_clamped: bool = False


def _arm_bracket(c: VarComponents) -> float:
    return c.nu1_sq / (c.alpha3_d * c.pi_hat * c.f_hat) + c.nu0_sq / (
        c.alpha4_d * (1.0 - c.pi_hat) * c.f_hat
    )


def _cross_bracket(c: VarComponents) -> float:
    nu0 = np.sqrt(c.nu0_sq)
    nu1 = np.sqrt(c.nu1_sq)
    return nu0 * c.eta0 / np.sqrt(c.alpha2_d * c.alpha4_d) - nu1 * c.eta1 / np.sqrt(
        c.alpha2_d * c.alpha3_d
    )


def _check_point(c: VarComponents):
    if not (0.0 < c.pi_hat < 1.0):
        raise InvalidPropensity(f"propensity must lie in (0, 1), got {c.pi_hat}")
    if c.f_hat <= 0:
        raise ZeroDensity("density estimate is zero at the evaluation point")


def _v_delta_sq_raw(c: VarComponents) -> float:
    _check_point(c)
    pq = c.pi_hat * (1.0 - c.pi_hat)
    t1 = 4.0 * c.theta_K_d * c.beta_hat**2 * _arm_bracket(c)
    t2 = (4.0 * c.theta_K_d * c.beta_hat * c.sigma2_hat / (pq * c.f_hat)) * _cross_bracket(c)
    t3 = c.theta_K_d * c.sigma2_hat**2 * c.lambda_sq / (c.alpha2_d * pq**2 * c.f_hat)
    return t1 + t2 + t3


def v_delta_sq(c: VarComponents) -> float:
    """Asymptotic variance of the squared-bias estimate; negative totals
    (possible through the cross term in finite samples) clamp to zero."""
    return max(0.0, _v_delta_sq_raw(c))


def v_tau_sq(c: VarComponents, delta2: float, tau_pm: float) -> float:
    """Asymptotic variance of one candidate-effect estimate (interior regime,
    requires a strictly positive squared bias)."""
    if delta2 <= 0:
        raise ZeroDelta("candidate-effect variance needs delta2 > 0")
    _check_point(c)
    pq = c.pi_hat * (1.0 - c.pi_hat)
    t1 = c.theta_K_d * tau_pm**2 / delta2 * _arm_bracket(c)
    t2 = (c.theta_K_d * tau_pm * c.sigma2_hat / (pq * c.f_hat * delta2)) * _cross_bracket(c)
    t3 = c.theta_K_d * c.sigma2_hat**2 * c.lambda_sq / (
        4.0 * c.alpha2_d * delta2 * pq**2 * c.f_hat
    )
    return max(0.0, t1 + t2 + t3)


def v_beta_u_sq(c: VarComponents) -> float:
    """Asymptotic variance of the unconstrained mean-gap estimate."""
    _check_point(c)
    return c.theta_K_d * _arm_bracket(c)


def estimate_components(
    data: Dataset,
    x,
    bw: BandwidthSet,
    spec: KernelSpec,
    fits: ResidualCaches,
    *,
    moments: Optional[MomentEstimates] = None,
    beta_hat: Optional[float] = None,
    pi_clip: float = 0.05,
) -> VarComponents:
    """Plug-in variance components at one point from cached residual passes.

    Arm variances come from local-linear fits of squared own-arm residuals;
    the standardized fourth moment and the arm cross-moments come from
    kernel-weighted averages of residual products, backed out by the plug-in
    powers of the estimated scales (floored to avoid near-zero blowups).
    """
    out = components_grid(
        data,
        np.atleast_1d(np.asarray(x, dtype=float))[None, :],
        bw,
        spec,
        fits,
        moments_list=None if moments is None else [moments],
        betas=None if beta_hat is None else [beta_hat],
        pi_clip=pi_clip,
    )
    c = out[0]
    if isinstance(c, PointFailure):
        raise EmptyNeighborhood(f"[stage={c.stage}] {c.reason} at x={c.x}")
    return c


def components_grid(
    data: Dataset,
    points,
    bw: BandwidthSet,
    spec: KernelSpec,
    caches: ResidualCaches,
    *,
    moments_list=None,
    betas=None,
    pi_clip: float = 0.05,
) -> list:
    """Vectorized variance components over a grid; failures embedded."""
    if caches.e_arm is None:
        raise ValueError("caches must include arm residuals (need_arm=True)")
    P = _as_matrix(points)
    m = P.shape[0]
    d = data.d
    z = data.z

    e = np.where(caches.valid, caches.e, 0.0)
    e_arm = np.where(caches.arm_valid, caches.e_arm, 0.0)
    both = caches.valid & caches.arm_valid

    # Arm conditional variances: squared own-arm residuals smoothed within arm.
    arm_masks = {}
    nu_sq = {}
    nu_ok = {}
    for z_val, h_arm in ((1.0, bw.h3), (0.0, bw.h4)):
        mask = ((z == z_val) & caches.arm_valid).astype(float)
        arm_masks[z_val] = mask
        fit = batch_local_linear(data.x, e_arm**2, mask, P, h_arm, spec)
        nu_sq[z_val] = np.maximum(0.0, fit.intercept)
        nu_ok[z_val] = fit.ok

    # Moment plug-ins via kernel-weighted averages.
    e4, e4_ok = batch_nw(
        data.x, e**4, caches.valid.astype(float), P, bw.h_v, spec
    )
    cross = {}
    cross_ok = {}
    for z_val in (1.0, 0.0):
        mask = ((z == z_val) & both).astype(float)
        cross[z_val], cross_ok[z_val] = batch_nw(
            data.x, e**2 * e_arm, mask, P, bw.h_v, spec
        )

    if moments_list is None:
        f_hat = batch_kernel_density(data.x, P, bw.h2, spec)
        var_fit = batch_local_linear(
            data.x, e**2, caches.valid.astype(float), P, bw.h2, spec
        )
        sigma2 = np.maximum(0.0, var_fit.intercept)
        sigma2_ok = var_fit.ok
        pi_raw, pi_ok = batch_nw(data.x, z, None, P, bw.h5, spec)
        pi_hat = np.clip(pi_raw, pi_clip, 1.0 - pi_clip)
    else:
        f_hat = np.array([mo.f_hat for mo in moments_list])
        sigma2 = np.array([mo.sigma2_hat for mo in moments_list])
        sigma2_ok = np.ones(m, dtype=bool)
        pi_hat = np.array([mo.pi_hat for mo in moments_list])
        pi_ok = np.ones(m, dtype=bool)
    if betas is None:
        arm1 = batch_local_linear(data.x, data.y, z, P, bw.h3, spec)
        arm0 = batch_local_linear(data.x, data.y, 1.0 - z, P, bw.h4, spec)
        beta = arm1.intercept - arm0.intercept
        beta_ok = arm1.ok & arm0.ok
    else:
        beta = np.asarray(betas, dtype=float)
        beta_ok = np.ones(m, dtype=bool)

    scale = max(float(np.std(data.y)), 1e-12)
    floor = _SCALE_FLOOR * scale
    theta = spec.theta_K_d(d)
    a2d, a3d, a4d = bw.alpha2**d, bw.alpha3**d, bw.alpha4**d

    out: list = []
    for j in range(m):
        if not (nu_ok[1.0][j] and nu_ok[0.0][j]):
            out.append(PointFailure(P[j].copy(), "arm_variance", "insufficient local data"))
            continue
        if not (e4_ok[j] and cross_ok[1.0][j] and cross_ok[0.0][j]):
            out.append(PointFailure(P[j].copy(), "moment_plugin", "empty neighborhood"))
            continue
        if not (sigma2_ok[j] and pi_ok[j] and beta_ok[j]):
            out.append(PointFailure(P[j].copy(), "base_moments", "insufficient local data"))
            continue
        s2 = float(sigma2[j])
        if s2 < 1e-12:
            raise DegenerateVariance(
                f"conditional variance {s2} too small to standardize at x={P[j]}"
            )
        s2_g = max(s2, floor**2)
        lam = max(0.0, float(e4[j]) - s2 * s2) / (s2_g * s2_g)
        eta = {}
        for z_val in (1.0, 0.0):
            nu = max(float(np.sqrt(nu_sq[z_val][j])), floor)
            eta[z_val] = float(cross[z_val][j]) / (s2_g * nu)
        out.append(
            VarComponents(
                nu0_sq=float(nu_sq[0.0][j]),
                nu1_sq=float(nu_sq[1.0][j]),
                lambda_sq=float(lam),
                eta0=eta[0.0],
                eta1=eta[1.0],
                f_hat=float(f_hat[j]),
                pi_hat=float(pi_hat[j]),
                sigma2_hat=s2,
                beta_hat=float(beta[j]),
                theta_K_d=theta,
                alpha2_d=a2d,
                alpha3_d=a3d,
                alpha4_d=a4d,
            )
        )
    return out


def confidence_intervals(
    fit: TwoPointFit,
    c: VarComponents,
    n: int,
    h_eff: float,
    alpha_level: float = 0.05,
    delta_exponent: float = 1.0 / 3.0,
) -> CiPair:
    """Regime-switching confidence intervals for the two candidate effects.

    Interior regime when the squared bias clears the threshold
    v_delta / (n h^d)^{(1 - delta_exponent)/2}; otherwise both intervals fall
    back to the unconstrained mean gap with its own variance. A clamped
    (negative) v_delta estimate forces the boundary regime.
    """
    if not (0.0 < delta_exponent < 1.0):
        raise ValueError("delta_exponent must lie in (0, 1)")
    if not (0.0 < alpha_level < 1.0):
        raise ValueError("alpha_level must lie in (0, 1)")
    dim = len(np.atleast_1d(fit.x))
    nhd = n * h_eff**dim
    if nhd <= 1:
        raise ValueError("n * h^d must exceed 1 for the normalizer")

    raw = _v_delta_sq_raw(c)
    clamped = raw < 0
    v_delta = float(np.sqrt(max(0.0, raw)))
    zq = float(norm.ppf(1.0 - alpha_level / 2.0))
    rate = float(np.sqrt(nhd))

    threshold = v_delta / nhd ** (0.5 * (1.0 - delta_exponent))
    if not clamped and fit.delta2 > threshold:
        v_tm = float(np.sqrt(v_tau_sq(c, fit.delta2, fit.tau_minus)))
        v_tp = float(np.sqrt(v_tau_sq(c, fit.delta2, fit.tau_plus)))
        return CiPair(
            ci_minus=(fit.tau_minus - zq * v_tm / rate, fit.tau_minus + zq * v_tm / rate),
            ci_plus=(fit.tau_plus - zq * v_tp / rate, fit.tau_plus + zq * v_tp / rate),
            regime="interior",
            v_delta=v_delta,
            v_tau_minus=v_tm,
            v_tau_plus=v_tp,
            v_beta_U=None,
            alpha_level=alpha_level,
            delta_exponent=delta_exponent,
        )
    v_bu = float(np.sqrt(v_beta_u_sq(c)))
    half = zq * v_bu / rate
    ci = (fit.beta_U - half, fit.beta_U + half)
    return CiPair(
        ci_minus=ci,
        ci_plus=ci,
        regime="boundary",
        v_delta=v_delta,
        v_tau_minus=None,
        v_tau_plus=None,
        v_beta_U=v_bu,
        alpha_level=alpha_level,
        delta_exponent=delta_exponent,
        v_delta_clamped=clamped,
    )


def infer_grid(
    data: Dataset,
    fits: list,
    bw: BandwidthSet,
    spec: KernelSpec,
    caches: ResidualCaches,
    *,
    alpha_level: float = 0.05,
    delta_exponent: float = 1.0 / 3.0,
    pi_clip: float = 0.05,
) -> list:
    """Confidence intervals for every successful grid fit.

    Returns a list aligned with `fits`; entries are CiPair, the original
    PointFailure, or a new PointFailure when component estimation fails.
    """
    good = [(i, f) for i, f in enumerate(fits) if isinstance(f, TwoPointFit)]
    out: list = [None] * len(fits)
    for i, f in enumerate(fits):
        if isinstance(f, PointFailure):
            out[i] = f
    if good:
        pts = np.vstack([f.x for _, f in good])
        comps = components_grid(
            data,
            pts,
            bw,
            spec,
            caches,
            moments_list=[f.moments for _, f in good],
            betas=[f.beta_C for _, f in good],
            pi_clip=pi_clip,
        )
        h_eff = bw.effective_h()
        for (i, f), comp in zip(good, comps):
            if isinstance(comp, PointFailure):
                out[i] = comp
                continue
            out[i] = confidence_intervals(
                f, comp, data.n, h_eff, alpha_level, delta_exponent
            )
    return out
