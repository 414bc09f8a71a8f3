"""Product kernels, bandwidth sets, and weighted local-linear least squares.

Every estimator in the package reduces to fits produced here: a plain
weighted local-linear regression (`local_linear_fit`) and a two-arm fit whose
mean gap is kept outside a squared-gap constraint (`constrained_group_fit`).
The constrained problem is solved in closed form: the unconstrained solution
is kept when feasible, otherwise the better of the two equality-constrained
KKT solutions is taken, which puts the solution exactly on the constraint
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientLocalData

# Univariate densities on [-1, 1] with their moment constants:
# sigma_k2 = int u^2 k(u) du, theta_k = int k(u)^2 du.
_FAMILIES = {
    "epanechnikov": {"sigma_k2": 1.0 / 5.0, "theta_k": 3.0 / 5.0},
    "biweight": {"sigma_k2": 1.0 / 7.0, "theta_k": 5.0 / 7.0},
    "triweight": {"sigma_k2": 1.0 / 9.0, "theta_k": 350.0 / 429.0},
}

# Plain solves are accepted while the normal-equations condition number keeps
# solve error (~eps * cond) below the 1e-8 weight-identity tolerance.
_MAX_PLAIN_COND = 1e8
_RIDGE_SCALE = 1e-8


def _k1(family: str, u: np.ndarray) -> np.ndarray:
    """Univariate kernel density, zero outside [-1, 1].

    All supported families are polynomials in 1 - u^2, so clamping that
    factor at zero realizes the compact support without branching.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    t = 1.0 - np.square(u)
    np.maximum(t, 0.0, out=t)
    if family == "epanechnikov":
        t *= 0.75
        return t
    if family == "biweight":
        np.square(t, out=t)
        t *= 15.0 / 16.0
        return t
    if family == "triweight":
        t **= 3
        t *= 35.0 / 32.0
        return t
    raise ValueError(f"unknown kernel family {family!r}")


@dataclass(frozen=True)
class KernelSpec:
    """A compactly supported symmetric product kernel.

    The d-variate kernel is the product of `family`'s univariate density
    applied coordinate-wise; it vanishes outside the box
    ``max_j |u_j| > support_radius``.
    """

    family: str = "epanechnikov"
    support_radius: float = 1.0

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.support_radius <= 0:
            raise ValueError("support_radius must be positive")

    def k(self, u) -> np.ndarray:
        """Univariate density evaluated elementwise."""
        return _k1(self.family, u)

    @property
    def sigma_k2(self) -> float:
        """Second moment of the univariate density."""
        return _FAMILIES[self.family]["sigma_k2"]

    @property
    def theta_k(self) -> float:
        """Integral of the squared univariate density."""
        return _FAMILIES[self.family]["theta_k"]

    def theta_K_d(self, d: int) -> float:
        """Integral of the squared d-variate product kernel."""
        return self.theta_k**d


def kernel_eval(spec: KernelSpec, u) -> float:
    """Product kernel K(u) = prod_j k(u_j) at a single d-vector."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(np.prod(spec.k(u)))


def _product_weights(spec: KernelSpec, D: np.ndarray, h: float) -> np.ndarray:
    """Product-kernel weights K(D/h) along the last axis, minimizing
    temporaries (all supported families are polynomials in 1 - u^2)."""
    t = np.square(D)
    t *= 1.0 / (h * h)
    np.subtract(1.0, t, out=t)
    np.maximum(t, 0.0, out=t)
    fam = spec.family
    if fam == "epanechnikov":
        t *= 0.75
    elif fam == "biweight":
        np.square(t, out=t)
        t *= 15.0 / 16.0
    else:  # triweight
        t **= 3
        t *= 35.0 / 32.0
    return t[..., 0] if t.shape[-1] == 1 else np.prod(t, axis=-1)


@dataclass(frozen=True)
class BandwidthSet:
    """Bandwidths for the estimation stages, all as scalar matrices h*I_d.

    h1: mean fit, h2: conditional-variance fit, h3: treated-arm fit,
    h4: control-arm fit, h5: propensity fit, h_v: moment plug-in fits.
    alpha2..alpha4 are the stage bandwidth ratio constants entering the
    asymptotic variance formulas; they default to 1 (equal bandwidths).
    """

    h1: float
    h2: float
    h3: float
    h4: float
    h5: float
    h_v: float = None  # type: ignore[assignment]  # defaults to h2
    alpha2: float = 1.0
    alpha3: float = 1.0
    alpha4: float = 1.0
    d: int = 1

    def __post_init__(self):
        if self.h_v is None:
            object.__setattr__(self, "h_v", self.h2)
        for name in ("h1", "h2", "h3", "h4", "h5", "h_v"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"bandwidth {name} must be positive, got {v}")
        for name in ("alpha2", "alpha3", "alpha4"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d < 1:
            raise ValueError("d must be a positive integer")

    def effective_h(self) -> float:
        """Normalizing bandwidth: h^d is the mean of |H_j| over stages 2-4."""
        hd = (self.h2**self.d + self.h3**self.d + self.h4**self.d) / 3.0
        return hd ** (1.0 / self.d)


@dataclass
class LocalFit:
    """Result of one weighted local-linear fit.

    `weights` are the linear-smoother weights w_i(x) so that the intercept
    equals sum_i w_i(x) y_i; they are zero outside the kernel support box.
    """

    intercept: float
    slope: np.ndarray
    weights: np.ndarray
    effective_n: int
    ridged: bool = False


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def kernel_weights(spec: KernelSpec, X, points, h: float) -> np.ndarray:
    """Kernel weights K((X_i - x)/h) for each evaluation point.

    Returns an (m, n) array for m points and n sample rows.
    """
    X = _as_matrix(X)
    P = _as_matrix(points)
    U = (X[None, :, :] - P[:, None, :]) / float(h)
    return np.prod(spec.k(U), axis=2)


@dataclass
class BatchLocalFit:
    """Vectorized local-linear fits at several points sharing one sample."""

    intercept: np.ndarray  # (m,)
    slope: np.ndarray  # (m, d)
    ok: np.ndarray  # (m,) bool
    effective_n: np.ndarray  # (m,) int
    ridged: np.ndarray  # (m,) bool
    normal_matrix: np.ndarray  # (m, d+1, d+1), the solved (possibly ridged) A


def batch_local_linear(
    X,
    y,
    mask,
    points,
    h: float,
    spec: KernelSpec,
    *,
    chunk: int = 512,
) -> BatchLocalFit:
    """Solve the weighted local-linear problem at many points at once.

    Failed points (fewer than d+1 in-support masked samples) are flagged in
    `ok` instead of raising; scalar wrappers turn the flag into
    InsufficientLocalData.
    """
    X = _as_matrix(X)
    P = _as_matrix(points)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    m = P.shape[0]
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=float)

    intercept = np.full(m, np.nan)
    slope = np.full((m, d), np.nan)
    ok = np.zeros(m, dtype=bool)
    ridged = np.zeros(m, dtype=bool)
    n_eff = np.zeros(m, dtype=int)
    normal = np.full((m, d + 1, d + 1), np.nan)

    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        D = X[None, :, :] - P[lo:hi, None, :]  # (mc, n, d)
        W = _product_weights(spec, D, h)
        W *= mask  # (mc, n)
        n_eff[lo:hi] = np.count_nonzero(W > 0, axis=1)
        usable = n_eff[lo:hi] >= d + 1

        # Normal equations assembled from weighted moments of the centered
        # design: A = [[S0, S1'], [S1, S2]], b = [b0, b1].
        mc = hi - lo
        WD = W[:, :, None] * D
        A = np.empty((mc, d + 1, d + 1))
        A[:, 0, 0] = W.sum(axis=1)
        S1 = WD.sum(axis=1)
        A[:, 0, 1:] = S1
        A[:, 1:, 0] = S1
        A[:, 1:, 1:] = np.einsum("mnd,mne->mde", WD, D)
        b = np.empty((mc, d + 1))
        b[:, 0] = W @ y
        b[:, 1:] = np.einsum("mnd,n->md", WD, y)

        sol, used_ridge, solvable = _solve_batch(A, b)
        good = usable & solvable
        sel = np.arange(lo, hi)
        intercept[sel[good]] = sol[good, 0]
        slope[sel[good]] = sol[good, 1:]
        ok[sel[good]] = True
        ridged[sel[good]] = used_ridge[good]
        ridge_amt = _ridge_amount(A)
        A_used = A + (used_ridge[:, None, None] * ridge_amt[:, None, None]) * np.eye(d + 1)
        normal[lo:hi] = A_used
    return BatchLocalFit(intercept, slope, ok, n_eff, ridged, normal)


def _ridge_amount(A: np.ndarray) -> np.ndarray:
    p = A.shape[-1]
    return _RIDGE_SCALE * np.einsum("...ii->...", A) / p


def _solve_batch(A: np.ndarray, b: np.ndarray):
    """Solve A theta = b per point, ridging ill-conditioned systems.

    Returns (solutions, ridged flags, solvable flags).
    """
    mc, p, _ = A.shape
    sol = np.full((mc, p), np.nan)
    used_ridge = np.zeros(mc, dtype=bool)
    solvable = np.zeros(mc, dtype=bool)

    s = np.linalg.svd(A, compute_uv=False)  # eigenvalues of symmetric PSD A
    smax, smin = s[:, 0], s[:, -1]
    well = (smin > 0) & (smax < _MAX_PLAIN_COND * smin)

    if np.any(well):
        sol[well] = np.linalg.solve(A[well], b[well][:, :, None])[:, :, 0]
        solvable[well] = True
    bad = ~well & (smax > 0)
    if np.any(bad):
        ridge = _ridge_amount(A[bad])
        A_r = A[bad] + ridge[:, None, None] * np.eye(p)
        sol[bad] = np.linalg.solve(A_r, b[bad][:, :, None])[:, :, 0]
        used_ridge[bad] = True
        solvable[bad] = True
    finite = np.all(np.isfinite(sol), axis=1)
    solvable &= finite
    return sol, used_ridge, solvable


def _smoother_weights(A: np.ndarray, GW: np.ndarray) -> np.ndarray:
    """First row of A^{-1} G' W: the effective linear-smoother weights."""
    p = A.shape[0]
    c = np.linalg.solve(A, np.eye(p)[0])
    return GW @ c


def local_linear_fit(X, y, mask, x, h: float, spec: KernelSpec) -> LocalFit:
    """Weighted local-linear regression of y on X at the point x.

    Minimizes sum_i mask_i (y_i - mu - zeta'(X_i - x))^2 K((X_i - x)/h) and
    returns the intercept as the point estimate together with the linear
    smoother weights. Raises InsufficientLocalData when fewer than d+1
    masked sample points carry kernel weight.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=float)
    if h <= 0:
        raise ValueError("bandwidth must be positive")

    D = X - x[None, :]
    w_kernel = np.prod(spec.k(D / h), axis=1) * mask
    eff = int(np.count_nonzero(w_kernel > 0))
    if eff < d + 1:
        raise InsufficientLocalData(
            f"{eff} effective points for a {d + 1}-parameter local fit at x={x}"
        )

    G = np.concatenate([np.ones((n, 1)), D], axis=1)
    GW = G * w_kernel[:, None]
    A = GW.T @ G
    b = GW.T @ y

    sol, used_ridge, solvable = _solve_batch(A[None], b[None])
    if not solvable[0]:
        raise InsufficientLocalData(f"degenerate local design at x={x}")
    A_used = A
    if used_ridge[0]:
        A_used = A + _ridge_amount(A[None])[0] * np.eye(d + 1)
    weights = _smoother_weights(A_used, GW)
    return LocalFit(
        intercept=float(sol[0, 0]),
        slope=sol[0, 1:].copy(),
        weights=weights,
        effective_n=eff,
        ridged=bool(used_ridge[0]),
    )


@dataclass
class ConstrainedGroupFit:
    """Two-arm local-linear fit with a squared mean-gap constraint."""

    mu0: float
    mu1: float
    zeta0: np.ndarray
    zeta1: np.ndarray
    beta_C: float
    beta_U: float
    boundary_flag: bool


def _arm_normal_system(X, y, arm_mask, x, h, spec, label):
    X = _as_matrix(X)
    n, d = X.shape
    D = X - np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    w = np.prod(spec.k(D / h), axis=1) * arm_mask
    eff = int(np.count_nonzero(w > 0))
    if eff < d + 1:
        raise InsufficientLocalData(
            f"{label} arm has {eff} effective points at x={x}; need {d + 1}"
        )
    G = np.concatenate([np.ones((n, 1)), D], axis=1)
    GW = G * w[:, None]
    A = GW.T @ G
    b = GW.T @ np.asarray(y, dtype=float)
    sol, used_ridge, solvable = _solve_batch(A[None], b[None])
    if not solvable[0]:
        raise InsufficientLocalData(f"degenerate {label}-arm design at x={x}")
    if used_ridge[0]:
        A = A + _ridge_amount(A[None])[0] * np.eye(d + 1)
    return A, sol[0], w, G


def constrained_group_fit(
    X, y, z, x, h3: float, h4: float, spec: KernelSpec, s_hat: float
) -> ConstrainedGroupFit:
    """Two-arm weighted local-linear fit subject to (mu1 - mu0)^2 >= s_hat.

    Both arms are solved unconstrained first; if the unconstrained mean gap
    already satisfies the constraint (always the case for s_hat <= 0), it is
    kept bit-for-bit. Otherwise the two equality-constrained problems
    mu1 - mu0 = +-sqrt(s_hat) are solved in closed form via their KKT systems
    and the one with the lower objective wins, placing the gap exactly on the
    boundary. Objective ties within 1e-12 resolve toward sign(beta_U), then +.
    """
    z = np.asarray(z, dtype=float)
    A1, th1, _, _ = _arm_normal_system(X, y, z, x, h3, spec, "treated")
    A0, th0, _, _ = _arm_normal_system(X, y, 1.0 - z, x, h4, spec, "control")
    beta_U = float(th1[0] - th0[0])

    if s_hat <= 0 or beta_U * beta_U >= s_hat:
        return ConstrainedGroupFit(
            mu0=float(th0[0]),
            mu1=float(th1[0]),
            zeta0=th0[1:].copy(),
            zeta1=th1[1:].copy(),
            beta_C=beta_U,
            beta_U=beta_U,
            boundary_flag=False,
        )

    # Boundary case. For the equality constraint mu1 - mu0 = c the increase
    # of the quadratic objective over its unconstrained minimum is
    # (beta_U - c)^2 / (g0 + g1) with g_z = [A_z^{-1}]_{00}.
    p = A0.shape[0]
    e1 = np.eye(p)[0]
    c0 = np.linalg.solve(A0, e1)
    c1 = np.linalg.solve(A1, e1)
    g0, g1 = float(c0[0]), float(c1[0])
    root = float(np.sqrt(s_hat))

    inc_plus = (beta_U - root) ** 2 / (g0 + g1)
    inc_minus = (beta_U + root) ** 2 / (g0 + g1)
    if inc_plus < inc_minus - 1e-12:
        c = root
    elif inc_minus < inc_plus - 1e-12:
        c = -root
    else:
        c = root if beta_U >= 0 else -root

    lam_half = (beta_U - c) / (g0 + g1)
    theta1 = th1 - lam_half * c1
    theta0 = th0 + lam_half * c0
    mu0 = float(theta0[0])
    return ConstrainedGroupFit(
        mu0=mu0,
        mu1=mu0 + c,  # pins the gap to the boundary exactly
        zeta0=theta0[1:].copy(),
        zeta1=theta1[1:].copy(),
        beta_C=c,
        beta_U=beta_U,
        boundary_flag=True,
    )


def group_objective(X, y, z, x, h3, h4, spec, mu0, zeta0, mu1, zeta1) -> float:
    """Two-arm weighted least-squares objective at the given coefficients."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    D = X - np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    w1 = np.prod(spec.k(D / h3), axis=1) * z
    w0 = np.prod(spec.k(D / h4), axis=1) * (1.0 - z)
    r1 = y - mu1 - D @ np.atleast_1d(zeta1)
    r0 = y - mu0 - D @ np.atleast_1d(zeta0)
    return float(np.sum(w1 * r1 * r1) + np.sum(w0 * r0 * r0))
