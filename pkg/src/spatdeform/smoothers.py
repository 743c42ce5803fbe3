"""Coordinate smoothers.

Two ways to turn noisy target coordinates into a smooth deformation:
the classical thin-plate spline (used as the comparison baseline) and a
tensor-product B-spline least-squares fit with explicit non-folding
corner constraints.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import brentq, minimize
from scipy.spatial.distance import cdist

from .basis import KnotGrid, design_matrix
from .deformation import (
    CoefPair,
    _corner_tables,
    _corner_values_and_jac,
    coef_to_vec,
    corner_values,
    default_epsilon,
    identity_coef,
    vec_to_coef,
)
from .errors import FitError, InfeasibilityError

__all__ = [
    "TpsModel",
    "fit_tps",
    "tps_effective_dof",
    "tps_lambda_for_dof",
    "make_tps_smoother",
    "unconstrained_bspline_fit",
    "fit_bspline_constrained",
    "make_bspline_smoother",
]


# ---------------------------------------------------------------------------
# thin-plate splines


def _tps_kernel(r: np.ndarray) -> np.ndarray:
    """r^2 log r with the removable singularity at 0 filled in."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(r > 0, r * r * np.log(np.where(r > 0, r, 1.0)), 0.0)
    return out


@dataclass(frozen=True)
class TpsModel:
    """Fitted thin-plate spline map (affine part + radial coefficients)."""

    centers: np.ndarray
    alpha: np.ndarray  # (3, 2): intercept, x1, x2 per output dimension
    theta: np.ndarray  # (n, 2) radial coefficients per output dimension
    lam: float

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        k = _tps_kernel(cdist(pts, self.centers))
        p = np.column_stack([np.ones(len(pts)), pts])
        return p @ self.alpha + k @ self.theta


def _tps_null_blocks(sites: np.ndarray):
    """Kernel matrix, affine design and its orthonormal null basis.

    Writing the radial coefficients as theta = Z w enforces the side
    conditions P' theta = 0 exactly and turns the smoothing system into
    the SPD problem (Z'KZ + n lam I) w = Z' y, well conditioned for any
    lam >= 0.
    """
    n = sites.shape[0]
    r = cdist(sites, sites)
    if np.min(r + np.diag(np.full(n, np.inf))) == 0.0:
        raise FitError("thin-plate spline sites must be distinct")
    k = _tps_kernel(r)
    p = np.column_stack([np.ones(n), sites])
    sv = np.linalg.svd(p, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise FitError("thin-plate spline needs non-collinear sites")
    q, _ = np.linalg.qr(p, mode="complete")
    z = q[:, 3:]
    return k, p, z, z.T @ k @ z


def fit_tps(sites, targets, lam: float) -> TpsModel:
    """Solve the thin-plate smoothing system for a 2-output map.

    lam = 0 interpolates; large lam approaches the affine least-squares
    fit.  Collinear or duplicated sites make the system singular and
    raise FitError.
    """
    sites = np.asarray(sites, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n = sites.shape[0]
    if n < 3:
        raise FitError(f"thin-plate spline needs >= 3 sites, got {n}")
    if lam < 0:
        raise ValueError(f"smoothing parameter must be >= 0, got {lam}")
    if targets.shape != (n, 2):
        raise ValueError(f"targets must be ({n}, 2), got {targets.shape}")
    k, p, z, kz = _tps_null_blocks(sites)
    m = kz + n * lam * np.eye(n - 3)
    try:
        w = scipy.linalg.solve(m, z.T @ targets, assume_a="pos")
    except scipy.linalg.LinAlgError as e:
        raise FitError(f"singular thin-plate system (duplicate sites?): {e}") from None
    theta = z @ w
    alpha, *_ = np.linalg.lstsq(p, targets - k @ theta, rcond=None)
    return TpsModel(centers=sites, alpha=alpha, theta=theta, lam=lam)


def _tps_spectrum(sites) -> np.ndarray:
    _, _, _, kz = _tps_null_blocks(np.asarray(sites, dtype=float))
    return np.clip(np.linalg.eigvalsh(0.5 * (kz + kz.T)), 0.0, None)


def tps_effective_dof(sites, lam: float) -> float:
    """Trace of the smoother matrix mapping targets to fitted values.

    Equals 3 (the unpenalized affine part) plus sum mu_i/(mu_i + n lam)
    over the spectrum of the projected kernel, so it decreases from n
    at lam = 0 toward 3.
    """
    sites = np.asarray(sites, dtype=float)
    mu = _tps_spectrum(sites)
    n_lam = sites.shape[0] * lam
    if n_lam == 0.0:
        return float(sites.shape[0])
    return 3.0 + float(np.sum(mu / (mu + n_lam)))


def tps_lambda_for_dof(sites, dof: float, lo: float = 1e-14, hi: float = 1e14) -> float:
    """Smoothing parameter whose effective dof matches the target
    (monotone bisection on log lambda)."""
    sites = np.asarray(sites, dtype=float)
    n = sites.shape[0]
    if not 3.0 < dof < n:
        raise ValueError(f"target dof must lie in (3, {n}), got {dof}")
    mu = _tps_spectrum(sites)

    def gap(loglam):
        return 3.0 + np.sum(mu / (mu + n * 10.0**loglam)) - dof

    return 10.0 ** brentq(gap, np.log10(lo), np.log10(hi), xtol=1e-13)


def make_tps_smoother(lam: float):
    """Coordinate smoother: fit a TPS to the targets, return its fitted
    values at the sites."""

    def smoother(sites, targets):
        return fit_tps(sites, targets, lam)(sites)

    return smoother


# ---------------------------------------------------------------------------
# constrained tensor-product B-spline fit


def unconstrained_bspline_fit(grid: KnotGrid, sites, targets, ridge: float = 0.0) -> CoefPair:
    """Plain (ridge-regularized) least-squares coefficient fit."""
    w = design_matrix(grid, sites)
    m = grid.k1 * grid.k2
    g = (w.T @ w).toarray() + ridge * np.eye(m)
    rhs = w.T @ np.asarray(targets, dtype=float)
    try:
        sol = scipy.linalg.solve(g, rhs, assume_a="pos")
    except scipy.linalg.LinAlgError as e:
        raise FitError(
            f"rank-deficient design (K1*K2={m} coefficients, {w.shape[0]} sites); "
            f"use a ridge term: {e}"
        ) from None
    th1 = sol[:, 0].reshape((grid.k1, grid.k2), order="F")
    th2 = sol[:, 1].reshape((grid.k1, grid.k2), order="F")
    return CoefPair(th1, th2)


def _affine_lift(grid: KnotGrid, beta: np.ndarray) -> CoefPair:
    """Coefficients reproducing the affine map x -> beta[0] + beta[1:] x."""
    k1pos = grid.knot_positions(1)
    k2pos = grid.knot_positions(2)
    g1, g2 = np.meshgrid(k1pos, k2pos, indexing="ij")
    th1 = beta[0, 0] + beta[1, 0] * g1 + beta[2, 0] * g2
    th2 = beta[0, 1] + beta[1, 1] * g1 + beta[2, 1] * g2
    return CoefPair(th1, th2)


def _feasible_start(grid, sites, targets, epsilon) -> CoefPair:
    """A coefficient pair clearing every corner constraint.

    Tries the affine least-squares fit of the targets, then a
    similarity (proper rotation + scale) fit, then the identity map
    recentered on the targets.  Affine maps have constant |J|, so
    feasibility is a single determinant check.
    """
    sites = np.asarray(sites, dtype=float)
    targets = np.asarray(targets, dtype=float)
    candidates = []
    p = np.column_stack([np.ones(len(sites)), sites])
    beta, *_ = np.linalg.lstsq(p, targets, rcond=None)
    candidates.append(_affine_lift(grid, beta))

    from .scaling import procrustes

    try:
        t = procrustes(sites, targets, scale=True, allow_reflection=False)
        beta_sim = np.vstack([t.shift, t.scale * t.rotation.T])
        candidates.append(_affine_lift(grid, beta_sim))
    except FitError:
        pass

    ident = identity_coef(grid)
    center_shift = targets.mean(axis=0) - sites.mean(axis=0)
    candidates.append(CoefPair(ident.theta1 + center_shift[0], ident.theta2 + center_shift[1]))

    for cand in candidates:
        if corner_values(grid, cand).min() >= epsilon:
            return cand
    raise InfeasibilityError(
        f"no feasible starting coefficients: every affine candidate has "
        f"Jacobian below the margin {epsilon}"
    )


def fit_bspline_constrained(
    grid: KnotGrid,
    sites,
    targets,
    epsilon: float | None = None,
    ridge: float | None = None,
    start: CoefPair | None = None,
    max_iter: int = 300,
) -> CoefPair:
    """Least-squares coefficient fit subject to non-folding constraints.

    Minimizes the squared residual of the mapped sites against the
    targets (plus an optional ridge term) subject to every corner
    Jacobian being at least ``epsilon``.  When the unconstrained
    optimum already satisfies the constraints it is returned directly;
    otherwise an SLSQP pass refines a feasible starting point, and the
    best feasible iterate is kept.  The returned pair is validated.

    ``ridge`` defaults to 1e-8 n when the coefficients outnumber the
    sites (rank deficiency), else 0.
    """
    sites = np.asarray(sites, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n = sites.shape[0]
    if targets.shape != (n, 2):
        raise ValueError(f"targets must be ({n}, 2), got {targets.shape}")
    if epsilon is None:
        epsilon = default_epsilon(grid)
    m = grid.k1 * grid.k2
    if ridge is None:
        ridge = 1e-8 * n if m > n else 0.0

    unconstrained = unconstrained_bspline_fit(grid, sites, targets, ridge=ridge)
    if corner_values(grid, unconstrained).min() >= epsilon:
        return CoefPair(unconstrained.theta1, unconstrained.theta2, validated=True)

    w = design_matrix(grid, sites)
    gmat = (w.T @ w).toarray() + ridge * np.eye(m)
    cvec = np.asarray(w.T @ targets)
    y_norm2 = float(np.sum(targets**2))
    tables = _corner_tables(grid)

    def objective(z):
        v = z.reshape(2, m)
        quad = np.einsum("im,mk,ik->", v, gmat, v)
        lin = 2.0 * float(np.sum(v * cvec.T))
        return quad - lin + y_norm2

    def objective_grad(z):
        v = z.reshape(2, m)
        return (2.0 * (v @ gmat) - 2.0 * cvec.T).ravel()

    feasible_start = start if (
        start is not None and corner_values(grid, start).min() >= epsilon
    ) else None
    if feasible_start is None:
        feasible_start = _feasible_start(grid, sites, targets, epsilon)
    z_start = coef_to_vec(feasible_start)

    # warm start: pull the unconstrained optimum toward the feasible
    # start until the constraints clear the margin
    z_unc = coef_to_vec(unconstrained)
    z0 = z_start
    for t in np.concatenate([[0.0], np.geomspace(1e-4, 1.0, 30)]):
        z_try = (1.0 - t) * z_unc + t * z_start
        if _corner_values_and_jac(grid, z_try, tables, want_jac=False)[0].min() >= epsilon:
            z0 = z_try
            break

    best = {"z": z_start, "f": objective(z_start)}

    def constraint_fun(z):
        vals, _ = _corner_values_and_jac(grid, z, tables, want_jac=False)
        if vals.min() >= epsilon - 1e-9:
            f = objective(z)
            if f < best["f"]:
                best["z"] = z.copy()
                best["f"] = f
        return vals - epsilon

    def constraint_jac(z):
        _, jac = _corner_values_and_jac(grid, z, tables, want_jac=True)
        return jac

    res = minimize(
        objective,
        z0,
        jac=objective_grad,
        method="SLSQP",
        constraints=[{"type": "ineq", "fun": constraint_fun, "jac": constraint_jac}],
        options={"maxiter": max_iter, "ftol": 1e-12},
    )
    if not res.success and "Iteration limit" in str(res.message):
        warnings.warn(
            f"constrained fit stopped at the iteration limit ({max_iter}); "
            "returning the best feasible iterate",
            RuntimeWarning,
            stacklevel=2,
        )

    candidates = [best["z"], z_start]
    z_res = np.asarray(res.x, dtype=float)
    vals, _ = _corner_values_and_jac(grid, z_res, tables, want_jac=False)
    if vals.min() >= epsilon - 1e-9:
        candidates.append(z_res)
    else:
        # restore feasibility by blending toward the feasible start
        for t in np.geomspace(1e-6, 1.0, 40):
            z_try = (1.0 - t) * z_res + t * z_start
            v, _ = _corner_values_and_jac(grid, z_try, tables, want_jac=False)
            if v.min() >= epsilon:
                candidates.append(z_try)
                break

    z_best = min(candidates, key=objective)
    return vec_to_coef(grid, z_best, validated=True)


def make_bspline_smoother(grid: KnotGrid, epsilon: float | None = None,
                          ridge: float | None = None):
    """Coordinate smoother backed by the constrained B-spline fit."""

    def smoother(sites, targets):
        coef = fit_bspline_constrained(grid, sites, targets, epsilon=epsilon, ridge=ridge)
        w = design_matrix(grid, sites)
        return np.column_stack([
            w @ coef.theta1.ravel(order="F"),
            w @ coef.theta2.ravel(order="F"),
        ])

    return smoother
