"""Alternating estimation of covariance parameters and deformation.

One outer iteration holds the deformation fixed while maximizing the
Gaussian replicate likelihood over the covariance parameters, then
holds those fixed while refitting the coefficient matrices to
coordinates re-embedded from the dispersions, and finally removes the
gauge freedom (shift/rotation/scale of the deformed plane, with the
range co-scaled) by aligning the fitted coordinates to the sites.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist

from .basis import KnotGrid, design_matrix
from .covariance import (
    CovParams,
    DispersionMatrix,
    VariogramModel,
    covariance_matrix,
    fit_variogram,
    sample_dispersions,
    variogram_inverse,
)
from .deformation import (
    CoefPair,
    DeformationMap,
    _corner_tables,
    _corner_values_and_jac,
    coef_to_vec,
    corner_values,
    default_epsilon,
    transform_coef,
    vec_to_coef,
)
from .errors import (
    DataError,
    FitError,
    InfeasibilityError,
    NumericalError,
    SpatdeformError,
)
from .scaling import (
    ProcrustesTransform,
    classical_mds,
    configuration_stress,
    procrustes,
    sg_initialize,
)
from .smoothers import fit_bspline_constrained, make_bspline_smoother

__all__ = [
    "Dataset",
    "DeformModel",
    "FitConfig",
    "FitDiagnostics",
    "replicate_loglik",
    "loglik",
    "step_cov",
    "step_coords",
    "refine_coords_ml",
    "normalize_gauge",
    "fit",
]


@dataclass(frozen=True)
class Dataset:
    """Complete-case site coordinates with temporal replicates."""

    sites: np.ndarray
    replicates: np.ndarray
    ids: tuple[str, ...] = ()
    times: tuple[str, ...] = ()
    dropped_ids: tuple[str, ...] = ()

    def __post_init__(self):
        sites = np.asarray(self.sites, dtype=float)
        z = np.asarray(self.replicates, dtype=float)
        if sites.ndim != 2 or sites.shape[1] != 2:
            raise DataError(f"sites must be (n, 2), got {sites.shape}")
        n = sites.shape[0]
        if z.shape[:1] != (n,) or z.ndim != 2:
            raise DataError(f"replicates must be ({n}, T), got {z.shape}")
        if n < 4:
            raise DataError(f"need at least 4 sites, got {n}")
        if z.shape[1] < 2:
            raise DataError(f"need at least 2 replicates, got {z.shape[1]}")
        if not (np.all(np.isfinite(sites)) and np.all(np.isfinite(z))):
            raise DataError("sites and replicates must be finite (complete cases only)")
        ids = tuple(self.ids) if self.ids else tuple(f"s{i:03d}" for i in range(n))
        if len(ids) != n or len(set(ids)) != n:
            raise DataError("ids must be unique and match the number of sites")
        times = tuple(self.times) if self.times else tuple(
            f"t{j:03d}" for j in range(z.shape[1])
        )
        if len(times) != z.shape[1] or len(set(times)) != z.shape[1]:
            raise DataError("time labels must be unique and match the replicate count")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "replicates", z)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "times", times)

    @property
    def n(self) -> int:
        return self.sites.shape[0]

    @property
    def t(self) -> int:
        return self.replicates.shape[1]

    def site_means(self) -> np.ndarray:
        return self.replicates.mean(axis=1)

    def demeaned(self) -> np.ndarray:
        return self.replicates - self.site_means()[:, None]


@dataclass
class FitDiagnostics:
    """Raw per-iteration record of the outer loop (no smoothing)."""

    loglik: list[float] = field(default_factory=list)
    margins: list[float] = field(default_factory=list)
    init_stress: float = float("nan")
    iterations: int = 0
    converged: bool = False
    messages: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class DeformModel:
    """Fitted deformation, covariance parameters and metadata."""

    grid: KnotGrid
    coef: CoefPair
    cov: CovParams
    mean: float
    diagnostics: FitDiagnostics

    def __post_init__(self):
        if not self.coef.validated:
            raise ValueError("DeformModel requires validated coefficients")

    def mapping(self) -> DeformationMap:
        return DeformationMap(self.grid, self.coef)


@dataclass(frozen=True)
class FitConfig:
    """Knobs of the alternating fit."""

    k1: int
    k2: int
    epsilon: float | None = None
    tol: float = 1e-6
    max_outer: int = 10
    ridge: float | None = None
    seed: int = 0
    sg_max_iter: int = 10
    sg_tol: float = 1e-6
    n_bins: int = 15


def replicate_loglik(replicates, cov_matrix) -> float:
    """Zero-mean Gaussian log-likelihood of i.i.d. replicate columns.

    Per-site sample means are removed first (the model mean is profiled
    out), so the quadratic form uses the (T-1)/T-scaled sample
    covariance.  Computed through one Cholesky factorization.
    """
    z = np.asarray(replicates, dtype=float)
    z = np.atleast_2d(z)
    zc = z - z.mean(axis=1, keepdims=True)
    n, t = zc.shape
    try:
        factor = cho_factor(cov_matrix, lower=True)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"covariance matrix is not positive definite: {e}") from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    quad = float(np.sum(zc * cho_solve(factor, zc)))
    return -0.5 * (n * t * np.log(2.0 * np.pi) + t * logdet + quad)


def loglik(dataset: Dataset, mapping, cov: CovParams) -> float:
    """Replicate log-likelihood of a dataset under a deformation model."""
    c = covariance_matrix(dataset.sites, mapping, cov)
    return replicate_loglik(dataset.replicates, c)


def _loglik_from_distances(zc: np.ndarray, d: np.ndarray, cov: CovParams) -> float:
    c = cov.sigma2 * np.exp(-d / cov.phi)
    c[np.diag_indices_from(c)] += cov.nugget
    return replicate_loglik(zc, c)


def step_cov(dataset: Dataset, mapping, cov_init: CovParams) -> CovParams:
    """Maximize the replicate likelihood over (sigma2, phi, nugget).

    Box-constrained local search from the incumbent and from a moment
    start; never returns parameters with lower likelihood than
    ``cov_init``.
    """
    y = np.asarray(mapping(dataset.sites), dtype=float)
    d = cdist(y, y)
    diam = float(d.max())
    if diam <= 0:
        raise FitError("mapped sites are coincident; cannot estimate a range")
    z = dataset.replicates
    v = float(np.mean(np.var(z, axis=1, ddof=1)))
    if v <= 0:
        raise FitError("replicates are constant; cannot estimate a variance")
    bounds = [
        (1e-6 * v, 1e3 * v),
        (1e-4 * diam, 10.0 * diam),
        (0.0, 1e3 * v),
    ]

    def objective(p):
        try:
            return -_loglik_from_distances(z, d, CovParams(*p))
        except (NumericalError, ValueError):
            return 1e300

    def clipped(cov):
        p = np.array([cov.sigma2, cov.phi, cov.nugget])
        return np.clip(p, [b[0] for b in bounds], [b[1] for b in bounds])

    starts = [clipped(cov_init), np.array([0.5 * v, 0.25 * diam, 0.5 * v])]
    f_init = objective(clipped(cov_init))
    candidates = [(f_init, clipped(cov_init))]
    for x0 in starts:
        res = minimize(objective, x0, method="L-BFGS-B", bounds=bounds)
        candidates.append((res.fun, res.x))
    fbest, pbest = min(candidates, key=lambda c: c[0])
    if not np.isfinite(fbest):
        raise NumericalError("likelihood is not finite anywhere in the search box")
    if fbest >= f_init and not np.allclose(pbest, clipped(cov_init)):
        warnings.warn(
            "covariance step could not improve on the incumbent parameters",
            RuntimeWarning,
            stacklevel=2,
        )
    return CovParams(sigma2=float(pbest[0]), phi=float(pbest[1]), nugget=float(max(pbest[2], 0.0)))


def _variogram_from_cov(cov: CovParams) -> VariogramModel:
    # dispersions estimate the full variogram 2*gamma, hence the factor 2
    return VariogramModel(nugget=2.0 * cov.nugget, psill=2.0 * cov.sigma2, range_=cov.phi)


def step_coords(
    dataset: Dataset,
    cov: CovParams,
    grid: KnotGrid,
    epsilon: float,
    ridge: float | None = None,
    prev_coef: CoefPair | None = None,
    dispersions: DispersionMatrix | None = None,
) -> CoefPair:
    """Refit the coefficients to coordinates re-embedded from dispersions.

    Dispersions are inverted through the variogram implied by ``cov``,
    embedded by classical scaling, rigidly aligned to the current fitted
    coordinates, and fitted under the non-folding constraints.
    """
    if dispersions is None:
        dispersions = sample_dispersions(dataset.replicates)
    h = variogram_inverse(_variogram_from_cov(cov), dispersions.values)
    np.fill_diagonal(h, 0.0)
    target = classical_mds(h).points
    if prev_coef is not None:
        w = design_matrix(grid, dataset.sites)
        fitted = np.column_stack([
            w @ prev_coef.theta1.ravel(order="F"),
            w @ prev_coef.theta2.ravel(order="F"),
        ])
        align = procrustes(target, fitted, scale=False, allow_reflection=True)
    else:
        align = procrustes(target, dataset.sites, scale=False, allow_reflection=True)
    target = align.apply(target)
    start = prev_coef if (
        prev_coef is not None and corner_values(grid, prev_coef).min() >= epsilon
    ) else None
    return fit_bspline_constrained(
        grid, dataset.sites, target, epsilon=epsilon, ridge=ridge, start=start
    )


def refine_coords_ml(
    dataset: Dataset,
    cov: CovParams,
    grid: KnotGrid,
    coef: CoefPair,
    epsilon: float,
    max_iter: int = 150,
) -> CoefPair:
    """Ascend the replicate likelihood over the coefficients.

    The coordinate surrogate (dispersion re-embedding + least squares)
    provides warm starts, but the quantity the alternation ultimately
    tracks is the likelihood, so each coordinate block finishes by
    maximizing it directly over both coefficient matrices under the
    non-folding corner constraints (SLSQP with the analytic gradient).
    Returns the best feasible coefficients found, never worse than the
    input.
    """
    zc = dataset.demeaned()
    n, t = zc.shape
    w = design_matrix(grid, dataset.sites).toarray()
    m = grid.k1 * grid.k2
    tables = _corner_tables(grid)

    def negloglik_and_grad(z):
        y = np.column_stack([w @ z[:m], w @ z[m:]])
        d = cdist(y, y)
        expo = cov.sigma2 * np.exp(-d / cov.phi)
        c = expo.copy()
        c[np.diag_indices_from(c)] += cov.nugget
        try:
            factor = cho_factor(c, lower=True)
        except np.linalg.LinAlgError:
            return 1e300, np.zeros(2 * m)
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        cinv_z = cho_solve(factor, zc)
        ll = -0.5 * (n * t * np.log(2.0 * np.pi) + t * logdet + float(np.sum(zc * cinv_z)))
        cinv = cho_solve(factor, np.eye(n))
        # d ll / dC, then chain through C = sigma2 exp(-D/phi) and
        # D_ij = |y_i - y_j|
        dldc = 0.5 * (cinv_z @ cinv_z.T - t * cinv)
        dldd = -(1.0 / cov.phi) * dldc * expo
        np.fill_diagonal(dldd, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(d > 0, 2.0 * dldd / np.where(d > 0, d, 1.0), 0.0)
        grad_y = ratio.sum(axis=1)[:, None] * y - ratio @ y
        grad_z = np.concatenate([w.T @ grad_y[:, 0], w.T @ grad_y[:, 1]])
        return -ll, -grad_z

    z0 = coef_to_vec(coef)
    best = {"z": z0.copy(), "f": negloglik_and_grad(z0)[0]}

    def constraint_fun(z):
        vals, _ = _corner_values_and_jac(grid, z, tables, want_jac=False)
        if vals.min() >= epsilon - 1e-9:
            f = negloglik_and_grad(z)[0]
            if f < best["f"]:
                best["z"] = z.copy()
                best["f"] = f
        return vals - epsilon

    def constraint_jac(z):
        return _corner_values_and_jac(grid, z, tables, want_jac=True)[1]

    res = minimize(
        negloglik_and_grad,
        z0,
        jac=True,
        method="SLSQP",
        constraints=[{"type": "ineq", "fun": constraint_fun, "jac": constraint_jac}],
        options={"maxiter": max_iter, "ftol": 1e-10},
    )
    z_res = np.asarray(res.x, dtype=float)
    vals, _ = _corner_values_and_jac(grid, z_res, tables, want_jac=False)
    if vals.min() >= epsilon - 1e-9 and negloglik_and_grad(z_res)[0] < best["f"]:
        best = {"z": z_res, "f": negloglik_and_grad(z_res)[0]}
    return vec_to_coef(grid, best["z"], validated=True)


def normalize_gauge(dmap: DeformationMap, sites) -> tuple[DeformationMap, ProcrustesTransform]:
    """Remove the gauge freedom by full Procrustes onto the sites.

    Applies the proper rotation, shift and positive scale that give the
    fitted coordinates the sites' centroid and RMS spread.  The caller
    must co-scale the range parameter by the returned scale to keep the
    covariance unchanged.
    """
    fitted = dmap(np.asarray(sites, dtype=float))
    t = procrustes(fitted, sites, scale=True, allow_reflection=False)
    coef = transform_coef(dmap.coef, t.rotation, t.shift, t.scale)
    return DeformationMap(dmap.grid, coef), t


def _grid_from_sites(sites: np.ndarray, k1: int, k2: int) -> KnotGrid:
    lo = sites.min(axis=0)
    hi = sites.max(axis=0)
    if not (lo[0] < hi[0] and lo[1] < hi[1]):
        raise DataError("sites are degenerate (no spatial extent on some axis)")
    return KnotGrid(lo[0], hi[0], lo[1], hi[1], k1, k2)


def _initial_cov(dataset: Dataset, fitted: np.ndarray,
                 dispersions: DispersionMatrix, n_bins: int) -> CovParams:
    v = float(np.mean(np.var(dataset.replicates, axis=1, ddof=1)))
    diam = float(pdist(fitted).max())
    try:
        g = fit_variogram(pdist(fitted), dispersions.upper(), n_bins=n_bins)
        return CovParams(
            sigma2=max(0.5 * g.psill, 1e-4 * v),
            phi=min(max(g.range_, 1e-4 * diam), 10.0 * diam),
            nugget=max(0.5 * g.nugget, 0.0),
        )
    except FitError:
        return CovParams(sigma2=0.5 * v, phi=0.25 * diam, nugget=0.5 * v)


def fit(dataset: Dataset, config: FitConfig) -> DeformModel:
    """Full alternating fit on a dataset.

    Initializes the deformed coordinates with the dispersion-driven
    coordinate-update loop (B-spline smoother), then alternates the
    covariance step, the coordinate step and gauge normalization until
    the relative log-likelihood change drops below ``tol`` or
    ``max_outer`` is reached.  Raises FitError carrying the iteration
    index (and the best model so far, when one exists) on failure.
    """
    grid = _grid_from_sites(dataset.sites, config.k1, config.k2)
    epsilon = config.epsilon if config.epsilon is not None else default_epsilon(grid)
    diag = FitDiagnostics()
    d2 = sample_dispersions(dataset.replicates)
    mean = float(dataset.site_means().mean())

    smoother = make_bspline_smoother(grid, epsilon=epsilon, ridge=config.ridge)
    try:
        init_config = sg_initialize(
            d2, dataset.sites, smoother,
            max_iter=config.sg_max_iter, tol=config.sg_tol, n_bins=config.n_bins,
        )
        diag.init_stress = configuration_stress(d2, init_config)
        coef = fit_bspline_constrained(
            grid, dataset.sites, init_config.points, epsilon=epsilon, ridge=config.ridge
        )
    except InfeasibilityError:
        raise
    except SpatdeformError as e:
        raise FitError(f"initialization failed: {e}") from e

    w = design_matrix(grid, dataset.sites)

    def fitted_coords(c):
        return np.column_stack([
            w @ c.theta1.ravel(order="F"),
            w @ c.theta2.ravel(order="F"),
        ])

    cov = _initial_cov(dataset, fitted_coords(coef), d2, config.n_bins)
    prev_ll = loglik(dataset, DeformationMap(grid, coef), cov)
    best: tuple[float, CoefPair, CovParams] | None = None

    for it in range(1, config.max_outer + 1):
        try:
            cov = step_cov(dataset, DeformationMap(grid, coef), cov)
            surrogate = step_coords(
                dataset, cov, grid, epsilon,
                ridge=config.ridge, prev_coef=coef, dispersions=d2,
            )
            # the coordinate block tracks the likelihood: polish the
            # better of the surrogate refit and the incumbent
            warm = max(
                (surrogate, coef),
                key=lambda c: loglik(dataset, DeformationMap(grid, c), cov),
            )
            coef = refine_coords_ml(dataset, cov, grid, warm, epsilon)
            dmap, gauge = normalize_gauge(DeformationMap(grid, coef), dataset.sites)
            coef = dmap.coef
            cov = CovParams(cov.sigma2, cov.phi * gauge.scale, cov.nugget)
            ll = loglik(dataset, dmap, cov)
        except InfeasibilityError:
            raise
        except SpatdeformError as e:
            err = FitError(f"outer iteration {it}: {e}")
            if best is not None:
                err.best_model = DeformModel(
                    grid, best[1], best[2], mean, diag
                )  # type: ignore[attr-defined]
            raise err from e
        diag.loglik.append(ll)
        diag.margins.append(float(corner_values(grid, coef).min()))
        diag.iterations = it
        if best is None or ll > best[0]:
            best = (ll, coef, cov)
        if abs(ll - prev_ll) <= config.tol * (1.0 + abs(prev_ll)):
            diag.converged = True
            break
        prev_ll = ll

    return DeformModel(grid=grid, coef=coef, cov=cov, mean=mean, diagnostics=diag)
