"""Point estimators for the granular panel model.

The primary estimator minimizes the continuously-updated GMM objective over
the feasible coefficient set with a multi-start simplex search refined by a
projected quasi-Newton polish. Alongside it: a restricted (single shared
coefficient) variant for the homogeneity test, a classic two-step GMM
refinement, the granular instrumental-variables regression in its equal /
oracle / feasible weighting flavors, the closed-form probability limit of
the equal-weighted GIV regression under coefficient heterogeneity, and the
per-unit OLS slope that illustrates the simultaneity bias.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings

import numpy as np
import scipy.optimize

from .exceptions import (
    ConfigurationError,
    DegenerateRegressorError,
    EstimationError,
    SingularEstimandError,
    ValidationError,
    WeakInstrumentError,
)
from .model import (
    PanelData,
    ParameterSpace,
    _as_float_vector,
    moment_function,
)

logger = logging.getLogger(__name__)

GIV_WEIGHT_MODES = ("equal", "oracle", "feasible")

#: Relative threshold on the first-stage slope below which the granular
#: instrument is declared uninformative.
WEAK_INSTRUMENT_REL_TOL = 1e-12

#: Condition-number ceiling beyond which the two-step weight falls back to a
#: ridge-regularized inverse.
TWO_STEP_COND_LIMIT = 1e12

# The simplex stage only has to land in the right basin; the polish stages
# do the sharpening, so its termination tolerances stay coarse.
_SIMPLEX_FATOL = 1e-4
_SIMPLEX_XATOL = 3e-2
_POLISH_MAX_ITERS = 120


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    """Settings for the constrained multi-start search.

    ``starts`` counts total start points: the zero vector, a homogeneous
    pooled-slope start (shrunk inside the feasible set if needed), and
    uniform draws over the box intersected with the aggregate cap for the
    remainder. ``max_iters`` is the function-evaluation budget of the
    simplex stage and the iteration cap of each polish stage. ``f_tol`` is
    the agreement window when counting how many starts reached the best
    objective, and the threshold that triggers a restart of a lagging
    start. ``x_tol`` is the coordinate tolerance of the one-dimensional
    search used by the restricted estimator.
    """

    starts: int = 8
    max_iters: int = 500
    f_tol: float = 1e-9
    x_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.starts < 1:
            raise ConfigurationError(f"need at least one start, got {self.starts}")
        if self.max_iters < 10:
            raise ConfigurationError(f"max_iters too small: {self.max_iters}")
        if not (self.f_tol > 0.0 and self.x_tol > 0.0):
            raise ConfigurationError("tolerances must be positive")
        if not (0 <= int(self.seed) < 2**63):
            raise ConfigurationError(f"seed must be a nonnegative 63-bit integer, got {self.seed!r}")


@dataclasses.dataclass(frozen=True)
class EstimationResult:
    """Output of any estimator in this module.

    ``phi_hat`` has one entry per unit for the GMM methods and a single
    entry for the aggregate-coefficient IV methods. ``avar`` holds the
    asymptotic variance of sqrt(T) * (phi_hat - truth) when available
    (filled by the inference layer for the GMM methods, by the HC0 formula
    for GIV). ``n_starts_agreeing`` is only meaningful for the multi-start
    search and is None elsewhere.
    """

    method: str
    phi_hat: np.ndarray
    objective_value: float | None
    converged: bool
    n_starts_agreeing: int | None = None
    avar: np.ndarray | None = None
    metadata: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        phi = np.asarray(self.phi_hat, dtype=np.float64)
        object.__setattr__(self, "phi_hat", phi)
        if self.objective_value is not None and not self.objective_value >= 0.0:
            raise ValidationError(
                f"GMM objective must be nonnegative, got {self.objective_value!r}"
            )


def _start_points(
    panel: PanelData, space: ParameterSpace, config: OptimizerConfig
) -> np.ndarray:
    """Deterministic start set: zeros, pooled slope, then uniform draws."""
    n = panel.n_units
    starts = [np.zeros(n)]
    if config.starts >= 2:
        r_s = panel.aggregate()
        r_e = panel.outcomes @ np.full(n, 1.0 / n)
        den = float(r_s @ r_s)
        slope = float(r_e @ r_s) / den if den > 0.0 else 0.0
        cap = space.aggregate_cap
        if slope > cap - space.margin:
            # Shrink the homogeneous start inside the cap; phi_S equals the
            # shared slope here because sizes sum to one.
            slope = cap - space.margin
        slope = float(np.clip(slope, space.lower, space.upper))
        starts.append(np.full(n, slope))
    if config.starts >= 3:
        rng = np.random.Generator(
            np.random.Philox(key=np.array([config.seed, 0x0C7A], dtype=np.uint64))
        )
        sizes = panel.sizes
        while len(starts) < config.starts:
            for _ in range(1000):
                cand = rng.uniform(space.lower, space.upper, size=n)
                if float(cand @ sizes) <= space.aggregate_cap:
                    break
            else:
                cand = space.project(cand, sizes)
            starts.append(cand)
    return np.array(starts[: config.starts])


def _multistart_minimize(
    value_fn,
    value_and_grad_fn,
    starts: np.ndarray,
    sizes: np.ndarray,
    space: ParameterSpace,
    config: OptimizerConfig,
) -> tuple[np.ndarray, float, int, bool, list[float]]:
    """Constrained minimization from several starts.

    Each start runs three stages: an adaptive simplex search on the
    objective penalized outside the feasible set, a projected quasi-Newton
    (SLSQP) polish with the supplied fixed-weight gradient, and a final
    SLSQP sharpening on the exact objective with internal finite
    differences. A stage's output is kept only when it lowers the exact
    objective. A start whose final value lags the best by more than f_tol
    reruns the three stages once from its own endpoint; reinitializing the
    simplex there usually escapes a shallow shelf. Candidates are ranked
    by objective value with ties broken by Euclidean norm and then
    lexicographically.

    Returns (best phi, best value, number of starts within f_tol of the
    best, convergence flag, per-start final values).
    """
    n = starts.shape[1]
    lower, upper, cap = space.lower, space.upper, space.aggregate_cap

    def penalized(phi: np.ndarray) -> float:
        if (
            np.all(phi >= lower)
            and np.all(phi <= upper)
            and float(phi @ sizes) <= cap
        ):
            return value_fn(phi)
        anchor = space.project(phi, sizes)
        gap = phi - anchor
        return value_fn(anchor) + float(gap @ gap)

    constraints = [
        {
            "type": "ineq",
            "fun": lambda phi: cap - float(phi @ sizes),
            "jac": lambda phi: -sizes,
        }
    ]
    bounds = [(lower, upper)] * n
    polish_iters = min(_POLISH_MAX_ITERS, config.max_iters)

    def one_path(x0: np.ndarray) -> tuple[np.ndarray, float, bool]:
        nm = scipy.optimize.minimize(
            penalized,
            x0,
            method="Nelder-Mead",
            options={
                "maxfev": config.max_iters,
                "fatol": _SIMPLEX_FATOL,
                "xatol": _SIMPLEX_XATOL,
                "adaptive": True,
            },
        )
        x = space.project(nm.x, sizes)
        val = value_fn(x)
        converged = bool(nm.success)
        with warnings.catch_warnings():
            # scipy's SLSQP warns when a trial step leaves the box before
            # being clipped back; the clipped step is what gets used.
            warnings.simplefilter("ignore", RuntimeWarning)
            if value_and_grad_fn is not None:
                polish = scipy.optimize.minimize(
                    lambda phi: value_and_grad_fn(phi)[0],
                    x,
                    jac=lambda phi: value_and_grad_fn(phi)[1],
                    method="SLSQP",
                    bounds=bounds,
                    constraints=constraints,
                    options={"maxiter": polish_iters, "ftol": 1e-12},
                )
                px = space.project(polish.x, sizes)
                pv = value_fn(px)
                if pv <= val:
                    x, val = px, pv
                    converged = converged or bool(polish.success)
            sharpen = scipy.optimize.minimize(
                value_fn,
                x,
                method="SLSQP",
                bounds=bounds,
                constraints=constraints,
                options={"maxiter": polish_iters, "ftol": 1e-14},
            )
            px = space.project(sharpen.x, sizes)
            pv = value_fn(px)
            if pv <= val:
                x, val = px, pv
                converged = converged or bool(sharpen.success)
        return x, val, converged

    paths = [one_path(x0) for x0 in starts]
    best_val = min(p[1] for p in paths)
    candidates: list[tuple[float, float, tuple[float, ...], np.ndarray, bool]] = []
    for x, val, converged in paths:
        if val > best_val + config.f_tol:
            x2, val2, conv2 = one_path(x)
            if val2 <= val:
                x, val, converged = x2, val2, converged or conv2
        candidates.append((val, float(x @ x), tuple(x), x, converged))

    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    best = candidates[0]
    values = [c[0] for c in candidates]
    agreeing = sum(1 for v in values if v <= best[0] + config.f_tol)
    converged_any = any(c[4] for c in candidates)
    return best[3], best[0], agreeing, converged_any, values


def rgiv_estimate(
    panel: PanelData,
    space: ParameterSpace | None = None,
    config: OptimizerConfig | None = None,
) -> EstimationResult:
    """Continuously-updated GMM estimate of the full coefficient vector.

    Minimizes the pairwise-orthogonality objective over the box intersected
    with the aggregate cap. The returned point is always feasible.

    Parameters
    ----------
    panel : PanelData
    space : ParameterSpace, optional
    config : OptimizerConfig, optional

    Returns
    -------
    EstimationResult
        ``converged`` is False only when every start exhausted its
        iteration budget; the best point found is still returned.
    """
    space = space or ParameterSpace()
    config = config or OptimizerConfig()
    kernel = panel.cross_moments()
    starts = _start_points(panel, space, config)
    phi, value, agreeing, converged, start_values = _multistart_minimize(
        kernel.objective,
        kernel.cue_value_and_grad,
        starts,
        panel.sizes,
        space,
        config,
    )
    return EstimationResult(
        method="rgiv",
        phi_hat=phi,
        objective_value=value,
        converged=converged,
        n_starts_agreeing=agreeing,
        metadata={
            "optimizer": "nelder-mead+slsqp",
            "start_objectives": start_values,
            "aggregate": float(phi @ panel.sizes),
        },
    )


def rgiv_restricted_estimate(
    panel: PanelData,
    space: ParameterSpace | None = None,
    config: OptimizerConfig | None = None,
) -> EstimationResult:
    """CUE estimate restricted to a single shared coefficient.

    Scans the feasible interval on a coarse grid and refines the best
    bracket with a bounded one-dimensional search. Because sizes sum to
    one, the aggregate cap restricts the shared coefficient directly.
    """
    space = space or ParameterSpace()
    config = config or OptimizerConfig()
    kernel = panel.cross_moments()
    n = panel.n_units
    ones = np.ones(n)

    def value(c: float) -> float:
        return kernel.objective(c * ones)

    lo = space.lower
    hi = min(space.upper, space.aggregate_cap)
    if not lo < hi:
        raise ConfigurationError("restricted feasible interval is empty")
    grid = np.linspace(lo, hi, 241)
    grid_values = [value(c) for c in grid]
    k = int(np.argmin(grid_values))
    step = grid[1] - grid[0]
    bracket_lo = max(lo, grid[k] - step)
    bracket_hi = min(hi, grid[k] + step)
    res = scipy.optimize.minimize_scalar(
        value,
        bounds=(bracket_lo, bracket_hi),
        method="bounded",
        options={"xatol": config.x_tol, "maxiter": max(500, config.max_iters)},
    )
    best_c, best_val = float(res.x), float(res.fun)
    if grid_values[k] < best_val:
        best_c, best_val = float(grid[k]), float(grid_values[k])
    return EstimationResult(
        method="rgiv-restricted",
        phi_hat=np.full(n, best_c),
        objective_value=best_val,
        converged=bool(res.success),
        metadata={"shared_coefficient": best_c},
    )


def two_step_estimate(
    panel: PanelData,
    space: ParameterSpace | None = None,
    config: OptimizerConfig | None = None,
) -> EstimationResult:
    """Classic two-step GMM refinement of the continuously-updated estimate.

    The first step is :func:`rgiv_estimate`. Its moment matrix yields the
    full second-moment weight, inverted directly or through a ridge
    fallback when its condition number exceeds ``TWO_STEP_COND_LIMIT``;
    the second step minimizes the resulting fixed-weight objective from
    the first-step point.
    """
    space = space or ParameterSpace()
    config = config or OptimizerConfig()
    step1 = rgiv_estimate(panel, space, config)
    kernel = panel.cross_moments()
    t = panel.n_periods

    moments = moment_function(panel, step1.phi_hat)
    sigma = (moments.T @ moments) / t
    sigma = 0.5 * (sigma + sigma.T)
    ridge = 0.0
    cond = np.linalg.cond(sigma)
    if not np.isfinite(cond) or cond > TWO_STEP_COND_LIMIT:
        ridge = 1e-10 * float(np.trace(sigma)) / sigma.shape[0]
        if ridge <= 0.0:
            ridge = np.finfo(np.float64).tiny
        logger.warning(
            "moment covariance condition number %.3g exceeds %.1g; "
            "adding ridge %.3g before inversion",
            cond,
            TWO_STEP_COND_LIMIT,
            ridge,
        )
        sigma = sigma + ridge * np.eye(sigma.shape[0])
    weight = np.linalg.inv(sigma)
    weight = 0.5 * (weight + weight.T)

    cap = space.aggregate_cap
    sizes = panel.sizes
    res = scipy.optimize.minimize(
        lambda phi: kernel.full_weight_value_and_grad(phi, weight)[0],
        step1.phi_hat,
        jac=lambda phi: kernel.full_weight_value_and_grad(phi, weight)[1],
        method="SLSQP",
        bounds=[(space.lower, space.upper)] * panel.n_units,
        constraints=[
            {
                "type": "ineq",
                "fun": lambda phi: cap - float(phi @ sizes),
                "jac": lambda phi: -sizes,
            }
        ],
        options={"maxiter": min(500, config.max_iters), "ftol": 1e-14},
    )
    start_val = kernel.full_weight_value_and_grad(step1.phi_hat, weight)[0]
    phi2 = space.project(res.x, sizes)
    val2 = kernel.full_weight_value_and_grad(phi2, weight)[0]
    if val2 > start_val:
        # The polish never worsens the criterion it minimizes; fall back to
        # the first-step point if the line search stalled.
        phi2, val2 = step1.phi_hat, start_val
    return EstimationResult(
        method="rgiv-two-step",
        phi_hat=phi2,
        objective_value=float(val2),
        converged=bool(res.success) and step1.converged,
        metadata={
            "step1_objective": step1.objective_value,
            "step1_phi": step1.phi_hat.tolist(),
            "ridge": ridge,
            "fixed_weight_objective_at_step1": float(start_val),
        },
    )


def giv_estimate(
    panel: PanelData,
    weights: str = "feasible",
    sigma2=None,
) -> EstimationResult:
    """Granular IV regression of a weighted outcome on the aggregate.

    The instrument is the gap between the size-weighted and the
    precision-weighted cross-sections, ``z_t = r_St - r_Gt``. The slope
    ``sum_t z_t r_Gt / sum_t z_t r_St`` estimates a single aggregate
    coefficient; its standard error uses the heteroskedasticity-robust
    (HC0) IV sandwich, recorded in the metadata.

    Parameters
    ----------
    panel : PanelData
    weights : {"equal", "oracle", "feasible"}
        equal: 1/n each. oracle: proportional to inverse true shock
        variances (requires ``sigma2``). feasible: proportional to inverse
        sample outcome variances.
    sigma2 : array_like, optional
        True shock variances, used only by the oracle mode.

    Raises
    ------
    WeakInstrumentError
        When the first-stage slope is numerically zero, e.g. equal sizes
        with homogeneous parameters, where the instrument vanishes.
    """
    if weights not in GIV_WEIGHT_MODES:
        raise ConfigurationError(
            f"unknown GIV weight mode {weights!r}; expected one of {GIV_WEIGHT_MODES}"
        )
    n = panel.n_units
    t = panel.n_periods
    if weights == "equal":
        w = np.full(n, 1.0 / n)
    elif weights == "oracle":
        if sigma2 is None:
            raise ConfigurationError("oracle weights need the true shock variances")
        sig = _as_float_vector(sigma2, n, "sigma2")
        if np.any(sig <= 0.0):
            raise ValidationError("sigma2 must be strictly positive")
        w = 1.0 / sig
    else:
        if t < 2:
            raise ValidationError("feasible weights need at least two periods")
        sample_var = np.var(panel.outcomes, axis=0, ddof=1)
        zero = np.flatnonzero(sample_var <= 0.0)
        if zero.size:
            raise DegenerateRegressorError(
                f"unit {zero[0]} has zero sample variance; feasible weights undefined"
            )
        w = 1.0 / sample_var
    w = w / np.sum(w)

    r_s = panel.aggregate()
    r_g = panel.outcomes @ w
    z = r_s - r_g
    scale = float(r_s @ r_s)
    if scale <= 0.0:
        raise DegenerateRegressorError("aggregate outcome has no variation")
    denom = float(z @ r_s)
    if abs(denom) < WEAK_INSTRUMENT_REL_TOL * scale:
        raise WeakInstrumentError(
            "instrument is uncorrelated with the aggregate "
            f"(first-stage slope {denom / scale:.3e}); "
            "equal sizes with homogeneous parameters leave no granular variation"
        )
    phi_hat = float(z @ r_g) / denom
    resid = r_g - phi_hat * r_s
    se = float(np.sqrt(np.sum((z * resid) ** 2))) / abs(denom)
    return EstimationResult(
        method=f"giv-{weights}",
        phi_hat=np.array([phi_hat]),
        objective_value=None,
        converged=True,
        avar=np.array([[se * se * t]]),
        metadata={"se": se, "se_formula": "hc0-iv", "weights_mode": weights},
    )


def giv_estimand_closed_form(phi, sizes) -> float:
    """Probability limit of the equal-weighted GIV slope.

    Under coefficient heterogeneity the equal-weighted GIV regression does
    not estimate any average of the unit coefficients; its limit is

        phi_E + (phi_S - phi_E)/n
              / ( (phi_S - phi_E)/(1 - phi_S) * sum(S^2) - 1/n + sum(S^2) ).

    Raises
    ------
    SingularEstimandError
        When ``phi_S = 1`` (undefined multiplier) or the denominator above
        vanishes.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    phi = _as_float_vector(phi, sizes.shape[0], "phi")
    n = sizes.shape[0]
    phi_s = float(phi @ sizes)
    phi_e = float(np.mean(phi))
    if phi_s >= 1.0:
        raise SingularEstimandError(f"aggregate coefficient {phi_s!r} >= 1")
    ssq = float(sizes @ sizes)
    denom = (phi_s - phi_e) / (1.0 - phi_s) * ssq - 1.0 / n + ssq
    if abs(denom) < 1e-12 * max(ssq, 1.0 / n):
        raise SingularEstimandError("estimand denominator vanishes")
    return phi_e + (phi_s - phi_e) / n / denom


def ols_estimate(panel: PanelData, unit: int) -> float:
    """OLS slope of one unit's outcome on the aggregate outcome.

    Included as a diagnostic: simultaneity pushes this slope above the
    unit's true coefficient because the unit's own shock enters the
    aggregate.
    """
    n = panel.n_units
    if not (isinstance(unit, (int, np.integer)) and 0 <= unit < n):
        raise ValidationError(f"unit must be an integer in [0, {n}), got {unit!r}")
    r_s = panel.aggregate()
    den = float(r_s @ r_s)
    if den <= 0.0:
        raise DegenerateRegressorError("aggregate outcome has no variation")
    return float(r_s @ panel.outcomes[:, unit]) / den
