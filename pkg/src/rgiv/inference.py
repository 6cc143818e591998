"""Asymptotic inference for the continuously-updated GMM estimator.

The estimator's asymptotic variance uses the standard sandwich with the
diagonal continuously-updated weight, the full moment second-moment matrix,
and the analytic Jacobian, all evaluated at the estimate. Confidence
intervals for linear aggregates of the coefficients follow by the delta
method. Two specification tests share the weight estimated at the
unrestricted optimum: the overidentification statistic (scaled objective at
the estimate) and the criterion-difference test of coefficient homogeneity.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

from .estimators import EstimationResult
from .exceptions import (
    NotOveridentifiedError,
    OptimizerInconsistencyError,
    RankDeficiencyError,
    ValidationError,
)
from .model import (
    PanelData,
    _as_float_vector,
    _floored_inverse,
    analytic_jacobian,
    gmm_objective,
    moment_function,
    n_moments,
)
from .stats import chi2_sf, norm_ppf

#: Condition-number ceiling for the Jacobian quadratic form.
RANK_COND_LIMIT = 1e12

#: Criterion differences below this are treated as exact ties; further below
#: -1e-8 they draw a warning, and below -1e-8 * T they are an error.
CLIP_WARN_TOL = -1e-8


@dataclasses.dataclass(frozen=True)
class ConfidenceInterval:
    """Two-sided interval at a given confidence level."""

    lower: float
    upper: float
    level: float

    def __post_init__(self) -> None:
        if not (0.0 < self.level < 1.0):
            raise ValidationError(f"level must lie strictly in (0, 1), got {self.level!r}")
        if not self.lower <= self.upper:
            raise ValidationError(
                f"interval bounds are reversed: [{self.lower!r}, {self.upper!r}]"
            )

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclasses.dataclass(frozen=True)
class TestResult:
    """Outcome of a chi-square specification test."""

    method: str
    statistic: float
    dof: int
    p_value: float

    def __post_init__(self) -> None:
        if self.statistic < 0.0:
            raise ValidationError(f"statistic must be nonnegative, got {self.statistic!r}")
        if self.dof < 1:
            raise ValidationError(f"dof must be positive, got {self.dof!r}")
        if not (0.0 <= self.p_value <= 1.0):
            raise ValidationError(f"p-value outside [0, 1]: {self.p_value!r}")


def sandwich_avar(jacobian: np.ndarray, weight: np.ndarray, moment_cov: np.ndarray) -> np.ndarray:
    """(G'WG)^-1 G'W Sigma W G (G'WG)^-1, symmetrized.

    Collapses to (G' Sigma^-1 G)^-1 when the weight equals the inverse of
    the moment covariance.

    Raises
    ------
    RankDeficiencyError
        When G'WG has condition number above ``RANK_COND_LIMIT``; the
        message names the unit dominating the deficient direction.
    """
    jacobian = np.asarray(jacobian, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    moment_cov = np.asarray(moment_cov, dtype=np.float64)
    wg = weight @ jacobian
    bread = jacobian.T @ wg
    bread = 0.5 * (bread + bread.T)
    eigvals, eigvecs = np.linalg.eigh(bread)
    small = float(np.min(np.abs(eigvals)))
    large = float(np.max(np.abs(eigvals)))
    if small <= 0.0 or large / small > RANK_COND_LIMIT:
        direction = eigvecs[:, int(np.argmin(np.abs(eigvals)))]
        unit = int(np.argmax(np.abs(direction)))
        raise RankDeficiencyError(
            f"Jacobian quadratic form is rank deficient along a direction "
            f"dominated by unit {unit} (condition number {large / max(small, 5e-324):.3g})"
        )
    meat = wg.T @ moment_cov @ wg
    avar = np.linalg.solve(bread, np.linalg.solve(bread, meat).T)
    return 0.5 * (avar + avar.T)


def rgiv_avar(panel: PanelData, phi_hat) -> np.ndarray:
    """Plug-in asymptotic variance of sqrt(T) * (phi_hat - truth).

    All three ingredients are evaluated at ``phi_hat``: the diagonal
    continuously-updated weight, the sample second-moment matrix of the
    pairwise moments, and the analytic Jacobian.

    Returns
    -------
    ndarray, shape (n, n), symmetric.
    """
    phi = _as_float_vector(phi_hat, panel.n_units, "phi_hat")
    moments = moment_function(panel, phi)
    den = np.mean(np.square(moments), axis=0)
    w, _ = _floored_inverse(den)
    sigma = (moments.T @ moments) / panel.n_periods
    sigma = 0.5 * (sigma + sigma.T)
    jac = analytic_jacobian(panel, phi)
    return sandwich_avar(jac, np.diag(w), sigma)


def aggregate_ci(phi_hat, avar, weights, level: float, n_periods: int) -> ConfidenceInterval:
    """Delta-method interval for a linear aggregate w'phi.

    The variance of the aggregate estimate is ``w' (avar / T) w``; tiny
    negative values from roundoff are clipped to zero, anything below
    -1e-12 is rejected.

    Parameters
    ----------
    phi_hat : ndarray, shape (n,)
    avar : ndarray, shape (n, n)
        Asymptotic variance of sqrt(T) * (phi_hat - truth).
    weights : ndarray, shape (n,)
        Aggregation weights (unit sizes for the size-weighted coefficient,
        1/n for the equal-weighted one, a basis vector for a single unit).
    level : float
    n_periods : int
        Sample length T used for the finite-sample scaling.
    """
    phi = np.asarray(phi_hat, dtype=np.float64)
    w = _as_float_vector(weights, phi.shape[0], "weights")
    avar = np.asarray(avar, dtype=np.float64)
    if avar.shape != (phi.shape[0], phi.shape[0]):
        raise ValidationError(
            f"avar must be ({phi.shape[0]}, {phi.shape[0]}), got {avar.shape}"
        )
    if not (0.0 < level < 1.0):
        raise ValidationError(f"level must lie strictly in (0, 1), got {level!r}")
    if n_periods < 1:
        raise ValidationError(f"n_periods must be positive, got {n_periods!r}")
    point = float(w @ phi)
    variance = float(w @ avar @ w) / n_periods
    if variance < -1e-12:
        raise ValidationError(f"aggregate variance is negative: {variance!r}")
    half = norm_ppf(0.5 * (1.0 + level)) * np.sqrt(max(variance, 0.0))
    return ConfidenceInterval(point - half, point + half, level)


def j_test(panel: PanelData, phi_hat) -> TestResult:
    """Overidentification test: T times the objective at the estimate.

    The statistic is asymptotically chi-square with (number of pairs minus
    number of units) degrees of freedom. By construction the statistic
    divided by T equals the objective bit for bit.
    """
    n = panel.n_units
    dof = n_moments(n) - n
    if dof < 1:
        raise NotOveridentifiedError(
            f"{n_moments(n)} moments for {n} parameters leave no overidentifying restrictions"
        )
    statistic = panel.n_periods * gmm_objective(panel, phi_hat)
    return TestResult("j", statistic, dof, chi2_sf(statistic, dof))


def homogeneity_test(
    panel: PanelData,
    unrestricted: EstimationResult,
    restricted: EstimationResult,
) -> TestResult:
    """Criterion-difference test of a single shared coefficient.

    Both criterion values use the diagonal weight estimated at the
    unrestricted optimum, so the statistic is T times the difference of one
    fixed quadratic form at two points. Re-evaluating the weight at the
    restricted point would let the very moments the restriction violates
    inflate their own variance estimates and shrink the gap, costing power
    against heterogeneous alternatives. Small negative differences are
    clipped at zero, with a warning below ``CLIP_WARN_TOL``; differences
    below ``CLIP_WARN_TOL * T`` mean the unrestricted search did not come
    close to minimizing and raise an error.
    """
    t = panel.n_periods
    moments = moment_function(panel, unrestricted.phi_hat)
    weight, _ = _floored_inverse(np.mean(np.square(moments), axis=0))
    g_restricted = np.mean(moment_function(panel, restricted.phi_hat), axis=0)
    g_unrestricted = np.mean(moments, axis=0)
    q_restricted = float(weight @ np.square(g_restricted))
    q_unrestricted = float(weight @ np.square(g_unrestricted))
    statistic = t * (q_restricted - q_unrestricted)
    if statistic < CLIP_WARN_TOL * t:
        raise OptimizerInconsistencyError(
            f"restricted objective beats unrestricted by {-statistic / t:.3e}; "
            "unrestricted search failed to minimize"
        )
    if statistic < 0.0:
        if statistic < CLIP_WARN_TOL:
            warnings.warn(
                f"clipping negative criterion difference {statistic:.3e} to zero",
                RuntimeWarning,
                stacklevel=2,
            )
        statistic = 0.0
    dof = panel.n_units - 1
    return TestResult("homogeneity", statistic, dof, chi2_sf(statistic, dof))
