"""Model core for granular panels with a common endogenous aggregate.

The model is

    r_it = phi_i * r_St + u_it,        r_St = sum_i S_i * r_it,

where ``r_it`` are outcomes for ``n`` units over ``T`` periods, ``S_i`` are
positive unit sizes summing to one, and the idiosyncratic shocks ``u_it`` are
mutually independent across units. Because the aggregate is itself a size-
weighted sum of outcomes, solving the system gives the multiplier identity
``r_St = u_St / (1 - phi_S)`` with ``phi_S = sum_i S_i * phi_i < 1``.

Identification comes from pairwise orthogonality of the shocks: at the true
coefficient vector, every product ``u_it * u_jt`` (i < j) has mean zero. The
moment function stacks those products, and the continuously-updated GMM
objective weights their sample means by the inverse of their own sample
second moments (a diagonal weight, re-evaluated at every trial point).

Everything downstream (estimators, inference, simulation) builds on the
operations in this module.
"""

from __future__ import annotations

import dataclasses
import warnings

import numpy as np

from .exceptions import DegenerateDataWarning, DimensionError, ValidationError

#: Relative floor applied to the diagonal CUE weight denominators. A moment
#: column that is identically zero would otherwise divide by zero.
WEIGHT_FLOOR_REL = 1e-300

#: Tolerance on |sum(sizes) - 1| accepted by PanelData.
SIZE_SUM_TOL = 1e-10


def moment_pairs(n: int) -> list[tuple[int, int]]:
    """Return the frozen moment ordering: pairs (i, j), i < j, lexicographic.

    The k-th moment of every vector and the k-th row of every Jacobian in
    this package refer to ``moment_pairs(n)[k]``. Serialized outputs rely on
    this ordering, so it must never change.
    """
    if n < 2:
        raise ValidationError(f"need at least 2 units to form pairs, got n={n}")
    return [(i, j) for i in range(n - 1) for j in range(i + 1, n)]


def n_moments(n: int) -> int:
    """Number of distinct shock pairs, n*(n-1)/2."""
    return n * (n - 1) // 2


def _as_float_vector(x, n: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {v.shape}")
    if v.shape[0] != n:
        raise DimensionError(f"{name} has length {v.shape[0]}, expected {n}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} contains non-finite entries")
    return v


@dataclasses.dataclass(frozen=True, eq=False)
class PanelData:
    """Balanced panel of outcomes plus the fixed unit sizes.

    Parameters
    ----------
    outcomes : ndarray, shape (T, n)
        One row per period, one column per unit. Must be finite.
    sizes : ndarray, shape (n,)
        Positive weights, each strictly inside (0, 1), summing to one
        within ``SIZE_SUM_TOL``.

    Notes
    -----
    Arrays are copied, stored column-contiguous (reductions over periods are
    then pairwise-summed per column, which keeps results reproducible), and
    marked read-only. Cross-moment tables used by the GMM operations are
    cached on first use, which is safe because the data cannot change.
    """

    outcomes: np.ndarray
    sizes: np.ndarray
    _kernel: "CrossMomentKernel | None" = dataclasses.field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        out = np.array(self.outcomes, dtype=np.float64, order="F", copy=True)
        if out.ndim != 2:
            raise DimensionError(
                f"outcomes must be a (periods, units) matrix, got shape {out.shape}"
            )
        t, n = out.shape
        if t < 1:
            raise ValidationError("panel needs at least one period")
        if n < 3:
            raise ValidationError(f"panel needs at least 3 units, got {n}")
        if not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(out))[0]
            raise ValidationError(
                f"outcomes contain a non-finite value at period {bad[0]}, unit {bad[1]}"
            )
        sizes = _as_float_vector(self.sizes, n, "sizes")
        if np.any(sizes <= 0.0) or np.any(sizes >= 1.0):
            raise ValidationError("every size must lie strictly inside (0, 1)")
        total = float(np.sum(sizes))
        if abs(total - 1.0) > SIZE_SUM_TOL:
            raise ValidationError(f"sizes must sum to 1, got {total!r}")
        out.setflags(write=False)
        sizes = sizes.copy()
        sizes.setflags(write=False)
        object.__setattr__(self, "outcomes", out)
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[1]

    def aggregate(self) -> np.ndarray:
        """Size-weighted aggregate outcome r_St, one entry per period."""
        return self.outcomes @ self.sizes

    def cross_moments(self) -> "CrossMomentKernel":
        """Cached second/fourth cross-moment tables for fast GMM evaluation."""
        if self._kernel is None:
            object.__setattr__(self, "_kernel", CrossMomentKernel(self))
        return self._kernel


@dataclasses.dataclass(frozen=True)
class ParameterSpace:
    """Feasible set for the coefficient vector.

    The set is a box ``lower <= phi_i <= upper`` intersected with the
    aggregate cap ``phi_S <= 1 - margin``, which keeps the equilibrium
    multiplier ``1 / (1 - phi_S)`` finite and positive. The default box
    covers spillover coefficients far beyond anything economically
    plausible while keeping random optimizer starts in a region where the
    objective has curvature; widen it explicitly if an application truly
    needs multipliers outside [-3, 3].
    """

    lower: float = -3.0
    upper: float = 3.0
    margin: float = 1e-6

    def __post_init__(self) -> None:
        if not (self.lower < self.upper):
            raise ValidationError(
                f"empty box: lower={self.lower!r} must be below upper={self.upper!r}"
            )
        if not (0.0 < self.margin < 1.0):
            raise ValidationError(f"margin must lie in (0, 1), got {self.margin!r}")
        if self.lower > 1.0 - self.margin:
            raise ValidationError(
                "box and aggregate cap do not intersect: "
                f"lower={self.lower!r} exceeds {1.0 - self.margin!r}"
            )

    @property
    def aggregate_cap(self) -> float:
        return 1.0 - self.margin

    def contains(self, phi, sizes) -> bool:
        phi = np.asarray(phi, dtype=np.float64)
        sizes = np.asarray(sizes, dtype=np.float64)
        if np.any(phi < self.lower) or np.any(phi > self.upper):
            return False
        return float(phi @ sizes) <= self.aggregate_cap

    def project(self, phi, sizes) -> np.ndarray:
        """Map an arbitrary point to a nearby feasible one.

        Clips to the box, then shifts along the size direction when the
        aggregate cap is violated, alternating a few times. The result is
        an anchor for penalty evaluation, not an exact Euclidean projection.
        """
        sizes = np.asarray(sizes, dtype=np.float64)
        p = np.clip(np.asarray(phi, dtype=np.float64), self.lower, self.upper)
        cap = self.aggregate_cap
        ssq = float(sizes @ sizes)
        for _ in range(8):
            excess = float(p @ sizes) - cap
            if excess <= 0.0:
                return p
            p = np.clip(p - (excess / ssq) * sizes, self.lower, self.upper)
        # Residual violation only possible when the cap is nearly tangent to
        # the box; fall back to the uniform feasible point.
        p[:] = min(cap - self.margin, self.upper)
        p = np.maximum(p, self.lower)
        return p


def size_weighted(values, sizes) -> float:
    """Size-weighted aggregate sum_i S_i * x_i of a per-unit vector."""
    v = np.asarray(values, dtype=np.float64)
    s = np.asarray(sizes, dtype=np.float64)
    if v.shape != s.shape or v.ndim != 1:
        raise DimensionError(
            f"values and sizes must be equal-length vectors, got {v.shape} and {s.shape}"
        )
    return float(v @ s)


def equal_weighted(values) -> float:
    """Unweighted mean (1/n) sum_i x_i of a per-unit vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"values must be a vector, got shape {v.shape}")
    return float(np.mean(v))


def residuals(panel: PanelData, phi) -> np.ndarray:
    """Idiosyncratic residuals u_it = r_it - phi_i * r_St.

    Parameters
    ----------
    panel : PanelData
    phi : ndarray, shape (n,)
        Trial coefficient vector; no feasibility restriction is applied.

    Returns
    -------
    ndarray, shape (T, n)
        At the data-generating coefficients this recovers the injected
        shocks up to floating-point roundoff.
    """
    phi = _as_float_vector(phi, panel.n_units, "phi")
    r_s = panel.aggregate()
    return panel.outcomes - r_s[:, None] * phi[None, :]


def moment_function(panel: PanelData, phi) -> np.ndarray:
    """Stack pairwise residual products, one column per shock pair.

    Column k holds ``u_it * u_jt`` for ``(i, j) = moment_pairs(n)[k]``. The
    result is column-contiguous so that per-period reductions are pairwise-
    summed.

    Returns
    -------
    ndarray, shape (T, n*(n-1)/2)
    """
    u = residuals(panel, phi)
    n = panel.n_units
    m = n_moments(n)
    out = np.empty((panel.n_periods, m), order="F")
    for k, (i, j) in enumerate(moment_pairs(n)):
        np.multiply(u[:, i], u[:, j], out=out[:, k])
    return out


def _floored_inverse(denominators: np.ndarray) -> tuple[np.ndarray, bool]:
    """Invert nonnegative weight denominators with a relative floor.

    Returns the inverted vector and whether any entry was degenerate.
    """
    den = np.maximum(denominators, 0.0)
    dmax = float(np.max(den)) if den.size else 0.0
    if dmax <= 0.0:
        warnings.warn(
            "all moment columns are identically zero; using unit weights",
            DegenerateDataWarning,
            stacklevel=3,
        )
        return np.ones_like(den), True
    floor = WEIGHT_FLOOR_REL * dmax
    if floor <= 0.0:
        floor = np.finfo(np.float64).tiny
    degenerate = bool(np.any(den < floor))
    if degenerate:
        warnings.warn(
            "a moment column is numerically zero; its weight was floored",
            DegenerateDataWarning,
            stacklevel=3,
        )
    return 1.0 / np.maximum(den, floor), degenerate


def cue_weight_matrix(moments: np.ndarray) -> np.ndarray:
    """Diagonal continuously-updated weight matrix from a moment matrix.

    Each diagonal entry is the reciprocal of the sample mean of the squared
    moment column, floored at ``WEIGHT_FLOOR_REL`` times the largest
    denominator; a floored column triggers :class:`DegenerateDataWarning`.

    Parameters
    ----------
    moments : ndarray, shape (T, m)
        Output of :func:`moment_function` (or anything with the same layout).

    Returns
    -------
    ndarray, shape (m, m)
    """
    moments = np.asarray(moments, dtype=np.float64)
    if moments.ndim != 2:
        raise DimensionError(f"moments must be (periods, pairs), got shape {moments.shape}")
    den = np.mean(np.square(moments), axis=0)
    w, _ = _floored_inverse(den)
    return np.diag(w)


def gmm_objective(panel: PanelData, phi) -> float:
    """Continuously-updated GMM objective gbar' W(phi) gbar.

    ``gbar`` is the vector of column means of :func:`moment_function` and
    ``W(phi)`` the diagonal weight of :func:`cue_weight_matrix`, both
    re-evaluated at the trial point. Nonnegative by construction; exactly
    zero iff every moment column averages to zero.
    """
    phi = _as_float_vector(phi, panel.n_units, "phi")
    return panel.cross_moments().objective(phi)


def analytic_jacobian(panel: PanelData, phi) -> np.ndarray:
    """Jacobian of the mean moment vector with respect to phi.

    Row k (pair (i, j)) has exactly two nonzero entries:

        d gbar_k / d phi_i = mean_t( -r_St * u_jt ),
        d gbar_k / d phi_j = mean_t( -r_St * u_it ),

    all other parameters leave the pair's product unchanged.

    Returns
    -------
    ndarray, shape (m, n)
    """
    phi = _as_float_vector(phi, panel.n_units, "phi")
    return panel.cross_moments().jacobian(phi)


def population_moments(phi_true, phi_trial, sizes, sigma2) -> np.ndarray:
    """Population mean of the pairwise moments at a trial coefficient vector.

    For independent shocks with variances ``sigma2`` the expectation of the
    (i, j) moment evaluated at ``phi_trial`` is, with ``d = phi_true -
    phi_trial`` and ``kappa = 1 / (1 - phi_S)``,

        d_i * S_j sigma2_j * kappa + d_j * S_i sigma2_i * kappa
        + d_i * d_j * sum_l(S_l^2 sigma2_l) * kappa^2.

    It vanishes at ``phi_trial = phi_true`` and at exactly one other point,
    whose size-weighted aggregate is ``2 - phi_S > 1`` and therefore lies
    outside the feasible set.

    Parameters
    ----------
    phi_true, phi_trial : ndarray, shape (n,)
    sizes : ndarray, shape (n,)
    sigma2 : ndarray, shape (n,)
        Strictly positive shock variances.

    Returns
    -------
    ndarray, shape (n*(n-1)/2,)
        Ordered per :func:`moment_pairs`.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    n = sizes.shape[0]
    phi_true = _as_float_vector(phi_true, n, "phi_true")
    phi_trial = _as_float_vector(phi_trial, n, "phi_trial")
    sigma2 = _as_float_vector(sigma2, n, "sigma2")
    if np.any(sigma2 <= 0.0):
        raise ValidationError("sigma2 must be strictly positive")
    phi_s = float(phi_true @ sizes)
    if phi_s >= 1.0:
        raise ValidationError(
            f"phi_true has size-weighted aggregate {phi_s!r} >= 1; multiplier undefined"
        )
    kappa = 1.0 / (1.0 - phi_s)
    a = sizes * sigma2
    c1 = float((sizes * sizes) @ sigma2)
    d = phi_true - phi_trial
    i_idx, j_idx = np.triu_indices(n, k=1)
    return (
        kappa * (d[i_idx] * a[j_idx] + d[j_idx] * a[i_idx])
        + (kappa * kappa * c1) * d[i_idx] * d[j_idx]
    )


class CrossMomentKernel:
    """Per-panel cross-moment tables behind the GMM operations.

    The mean moments, the diagonal weight denominators, and the Jacobian are
    all polynomials in phi with coefficients given by second- and fourth-
    order cross moments of the outcomes and their aggregate. Precomputing
    those once per panel makes each evaluation O(n^2) regardless of T, which
    is what keeps the multi-start optimizer and the Monte Carlo harness fast.

    The expansion is exact in real arithmetic. In floating point the fourth-
    moment recombination loses accuracy when the common component dwarfs the
    shocks (aggregate coefficient approaching 1); at that extreme the weight
    denominators keep only about ``eps * multiplier^4`` relative accuracy.
    """

    __slots__ = (
        "n_units",
        "n_periods",
        "pair_i",
        "pair_j",
        "_a2",
        "_b1_i",
        "_b1_j",
        "_b1",
        "_c2",
        "_p22",
        "_q21_ij",
        "_q21_ji",
        "_v2_i",
        "_v2_j",
        "_w11",
        "_x1_i",
        "_x1_j",
        "_y0",
    )

    def __init__(self, panel: PanelData) -> None:
        out = panel.outcomes
        t, n = out.shape
        self.n_units = n
        self.n_periods = t
        i_idx, j_idx = np.triu_indices(n, k=1)
        self.pair_i = i_idx
        self.pair_j = j_idx

        s = out @ panel.sizes
        s2 = s * s
        s3 = s2 * s
        cols = [out[:, i] for i in range(n)]
        sq = [c * c for c in cols]

        b1 = np.array([np.mean(cols[i] * s) for i in range(n)])
        v2 = np.array([np.mean(sq[i] * s2) for i in range(n)])
        x1 = np.array([np.mean(cols[i] * s3) for i in range(n)])
        a2 = np.empty((n, n))
        p22 = np.empty((n, n))
        w11 = np.empty((n, n))
        q21 = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                a2[i, j] = a2[j, i] = np.mean(cols[i] * cols[j])
                p22[i, j] = p22[j, i] = np.mean(sq[i] * sq[j])
                w11[i, j] = w11[j, i] = np.mean(cols[i] * cols[j] * s2)
            for j in range(n):
                q21[i, j] = np.mean(sq[i] * (cols[j] * s))

        m = i_idx.shape[0]
        self._b1 = b1
        self._c2 = float(np.mean(s2))
        self._y0 = float(np.mean(s2 * s2))
        self._a2 = np.ascontiguousarray(a2[i_idx, j_idx])
        self._b1_i = np.ascontiguousarray(b1[i_idx])
        self._b1_j = np.ascontiguousarray(b1[j_idx])
        self._p22 = np.ascontiguousarray(p22[i_idx, j_idx])
        self._q21_ij = np.ascontiguousarray(q21[i_idx, j_idx])
        self._q21_ji = np.ascontiguousarray(q21[j_idx, i_idx])
        self._v2_i = np.ascontiguousarray(v2[i_idx])
        self._v2_j = np.ascontiguousarray(v2[j_idx])
        self._w11 = np.ascontiguousarray(w11[i_idx, j_idx])
        self._x1_i = np.ascontiguousarray(x1[i_idx])
        self._x1_j = np.ascontiguousarray(x1[j_idx])
        assert m == n_moments(n)

    def mean_moments(self, phi: np.ndarray) -> np.ndarray:
        """Column means of the pairwise moment matrix at phi."""
        pi = phi[self.pair_i]
        pj = phi[self.pair_j]
        return self._a2 - pj * self._b1_i - pi * self._b1_j + (pi * pj) * self._c2

    def weight_denominators(self, phi: np.ndarray) -> np.ndarray:
        """Column means of the squared moments at phi (before flooring)."""
        pi = phi[self.pair_i]
        pj = phi[self.pair_j]
        return (
            self._p22
            - 2.0 * pj * self._q21_ij
            - 2.0 * pi * self._q21_ji
            + (pj * pj) * self._v2_i
            + (pi * pi) * self._v2_j
            + 4.0 * (pi * pj) * self._w11
            - 2.0 * (pi * pj * pj) * self._x1_i
            - 2.0 * (pi * pi * pj) * self._x1_j
            + (pi * pi) * (pj * pj) * self._y0
        )

    def weights(self, phi: np.ndarray) -> np.ndarray:
        w, _ = _floored_inverse(self.weight_denominators(phi))
        return w

    def objective(self, phi: np.ndarray) -> float:
        g = self.mean_moments(phi)
        w = self.weights(phi)
        return float(np.dot(g * g, w))

    def jacobian(self, phi: np.ndarray) -> np.ndarray:
        m = self.pair_i.shape[0]
        jac = np.zeros((m, self.n_units))
        rows = np.arange(m)
        jac[rows, self.pair_i] = -self._b1_j + phi[self.pair_j] * self._c2
        jac[rows, self.pair_j] = -self._b1_i + phi[self.pair_i] * self._c2
        return jac

    def fixed_weight_value_and_grad(
        self, phi: np.ndarray, w: np.ndarray
    ) -> tuple[float, np.ndarray]:
        """Quadratic-form objective gbar' diag(w) gbar and its exact gradient."""
        g = self.mean_moments(phi)
        jac = self.jacobian(phi)
        return float(np.dot(g * g, w)), 2.0 * (jac.T @ (w * g))

    def full_weight_value_and_grad(
        self, phi: np.ndarray, weight: np.ndarray
    ) -> tuple[float, np.ndarray]:
        """Objective gbar' W gbar for a full m-by-m weight, with gradient."""
        g = self.mean_moments(phi)
        wg = weight @ g
        jac = self.jacobian(phi)
        return float(g @ wg), 2.0 * (jac.T @ wg)

    def cue_value_and_grad(self, phi: np.ndarray) -> tuple[float, np.ndarray]:
        """CUE objective with the weight-held-fixed gradient approximation.

        The returned gradient omits the dependence of the weight on phi; it
        is the descent direction used by the quasi-Newton polish.
        """
        g = self.mean_moments(phi)
        w = self.weights(phi)
        jac = self.jacobian(phi)
        return float(np.dot(g * g, w)), 2.0 * (jac.T @ (w * g))
