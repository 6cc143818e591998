"""Monte Carlo harness: data generation and coverage studies.

A scenario is a fully specified data-generating process. Panels are drawn
through the model's equilibrium: idiosyncratic shocks first, then the
aggregate via the multiplier ``r_St = u_St / (1 - phi_S)``, then unit
outcomes. Each replication uses its own counter-based random stream keyed
by (seed, replication index), so results are identical no matter how
replications are scheduled across workers.

The scenario runner estimates the requested estimators on every
replication, builds confidence intervals, runs the specification tests,
and aggregates coverage, median interval lengths, and rejection rates.
Failed replications are recorded and excluded, never retried; more than 1%
failures for any requested estimator aborts the run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .estimators import (
    EstimationResult,
    OptimizerConfig,
    giv_estimate,
    rgiv_estimate,
    rgiv_restricted_estimate,
)
from .exceptions import ConfigurationError, EstimationError, RgivError, ValidationError
from .inference import aggregate_ci, homogeneity_test, j_test, rgiv_avar
from .model import PanelData, ParameterSpace, _as_float_vector

SCENARIO_NAMES = ("baseline", "coef_outlier", "var_outlier", "disperse")
ESTIMATOR_TAGS = ("rgiv", "giv-equal", "giv-oracle", "giv-feasible")
SHOCK_DISTRIBUTIONS = ("gaussian", "student-t")

#: Fraction of failed replications, per requested estimator, above which the
#: whole run is considered unusable.
MAX_FAILURE_FRACTION = 0.01

#: Environment variable consulted when no worker count is passed explicitly.
WORKERS_ENV_VAR = "RGIV_WORKERS"

RECORDS_SCHEMA_VERSION = 1


def power_law_sizes(n: int, zeta: float) -> np.ndarray:
    """Sizes proportional to rank^(-1/zeta), normalized to sum to one."""
    if n < 3:
        raise ValidationError(f"need at least 3 units, got {n}")
    if zeta <= 0.0:
        raise ValidationError(f"zeta must be positive, got {zeta!r}")
    raw = np.arange(1, n + 1, dtype=np.float64) ** (-1.0 / zeta)
    return raw / np.sum(raw)


@dataclasses.dataclass(frozen=True, eq=False)
class DgpSpec:
    """Data-generating process for one scenario.

    ``sigma`` holds shock standard deviations (not variances). Sizes come
    either from the power-law rule with exponent ``zeta`` or from an
    explicit vector. Shocks are Gaussian by default; the student-t option
    requires more than four degrees of freedom so that the moments the
    estimator relies on exist.
    """

    name: str
    n_units: int
    n_periods: int
    phi: np.ndarray
    sigma: np.ndarray
    size_rule: str = "power-law"
    zeta: float = 1.04
    sizes: np.ndarray | None = None
    shock_dist: str = "gaussian"
    t_dof: float = 8.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_units < 3:
            raise ValidationError(f"need at least 3 units, got {self.n_units}")
        if self.n_periods < 1:
            raise ValidationError(f"need at least one period, got {self.n_periods}")
        phi = _as_float_vector(self.phi, self.n_units, "phi")
        sigma = _as_float_vector(self.sigma, self.n_units, "sigma")
        if np.any(sigma <= 0.0):
            raise ValidationError("sigma must be strictly positive")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "sigma", sigma)
        if self.size_rule == "power-law":
            if self.sizes is not None:
                raise ValidationError("power-law rule does not take explicit sizes")
            sizes = power_law_sizes(self.n_units, self.zeta)
        elif self.size_rule == "explicit":
            if self.sizes is None:
                raise ValidationError("explicit size rule needs a size vector")
            sizes = _as_float_vector(self.sizes, self.n_units, "sizes")
            if np.any(sizes <= 0.0) or np.any(sizes >= 1.0):
                raise ValidationError("every size must lie strictly inside (0, 1)")
            if abs(float(np.sum(sizes)) - 1.0) > 1e-10:
                raise ValidationError(f"sizes must sum to 1, got {float(np.sum(sizes))!r}")
        else:
            raise ValidationError(
                f"unknown size rule {self.size_rule!r}; expected 'power-law' or 'explicit'"
            )
        object.__setattr__(self, "sizes", sizes)
        if self.shock_dist not in SHOCK_DISTRIBUTIONS:
            raise ValidationError(
                f"unknown shock distribution {self.shock_dist!r}; "
                f"expected one of {SHOCK_DISTRIBUTIONS}"
            )
        if self.shock_dist == "student-t" and not self.t_dof > 4.0:
            raise ValidationError(
                f"student-t shocks need dof > 4 for finite fourth moments, got {self.t_dof!r}"
            )
        if not (0 <= int(self.seed) < 2**63):
            raise ValidationError(f"seed must be a nonnegative 63-bit integer, got {self.seed!r}")
        phi_s = float(phi @ sizes)
        if phi_s >= 1.0:
            raise ValidationError(
                f"size-weighted aggregate coefficient {phi_s!r} must be below 1"
            )

    def with_seed(self, seed: int) -> "DgpSpec":
        """Copy of this scenario with a different base seed."""
        sizes = self.sizes if self.size_rule == "explicit" else None
        return dataclasses.replace(self, seed=seed, sizes=sizes)

    @property
    def phi_aggregate(self) -> float:
        return float(self.phi @ self.sizes)

    @property
    def phi_mean(self) -> float:
        return float(np.mean(self.phi))

    def to_payload(self) -> dict:
        """JSON-ready dict; round-trips through :func:`spec_from_payload`."""
        payload = {
            "name": self.name,
            "n_units": self.n_units,
            "n_periods": self.n_periods,
            "phi": self.phi.tolist(),
            "sigma": self.sigma.tolist(),
            "size_rule": self.size_rule,
            "shock_dist": self.shock_dist,
            "t_dof": self.t_dof,
            "seed": self.seed,
        }
        if self.size_rule == "power-law":
            payload["zeta"] = self.zeta
        else:
            payload["sizes"] = self.sizes.tolist()
        return payload


def spec_from_payload(payload: dict) -> DgpSpec:
    """Rebuild a DgpSpec from :meth:`DgpSpec.to_payload` output."""
    known = {
        "name",
        "n_units",
        "n_periods",
        "phi",
        "sigma",
        "size_rule",
        "zeta",
        "sizes",
        "shock_dist",
        "t_dof",
        "seed",
    }
    unknown = set(payload) - known
    if unknown:
        raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
    required = {"name", "n_units", "n_periods", "phi", "sigma"}
    missing = required - set(payload)
    if missing:
        raise ValidationError(f"missing scenario keys: {sorted(missing)}")
    n = payload["n_units"]
    phi = payload["phi"]
    sigma = payload["sigma"]
    if np.isscalar(phi):
        phi = [phi] * n
    if np.isscalar(sigma):
        sigma = [sigma] * n
    kwargs = dict(
        name=payload["name"],
        n_units=n,
        n_periods=payload["n_periods"],
        phi=np.asarray(phi, dtype=np.float64),
        sigma=np.asarray(sigma, dtype=np.float64),
        size_rule=payload.get("size_rule", "power-law"),
        shock_dist=payload.get("shock_dist", "gaussian"),
        t_dof=payload.get("t_dof", 8.0),
        seed=payload.get("seed", 0),
    )
    if kwargs["size_rule"] == "explicit":
        kwargs["sizes"] = np.asarray(payload["sizes"], dtype=np.float64)
    else:
        kwargs["zeta"] = payload.get("zeta", 1.04)
    return DgpSpec(**kwargs)


def builtin_scenario(name: str, seed: int = 0) -> DgpSpec:
    """One of the four named study designs (n=11, T=2300, power-law sizes).

    baseline: common coefficient 0.33, common shock scale 0.015.
    coef_outlier: the largest unit's coefficient doubled to 0.66.
    var_outlier: the largest unit's shock scale doubled to 0.03.
    disperse: coefficients evenly spread over [0.21, 0.46] and shock
    scales over [0.009, 0.021], both increasing in unit rank.
    """
    n = 11
    phi = np.full(n, 0.33)
    sigma = np.full(n, 0.015)
    if name == "baseline":
        pass
    elif name == "coef_outlier":
        phi = phi.copy()
        phi[0] = 0.66
    elif name == "var_outlier":
        sigma = sigma.copy()
        sigma[0] = 0.03
    elif name == "disperse":
        phi = np.linspace(0.21, 0.46, n)
        sigma = np.linspace(0.009, 0.021, n)
    else:
        raise ConfigurationError(
            f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}"
        )
    return DgpSpec(
        name=name,
        n_units=n,
        n_periods=2300,
        phi=phi,
        sigma=sigma,
        size_rule="power-law",
        zeta=1.04,
        seed=seed,
    )


def _replication_rng(seed: int, replication: int) -> np.random.Generator:
    """Counter-based stream: Philox keyed by (seed, replication).

    Distinct key pairs give statistically independent streams, so the draw
    for replication k never depends on which worker produced it or on how
    many replications ran before it.
    """
    key = np.array([seed, replication], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _draw_shocks(spec: DgpSpec, replication: int) -> np.ndarray:
    rng = _replication_rng(spec.seed, replication)
    shape = (spec.n_periods, spec.n_units)
    if spec.shock_dist == "gaussian":
        draws = rng.standard_normal(shape)
    else:
        draws = rng.standard_t(spec.t_dof, size=shape)
        draws *= np.sqrt((spec.t_dof - 2.0) / spec.t_dof)
    return draws * spec.sigma[None, :]


def generate_panel(spec: DgpSpec, replication: int) -> PanelData:
    """Draw one panel from the scenario's equilibrium.

    Shocks are drawn per unit, the aggregate follows from the multiplier
    identity, and outcomes are the common response plus own shock. Applying
    the residual operation at the true coefficients recovers the drawn
    shocks up to floating-point roundoff.
    """
    if not (0 <= int(replication) < 2**63):
        raise ValidationError(
            f"replication index must be a nonnegative 63-bit integer, got {replication!r}"
        )
    shocks = _draw_shocks(spec, replication)
    aggregate = (shocks @ spec.sizes) / (1.0 - spec.phi_aggregate)
    outcomes = aggregate[:, None] * spec.phi[None, :] + shocks
    return PanelData(outcomes, spec.sizes)


@dataclasses.dataclass(frozen=True)
class ScenarioReport:
    """Aggregated Monte Carlo results plus the per-replication records.

    ``elapsed_seconds`` is informational only and deliberately excluded
    from serialization so that identical runs produce identical bytes.
    """

    spec: DgpSpec
    reps: int
    level: float
    estimators: tuple[str, ...]
    aggregates: dict
    failures: dict
    records: list
    config_hash: str
    package_version: str
    elapsed_seconds: float

    def to_payload(self) -> dict:
        return {
            "schema_version": RECORDS_SCHEMA_VERSION,
            "package_version": self.package_version,
            "config_hash": self.config_hash,
            "spec": self.spec.to_payload(),
            "reps": self.reps,
            "level": self.level,
            "estimators": list(self.estimators),
            "aggregates": self.aggregates,
            "failures": self.failures,
        }


def _config_hash(spec: DgpSpec, reps: int, level: float, estimators, config: OptimizerConfig) -> str:
    payload = {
        "schema_version": RECORDS_SCHEMA_VERSION,
        "spec": spec.to_payload(),
        "reps": reps,
        "level": level,
        "estimators": list(estimators),
        "optimizer": dataclasses.asdict(config),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _replicate(
    spec: DgpSpec,
    replication: int,
    level: float,
    estimators: tuple[str, ...],
    config: OptimizerConfig,
    space: ParameterSpace,
) -> dict:
    """Estimate everything requested on one simulated panel."""
    panel = generate_panel(spec, replication)
    t = panel.n_periods
    n = panel.n_units
    record: dict = {"replication": replication}

    if "rgiv" in estimators:
        try:
            est = rgiv_estimate(panel, space, config)
            if not est.converged:
                raise EstimationError("optimizer exhausted its budget on every start")
            avar = rgiv_avar(panel, est.phi_hat)
            ci_s = aggregate_ci(est.phi_hat, avar, panel.sizes, level, t)
            ci_e = aggregate_ci(est.phi_hat, avar, np.full(n, 1.0 / n), level, t)
            coef_lo, coef_hi = [], []
            for i in range(n):
                basis = np.zeros(n)
                basis[i] = 1.0
                ci_i = aggregate_ci(est.phi_hat, avar, basis, level, t)
                coef_lo.append(ci_i.lower)
                coef_hi.append(ci_i.upper)
            restricted = rgiv_restricted_estimate(panel, space, config)
            j = j_test(panel, est.phi_hat)
            dm = homogeneity_test(panel, est, restricted)
            record["rgiv"] = {
                "phi": est.phi_hat.tolist(),
                "objective": est.objective_value,
                "n_starts_agreeing": est.n_starts_agreeing,
                "phi_s": {"lo": ci_s.lower, "hi": ci_s.upper},
                "phi_e": {"lo": ci_e.lower, "hi": ci_e.upper},
                "coef_lo": coef_lo,
                "coef_hi": coef_hi,
                "restricted_phi": float(restricted.phi_hat[0]),
                "j": {"stat": j.statistic, "dof": j.dof, "p": j.p_value},
                "homogeneity": {"stat": dm.statistic, "dof": dm.dof, "p": dm.p_value},
            }
        except (RgivError, np.linalg.LinAlgError) as exc:
            record["rgiv"] = {"error": str(exc), "error_type": type(exc).__name__}

    for tag in estimators:
        if not tag.startswith("giv-"):
            continue
        mode = tag.removeprefix("giv-")
        try:
            sigma2 = spec.sigma**2 if mode == "oracle" else None
            est = giv_estimate(panel, mode, sigma2=sigma2)
            ci = aggregate_ci(est.phi_hat, est.avar, np.ones(1), level, t)
            record[tag] = {
                "estimate": float(est.phi_hat[0]),
                "se": est.metadata["se"],
                "lo": ci.lower,
                "hi": ci.upper,
            }
        except (RgivError, np.linalg.LinAlgError) as exc:
            record[tag] = {"error": str(exc), "error_type": type(exc).__name__}

    return record


def _resolve_workers(workers: int | None) -> int:
    if workers is None:
        raw = os.environ.get(WORKERS_ENV_VAR, "1")
        try:
            workers = int(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{WORKERS_ENV_VAR} must be an integer, got {raw!r}") from exc
    if workers < 1:
        raise ConfigurationError(f"worker count must be positive, got {workers}")
    return workers


def _binomial_se(p: float, n: int) -> float:
    return float(np.sqrt(p * (1.0 - p) / n)) if n > 0 else float("nan")


def _aggregate(spec: DgpSpec, level: float, estimators, reps: int, records: list) -> tuple[dict, dict]:
    aggregates: dict = {}
    failures: dict = {}
    alpha = 1.0 - level

    if "rgiv" in estimators:
        ok = [r["rgiv"] for r in records if "error" not in r["rgiv"]]
        failures["rgiv"] = reps - len(ok)
        if ok:
            phi_s0 = spec.phi_aggregate
            phi_e0 = spec.phi_mean
            s_lo = np.array([r["phi_s"]["lo"] for r in ok])
            s_hi = np.array([r["phi_s"]["hi"] for r in ok])
            e_lo = np.array([r["phi_e"]["lo"] for r in ok])
            e_hi = np.array([r["phi_e"]["hi"] for r in ok])
            c_lo = np.array([r["coef_lo"] for r in ok])
            c_hi = np.array([r["coef_hi"] for r in ok])
            cov_s = float(np.mean((s_lo <= phi_s0) & (phi_s0 <= s_hi)))
            cov_e = float(np.mean((e_lo <= phi_e0) & (phi_e0 <= e_hi)))
            cov_c = np.mean((c_lo <= spec.phi[None, :]) & (spec.phi[None, :] <= c_hi), axis=0)
            j_p = np.array([r["j"]["p"] for r in ok])
            dm_p = np.array([r["homogeneity"]["p"] for r in ok])
            j_rej = float(np.mean(j_p < alpha))
            dm_rej = float(np.mean(dm_p < alpha))
            aggregates["rgiv"] = {
                "n_ok": len(ok),
                "phi_s": {
                    "true_value": phi_s0,
                    "coverage": cov_s,
                    "coverage_se": _binomial_se(cov_s, len(ok)),
                    "median_length": float(np.median(s_hi - s_lo)),
                },
                "phi_e": {
                    "true_value": phi_e0,
                    "coverage": cov_e,
                    "coverage_se": _binomial_se(cov_e, len(ok)),
                    "median_length": float(np.median(e_hi - e_lo)),
                },
                "coefficients": {
                    "true_values": spec.phi.tolist(),
                    "coverage": [float(c) for c in cov_c],
                    "coverage_se": [_binomial_se(float(c), len(ok)) for c in cov_c],
                    "median_length": [float(v) for v in np.median(c_hi - c_lo, axis=0)],
                },
                "j_test": {
                    "alpha": alpha,
                    "rejection_rate": j_rej,
                    "rejection_se": _binomial_se(j_rej, len(ok)),
                },
                "homogeneity_test": {
                    "alpha": alpha,
                    "rejection_rate": dm_rej,
                    "rejection_se": _binomial_se(dm_rej, len(ok)),
                },
            }
        else:
            aggregates["rgiv"] = {"n_ok": 0}

    band_lo = float(np.min(spec.phi))
    band_hi = float(np.max(spec.phi))
    for tag in estimators:
        if not tag.startswith("giv-"):
            continue
        ok = [r[tag] for r in records if "error" not in r[tag]]
        failures[tag] = reps - len(ok)
        if ok:
            lo = np.array([r["lo"] for r in ok])
            hi = np.array([r["hi"] for r in ok])
            cov = float(np.mean((lo <= band_hi) & (hi >= band_lo)))
            aggregates[tag] = {
                "n_ok": len(ok),
                "band": [band_lo, band_hi],
                "coverage": cov,
                "coverage_se": _binomial_se(cov, len(ok)),
                "median_length": float(np.median(hi - lo)),
                "median_estimate": float(np.median([r["estimate"] for r in ok])),
            }
        else:
            aggregates[tag] = {"n_ok": 0, "band": [band_lo, band_hi]}

    return aggregates, failures


def run_scenario(
    spec: DgpSpec,
    reps: int,
    estimator_set=("rgiv", "giv-feasible", "giv-oracle"),
    level: float = 0.95,
    workers: int | None = None,
    config: OptimizerConfig | None = None,
    space: ParameterSpace | None = None,
) -> ScenarioReport:
    """Run a coverage study and aggregate it.

    Parameters
    ----------
    spec : DgpSpec
    reps : int
        Number of replications; replication k always uses the stream keyed
        by (spec.seed, k).
    estimator_set : iterable of str
        Any of "rgiv", "giv-equal", "giv-oracle", "giv-feasible".
    level : float
        Confidence level for intervals; the tests reject at 1 - level.
    workers : int, optional
        Process count; defaults to the RGIV_WORKERS environment variable,
        then to serial execution. Results are identical for any count.
    config : OptimizerConfig, optional
    space : ParameterSpace, optional

    Raises
    ------
    EstimationError
        When more than ``MAX_FAILURE_FRACTION`` of replications fail for
        any requested estimator.
    """
    if reps < 1:
        raise ValidationError(f"reps must be positive, got {reps}")
    estimators = tuple(estimator_set)
    for tag in estimators:
        if tag not in ESTIMATOR_TAGS:
            raise ConfigurationError(
                f"unknown estimator {tag!r}; expected a subset of {ESTIMATOR_TAGS}"
            )
    if not estimators:
        raise ConfigurationError("estimator set is empty")
    if not (0.0 < level < 1.0):
        raise ValidationError(f"level must lie strictly in (0, 1), got {level!r}")
    config = config or OptimizerConfig()
    space = space or ParameterSpace()
    workers = _resolve_workers(workers)

    start_time = time.perf_counter()
    if workers == 1:
        records = [
            _replicate(spec, k, level, estimators, config, space) for k in range(reps)
        ]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_replicate, spec, k, level, estimators, config, space)
                for k in range(reps)
            ]
            records = [f.result() for f in futures]
    records.sort(key=lambda r: r["replication"])
    elapsed = time.perf_counter() - start_time

    aggregates, failures = _aggregate(spec, level, estimators, reps, records)
    for tag, count in failures.items():
        if count > MAX_FAILURE_FRACTION * reps:
            examples = [
                r[tag]["error"] for r in records if "error" in r[tag]
            ][:3]
            raise EstimationError(
                f"{count} of {reps} replications failed for {tag} "
                f"(limit {MAX_FAILURE_FRACTION:.0%}); first errors: {examples}"
            )

    return ScenarioReport(
        spec=spec,
        reps=reps,
        level=level,
        estimators=estimators,
        aggregates=aggregates,
        failures=failures,
        records=records,
        config_hash=_config_hash(spec, reps, level, estimators, config),
        package_version=__version__,
        elapsed_seconds=elapsed,
    )
