"""Acceptance checklist: Monte Carlo targets and structural identities.

One test per checklist line. The coverage and rejection targets come from
the four built-in study designs at 500 replications (binomial error near
p = 0.95 is about 0.01, so rate tolerances are +/- 0.03 unless stated) and
the degenerate equal-size design at 200. The structural identities are
non-stochastic and run at tight tolerances.
"""

import itertools

import numpy as np
import pytest

from rgiv import (
    DgpSpec,
    PanelData,
    WeakInstrumentError,
    analytic_jacobian,
    builtin_scenario,
    generate_panel,
    giv_estimand_closed_form,
    giv_estimate,
    moment_function,
    population_moments,
    rgiv_avar,
    rgiv_estimate,
    run_scenario,
)

REPS = 500
DEGENERATE_REPS = 200


def _run(name):
    return run_scenario(
        builtin_scenario(name, seed=0),
        reps=REPS,
        estimator_set=("rgiv", "giv-feasible", "giv-oracle"),
    )


@pytest.fixture(scope="module")
def baseline_report():
    return _run("baseline")


@pytest.fixture(scope="module")
def coef_outlier_report():
    return _run("coef_outlier")


@pytest.fixture(scope="module")
def var_outlier_report():
    return _run("var_outlier")


@pytest.fixture(scope="module")
def disperse_report():
    return _run("disperse")


def degenerate_spec():
    n = 11
    return DgpSpec(
        name="equal_sizes",
        n_units=n,
        n_periods=2300,
        phi=np.full(n, 0.33),
        sigma=np.full(n, 0.015),
        size_rule="explicit",
        sizes=np.full(n, 1.0 / n),
        seed=0,
    )


@pytest.fixture(scope="module")
def degenerate_report():
    return run_scenario(degenerate_spec(), reps=DEGENERATE_REPS, estimator_set=("rgiv",))


def check_band(failures, label, value, target, tol):
    if not (target - tol <= value <= target + tol):
        failures.append(f"{label}: {value:.4f} outside {target} +/- {tol}")


def check_rel(failures, label, value, target, frac):
    if abs(value - target) > frac * abs(target):
        failures.append(f"{label}: {value:.4f} not within {frac:.0%} of {target}")


def test_baseline_rgiv_aggregate_intervals(baseline_report):
    """95% intervals for both aggregates cover at the target rates."""
    rgiv = baseline_report.aggregates["rgiv"]
    failures = []
    check_band(failures, "phi_S coverage", rgiv["phi_s"]["coverage"], 0.96, 0.03)
    check_rel(failures, "phi_S median length", rgiv["phi_s"]["median_length"], 0.074, 0.15)
    check_band(failures, "phi_E coverage", rgiv["phi_e"]["coverage"], 0.94, 0.03)
    check_rel(failures, "phi_E median length", rgiv["phi_e"]["median_length"], 0.035, 0.15)
    assert not failures, "; ".join(failures)


def test_baseline_giv_oracle_covers_and_feasible_fails(baseline_report):
    """Known-variance weights give honest intervals; sample-variance
    weights give severely undersized ones on the same panels."""
    oracle = baseline_report.aggregates["giv-oracle"]
    feasible = baseline_report.aggregates["giv-feasible"]
    failures = []
    check_band(failures, "oracle coverage", oracle["coverage"], 0.95, 0.03)
    check_rel(failures, "oracle median length", oracle["median_length"], 0.061, 0.15)
    check_band(failures, "feasible coverage", feasible["coverage"], 0.12, 0.05)
    assert not failures, "; ".join(failures)


def test_disperse_giv_band_coverage(disperse_report):
    """Under heterogeneous coefficients the aggregate-coefficient intervals
    rarely even intersect the range spanned by the true coefficients."""
    oracle = disperse_report.aggregates["giv-oracle"]
    feasible = disperse_report.aggregates["giv-feasible"]
    failures = []
    if feasible["coverage"] > 0.07:
        failures.append(
            f"feasible band coverage {feasible['coverage']:.4f} above 0.07"
        )
    check_band(failures, "oracle band coverage", oracle["coverage"], 0.68, 0.07)
    assert not failures, "; ".join(failures)


def test_specification_tests_size_and_power(
    baseline_report, coef_outlier_report, disperse_report
):
    """Overidentification size, homogeneity size, and homogeneity power
    against one doubled coefficient and against an even spread."""
    failures = []
    base = baseline_report.aggregates["rgiv"]
    check_band(
        failures, "baseline J rejection", base["j_test"]["rejection_rate"], 0.082, 0.03
    )
    check_band(
        failures,
        "baseline homogeneity rejection",
        base["homogeneity_test"]["rejection_rate"],
        0.049,
        0.03,
    )
    check_band(
        failures,
        "coefficient-outlier homogeneity power",
        coef_outlier_report.aggregates["rgiv"]["homogeneity_test"]["rejection_rate"],
        0.911,
        0.04,
    )
    check_band(
        failures,
        "disperse homogeneity power",
        disperse_report.aggregates["rgiv"]["homogeneity_test"]["rejection_rate"],
        0.850,
        0.05,
    )
    assert not failures, "; ".join(failures)


def test_per_coefficient_coverage_and_lengths(
    baseline_report, coef_outlier_report, var_outlier_report, disperse_report
):
    """Every unit's interval covers within [0.91, 0.98] in all four designs;
    the largest unit's interval widens threefold when its shock variance
    doubles."""
    failures = []
    reports = {
        "baseline": baseline_report,
        "coef_outlier": coef_outlier_report,
        "var_outlier": var_outlier_report,
        "disperse": disperse_report,
    }
    for name, report in reports.items():
        for i, cov in enumerate(report.aggregates["rgiv"]["coefficients"]["coverage"]):
            if not (0.91 <= cov <= 0.98):
                failures.append(f"{name} unit {i + 1} coverage {cov:.4f}")
    lengths_var = var_outlier_report.aggregates["rgiv"]["coefficients"]["median_length"]
    lengths_base = baseline_report.aggregates["rgiv"]["coefficients"]["median_length"]
    check_rel(failures, "var-outlier unit 1 median length", lengths_var[0], 0.99, 0.20)
    check_rel(failures, "baseline unit 1 median length", lengths_base[0], 0.32, 0.15)
    assert not failures, "; ".join(failures)


def test_structural_properties():
    """Non-stochastic identities: analytic Jacobian, the two-root structure
    of the population moments, the three-unit closed-form variance, the
    equal-weight estimand limit, scale equivariance, and determinism."""
    failures = []

    # (a) analytic Jacobian against central differences on random instances.
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 8))
        t = int(rng.integers(40, 200))
        sizes = rng.uniform(0.5, 2.0, n)
        sizes /= sizes.sum()
        panel = PanelData(rng.standard_normal((t, n)), sizes)
        phi = rng.uniform(-0.8, 0.8, n)
        if float(phi @ sizes) > 0.9:
            phi = 0.5 * phi
        analytic = analytic_jacobian(panel, phi)
        h = 1e-6
        cols = []
        for k in range(n):
            step = np.zeros(n)
            step[k] = h
            up = moment_function(panel, phi + step).mean(axis=0)
            dn = moment_function(panel, phi - step).mean(axis=0)
            cols.append((up - dn) / (2.0 * h))
        fd = np.column_stack(cols)
        rel = float(np.max(np.abs(analytic - fd)) / np.max(np.abs(analytic)))
        worst = max(worst, rel)
    if worst >= 1e-6:
        failures.append(f"Jacobian vs central differences: relative error {worst:.2e}")

    # (b) the population moments vanish at the truth, at the single spurious
    # root whose aggregate is 2 - phi_S, and nowhere else on a dense grid.
    s = np.array([0.2, 0.3, 0.5])
    sig2 = np.array([1.0, 1.5, 2.0])
    phi0 = np.array([0.3, 0.2, 0.4])
    phi_s = float(phi0 @ s)
    c1 = float(np.sum(s**2 * sig2))
    spurious = phi0 + 2.0 * s * sig2 * (1.0 - phi_s) / c1
    if np.max(np.abs(population_moments(phi0, phi0, s, sig2))) != 0.0:
        failures.append("population moments nonzero at the truth")
    if np.max(np.abs(population_moments(phi0, spurious, s, sig2))) > 1e-12:
        failures.append("population moments nonzero at the spurious root")
    if abs(float(spurious @ s) - (2.0 - phi_s)) > 1e-12:
        failures.append("spurious aggregate is not 2 - phi_S")
    axis = np.linspace(-0.5, 3.0, 31)
    floor = np.inf
    for point in itertools.product(axis, axis, axis):
        trial = np.array(point)
        near = min(
            float(np.max(np.abs(trial - phi0))),
            float(np.max(np.abs(trial - spurious))),
        )
        if near <= 0.25:
            continue
        floor = min(floor, float(np.max(np.abs(population_moments(phi0, trial, s, sig2)))))
    if floor < 1e-3:
        failures.append(f"third root candidate: grid floor {floor:.2e} away from both roots")

    # (c) three-unit closed-form asymptotic variance against the plug-in.
    phi3 = np.array([0.25, 0.35, 0.3])
    sig3 = np.array([0.012, 0.018, 0.015])
    spec3 = DgpSpec(
        name="avar",
        n_units=3,
        n_periods=1_000_000,
        phi=phi3,
        sigma=sig3,
        size_rule="explicit",
        sizes=s,
        seed=77,
    )
    a = s * sig3**2
    kappa = 1.0 / (1.0 - float(phi3 @ s))
    pop_jac = np.array([[a[1], a[0], 0.0], [a[2], 0.0, a[0]], [0.0, a[2], a[1]]])
    pair_weight = np.diag(
        [
            1.0 / (sig3[0] ** 2 * sig3[1] ** 2),
            1.0 / (sig3[0] ** 2 * sig3[2] ** 2),
            1.0 / (sig3[1] ** 2 * sig3[2] ** 2),
        ]
    )
    closed = np.linalg.inv(pop_jac.T @ pair_weight @ pop_jac) / kappa**2
    plug = rgiv_avar(generate_panel(spec3, 0), phi3)
    avar_rel = float(np.max(np.abs(plug - closed) / np.abs(closed)))
    if avar_rel >= 0.02:
        failures.append(f"closed-form avar vs plug-in: relative error {avar_rel:.4f}")

    # (d) equal-weight estimand: exact closed form and the simulated limit.
    phi_het = np.array([0.6, 0.3, 0.3])
    estimand = giv_estimand_closed_form(phi_het, s)
    if abs(estimand - (-2.0 / 11.0)) > 1e-14:
        failures.append(f"closed-form estimand {estimand!r} is not -2/11")
    spec_p1 = DgpSpec(
        name="estimand",
        n_units=3,
        n_periods=1_000_000,
        phi=phi_het,
        sigma=np.full(3, 0.015),
        size_rule="explicit",
        sizes=s,
        seed=3,
    )
    simulated = float(giv_estimate(generate_panel(spec_p1, 0), "equal").phi_hat[0])
    if abs(simulated - estimand) > 0.01:
        failures.append(f"simulated equal-weight slope {simulated:.4f} vs {estimand:.4f}")

    # (e) scale equivariance and determinism on one baseline panel.
    panel = generate_panel(builtin_scenario("baseline", seed=0), 0)
    first = rgiv_estimate(panel)
    again = rgiv_estimate(panel)
    if not np.array_equal(first.phi_hat, again.phi_hat):
        failures.append("repeated estimation differs")
    doubled = rgiv_estimate(PanelData(4.0 * panel.outcomes, panel.sizes))
    if not np.array_equal(first.phi_hat, doubled.phi_hat):
        failures.append("power-of-two rescaling changed the estimate")
    scaled = rgiv_estimate(PanelData(3.0 * panel.outcomes, panel.sizes))
    if not np.allclose(first.phi_hat, scaled.phi_hat, rtol=0.0, atol=1e-6):
        failures.append("generic rescaling moved the estimate beyond 1e-6")

    assert not failures, "; ".join(failures)


def test_equal_size_degenerate_behavior(degenerate_report):
    """With equal sizes and one shared coefficient the aggregate-gap
    instrument is identically zero, yet the pairwise-moment estimator still
    delivers nominal coverage."""
    failures = []
    panel = generate_panel(degenerate_spec(), 0)
    with pytest.raises(WeakInstrumentError):
        giv_estimate(panel, "equal")
    with pytest.raises(WeakInstrumentError):
        giv_estimate(panel, "oracle", sigma2=np.full(11, 0.015**2))
    rgiv = degenerate_report.aggregates["rgiv"]
    if rgiv["n_ok"] < DEGENERATE_REPS:
        failures.append(f"{DEGENERATE_REPS - rgiv['n_ok']} replications failed")
    check_band(failures, "phi_S coverage", rgiv["phi_s"]["coverage"], 0.95, 0.04)
    assert not failures, "; ".join(failures)
