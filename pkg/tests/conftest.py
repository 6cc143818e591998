"""Shared fixtures: hand-built panels plus one simulated baseline panel."""

import numpy as np
import pytest

from rgiv import PanelData, builtin_scenario, generate_panel, rgiv_estimate


@pytest.fixture(scope="session")
def baseline_panel():
    """One simulated panel from the n=11, T=2300 baseline design."""
    return generate_panel(builtin_scenario("baseline", seed=42), 0)


@pytest.fixture(scope="session")
def baseline_rgiv(baseline_panel):
    """Multi-start CUE estimate on the shared baseline panel."""
    return rgiv_estimate(baseline_panel)


@pytest.fixture(scope="session")
def orthogonal_panel():
    """Noise-free 3-unit panel whose sample pairwise products vanish exactly.

    The shocks are three orthogonal Hadamard columns, so every sample mean
    of u_i * u_j is exactly zero in floating point (all intermediate values
    are dyadic rationals). Outcomes follow the model with phi_i = 0.5 and
    sizes [0.25, 0.25, 0.5]; the aggregate works out to [2, -1, -1, 0].
    """
    shocks = np.array(
        [
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ]
    )
    sizes = np.array([0.25, 0.25, 0.5])
    phi = np.full(3, 0.5)
    phi_s = float(phi @ sizes)
    r_s = (shocks @ sizes) / (1.0 - phi_s)
    outcomes = shocks + r_s[:, None] * phi[None, :]
    return PanelData(outcomes, sizes), phi


@pytest.fixture()
def rng():
    return np.random.default_rng(20251103)
