"""Shared fixtures: expensive integrations run once per session.

Each heavy fixture returns (result, seconds) so acceptance tests can
enforce their runtime budgets on the actual computation.
"""

import time

import pytest
from hypothesis import HealthCheck, settings

from echoqram.params import solve_matched_params
from echoqram.dynamics import (PulseSpec, ensemble_for_params,
                               integrate_storage, run_echo_cycle)

settings.register_profile(
    "suite", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def matched():
    """Fully impedance-matched transfer parameters, control atom decoupled."""
    return solve_matched_params(1.0, 0.0)


@pytest.fixture(scope="session")
def blockade30():
    """Same photonic molecule with a C = 30 control atom on resonance."""
    return solve_matched_params(1.0, 30.0)


@pytest.fixture(scope="session")
def storage_cases(matched):
    """Storage runs for Gaussian durations 5, 10, 20 (in 1/kappa units)."""
    out = {}
    for dt in (5.0, 10.0, 20.0):
        ens = ensemble_for_params(matched, n_sim=801)
        out[dt] = _timed(lambda d=dt, e=ens: integrate_storage(
            matched, e, PulseSpec(duration=d), (-6.0 * d, 6.0 * d)))
    return out


@pytest.fixture(scope="session")
def echo_inf(matched):
    """Matched echo cycle at T2 = infinity (duration 10, tau 50)."""
    ens = ensemble_for_params(matched, n_sim=801)
    return _timed(lambda: run_echo_cycle(
        matched, matched, ens, PulseSpec(duration=10.0), 50.0))


@pytest.fixture(scope="session")
def echo_decay(matched):
    """Echo cycles at tau/T2 = 0.005, 0.01, 0.05 (tau = 50/kappa)."""
    out = {}
    for t2 in (1e4, 5e3, 1e3):
        p = matched.with_(t2=t2)
        ens = ensemble_for_params(p, n_sim=801)
        out[t2] = _timed(lambda q=p, e=ens: run_echo_cycle(
            q, q, e, PulseSpec(duration=10.0), 50.0))
    return out


@pytest.fixture(scope="session")
def blockade_cycle(matched, blockade30):
    """Store matched, read against the blockaded stage (narrowband pulse)."""
    ens = ensemble_for_params(matched, n_sim=801)
    return _timed(lambda: run_echo_cycle(
        matched, blockade30, ens, PulseSpec(duration=20.0), 100.0))
