import numpy as np
import pytest

from vppflex import caseio, derfleet, netmodel, uncert
from vppflex.derfleet import DerUnit, EssRecord, ForecastSeries, Load, polygonize_chart


@pytest.fixture(scope="session")
def desk4():
    return caseio.build_model(caseio.bundled_case("desk4"))


@pytest.fixture(scope="session")
def bus1():
    return caseio.build_model(caseio.bundled_case("bus1"))


@pytest.fixture(scope="session")
def bus2():
    return caseio.build_model(caseio.bundled_case("bus2"))


def one_bus(phases="a"):
    return netmodel.network_from_dict({"pcc": "0", "buses": [{"id": "0", "phases": phases}], "branches": []})


def box_unit(name, kind, p_min, p_max, q_min=-0.1, q_max=0.1, phase="a", **kw):
    chart = polygonize_chart("box", {"p_min": p_min, "p_max": p_max, "q_min": q_min, "q_max": q_max})
    return DerUnit(name, kind, "0", (phase,), (chart,), **kw)


def toy_model(units, load=(0.0,), forecasts=None, dt=1.0, gmm=None, net=None, phi=0.0):
    """Single-bus, single-phase model; errors default to a point mass."""
    net = net or one_bus()
    fleet = derfleet.Fleet(tuple(units))
    loads = [Load("0", "a", np.asarray(load, float), phi)]
    fc = None if forecasts is None else ForecastSeries(forecasts)
    d = len(derfleet.error_layout(fleet, loads))
    gmm = gmm or uncert.Gmm.point_mass(d)
    return caseio.assemble(net, fleet, loads, fc, [gmm], dt, horizon=len(load))


def ess_toy(T=2, e0=0.5, e_max=1.0, p=1.0):
    unit = box_unit("ESS1", "ESS", -p, p, ess=EssRecord(1.0, 0.0, e_max, e0))
    return toy_model([unit], load=(0.0,) * T)


def random_gmm(rng, dim, n_max=3):
    n = int(rng.integers(1, n_max + 1))
    w = rng.dirichlet(np.ones(n))
    mu = rng.normal(0, 1, (n, dim))
    covs = []
    for _ in range(n):
        A = rng.normal(0, 1, (dim, dim))
        covs.append(A @ A.T / dim + 0.1 * np.eye(dim))
    return uncert.Gmm(w, mu, np.array(covs))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
