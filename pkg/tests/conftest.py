import pytest

from chart import metric_field
from counterexample import build_configuration, counterexample_config, scan_xi, select, solve_circumcentres
from delaunay import detect_defect
from sampling import exclusion_zones, generate_net

AMPLITUDE = 0.375
EPSILON = 0.1
SEED = 42


@pytest.fixture(scope="session")
def field():
	return metric_field(AMPLITUDE)


@pytest.fixture(scope="session")
def flat():
	return metric_field(0.0)


@pytest.fixture(scope="session")
def cfg(field):
	return counterexample_config(field, EPSILON)


@pytest.fixture(scope="session")
def scan(cfg):
	return scan_xi(cfg)


@pytest.fixture(scope="session")
def selected(cfg, scan):
	return select(cfg, scan)


@pytest.fixture(scope="session")
def configuration(selected, scan):
	return solve_circumcentres(build_configuration(selected, scan), selected)


@pytest.fixture(scope="session")
def zones(field, configuration):
	return exclusion_zones(field, configuration)


@pytest.fixture(scope="session")
def net(field, configuration, zones):
	return generate_net(field, configuration, EPSILON, SEED, zones)


@pytest.fixture(scope="session")
def defect(field, net, configuration):
	return detect_defect(field, net, configuration)


@pytest.fixture(scope="session")
def flat_net(flat):
	return generate_net(flat, None, EPSILON, 7)
