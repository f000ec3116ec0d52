import itertools

import numpy as np
import pytest

from chart import torus_chart
from sampling import (
	CIRCUMBALL,
	PROTECTION,
	ExclusionZone,
	PointSet,
	cover_cells,
	generate_net,
	grid_step,
	load_net,
	lower_bounds,
	probe_grid,
	save_net,
	upper_bounds,
	verify_exclusion,
	verify_net,
)

EPSILON = 0.39

# Cubic lattice with spacing 0.4: separated, covering radius 0.346
LATTICE = np.array(list(itertools.product(-1 + 0.4 * np.arange(5), repeat=3)))


def lattice_net(points=LATTICE, fixed=()):
	return PointSet(points, EPSILON, list(fixed), 0, False, False)


def test_probe_grid_is_cell_centred():
	probes = probe_grid(torus_chart(), 0.5)
	assert probes.shape == (64, 3)
	assert np.unique(probes[:, 0]).tolist() == [-0.75, -0.25, 0.25, 0.75]


def test_bounds_bracket_the_chord(field):
	rng = np.random.default_rng(3)
	starts = rng.uniform(-1, 1, (200, 3))
	ends = starts + rng.uniform(-0.2, 0.2, (200, 3))
	lower = lower_bounds(field, starts, ends, 0.3)
	upper = upper_bounds(field, starts, ends)
	assert np.all(lower <= upper + 1e-12)
	assert np.all(lower <= 0.3)


def test_bounds_follow_the_nearest_lift(flat):
	upper = upper_bounds(flat, [(0.95, 0, 0)], [(-0.95, 0, 0)])
	assert upper == pytest.approx(np.array([0.1]))


def test_lattice_is_a_certified_net(flat):
	density, separation, witnesses = verify_net(flat, lattice_net())
	assert density
	assert separation
	assert witnesses["pairs"] == []
	assert witnesses["probes"] == []
	assert witnesses["covering_radius_bound"] >= 0.2 * np.sqrt(3) - 1e-9


def test_duplicate_point_breaks_separation(flat):
	points = np.concatenate((LATTICE, LATTICE[7:8]))
	density, separation, witnesses = verify_net(flat, lattice_net(points))
	assert density
	assert not separation
	assert witnesses["pairs"] == [(7, len(LATTICE))]


def test_hole_breaks_density(flat):
	centre = np.array((0.4, 0.4, 0.4))
	keep = np.linalg.norm(LATTICE - centre, axis=1) > 0.35
	assert keep.sum() == len(LATTICE) - 8
	density, separation, witnesses = verify_net(flat, lattice_net(LATTICE[keep]))
	assert separation
	assert not density
	assert witnesses["probes"]
	assert all(np.linalg.norm(np.subtract(probe, centre)) < 0.4 for probe in witnesses["probes"])
	assert witnesses["covering_radius_bound"] > EPSILON


def test_density_includes_the_cell_margin(flat):
	# Spacing 0.5 leaves cube centres sqrt(3) / 4 = 0.433 from the lattice
	coarse = np.array(list(itertools.product(-1 + 0.5 * np.arange(4), repeat=3)))
	for epsilon in (0.422, 0.425, 0.43):
		density, separation, witnesses = verify_net(flat, PointSet(coarse, epsilon, [], 0, False, False))
		assert separation
		assert not density
		assert witnesses["probes"]
		assert witnesses["covering_radius_bound"] >= np.sqrt(3) / 4
		for probe in witnesses["probes"]:
			offset = np.abs(np.subtract(probe, 0.25)) % 0.5
			assert np.all(np.minimum(offset, 0.5 - offset) < 0.05)


def test_refined_cells_certify_a_tight_net(flat):
	coarse = np.array(list(itertools.product(-1 + 0.5 * np.arange(4), repeat=3)))
	density, separation, witnesses = verify_net(flat, PointSet(coarse, 0.45, [], 0, False, False))
	assert density
	assert separation
	assert witnesses["probes"] == []
	assert witnesses["uncertified"] == []
	assert np.sqrt(3) / 4 <= witnesses["covering_radius_bound"] < 0.45


def test_cover_cells_leaves_unresolved_cells_uncertified(flat):
	coarse = np.array(list(itertools.product(-1 + 0.5 * np.arange(4), repeat=3)))
	probes = probe_grid(torus_chart(), 0.45 / 4)
	uncovered, uncertified, bound = cover_cells(flat, coarse, probes, grid_step(torus_chart(), 0.45 / 4), 0.45, depth=0)
	assert uncovered == []
	assert uncertified
	assert bound >= 0.45


def test_grid_spacing_is_bounded(flat):
	with pytest.raises(ValueError, match="spacing"):
		verify_net(flat, lattice_net(), EPSILON / 2)


def test_verify_exclusion(flat):
	centre = LATTICE[0]
	zones = [ExclusionZone(centre, 0.1, CIRCUMBALL), ExclusionZone(LATTICE[1], 0.1, PROTECTION)]
	violations = verify_exclusion(flat, lattice_net(fixed=(1,)), zones)
	assert [(k, kind) for k, kind, _, _ in violations] == [(0, CIRCUMBALL)]
	assert violations[0][2] == 0


def test_net_round_trip(tmp_path, field):
	net = lattice_net(fixed=(0, 1))
	path = tmp_path / "net.json"
	save_net(path, field, net)
	loaded_field, loaded = load_net(path)
	assert loaded_field == field
	assert loaded.points == pytest.approx(LATTICE)
	assert loaded.fixed_indices == [0, 1]
	assert loaded.epsilon == EPSILON


def test_net_version_is_checked(tmp_path, field):
	path = tmp_path / "net.json"
	save_net(path, field, lattice_net())
	path.write_text(path.read_text().replace('"version": 1', '"version": 99'))
	with pytest.raises(ValueError, match="version"):
		load_net(path)


def test_flat_net_is_reproducible(flat):
	first = generate_net(flat, None, 0.25, 3)
	second = generate_net(flat, None, 0.25, 3)
	assert first.density_certified
	assert first.separation_certified
	assert first.fixed_indices == []
	np.testing.assert_array_equal(first.points, second.points)


def test_exclusion_zones(configuration, zones):
	kinds = [zone.kind for zone in zones]
	assert kinds[:2] == [CIRCUMBALL, CIRCUMBALL]
	assert PROTECTION in kinds
	assert zones[0].radius == configuration.circumradius
	assert zones[1].radius < configuration.epsilon


@pytest.mark.slow
def test_net_around_the_configuration(field, configuration, zones, net):
	assert net.density_certified
	assert net.separation_certified
	assert net.fixed_indices == [0, 1, 2, 3]
	assert net.points[:4] == pytest.approx(configuration.sigma)
	assert verify_exclusion(field, net, zones) == []
