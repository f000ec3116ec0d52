import math

import numpy as np
import pytest

from chart import bump_value, metric_field
from counterexample import (
	B_GRID,
	ConfigError,
	NewtonDiverged,
	NoNegativeSlope,
	RootsCoincide,
	XiScan,
	balls_empty,
	build_configuration,
	circumcentre_residual,
	configuration_checks,
	counterexample_config,
	critical_xi,
	jacobian_analysis,
	place_vertices,
	scan_xi,
	select,
	solve_circumcentres,
	stability_probe,
	xi_table,
	xi_tilde,
	xi_tilde_limit,
)
from geodesic import geodesic_distance
from sampling import PointSet, periodic_tree

EPSILON = 0.1


@pytest.mark.parametrize(("amplitude", "expected"), [(0.375, 0.3228757), (0.18, 0.1661904), (0, 0)])
def test_critical_xi(amplitude, expected):
	assert critical_xi(metric_field(amplitude)) == pytest.approx(expected, abs=1e-7)


@pytest.mark.parametrize("epsilon", [0, -0.1, 0.2])
def test_epsilon_out_of_range(field, epsilon):
	with pytest.raises(ConfigError, match="Epsilon"):
		counterexample_config(field, epsilon)


def test_xi_tilde_vanishes_on_flat_metric(flat):
	cfg = counterexample_config(flat, EPSILON)
	for b in (0.05, 0.2, cfg.b_max):
		assert xi_tilde(cfg, b) == pytest.approx(0, abs=1e-10)


def test_xi_tilde_rejects_b_outside_range(cfg):
	with pytest.raises(ConfigError):
		xi_tilde(cfg, 0)
	with pytest.raises(ConfigError):
		xi_tilde(cfg, cfg.b_max * 1.01)


def test_xi_tilde_stays_below_critical_value(cfg):
	value = xi_tilde(cfg, cfg.b_max)
	assert 0 < value < cfg.xi0


def test_xi_tilde_limit_approaches_critical_value(cfg):
	assert xi_tilde_limit(cfg) == pytest.approx(cfg.xi0, abs=1e-3)


def test_scan_selects_an_interior_descent_point(cfg, scan):
	b, values, slopes = (np.array(column) for column in zip(*scan.rows))
	assert len(scan.rows) == B_GRID
	assert np.all(np.diff(b) > 0)
	assert np.all(values < cfg.xi0)
	assert b[0] < scan.b_star < b[-1]
	assert scan.slope_star < 0
	assert scan.xi_selected == pytest.approx(xi_tilde(cfg, scan.b_star), abs=1e-9)


@pytest.mark.slow
def test_scan_is_stable_under_grid_refinement(cfg, scan):
	grid = cfg.b_max * np.arange(1, 2 * B_GRID + 1) / (2 * B_GRID)
	fine = scan_xi(cfg, grid)
	assert abs(fine.b_star - scan.b_star) <= cfg.b_max / B_GRID
	assert xi_tilde(cfg, fine.b_star) == pytest.approx(fine.xi_selected, abs=1e-6)


def test_scan_on_flat_metric_finds_no_descent(flat):
	cfg = counterexample_config(flat, EPSILON)
	rows = xi_table(cfg)
	assert all(abs(xi) < 1e-10 for _, xi, _ in rows)
	with pytest.raises(NoNegativeSlope):
		scan_xi(cfg)


def test_xi_table_rejects_bad_grids(cfg):
	with pytest.raises(ConfigError):
		xi_table(cfg, [0.1, 0.2])
	with pytest.raises(ConfigError):
		xi_table(cfg, [0.1, 0.3, 0.2])
	with pytest.raises(ConfigError):
		xi_table(cfg, [0.1, 0.2, cfg.b_max * 2])


def test_select_rejects_xi_beyond_critical(cfg):
	with pytest.raises(ConfigError):
		select(cfg, XiScan([], 0.2, cfg.xi0, -0.1))


def test_configuration_distances(field, selected, scan):
	conf = build_configuration(selected, scan)
	a = selected.a
	d_uv = geodesic_distance(field, conf.u, conf.v).distance
	d_wp = geodesic_distance(field, conf.w, conf.p).distance
	assert d_uv == pytest.approx(0.1870829, abs=1e-7)
	assert d_wp == pytest.approx(2 * a * EPSILON * (1 + selected.xi), rel=1e-12)
	assert d_wp < d_uv


def test_residual_at_the_origin(selected, scan):
	conf = build_configuration(selected, scan)
	r = circumcentre_residual(conf, (0, 0, 0))
	assert r[2] == pytest.approx(0, abs=1e-12)
	assert r[0] > 0


def test_circumcentres_lie_on_the_y_axis(selected, configuration):
	eps = EPSILON
	c = np.array((0, selected.b * eps, 0))
	assert configuration.c_plus == pytest.approx(c, abs=1e-6 * eps)
	assert configuration.c_minus == pytest.approx(-c, abs=1e-6 * eps)
	assert configuration.c_minus == pytest.approx(-configuration.c_plus, abs=1e-8 * eps)
	assert np.linalg.norm(configuration.c_plus - configuration.c_minus) >= selected.b * eps
	for centre in (configuration.c_plus, configuration.c_minus):
		assert np.abs(circumcentre_residual(configuration, centre)).max() <= 1e-8 * eps


def test_circumradius_bounds(field, selected, configuration):
	eps, a, b = EPSILON, selected.a, selected.b
	bound = b * eps * math.sqrt((1 + float(bump_value(field, 0))) * a * a / (b * b) + 1)
	assert configuration.circumradius < eps
	assert configuration.circumradius < bound


def test_jacobian_structure(selected, configuration):
	report = jacobian_analysis(configuration, selected)
	h_y = report.Dh[0, 1]
	assert report.structure_ok
	assert report.signs == (-1, -1, -1)
	assert report.determinant != 0
	assert h_y == pytest.approx(report.H_y_analytic, rel=1e-4)


def test_flat_metric_has_no_circumcentres(flat):
	cfg = counterexample_config(flat, EPSILON)._replace(b=0.2, xi=0.1, slope=0.0)
	conf = place_vertices(cfg, 0.1)
	with pytest.raises((NewtonDiverged, RootsCoincide)):
		solve_circumcentres(conf, cfg)


def test_stability_rejects_large_rho(selected, configuration):
	with pytest.raises(ConfigError, match="rho"):
		stability_probe(configuration, selected, 0.02 * EPSILON)


@pytest.mark.slow
def test_stability_without_perturbation(selected, configuration):
	report = stability_probe(configuration, selected, 0, trials=2)
	assert report.successes == 2
	assert report.failures == []


@pytest.mark.slow
def test_stability_under_small_perturbation(selected, configuration):
	report = stability_probe(configuration, selected, 1e-3 * EPSILON, trials=20, seed=42)
	assert report.successes == 20


@pytest.mark.slow
def test_construction_at_smaller_epsilon(field):
	eps = 0.05
	cfg = counterexample_config(field, eps)
	scan = scan_xi(cfg)
	assert all(xi < cfg.xi0 for _, xi, _ in scan.rows)
	selected = select(cfg, scan)
	conf = solve_circumcentres(build_configuration(selected, scan), selected)
	assert conf.c_plus == pytest.approx(np.array((0, selected.b * eps, 0)), abs=1e-6 * eps)
	assert conf.circumradius < eps
	report = jacobian_analysis(conf, selected)
	assert report.signs == (-1, -1, -1)
	assert report.determinant != 0


def test_configuration_checks(selected, configuration):
	report = jacobian_analysis(configuration, selected)
	assert configuration_checks(configuration, selected, report) == {
		"centres_on_axis": True,
		"circumradius_below_epsilon": True,
		"jacobian_structure": True,
	}
	moved = configuration._replace(c_plus=configuration.c_plus + (0, 0, 1e-5 * EPSILON))
	assert not configuration_checks(moved, selected, report)["centres_on_axis"]
	assert not configuration_checks(configuration, selected, report._replace(structure_ok=False))["jacobian_structure"]
	wide = configuration._replace(circumradius=EPSILON)
	assert not configuration_checks(wide, selected, report)["circumradius_below_epsilon"]


def test_stability_needs_a_trial(selected, configuration):
	with pytest.raises(ConfigError, match="trials"):
		stability_probe(configuration, selected, 0, trials=0)


def test_balls_empty_of_far_points(configuration):
	others = np.array(((0.5, 0.5, 0.5), (-0.6, 0.3, 0.2)))
	assert balls_empty(configuration, others, periodic_tree(configuration.field.chart, others))


def test_point_at_the_origin_fills_both_balls(configuration):
	others = np.zeros((1, 3))
	assert not balls_empty(configuration, others, periodic_tree(configuration.field.chart, others))


@pytest.mark.slow
def test_stability_checks_the_circumballs_against_the_net(selected, configuration):
	crowded = PointSet(np.concatenate((configuration.sigma, [(0, 0, 0)])), EPSILON, [0, 1, 2, 3], 0, False, False)
	report = stability_probe(configuration, selected, 0, trials=1, net=crowded)
	assert report.successes == 0
	sparse = PointSet(np.concatenate((configuration.sigma, [(0.5, 0.5, 0.5)])), EPSILON, [0, 1, 2, 3], 0, False, False)
	assert stability_probe(configuration, selected, 0, trials=1, net=sparse).successes == 1


@pytest.mark.slow
def test_stability_keeps_the_net_circumballs_empty(selected, configuration, net):
	report = stability_probe(configuration, selected, 1e-4 * EPSILON, trials=4, seed=42, net=net)
	assert report.successes == 4
