#!/usr/bin/env python3

# Tetrahedron with two Delaunay balls: scan, circumcentres, Jacobian and stability

import logging
import math
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from geodesic import SolverFailure, circumcentre_newton, exact_distances, finite_jacobian, geodesic_distance
from sampling import lower_bounds, neighbour_pairs, periodic_tree

# a^2 = 1/2 places u and w at distance > epsilon for every xi > 0
A_SCALE = 1 / math.sqrt(2)

B_GRID = 32

# Below this the scan treats a slope as numerically zero
SLOPE_FLOOR = -1e-8

DEGENERACY = 1e-4

SCAN_TOL = 1e-12

NEWTON_TOL = 1e-10

FD_STEP = 1e-5

STRUCTURE_TOL = 1e-6

H_Y_TOL = 1e-4

# Net points closer than this to a circumsphere, in units of epsilon, do not break its ball
EMPTY_SLACK = 1e-8

TRIALS = 20

SEED = 42

CounterexampleConfig = namedtuple("CounterexampleConfig", ("epsilon", "a", "xi", "xi0", "b", "b_max", "field", "slope"))

Configuration = namedtuple(
	"Configuration", ("u", "v", "w", "p", "sigma", "c_plus", "c_minus", "circumradius", "field", "epsilon")
)

XiScan = namedtuple("XiScan", ("rows", "b_star", "xi_selected", "slope_star"))

JacobianReport = namedtuple("JacobianReport", ("Dh", "determinant", "H_y_analytic", "signs", "structure_ok"))

StabilityReport = namedtuple("StabilityReport", ("rho", "trials", "successes", "failures"))


class CounterexampleError(Exception):
	pass


class ConfigError(ValueError):
	pass


class NoNegativeSlope(CounterexampleError):
	pass


class SeparationViolated(CounterexampleError):
	pass


class NewtonDiverged(CounterexampleError):
	pass


class RootsCoincide(CounterexampleError):
	pass


class SingularJacobian(CounterexampleError):
	pass


def critical_xi(field):
	return math.sqrt(1 + 2 * field.bump.amplitude) - 1


def counterexample_config(field, epsilon):
	chart = field.chart
	if not 0 < epsilon < chart.injectivity_floor / 2 or epsilon > chart.period / 20:
		msg = f"Epsilon must lie in (0, {min(chart.injectivity_floor / 2, chart.period / 20):g}], got {epsilon!r}"
		raise ConfigError(msg)
	return CounterexampleConfig(float(epsilon), A_SCALE, None, critical_xi(field), None, A_SCALE / 2, field, None)


def select(cfg, scan):
	"""Fix b and xi from a scan."""
	if not 0 < scan.xi_selected < cfg.xi0:
		msg = f"Selected xi {scan.xi_selected!r} outside (0, {cfg.xi0!r})"
		raise ConfigError(msg)
	return cfg._replace(b=scan.b_star, xi=scan.xi_selected, slope=scan.slope_star)


def _xi_tilde(cfg, b, tol):
	scale = cfg.a * cfg.epsilon
	d = geodesic_distance(cfg.field, (0, 0, scale), (0, b * cfg.epsilon, 0), tol).distance
	return math.sqrt(max(d * d - (b * cfg.epsilon) ** 2, 0)) / scale - 1


def xi_tilde(cfg, b, tol=SCAN_TOL):
	if not 0 < b <= cfg.b_max * (1 + 1e-12):
		msg = f"b must lie in (0, {cfg.b_max:g}], got {b!r}"
		raise ConfigError(msg)
	return _xi_tilde(cfg, b, tol)


def xi_tilde_limit(cfg, tol=SCAN_TOL):
	"""Extrapolate xi_tilde to b -> 0+, using that it is even in b."""
	near = _xi_tilde(cfg, cfg.b_max / 64, tol)
	far = _xi_tilde(cfg, cfg.b_max / 32, tol)
	return (4 * near - far) / 3


def _central_slope(cfg, b, h, tol):
	def diff(step):
		return (_xi_tilde(cfg, b + step, tol) - _xi_tilde(cfg, b - step, tol)) / (2 * step)

	return (4 * diff(h / 2) - diff(h)) / 3


def xi_table(cfg, grid=None, tol=SCAN_TOL):
	"""Rows (b, xi_tilde, slope) with central differences inside the grid."""
	if grid is None:
		grid = cfg.b_max * np.arange(1, B_GRID + 1) / B_GRID
	grid = np.asarray(grid, dtype=float)
	if len(grid) < 3 or np.any(np.diff(grid) <= 0) or grid[0] <= 0 or grid[-1] > cfg.b_max * (1 + 1e-12):
		msg = f"Grid must be strictly increasing in (0, {cfg.b_max:g}] with at least 3 points"
		raise ConfigError(msg)

	values = np.array([_xi_tilde(cfg, b, tol) for b in grid])
	slopes = np.gradient(values, grid, edge_order=2)
	rows = list(zip(grid.tolist(), values.tolist(), slopes.tolist()))
	for b, xi, slope in rows:
		logging.debug("b=%.6f xi_tilde=%.12f slope=%.3e", b, xi, slope)
	return rows


def scan_xi(cfg, grid=None, tol=SCAN_TOL):
	"""Tabulate xi_tilde on a grid of b and pick the steepest descent point."""
	rows = xi_table(cfg, grid, tol)
	grid, values, slopes = (np.array(column) for column in zip(*rows))

	best = None
	# Interior points only, where the difference is central
	for i in range(1, len(grid) - 1):
		if not slopes[i] < SLOPE_FLOOR:
			continue
		if not 0 < values[i] or abs(values[i] - cfg.xi0) < DEGENERACY * cfg.xi0:
			logging.warning("Rejected b=%.6f: xi_tilde=%.9f is degenerate", grid[i], values[i])
			continue
		if best is None or slopes[i] < slopes[best]:
			best = i
	if best is None:
		msg = f"xi_tilde has no negative slope on {len(grid)} points in (0, {grid[-1]:g}]"
		raise NoNegativeSlope(msg)

	h = min(grid[best] - grid[best - 1], grid[best + 1] - grid[best])
	slope_star = _central_slope(cfg, grid[best], h, tol)
	logging.info("Selected b=%.6f, xi=%.12f, slope=%.6e", grid[best], values[best], slope_star)
	return XiScan(rows, float(grid[best]), float(values[best]), slope_star)


def place_vertices(cfg, xi):
	"""u, v on the z-axis at +-a eps, w, p on the x-axis at +-a eps (1 + xi)."""
	s = cfg.a * cfg.epsilon
	u = np.array((0.0, 0.0, s))
	v = np.array((0.0, 0.0, -s))
	w = np.array((s * (1 + xi), 0.0, 0.0))
	p = np.array((-s * (1 + xi), 0.0, 0.0))
	return Configuration(u, v, w, p, np.array((u, v, w, p)), None, None, None, cfg.field, cfg.epsilon)


def _with_sigma(conf, sigma):
	return conf._replace(u=sigma[0], v=sigma[1], w=sigma[2], p=sigma[3], sigma=sigma)


def build_configuration(cfg, scan):
	if not 0 < scan.xi_selected < cfg.xi0:
		msg = f"Selected xi {scan.xi_selected!r} outside (0, {cfg.xi0!r})"
		raise ConfigError(msg)
	conf = place_vertices(cfg, scan.xi_selected)
	names = "uvwp"
	for i in range(4):
		for j in range(i + 1, 4):
			d = geodesic_distance(cfg.field, conf.sigma[i], conf.sigma[j]).distance
			logging.debug("d(%s, %s) = %.12f", names[i], names[j], d)
			if not d > cfg.epsilon:
				msg = f"d({names[i]}, {names[j]}) = {d:.9g} is not above epsilon {cfg.epsilon:g}"
				raise SeparationViolated(msg)
	return conf


def circumcentre_residual(conf, q, tol=SCAN_TOL):
	"""(d(q,u) - d(q,p), d(q,v) - d(q,p), d(q,w) - d(q,p))"""
	d = exact_distances(conf.field, tol)(np.asarray(q, dtype=float), conf.sigma)
	return d[:3] - d[3]


def solve_circumcentres(conf, cfg, seeds=None, tol=NEWTON_TOL):
	eps = cfg.epsilon
	if seeds is None:
		c = np.array((0.0, cfg.b * eps, 0.0))
		seeds = (c, -c)
	distances = exact_distances(conf.field, SCAN_TOL)

	roots = []
	for seed in seeds:
		try:
			q, radius, _ = circumcentre_newton(distances, conf.sigma, seed, eps, tol=tol, step=FD_STEP)
			J = finite_jacobian(distances, conf.sigma, q, FD_STEP * eps)
		except SolverFailure as e:
			msg = f"Circumcentre Newton failed from {np.asarray(seed).tolist()}: {e}"
			raise NewtonDiverged(msg) from e
		# A root on a curve of solutions is not isolated
		if abs(np.linalg.det(J)) <= 1e-8 * np.linalg.norm(J) ** 3:
			msg = f"Equidistant set through {q.tolist()} is degenerate"
			raise RootsCoincide(msg)
		roots.append((q, radius))

	(c_plus, r_plus), (c_minus, r_minus) = roots
	if not np.linalg.norm(c_plus - c_minus) > eps * cfg.b:
		msg = f"Both seeds converged to {c_plus.tolist()}"
		raise RootsCoincide(msg)
	logging.debug("Circumcentres %s, %s with radii %.12f, %.12f", c_plus, c_minus, r_plus, r_minus)
	return conf._replace(c_plus=c_plus, c_minus=c_minus, circumradius=max(r_plus, r_minus))


def jacobian_analysis(conf, cfg):
	"""Jacobian of the equidistance map at c_plus, in coordinates scaled by epsilon."""
	eps = cfg.epsilon
	distances = exact_distances(conf.field, SCAN_TOL)
	Dh = eps * finite_jacobian(distances, conf.sigma, conf.c_plus, FD_STEP * eps)
	determinant = float(np.linalg.det(Dh))

	(h_x, h_y, h_z), _, (w_x, w_y, w_z) = Dh
	# H(x, y, -z) is the second component
	structure_ok = bool(np.allclose(Dh[1], (h_x, h_y, -h_z), rtol=0, atol=STRUCTURE_TOL))
	structure_ok &= abs(w_y) <= STRUCTURE_TOL and abs(w_z) <= STRUCTURE_TOL

	a2 = cfg.a**2
	H_y_analytic = a2 * (1 + cfg.xi) * cfg.slope * eps / math.sqrt((1 + cfg.xi) ** 2 * a2 + cfg.b**2)
	signs = (int(np.sign(h_z)), int(np.sign(w_x)), int(np.sign(h_y)))
	structure_ok &= signs == (-1, -1, -1)
	structure_ok &= abs(H_y_analytic - h_y) <= H_Y_TOL * abs(H_y_analytic)

	if abs(determinant) <= 1e-12 * max(np.abs(Dh).max(), 1e-300) ** 3:
		msg = f"Jacobian is singular at b={cfg.b:g} (det={determinant:.3g})"
		raise SingularJacobian(msg)
	if not structure_ok:
		logging.warning("Jacobian at %s does not have the expected structure:\n%s", conf.c_plus, Dh)
	logging.info("det(Dh) = %.6e, H_y = %.6e (analytic %.6e)", determinant, h_y, H_y_analytic)
	return JacobianReport(Dh, determinant, H_y_analytic, signs, structure_ok)


def configuration_checks(conf, cfg, jacobian):
	"""Named acceptance checks on the solved configuration and its Jacobian."""
	eps = cfg.epsilon
	axis = np.array((0.0, cfg.b * eps, 0.0))
	on_axis = np.linalg.norm(conf.c_plus - axis) < STRUCTURE_TOL * eps and np.linalg.norm(conf.c_minus + axis) < STRUCTURE_TOL * eps
	return {
		"centres_on_axis": bool(on_axis),
		"circumradius_below_epsilon": bool(conf.circumradius < eps),
		"jacobian_structure": bool(jacobian.structure_ok),
	}


def _neighbourhood(conf, net):
	"""Net points other than sigma, with their periodic tree."""
	others = np.delete(np.asarray(net.points, dtype=float), list(net.fixed_indices), axis=0)
	return others, periodic_tree(conf.field.chart, others)


def balls_empty(conf, others, tree):
	"""Whether both circumballs of sigma are free of the other net points."""
	field = conf.field
	slack = EMPTY_SLACK * conf.epsilon
	for centre in (conf.c_plus, conf.c_minus):
		radius = geodesic_distance(field, centre, conf.p, SCAN_TOL).distance
		_, idx = neighbour_pairs(tree, field.chart, centre[None], radius)
		near = others[idx]
		close = near[lower_bounds(field, np.broadcast_to(centre, near.shape), near, radius) < radius - slack]
		for q in close:
			if geodesic_distance(field, centre, q).distance < radius - slack:
				logging.debug("%s lies inside the circumball at %s", q, centre)
				return False
	return True


def _trial(conf, cfg, rho, seq, neighbourhood=None):
	rng = np.random.default_rng(seq)
	direction = rng.normal(size=(4, 3))
	direction /= np.linalg.norm(direction, axis=1)[:, None]
	radius = rho * rng.random(4) ** (1 / 3)
	moved = _with_sigma(conf, conf.sigma + direction * radius[:, None])
	try:
		solved = solve_circumcentres(moved, cfg, seeds=(conf.c_plus, conf.c_minus))
	except CounterexampleError as e:
		logging.debug("Trial %s failed: %s", seq.spawn_key, e)
		return False
	if not solved.circumradius < cfg.epsilon:
		return False
	return neighbourhood is None or balls_empty(solved, *neighbourhood)


def stability_probe(conf, cfg, rho, trials=TRIALS, seed=SEED, threads=1, net=None):
	"""Displace each vertex uniformly within a ball of radius rho and re-solve.

	With a net, a trial also needs both circumballs to stay empty of the
	other net points.
	"""
	if not 0 <= rho < 1e-2 * cfg.epsilon:
		msg = f"rho must lie in [0, {1e-2 * cfg.epsilon:g}), got {rho!r}"
		raise ConfigError(msg)
	if trials < 1:
		msg = f"trials must be positive, got {trials!r}"
		raise ConfigError(msg)
	neighbourhood = None if net is None else _neighbourhood(conf, net)
	children = np.random.SeedSequence(seed).spawn(trials)
	with ThreadPoolExecutor(max_workers=max(threads, 1)) as executor:
		outcomes = list(executor.map(lambda seq: _trial(conf, cfg, rho, seq, neighbourhood), children))
	failures = [i for i, ok in enumerate(outcomes) if not ok]
	logging.info("rho=%.3g: %s/%s trials kept two circumcentres", rho, trials - len(failures), trials)
	return StabilityReport(rho, trials, trials - len(failures), failures)


def certify_rho(conf, cfg, trials=TRIALS, seed=SEED, threads=1, steps=6, net=None):
	"""Largest rho, to one significant figure, at which every trial succeeds."""
	eps = cfg.epsilon
	lo, hi = 1e-4 * eps, 9e-3 * eps
	if stability_probe(conf, cfg, hi, trials, seed, threads, net).successes == trials:
		lo = hi
	else:
		for _ in range(steps):
			mid = math.sqrt(lo * hi)
			if stability_probe(conf, cfg, mid, trials, seed, threads, net).successes == trials:
				lo = mid
			else:
				hi = mid
	unit = 10 ** math.floor(math.log10(lo))
	rho = math.floor(lo / unit) * unit
	return stability_probe(conf, cfg, rho, trials, seed, threads, net)
