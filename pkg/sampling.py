#!/usr/bin/env python3

# Certified epsilon-nets that keep the two circumballs of sigma empty

import itertools
import json
import logging
import math
from collections import defaultdict, namedtuple

import numpy as np
from scipy import optimize, spatial, stats

from chart import canonicalize, metric_field, segment_lengths, slab_lower_bound, wrap
from geodesic import geodesic_distance

NET_VERSION = 1

# Pool size is POOL_FACTOR * (L / epsilon)^3, rounded up to a power of two
POOL_FACTOR = 64

BATCH = 8192

NEIGHBOURS = 8

CHUNK = 32768

# Halvings of an open covering cell before it is left uncertified
REFINE_DEPTH = 24

# Open cells from this level on are resolved with the full solver
EXACT_LEVEL = 10

REPAIR_ROUNDS = 8

PROTECTION_SAMPLES = 17

BOUNDARY_TOL = 1e-8

PointSet = namedtuple(
	"PointSet", ("points", "epsilon", "fixed_indices", "seed", "density_certified", "separation_certified")
)

ExclusionZone = namedtuple("ExclusionZone", ("centre", "radius", "kind"))

CIRCUMBALL = "circumball"
PROTECTION = "protection"


class CoverageImpossible(Exception):
	pass


def _shift(chart, points):
	return np.mod(np.asarray(points, dtype=float) + chart.period / 2, chart.period)


def periodic_tree(chart, points):
	return spatial.cKDTree(_shift(chart, points), boxsize=chart.period)


def neighbour_pairs(tree, chart, queries, radius):
	lists = tree.query_ball_point(_shift(chart, queries), radius)
	counts = np.fromiter(map(len, lists), dtype=np.intp, count=len(lists))
	rows = np.repeat(np.arange(len(lists)), counts)
	cols = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.intp, count=counts.sum())
	return rows, cols


def lower_bounds(field, starts, ends, reach):
	"""Certified lower bounds, capped at reach."""
	starts = np.asarray(starts, dtype=float)
	deltas = wrap(field.chart, np.asarray(ends, dtype=float) - starts)
	return np.minimum(slab_lower_bound(field, starts, deltas, reach), reach)


def upper_bounds(field, starts, ends):
	starts = np.asarray(starts, dtype=float)
	return segment_lengths(field, starts, starts + wrap(field.chart, np.asarray(ends, dtype=float) - starts))


def separation_reach(field, epsilon):
	return math.sqrt(1 + 2 * field.bump.amplitude) * epsilon


def grid_step(chart, spacing):
	"""Largest step at most spacing that divides the period."""
	return chart.period / math.ceil(chart.period / spacing)


def probe_grid(chart, spacing):
	step = grid_step(chart, spacing)
	n = round(chart.period / step)
	axis = -chart.period / 2 + (np.arange(n) + 0.5) * step
	return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)


def _edge_points(field, conf, sign):
	"""Points of the Voronoi edge of {u or v, p, w}, which lies in the plane x = 0."""
	s = conf.u[2]
	anchor = conf.u if sign > 0 else conf.v
	points = []
	for y in np.linspace(conf.c_minus[1], conf.c_plus[1], PROTECTION_SAMPLES):

		def gap(z, y=y):
			q = (0.0, y, z)
			return geodesic_distance(field, q, anchor, 1e-10).distance - geodesic_distance(field, q, conf.p, 1e-10).distance

		lo, hi = -0.999 * s, 0.999 * s
		if np.sign(gap(lo)) == np.sign(gap(hi)):
			logging.warning("No Voronoi edge point at y=%.6f", y)
			continue
		z = optimize.brentq(gap, lo, hi, xtol=1e-12)
		points.append((0.0, y, z))
	return np.array(points)


def exclusion_zones(field, conf):
	"""Both open circumballs of sigma, and balls guarding the Voronoi edges of its single-coface triangles."""
	radius = conf.circumradius
	zones = [ExclusionZone(conf.c_plus, radius, CIRCUMBALL), ExclusionZone(conf.c_minus, radius, CIRCUMBALL)]
	for sign in (1, -1):
		edge = _edge_points(field, conf, sign)
		if len(edge) < 2:
			continue
		spacing = upper_bounds(field, edge[:-1], edge[1:]).max()
		for q in edge:
			r = geodesic_distance(field, q, conf.p, 1e-10).distance + 2 * spacing
			zones.append(ExclusionZone(q, r, PROTECTION))
	if any(zone.radius >= conf.epsilon for zone in zones):
		logging.warning("An exclusion zone reaches epsilon")
	logging.info("%s exclusion zones, largest radius %.6f", len(zones), max(zone.radius for zone in zones))
	return zones


def _outside_zones(field, candidates, zones):
	ok = np.ones(len(candidates), dtype=bool)
	for zone in zones:
		ok &= lower_bounds(field, np.broadcast_to(zone.centre, candidates.shape), candidates, zone.radius) >= zone.radius
	return ok


def _greedy_batch(field, batch, epsilon):
	"""Sequential insertion inside a batch, using certified lower bounds only."""
	chart = field.chart
	rows, cols = neighbour_pairs(periodic_tree(chart, batch), chart, batch, separation_reach(field, epsilon))
	earlier = cols < rows
	rows, cols = rows[earlier], cols[earlier]
	close = lower_bounds(field, batch[rows], batch[cols], epsilon) < epsilon
	conflicts = defaultdict(list)
	for i, j in zip(rows[close].tolist(), cols[close].tolist()):
		conflicts[i].append(j)
	taken = np.zeros(len(batch), dtype=bool)
	for i in range(len(batch)):
		taken[i] = not any(taken[j] for j in conflicts[i])
	return batch[taken]


def _nearest_upper(field, points, probes, tree=None):
	chart = field.chart
	if tree is None:
		tree = periodic_tree(chart, points)
	k = min(NEIGHBOURS, len(points))
	best = np.empty(len(probes))
	for start in range(0, len(probes), CHUNK):
		chunk = probes[start : start + CHUNK]
		_, idx = tree.query(_shift(chart, chunk), k=k)
		idx = idx.reshape(len(chunk), k)
		starts = np.broadcast_to(chunk[:, None, :], (len(chunk), k, 3))
		best[start : start + CHUNK] = upper_bounds(field, starts, points[idx]).min(axis=1)
	return best


def _nearest_lower(field, tree, points, probes, epsilon):
	"""Certified lower bounds on the nearest distance, capped at epsilon."""
	rows, cols = neighbour_pairs(tree, field.chart, probes, epsilon)
	best = np.full(len(probes), float(epsilon))
	np.minimum.at(best, rows, lower_bounds(field, probes[rows], points[cols], epsilon))
	return best


def _exact_nearest(field, tree, points, q, epsilon):
	"""Distance from q to its nearest point, or inf if no point is closer than epsilon."""
	_, idx = neighbour_pairs(tree, field.chart, q[None], epsilon)
	near = points[idx]
	starts = np.broadcast_to(q, near.shape)
	lower = lower_bounds(field, starts, near, epsilon)
	best = epsilon
	for j in np.argsort(lower, kind="stable"):
		if lower[j] >= best:
			break
		best = min(best, geodesic_distance(field, q, near[j]).distance)
	return best if best < epsilon else math.inf


def cover_cells(field, points, probes, spacing, epsilon, tree=None, depth=REFINE_DEPTH):
	"""Covering check over the grid cells of side spacing centred at probes.

	Inside a cell of side h the distance to the net exceeds its value at the
	centre by at most (sqrt(3) / 2) h sqrt(1 + 2A), so a cell is settled once
	that sum is below epsilon. Open cells are split into eight, up to depth
	times. The check stops at the first level holding an uncovered probe.

	Returns (uncovered, uncertified, bound): (probe, chord distance) pairs with
	no point closer than epsilon, farthest first; leaf probes still open at full
	depth; and an upper bound on the covering radius.
	"""
	chart = field.chart
	points = np.asarray(points, dtype=float)
	if tree is None:
		tree = periodic_tree(chart, points)
	lipschitz = math.sqrt(3) / 2 * math.sqrt(1 + 2 * field.bump.amplitude)
	children = np.array(list(itertools.product((-0.25, 0.25), repeat=3)))
	probes = np.asarray(probes, dtype=float)
	h = spacing
	bound = 0.0
	uncovered = []
	uncertified = []
	for level in range(depth + 1):
		margin = lipschitz * h
		best = _nearest_upper(field, points, probes, tree)
		open_ = best + margin >= epsilon
		far = np.flatnonzero(open_ & (best >= epsilon))
		if len(far):
			lower = _nearest_lower(field, tree, points, probes[far], epsilon)
			uncovered.extend((probes[k], float(best[k])) for k in far[lower >= epsilon])
		if not uncovered and level >= min(EXACT_LEVEL, depth):
			# Chord bounds are too loose for cells this small
			for k in np.flatnonzero(open_):
				best[k] = min(best[k], _exact_nearest(field, tree, points, probes[k], epsilon))
				if best[k] >= epsilon:
					uncovered.append((probes[k], float(best[k])))
			open_ = best + margin >= epsilon
		if uncovered:
			bound = max(bound, float((best + margin).max()))
			break
		bound = max(bound, float((best[~open_] + margin).max(initial=0)))
		logging.debug("Level %s: %s of %s cells open", level, np.count_nonzero(open_), len(probes))
		if not open_.any():
			break
		if level == depth:
			uncertified = list(probes[open_])
			bound = max(bound, float((best[open_] + margin).max()))
			break
		probes = (probes[open_][:, None, :] + children * h).reshape(-1, 3)
		h /= 2
	uncovered.sort(key=lambda item: -item[1])
	return uncovered, uncertified, bound


def _separated(field, tree, points, q, epsilon):
	_, idx = neighbour_pairs(tree, field.chart, q[None], separation_reach(field, epsilon))
	others = points[idx]
	starts = np.broadcast_to(q, others.shape)
	if np.any(upper_bounds(field, starts, others) < epsilon):
		return False
	undecided = others[lower_bounds(field, starts, others, epsilon) < epsilon]
	if len(undecided):
		logging.debug("Resolving %s undecided pairs with the full solver", len(undecided))
	return all(geodesic_distance(field, q, other).distance >= epsilon for other in undecided)


def _outside_exact(field, q, zones):
	for zone in zones:
		if lower_bounds(field, zone.centre, q, zone.radius) >= zone.radius:
			continue
		if geodesic_distance(field, zone.centre, q).distance < zone.radius:
			return False
	return True


def generate_net(field, conf, epsilon, seed, zones=None):
	"""Greedy epsilon-net over a scrambled Sobol pool, then repair of uncovered probes.

	With conf None the net has no fixed points and no exclusion zones.
	"""
	chart = field.chart
	if conf is None:
		fixed = np.empty((0, 3))
		zones = []
	else:
		fixed = np.array([canonicalize(chart, q) for q in conf.sigma])
		if zones is None:
			zones = exclusion_zones(field, conf)

	size = POOL_FACTOR * (chart.period / epsilon) ** 3
	sobol = stats.qmc.Sobol(d=3, scramble=True, seed=seed)
	pool = sobol.random_base2(math.ceil(math.log2(size))) * chart.period - chart.period / 2
	logging.info("Candidate pool of %s points", len(pool))

	reach = separation_reach(field, epsilon)
	net = fixed
	for start in range(0, len(pool), BATCH):
		batch = pool[start : start + BATCH]
		batch = batch[_outside_zones(field, batch, zones)]
		if len(net) and len(batch):
			rows, cols = neighbour_pairs(periodic_tree(chart, net), chart, batch, reach)
			clear = np.ones(len(batch), dtype=bool)
			np.logical_and.at(clear, rows, lower_bounds(field, batch[rows], net[cols], epsilon) >= epsilon)
			batch = batch[clear]
		if len(batch):
			net = np.concatenate((net, _greedy_batch(field, batch, epsilon)))
		logging.debug("Batch %s: %s points", start // BATCH, len(net))
	logging.info("Greedy phase accepted %s points", len(net))

	probes = probe_grid(chart, epsilon / 4)
	spacing = grid_step(chart, epsilon / 4)
	pool_tree = periodic_tree(chart, pool)
	repaired = 0
	for attempt in range(REPAIR_ROUNDS):
		tree = periodic_tree(chart, net)
		uncovered, _, _ = cover_cells(field, net, probes, spacing, epsilon, tree)
		if not uncovered:
			break
		logging.info("Repair round %s: %s uncovered probes", attempt + 1, len(uncovered))
		for probe, _ in uncovered:
			if _exact_nearest(field, tree, net, probe, epsilon) < epsilon:
				continue
			_, near = neighbour_pairs(pool_tree, chart, probe[None], epsilon / 2)
			near = near[np.argsort(np.linalg.norm(wrap(chart, pool[near] - probe), axis=1), kind="stable")]
			for candidate in itertools.chain((probe,), pool[near]):
				if _outside_exact(field, candidate, zones) and _separated(field, tree, net, candidate, epsilon):
					net = np.concatenate((net, candidate[None]))
					tree = periodic_tree(chart, net)
					repaired += 1
					break
			else:
				msg = f"Probe {probe.tolist()} cannot be covered without breaking separation or an exclusion zone"
				raise CoverageImpossible(msg)
	else:
		logging.warning("Uncovered probes remain after %s repair rounds", REPAIR_ROUNDS)
	logging.info("Repair phase added %s points, net has %s points", repaired, len(net))

	result = PointSet(net, float(epsilon), list(range(len(fixed))), seed, False, False)
	density, separation, _ = verify_net(field, result)
	return result._replace(density_certified=density, separation_certified=separation)


def verify_net(field, net, grid_spacing=None):
	"""Check separation over close pairs and density over grid cells.

	Density holds only when the covering radius bound, Lipschitz margin
	included, is below epsilon. Returns (density, separation, witnesses) with
	witnesses holding the failing pairs, the uncovered and uncertified probes
	and the covering radius bound.
	"""
	chart = field.chart
	epsilon = net.epsilon
	if grid_spacing is None:
		grid_spacing = epsilon / 4
	if grid_spacing > epsilon / 4:
		msg = f"Grid spacing must be at most epsilon / 4, got {grid_spacing!r}"
		raise ValueError(msg)
	points = np.asarray(net.points, dtype=float)
	tree = periodic_tree(chart, points)

	pairs = tree.query_pairs(separation_reach(field, epsilon), output_type="ndarray")
	i, j = pairs.T if len(pairs) else (np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp))
	lower = lower_bounds(field, points[i], points[j], epsilon)
	upper = upper_bounds(field, points[i], points[j])
	bad_pairs = [(int(a), int(b)) for a, b in zip(i[upper < epsilon], j[upper < epsilon])]
	undecided = np.flatnonzero((lower < epsilon) & (upper >= epsilon))
	if len(undecided):
		logging.info("Resolving %s undecided pairs with the full solver", len(undecided))
	for k in undecided:
		if geodesic_distance(field, points[i[k]], points[j[k]]).distance < epsilon:
			bad_pairs.append((int(i[k]), int(j[k])))
	bad_pairs.sort()

	probes = probe_grid(chart, grid_spacing)
	uncovered, uncertified, bound = cover_cells(field, points, probes, grid_step(chart, grid_spacing), epsilon, tree)
	witnesses = {
		"pairs": bad_pairs,
		"probes": [probe.tolist() for probe, _ in uncovered],
		"uncertified": [probe.tolist() for probe in uncertified],
		"covering_radius_bound": bound,
	}
	logging.info(
		"Net of %s points: %s close pairs, %s probes, covering radius bound %.6f",
		len(points),
		len(pairs),
		len(probes),
		bound,
	)
	return bound < epsilon, not bad_pairs, witnesses


def verify_exclusion(field, net, zones):
	"""Net points inside an exclusion zone; fixed points only count against circumballs."""
	fixed = set(net.fixed_indices)
	points = np.asarray(net.points, dtype=float)
	violations = []
	for zone in zones:
		slack = BOUNDARY_TOL * net.epsilon
		lower = lower_bounds(field, np.broadcast_to(zone.centre, points.shape), points, zone.radius)
		for k in np.flatnonzero(lower < zone.radius - slack):
			if zone.kind == PROTECTION and k in fixed:
				continue
			d = geodesic_distance(field, zone.centre, points[k]).distance
			if d < zone.radius - slack:
				violations.append((int(k), zone.kind, d, zone.radius))
	return violations


def save_net(path, field, net):
	data = {
		"version": NET_VERSION,
		"L": field.chart.period,
		"A": field.bump.amplitude,
		"epsilon": net.epsilon,
		"seed": net.seed,
		"fixed_indices": list(net.fixed_indices),
		"points": np.asarray(net.points, dtype=float).tolist(),
	}
	with open(path, "w", encoding="utf-8") as f:
		json.dump(data, f, ensure_ascii=False, indent="\t")


def load_net(path):
	with open(path, encoding="utf-8") as f:
		data = json.load(f)
	if data.get("version") != NET_VERSION:
		msg = f"Unsupported net version {data.get('version')!r} in {path}"
		raise ValueError(msg)
	field = metric_field(data["A"], data["L"])
	net = PointSet(np.array(data["points"], dtype=float).reshape(-1, 3), data["epsilon"], data["fixed_indices"], data["seed"], False, False)
	return field, net
