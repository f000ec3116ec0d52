#!/usr/bin/env python3

# Local geodesic Delaunay complex, genericity and coface audit

import itertools
import json
import logging
import math
from collections import defaultdict, namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import spatial

from chart import PERIOD, bump_value, canonicalize, lift_towards, torus_chart
from geodesic import SolverFailure, chord_distances, circumcentre_newton, exact_distances, finite_jacobian, geodesic_distance
from sampling import CHUNK, lower_bounds, neighbour_pairs, periodic_tree, upper_bounds

COMPLEX_VERSION = 1

EMPTY_TOL = 1e-8

VERIFY_TOL = 1e-8

# Relative tolerance of distances behind certificates
CERTIFICATE_DISTANCE_TOL = 1e-10

NEWTON_TOL = 1e-9

GENERICITY_TOL = 1e-7

LABEL_DIVISIONS = 8

# Chord distances err by a few percent of epsilon at most
APPROXIMATE_SLACK = 0.1

ROOT_MATCH = 1e-5

VoronoiCertificate = namedtuple("VoronoiCertificate", ("simplex", "centres", "radii"))

SimplicialComplex = namedtuple(
	"SimplicialComplex", ("simplices", "certificates", "cofaces", "interior_vertices", "exhausted", "epsilon")
)

DefectReport = namedtuple("DefectReport", ("bad_triangles", "witness", "generic", "violations", "exhausted", "complex"))


class SeedExhausted(Exception):
	pass


def simplex(indices):
	indices = tuple(sorted(int(i) for i in indices))
	if len(set(indices)) != len(indices) or not 1 <= len(indices) <= 4:
		msg = f"Not a simplex: {indices}"
		raise ValueError(msg)
	return indices


def faces(s):
	"""All nonempty faces of s, s included."""
	return [c for k in range(1, len(s) + 1) for c in itertools.combinations(s, k)]


def euclidean_circumcentre(vertices):
	v = np.asarray(vertices, dtype=float)
	lhs = 2 * (v[1:] - v[0])
	rhs = np.sum(v[1:] ** 2, axis=1) - np.sum(v[0] ** 2)
	try:
		return np.linalg.solve(lhs, rhs)
	except np.linalg.LinAlgError:
		return None


class _Region:
	"""Net points lifted around a region centre, with a Euclidean tree on the lift."""

	def __init__(self, field, net, centre, radius):
		self.field = field
		self.epsilon = net.epsilon
		self.centre = np.asarray(centre, dtype=float)
		self.radius = radius
		self.edge = 2 * math.sqrt(1 + 2 * field.bump.amplitude) * net.epsilon
		points = np.asarray(net.points, dtype=float)
		self.points = points
		tree = periodic_tree(field.chart, points)
		_, idx = neighbour_pairs(tree, field.chart, self.centre[None], radius + self.edge + 2 * net.epsilon)
		self.index = np.sort(idx)
		self.lifted = lift_towards(field.chart, points[self.index], self.centre)
		self.local = {int(g): k for k, g in enumerate(self.index)}
		self.tree = spatial.cKDTree(self.lifted)
		inside = np.linalg.norm(self.lifted - self.centre, axis=1) <= radius
		self.interior = set(self.index[inside].tolist())

	def admissible(self, candidate):
		if not self.interior.intersection(candidate):
			return False
		v = self.vertices(candidate)
		return bool(np.all(spatial.distance.pdist(v) <= self.edge))

	def vertices(self, candidate):
		return self.lifted[[self.local[g] for g in candidate]]


def _label_candidates(region):
	"""4-subsets meeting at a grid block whose corners have different nearest samples."""
	field = region.field
	h = region.epsilon / LABEL_DIVISIONS
	half = region.radius + region.epsilon
	n = math.ceil(2 * half / h) + 1
	axis = np.linspace(-half, half, n)
	grid = region.centre + np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)

	k = min(8, len(region.lifted))
	_, idx = region.tree.query(grid, k=k)
	idx = idx.reshape(len(grid), k)
	nearest = np.empty(len(grid), dtype=np.intp)
	for start in range(0, len(grid), CHUNK):
		part = slice(start, start + CHUNK)
		chunk = grid[part]
		upper = upper_bounds(field, np.broadcast_to(chunk[:, None, :], (len(chunk), k, 3)), region.lifted[idx[part]])
		nearest[part] = idx[part][np.arange(len(chunk)), np.argmin(upper, axis=1)]
	labels = region.index[nearest].reshape(n, n, n)

	corners = np.stack(
		[labels[di : n - 1 + di, dj : n - 1 + dj, dk : n - 1 + dk] for di, dj, dk in itertools.product((0, 1), repeat=3)], axis=-1
	).reshape(-1, 8)
	corners = np.sort(corners, axis=1)
	distinct = 1 + np.count_nonzero(np.diff(corners, axis=1), axis=1)
	blocks = np.flatnonzero(distinct >= 4)

	centres = (grid.reshape(n, n, n, 3)[:-1, :-1, :-1] + (axis[1] - axis[0]) / 2).reshape(-1, 3)
	candidates = defaultdict(list)
	expected = set()
	for b in blocks:
		labels_here = np.unique(corners[b]).tolist()
		for combo in itertools.combinations(labels_here, 4):
			candidates[simplex(combo)].append(centres[b])
		if len(labels_here) == 4:
			expected.add(simplex(labels_here))
	return candidates, expected


def _delaunay_candidates(region):
	"""Tetrahedra of the Euclidean and metric-frozen Delaunay of the lifted points."""
	field = region.field
	candidates = defaultdict(list)
	if len(region.lifted) < 5:
		return candidates
	frozen = region.lifted.copy()
	frozen[:, 2] *= np.sqrt(1 + bump_value(field, frozen[:, 1]))
	for points in (region.lifted, frozen):
		try:
			tri = spatial.Delaunay(points)
		except spatial.QhullError:
			continue
		for s in tri.simplices:
			combo = simplex(region.index[s])
			centre = euclidean_circumcentre(region.lifted[s])
			if centre is not None:
				candidates[combo].append(centre)
	return candidates


def _seeds(region, candidate, seeds):
	"""Given seeds first, then their reflections in y about the vertex centroid and the Euclidean circumcentre."""
	v = region.vertices(candidate)
	mid = v[:, 1].mean()
	primary = [np.asarray(seed, dtype=float) for seed in seeds]
	secondary = []
	for seed in primary:
		mirrored = seed.copy()
		mirrored[1] = 2 * mid - mirrored[1]
		secondary.append(mirrored)
	centre = euclidean_circumcentre(v)
	if centre is not None and np.linalg.norm(centre - v.mean(axis=0)) < 2 * region.epsilon:
		secondary.append(centre)

	unique = []
	for seed, given in itertools.chain(((s, True) for s in primary), ((s, False) for s in secondary)):
		if all(np.linalg.norm(seed - other) > region.epsilon / LABEL_DIVISIONS for other, _ in unique):
			unique.append((seed, given))
	return unique


def _empty(region, candidate, q, radius, slack, exact):
	"""No other lifted point closer to q than radius - slack."""
	near = [k for k in region.tree.query_ball_point(q, radius) if int(region.index[k]) not in candidate]
	if not near:
		return True
	field = region.field
	others = region.lifted[near]
	starts = np.broadcast_to(q, others.shape)
	if not exact:
		return bool(np.all(upper_bounds(field, starts, others) >= radius - slack))
	close = others[lower_bounds(field, starts, others, radius) < radius - slack]
	return all(geodesic_distance(field, q, t, CERTIFICATE_DISTANCE_TOL).distance >= radius - slack for t in close)


def _solve_candidate(region, candidate, seeds, expected):
	"""Distinct certified Voronoi vertices of one candidate tetrahedron."""
	eps = region.epsilon
	v = region.vertices(candidate)
	chord = chord_distances(region.field)
	exact = exact_distances(region.field, CERTIFICATE_DISTANCE_TOL)
	roots = []

	def refine(start, jacobian):
		try:
			q, radius, _ = circumcentre_newton(exact, v, start, eps, tol=NEWTON_TOL, jacobian=jacobian, max_steps=40)
		except SolverFailure:
			if jacobian is None:
				raise
			q, radius, _ = circumcentre_newton(exact, v, start, eps, tol=NEWTON_TOL, max_steps=40)
		if all(np.linalg.norm(q - r) > ROOT_MATCH * eps for r, _ in roots) and _empty(
			region, candidate, q, radius, EMPTY_TOL * eps, exact=True
		):
			roots.append((q, radius))

	for seed, _ in seeds:
		try:
			q, radius, _ = circumcentre_newton(chord, v, seed, eps, tol=1e-9, max_steps=30, reach=2.0)
		except SolverFailure:
			continue
		if not _empty(region, candidate, q, radius, APPROXIMATE_SLACK * eps, exact=False):
			continue
		try:
			refine(q, finite_jacobian(chord, v, q, 1e-5 * eps))
		except SolverFailure as e:
			logging.debug("Exact refinement failed for %s: %s", candidate, e)

	if expected:
		# Two exact roots can share one chord root, so revisit given seeds no root came near
		attempts = failures = 0
		for seed, given in seeds:
			if not given or any(np.linalg.norm(seed - r) <= 2 * eps / LABEL_DIVISIONS for r, _ in roots):
				continue
			attempts += 1
			try:
				refine(seed, None)
			except SolverFailure:
				failures += 1
		if attempts and failures == attempts and not roots:
			msg = f"Every seed failed for {candidate}"
			raise SeedExhausted(msg)
	return roots


def _run(region, candidates, seeds, expected, threads):
	def work(candidate):
		try:
			return _solve_candidate(region, candidate, _seeds(region, candidate, seeds[candidate]), candidate in expected), False
		except SeedExhausted as e:
			logging.warning("%s", e)
			return [], True

	with ThreadPoolExecutor(max_workers=max(threads, 1)) as executor:
		results = list(executor.map(work, candidates))
	accepted = {}
	exhausted = []
	for candidate, (roots, failed) in zip(candidates, results):
		if roots:
			accepted[candidate] = roots
		if failed:
			exhausted.append(candidate)
	return accepted, exhausted


def _triangle_cofaces(tetrahedra):
	cofaces = defaultdict(list)
	for tet in sorted(tetrahedra):
		for tri in itertools.combinations(tet, 3):
			cofaces[simplex(tri)].append(tet)
	return cofaces


def _link_candidates(region, accepted, tried):
	"""Fourth vertices for interior triangles that so far have a single coface."""
	extra = defaultdict(list)
	for tri, tets in _triangle_cofaces(accepted).items():
		if len(tets) != 1 or not region.interior.intersection(tri):
			continue
		near = set.intersection(*(set(region.tree.query_ball_point(p, region.edge)) for p in region.vertices(tri)))
		for k in sorted(near):
			g = int(region.index[k])
			combo = simplex((*tri, g))
			if g in tets[0] or combo in tried or not region.admissible(combo):
				continue
			centre = euclidean_circumcentre(region.vertices(combo))
			if centre is not None and np.linalg.norm(centre - region.vertices(combo).mean(axis=0)) < 2 * region.epsilon:
				extra[combo].append(centre)
			extra[combo].extend(q for q, _ in accepted[tets[0]])
	return extra


def local_delaunay(field, net, region_centre, region_radius, threads=1):
	"""Delaunay tetrahedra with a vertex within region_radius of region_centre, with their certificates."""
	if not 0 < region_radius <= 4 * net.epsilon:
		msg = f"Region radius must lie in (0, {4 * net.epsilon:g}], got {region_radius!r}"
		raise ValueError(msg)
	region = _Region(field, net, region_centre, region_radius)

	labelled, expected = _label_candidates(region)
	seeds = defaultdict(list)
	for source in (labelled, _delaunay_candidates(region)):
		for combo, found in source.items():
			seeds[combo].extend(found)
	candidates = sorted(c for c in seeds if region.admissible(c))
	logging.info("%s candidate tetrahedra around %s", len(candidates), region.centre)
	accepted, exhausted = _run(region, candidates, seeds, expected, threads)

	tried = set(candidates)
	for _ in range(2):
		extra = _link_candidates(region, accepted, tried)
		if not extra:
			break
		logging.info("Link completion: %s more candidates", len(extra))
		tried.update(extra)
		more, more_exhausted = _run(region, sorted(extra), extra, set(), threads)
		accepted.update(more)
		exhausted.extend(more_exhausted)

	chart = field.chart
	certificates = [
		VoronoiCertificate(tet, [list(canonicalize(chart, q)) for q, _ in accepted[tet]], [float(r) for _, r in accepted[tet]])
		for tet in sorted(accepted)
	]
	simplices = {d: sorted({f for tet in accepted for f in faces(tet) if len(f) == d + 1}) for d in range(4)}
	simplices[0] = sorted(set(simplices[0]) | {(g,) for g in region.interior})
	logging.info("Accepted %s tetrahedra, %s flagged candidates", len(certificates), len(exhausted))
	return SimplicialComplex(
		simplices, certificates, dict(_triangle_cofaces(accepted)), sorted(region.interior), sorted(exhausted), net.epsilon
	)


def coface_census(complex_):
	"""Coface count per triangle, None where the region cuts its link."""
	interior = set(complex_.interior_vertices)
	return {
		tri: len(complex_.cofaces.get(tri, ())) if interior.intersection(tri) else None for tri in complex_.simplices[2]
	}


def nerve_consistency(complex_, period=PERIOD):
	"""Disagreements between the incidence of the complex and its certificate centres.

	Every certificate centre is a Voronoi vertex owned by one tetrahedron. The
	cofaces of a triangle are the owners of the centres at the ends of its
	Voronoi edge, so counting owners must reproduce the incidence counts.
	Returns (simplex, reason) pairs, empty when both views agree.
	"""
	problems = []
	owners = [(np.asarray(q, dtype=float), cert.simplex) for cert in complex_.certificates for q in cert.centres]
	for cert in complex_.certificates:
		if not cert.centres or len(cert.centres) != len(cert.radii):
			problems.append((cert.simplex, "certificate without a centre for every radius"))
	if owners:
		tree = periodic_tree(torus_chart(period), np.array([q for q, _ in owners]))
		for i, j in sorted(tree.query_pairs(ROOT_MATCH * complex_.epsilon)):
			if owners[i][1] != owners[j][1]:
				problems.append((owners[i][1], f"shares a Voronoi vertex with {owners[j][1]}"))

	tetrahedra = {cert.simplex for cert in complex_.certificates}
	if tetrahedra != set(complex_.simplices[3]):
		problems.append(((), "tetrahedra differ from the certified ones"))
	closure = {f for tet in tetrahedra for f in faces(tet) if len(f) == 3}
	problems.extend((tri, "not a face of a certified tetrahedron") for tri in sorted(set(complex_.simplices[2]) - closure))
	problems.extend((tri, "missing face of a certified tetrahedron") for tri in sorted(closure - set(complex_.simplices[2])))

	ends = defaultdict(set)
	for _, tet in owners:
		for tri in itertools.combinations(tet, 3):
			ends[simplex(tri)].add(tet)
	for tri in complex_.simplices[2]:
		incidence = len(complex_.cofaces.get(tri, ()))
		if incidence != len(ends[tri]):
			problems.append((tri, f"{incidence} cofaces by incidence, {len(ends[tri])} by centres"))
	if problems:
		logging.warning("%s nerve inconsistencies", len(problems))
	return problems


def check_genericity(field, net, certificates, tol=GENERICITY_TOL):
	"""Balls with five or more net points on their boundary."""
	chart = field.chart
	points = np.asarray(net.points, dtype=float)
	tree = periodic_tree(chart, points)
	band = tol * net.epsilon
	violations = []
	for cert in certificates:
		for centre, radius in zip(cert.centres, cert.radii):
			centre = np.asarray(centre, dtype=float)
			on = list(cert.simplex)
			_, idx = neighbour_pairs(tree, chart, centre[None], radius + band)
			others = [k for k in idx.tolist() if k not in cert.simplex]
			if others:
				starts = np.broadcast_to(centre, (len(others), 3))
				lower = lower_bounds(field, starts, points[others], radius + band)
				upper = upper_bounds(field, starts, points[others])
				for k, lo, up in zip(others, lower, upper):
					if lo >= radius + band or up <= radius - band:
						continue
					if abs(geodesic_distance(field, centre, points[k], CERTIFICATE_DISTANCE_TOL).distance - radius) < band:
						on.append(k)
			if len(on) >= 5:
				violations.append({"simplex": list(cert.simplex), "centre": centre.tolist(), "radius": radius, "points": sorted(on)})
	return not violations, violations


def detect_defect(field, net, conf, threads=1, tol=GENERICITY_TOL):
	"""Extract the complex around sigma and report triangles without exactly two cofaces."""
	centre = np.zeros(3) if conf is None or conf.c_plus is None else (conf.c_plus + conf.c_minus) / 2
	complex_ = local_delaunay(field, net, centre, 3 * net.epsilon, threads)
	census = coface_census(complex_)
	bad = sorted((tri, count) for tri, count in census.items() if count is not None and count != 2)

	sigma = tuple(sorted(net.fixed_indices))
	doubles = sorted((cert for cert in complex_.certificates if len(cert.centres) >= 2), key=lambda cert: cert.simplex != sigma)
	witness = doubles[0] if doubles else None
	generic, violations = check_genericity(field, net, complex_.certificates, tol)
	logging.info("%s bad triangles, witness %s, generic %s", len(bad), witness and witness.simplex, generic)
	return DefectReport(bad, witness, generic, violations, complex_.exhausted, complex_)


def verify_certificates(field, net, complex_, tol=VERIFY_TOL):
	"""Re-check every certificate against the whole net with the full solver."""
	chart = field.chart
	points = np.asarray(net.points, dtype=float)
	tree = periodic_tree(chart, points)
	slack = tol * net.epsilon
	failures = []
	for cert in complex_.certificates:
		for centre, radius in zip(cert.centres, cert.radii):
			centre = np.asarray(centre, dtype=float)
			for k in cert.simplex:
				d = geodesic_distance(field, centre, points[k], CERTIFICATE_DISTANCE_TOL).distance
				if abs(d - radius) > slack:
					failures.append((cert.simplex, centre.tolist(), k, d))
			_, idx = neighbour_pairs(tree, chart, centre[None], radius)
			for k in idx.tolist():
				if k in cert.simplex:
					continue
				d = geodesic_distance(field, centre, points[k], CERTIFICATE_DISTANCE_TOL).distance
				if d < radius - slack:
					failures.append((cert.simplex, centre.tolist(), k, d))
	if failures:
		logging.warning("%s certificate checks failed", len(failures))
	return failures


def euclidean_oracle(net, region_centre, region_radius, prune=None, period=PERIOD):
	"""Flat periodic Delaunay tetrahedra with a vertex in the region, by brute force over pruned 4-subsets."""
	chart = torus_chart(period)
	if prune is None:
		prune = 2 * net.epsilon
	centre = np.asarray(region_centre, dtype=float)
	lifted = lift_towards(chart, net.points, centre)
	dist = np.linalg.norm(lifted - centre, axis=1)
	tree = spatial.cKDTree(lifted)
	local = np.flatnonzero(dist <= region_radius + prune)
	neighbours = {int(g): set(tree.query_ball_point(lifted[g], prune)) for g in local}

	tetrahedra = set()
	for a in sorted(neighbours):
		for b in sorted(x for x in neighbours[a] if x > a and x in neighbours):
			common = neighbours[a] & neighbours[b]
			for c in sorted(x for x in common if x > b and x in neighbours):
				for d in sorted(x for x in common & neighbours[c] if x > c):
					quad = (a, b, c, d)
					if not np.any(dist[list(quad)] <= region_radius):
						continue
					v = lifted[list(quad)]
					q = euclidean_circumcentre(v)
					if q is None:
						continue
					r = np.linalg.norm(q - v[0])
					if all(k in quad for k in tree.query_ball_point(q, r * (1 - 1e-9))):
						tetrahedra.add(quad)
	return sorted(tetrahedra)


def save_complex(path, complex_, net_ref):
	census = coface_census(complex_)
	data = {
		"version": COMPLEX_VERSION,
		"net_ref": net_ref,
		"epsilon": complex_.epsilon,
		"simplices": {f"d{d}": [list(s) for s in complex_.simplices[d]] for d in range(4)},
		"certificates": [
			{"simplex": list(cert.simplex), "centres": [[float(x) for x in q] for q in cert.centres], "radii": list(cert.radii)}
			for cert in complex_.certificates
		],
		"census": [{"triangle": list(tri), "count": count} for tri, count in sorted(census.items())],
		"interior_vertices": [int(g) for g in complex_.interior_vertices],
		"exhausted": [list(c) for c in complex_.exhausted],
	}
	with open(path, "w", encoding="utf-8") as f:
		json.dump(data, f, ensure_ascii=False, indent="\t")


def load_complex(path):
	with open(path, encoding="utf-8") as f:
		data = json.load(f)
	if data.get("version") != COMPLEX_VERSION:
		msg = f"Unsupported complex version {data.get('version')!r} in {path}"
		raise ValueError(msg)
	simplices = {d: [tuple(s) for s in data["simplices"][f"d{d}"]] for d in range(4)}
	certificates = [VoronoiCertificate(tuple(c["simplex"]), c["centres"], c["radii"]) for c in data["certificates"]]
	complex_ = SimplicialComplex(
		simplices,
		certificates,
		dict(_triangle_cofaces(simplices[3])),
		data["interior_vertices"],
		[tuple(c) for c in data["exhausted"]],
		data["epsilon"],
	)
	return complex_, data["net_ref"]
