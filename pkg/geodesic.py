#!/usr/bin/env python3

# Geodesic distances on the perturbed torus

import itertools
import logging
import math
from collections import namedtuple

import numpy as np
from scipy import integrate, linalg, optimize

from chart import as_point, bump_curvature, bump_slope, bump_value, segment_lengths, straight_line_length, wrap

DISTANCE_TOL = 1e-8

MIN_TOL = 1e-12

START_SEGMENTS = 4

MAX_SEGMENTS = 4096

NEWTON_STEPS = 60

SHOOTING_SEGMENTS = 32

PATH_ENERGY = "PathEnergy"
SHOOTING = "Shooting"

GeodesicPath = namedtuple("GeodesicPath", ("vertices", "length", "converged", "solver_tag"))

DistanceResult = namedtuple("DistanceResult", ("distance", "path", "lower_bound", "upper_bound"))

LIFT_SHIFTS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float)


class SolverFailure(Exception):
	pass


class NotConverged(SolverFailure):
	pass


class BeyondInjectivityFloor(SolverFailure):
	pass


class RootNotFound(SolverFailure):
	pass


def candidate_lifts(field, q1, q2):
	"""Lattice translates of q2 - q1 that could carry the shortest path, nearest first."""
	chart = field.chart
	deltas = wrap(chart, as_point(q2) - as_point(q1)) + chart.period * LIFT_SHIFTS
	norms = np.linalg.norm(deltas, axis=1)
	best = norms.min()
	if best > chart.injectivity_floor:
		msg = f"Separation {best:.6g} exceeds the injectivity floor {chart.injectivity_floor:.6g}"
		raise BeyondInjectivityFloor(msg)
	# No lift farther than this can win under the largest metric inflation
	cutoff = math.sqrt(1 + 2 * field.bump.amplitude) * best
	keep = np.flatnonzero(norms <= cutoff * (1 + 1e-12))
	keep = keep[np.argsort(norms[keep], kind="stable")]
	return deltas[keep], best


def _is_straight(field, q1, delta):
	if not field.bump.amplitude or not delta[2]:
		return True
	# The planes where f' vanishes are fixed by a reflection isometry
	return not delta[1] and abs(float(bump_slope(field, q1[1]))) < 1e-15


def _energy(field, Y, Z):
	dy = np.diff(Y)
	dz = np.diff(Z)
	return np.sum(dy**2 + (1 + bump_value(field, (Y[:-1] + Y[1:]) / 2)) * dz**2)


def _newton_system(field, Y, Z):
	n = len(Y) - 1
	dy = np.diff(Y)
	dz = np.diff(Z)
	m = (Y[:-1] + Y[1:]) / 2
	h = 1 + bump_value(field, m)
	h1 = bump_slope(field, m)
	h2 = bump_curvature(field, m)

	# Local variables per segment: (Ya, Za, Yb, Zb)
	local_grad = np.stack((-2 * dy + h1 * dz**2 / 2, -2 * h * dz, 2 * dy + h1 * dz**2 / 2, 2 * h * dz), axis=1)
	yy = h2 * dz**2 / 4
	yz = h1 * dz
	local_hess = np.empty((n, 4, 4))
	local_hess[:, 0, 0] = local_hess[:, 2, 2] = 2 + yy
	local_hess[:, 0, 2] = local_hess[:, 2, 0] = -2 + yy
	local_hess[:, 1, 1] = local_hess[:, 3, 3] = 2 * h
	local_hess[:, 1, 3] = local_hess[:, 3, 1] = -2 * h
	local_hess[:, 0, 1] = local_hess[:, 1, 0] = -yz
	local_hess[:, 2, 1] = local_hess[:, 1, 2] = -yz
	local_hess[:, 0, 3] = local_hess[:, 3, 0] = yz
	local_hess[:, 2, 3] = local_hess[:, 3, 2] = yz

	a = np.arange(n)
	b = a + 1
	index = np.stack((2 * a - 2, 2 * a - 1, 2 * b - 2, 2 * b - 1), axis=1)
	free = np.stack((a >= 1, a >= 1, b <= n - 1, b <= n - 1), axis=1)

	size = 2 * (n - 1)
	grad = np.zeros(size)
	np.add.at(grad, index[free], local_grad[free])

	rows, cols = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
	ri = index[:, rows]
	ci = index[:, cols]
	mask = free[:, rows] & free[:, cols]
	band = np.zeros((7, size))
	np.add.at(band, (3 + ri[mask] - ci[mask], ci[mask]), local_hess[mask])
	return grad, band


def _relax(field, Y, Z, tol, scale):
	"""Newton descent on the discrete path energy with fixed endpoints."""
	if len(Y) < 3:
		return Y, Z, True
	eps = np.finfo(float).eps
	for _ in range(NEWTON_STEPS):
		energy = _energy(field, Y, Z)
		grad, band = _newton_system(field, Y, Z)
		gnorm = np.linalg.norm(grad)
		if gnorm <= tol * energy / scale:
			return Y, Z, True
		try:
			step = linalg.solve_banded((3, 3), band, -grad)
		except (linalg.LinAlgError, ValueError):
			step = None
		slope = grad @ step if step is not None else 0.0
		if step is None or not np.all(np.isfinite(step)) or slope >= 0:
			step = -grad / np.maximum(band[3], 1.0)
			slope = grad @ step
		t = 1.0
		while t > 1e-10:
			Yt = Y.copy()
			Zt = Z.copy()
			Yt[1:-1] += t * step[0::2]
			Zt[1:-1] += t * step[1::2]
			if _energy(field, Yt, Zt) <= energy + 1e-4 * t * slope + 4 * eps * energy:
				break
			t /= 2
		else:
			return Y, Z, np.max(np.abs(step)) <= 1e-10 * scale
		Y, Z = Yt, Zt
		if t == 1.0 and np.max(np.abs(step)) <= 4 * eps * scale:
			return Y, Z, True
	return Y, Z, False


def _refine(values):
	refined = np.empty(2 * len(values) - 1)
	refined[0::2] = values
	refined[1::2] = (values[:-1] + values[1:]) / 2
	return refined


def _lift_path_energy(field, q1, delta, tol):
	upper = straight_line_length(field, q1, q1 + delta)
	if _is_straight(field, q1, delta):
		return upper, GeodesicPath(np.array([q1, q1 + delta]), upper, True, PATH_ENERGY), upper

	scale = float(np.linalg.norm(delta[1:]))
	n = START_SEGMENTS
	t = np.linspace(0, 1, n + 1)
	Y = q1[1] + t * delta[1]
	Z = q1[2] + t * delta[2]
	previous = estimate = None
	while n <= MAX_SEGMENTS:
		Y, Z, ok = _relax(field, Y, Z, tol, scale)
		if not ok:
			msg = f"Path energy descent stalled at {n} segments"
			raise NotConverged(msg)
		t = np.linspace(0, 1, n + 1)
		vertices = np.column_stack((q1[0] + t * delta[0], Y, Z))
		length = float(segment_lengths(field, vertices[:-1], vertices[1:]).sum())
		if previous is not None:
			# The chord error is quadratic in the segment length
			extrapolated = (4 * length - previous) / 3
			done = abs(length - previous) <= tol * length
			if estimate is not None and abs(extrapolated - estimate) <= tol * extrapolated:
				done = True
			estimate = extrapolated
			if done:
				logging.debug("Path energy converged with %s segments", n)
				if length > upper:
					vertices = np.array([q1, q1 + delta])
					length = upper
				return min(estimate, length), GeodesicPath(vertices, length, True, PATH_ENERGY), upper
		previous = length
		Y = _refine(Y)
		Z = _refine(Z)
		n *= 2

	msg = f"Path length did not settle within {MAX_SEGMENTS} segments"
	raise NotConverged(msg)


def _shoot(field, q1, delta, vy, pz, samples=None):
	def rhs(_t, state):
		y, dy, _z = state
		h = 1 + float(bump_value(field, y))
		return (dy, pz * pz * float(bump_slope(field, y)) / (2 * h * h), pz / h)

	return integrate.solve_ivp(
		rhs, (0, 1), (q1[1], vy, q1[2]), method="DOP853", rtol=1e-12, atol=1e-14, t_eval=samples, dense_output=False
	)


def _lift_shooting(field, q1, delta, tol):
	upper = straight_line_length(field, q1, q1 + delta)
	if _is_straight(field, q1, delta):
		return upper, GeodesicPath(np.array([q1, q1 + delta]), upper, True, SHOOTING), upper

	target = q1[1:] + delta[1:]
	size = float(np.linalg.norm(delta))

	# x and z are cyclic: x is linear and (1 + f) z' is conserved
	def miss(params):
		sol = _shoot(field, q1, delta, *params)
		if not sol.success:
			return np.full(2, 1e3 * size)
		return np.array((sol.y[0, -1], sol.y[2, -1])) - target

	guess = (delta[1], (1 + float(bump_value(field, q1[1] + delta[1] / 2))) * delta[2])
	sol = optimize.root(miss, guess, method="hybr", options={"xtol": 1e-14})
	# hybr flags success=False once xtol is below machine precision, even on a hit
	error = float(np.linalg.norm(miss(sol.x)))
	if error > tol * size:
		msg = f"Shooting did not hit the target: {sol.message} (miss {error:.3g})"
		raise NotConverged(msg)
	if not sol.success:
		logging.debug("Shooting hit the target within %.3g: %s", error, sol.message)

	vy, pz = sol.x
	distance = math.sqrt(delta[0] ** 2 + vy**2 + pz**2 / (1 + float(bump_value(field, q1[1]))))
	t = np.linspace(0, 1, SHOOTING_SEGMENTS + 1)
	traj = _shoot(field, q1, delta, vy, pz, samples=t)
	vertices = np.column_stack((q1[0] + t * delta[0], traj.y[0], traj.y[2]))
	vertices[-1] = q1 + delta
	length = float(segment_lengths(field, vertices[:-1], vertices[1:]).sum())
	return min(distance, upper), GeodesicPath(vertices, length, True, SHOOTING), upper


def _distance(solver, field, q1, q2, tol):
	if not tol >= MIN_TOL:
		msg = f"Tolerance must be at least {MIN_TOL}, got {tol!r}"
		raise ValueError(msg)
	q1 = as_point(q1)
	deltas, lower = candidate_lifts(field, q1, q2)
	best = None
	upper = math.inf
	for delta in deltas:
		distance, path, lift_upper = solver(field, q1, delta, tol)
		upper = min(upper, lift_upper)
		if best is None or distance < best[0]:
			best = (distance, path)
	distance, path = best
	return DistanceResult(max(distance, lower), path, lower, upper)


def geodesic_distance(field, q1, q2, tol=DISTANCE_TOL):
	"""Geodesic distance by discrete path-energy descent, minimized over lattice lifts."""
	return _distance(_lift_path_energy, field, q1, q2, tol)


def geodesic_distance_shooting(field, q1, q2, tol=DISTANCE_TOL):
	"""Independent check: shoot the geodesic ODE using the conserved momenta."""
	return _distance(_lift_shooting, field, q1, q2, tol)


def chord_distance(field, q, targets):
	"""Straight-line metric lengths from q to already lifted targets (an upper bound)."""
	targets = np.asarray(targets, dtype=float)
	return segment_lengths(field, np.broadcast_to(as_point(q), targets.shape), targets)


def exact_distances(field, tol=DISTANCE_TOL):
	def distances(q, targets):
		return np.array([geodesic_distance(field, q, target, tol).distance for target in targets])

	return distances


def chord_distances(field):
	def distances(q, targets):
		return chord_distance(field, q, targets)

	return distances


def equidistance_residual(distances, vertices, q):
	d = distances(q, vertices)
	return d[:-1] - d[-1], d


def finite_jacobian(distances, vertices, q, step):
	"""Central difference Jacobian of the equidistance map."""
	columns = []
	for axis in range(3):
		e = np.zeros(3)
		e[axis] = step
		plus, _ = equidistance_residual(distances, vertices, q + e)
		minus, _ = equidistance_residual(distances, vertices, q - e)
		columns.append((plus - minus) / (2 * step))
	return np.column_stack(columns)


def circumcentre_newton(distances, vertices, seed, scale, tol=1e-10, step=1e-5, jacobian=None, max_steps=30, reach=4.0):
	"""Newton iteration for a point equidistant from four vertices.

	Returns (centre, radius, residual norm). A frozen jacobian turns this into a
	chord iteration, used to polish roots found with cheaper distances.
	"""
	vertices = np.asarray(vertices, dtype=float)
	seed = as_point(seed)
	q = seed.copy()
	r, d = equidistance_residual(distances, vertices, q)
	norm = np.linalg.norm(r)
	for _ in range(max_steps):
		if norm <= tol * scale:
			return q, float(d[-1]), norm
		J = jacobian if jacobian is not None else finite_jacobian(distances, vertices, q, step * scale)
		try:
			dq = np.linalg.solve(J, -r)
		except np.linalg.LinAlgError as e:
			msg = f"Singular Jacobian at {q}"
			raise RootNotFound(msg) from e
		t = 1.0
		while t >= 1 / 64:
			trial = q + t * dq
			if np.linalg.norm(trial - seed) > reach * scale:
				msg = f"Newton left the search ball around {seed}"
				raise RootNotFound(msg)
			rt, dt = equidistance_residual(distances, vertices, trial)
			if np.linalg.norm(rt) < (1 - 1e-4 * t) * norm:
				break
			t /= 2
		else:
			msg = f"No residual decrease from {q} (residual {norm:.3g})"
			raise RootNotFound(msg)
		q, r, d = trial, rt, dt
		norm = np.linalg.norm(r)
	if norm <= tol * scale:
		return q, float(d[-1]), norm
	msg = f"Newton did not converge from {seed} (residual {norm:.3g})"
	raise RootNotFound(msg)
