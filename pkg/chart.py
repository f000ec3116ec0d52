#!/usr/bin/env python3

# Torus chart, perturbed metric and straight segment lengths

import math
from collections import namedtuple

import numpy as np
from scipy import integrate

PERIOD = 2.0

DIMENSION = 3

# Largest admissible amplitude, f(0) = 2A <= 3/4
MAX_AMPLITUDE = 3 / 8

QUAD_TOL = 1e-10

# Gauss-Legendre nodes mapped to [0, 1]
_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(16)
GAUSS_NODES = (_NODES + 1) / 2
GAUSS_WEIGHTS = _WEIGHTS / 2

TorusChart = namedtuple("TorusChart", ("period", "dimension", "injectivity_floor"))

BumpFunction = namedtuple("BumpFunction", ("amplitude",))

MetricField = namedtuple("MetricField", ("chart", "bump"))

ChartPoint = namedtuple("ChartPoint", ("x", "y", "z"))


def torus_chart(period=PERIOD):
	if not period > 0:
		msg = f"Period must be positive, got {period!r}"
		raise ValueError(msg)
	# Flat torus injectivity radius is L/2, halve it again for the bounded perturbation
	return TorusChart(float(period), DIMENSION, period / 4)


def metric_field(amplitude, period=PERIOD):
	if not 0 <= amplitude <= MAX_AMPLITUDE:
		msg = f"Amplitude must lie in [0, {MAX_AMPLITUDE}], got {amplitude!r}"
		raise ValueError(msg)
	return MetricField(torus_chart(period), BumpFunction(float(amplitude)))


def _wavenumber(field):
	return 2 * math.pi / field.chart.period


def bump_value(field, y):
	return field.bump.amplitude * (1 + np.cos(_wavenumber(field) * np.asarray(y, dtype=float)))


def bump_slope(field, y):
	k = _wavenumber(field)
	return -field.bump.amplitude * k * np.sin(k * np.asarray(y, dtype=float))


def bump_curvature(field, y):
	k = _wavenumber(field)
	return -field.bump.amplitude * k * k * np.cos(k * np.asarray(y, dtype=float))


def bump_minimum(field, lo, hi):
	"""Minimum of f over [lo, hi], elementwise."""
	lo = np.asarray(lo, dtype=float)
	hi = np.asarray(hi, dtype=float)
	period = field.chart.period
	# f vanishes at the odd half periods L/2 + mL
	m = np.ceil((lo - period / 2) / period)
	trough = period / 2 + m * period <= hi
	ends = np.minimum(bump_value(field, lo), bump_value(field, hi))
	return np.where(trough, 0.0, ends)


def as_point(q):
	q = np.asarray(q, dtype=float)
	if q.shape != (DIMENSION,):
		msg = f"Expected a point with {DIMENSION} coordinates, got shape {q.shape}"
		raise ValueError(msg)
	return q


def canonicalize(chart, q):
	half = chart.period / 2
	q = np.mod(as_point(q) + half, chart.period) - half
	# mod can round up to exactly L/2
	q[q >= half] -= chart.period
	return ChartPoint(*q.tolist())


def wrap(chart, delta):
	"""Reduce displacement vectors into the fundamental domain, elementwise."""
	half = chart.period / 2
	return np.mod(np.asarray(delta, dtype=float) + half, chart.period) - half


def lift_towards(chart, q, anchor):
	anchor = np.asarray(anchor, dtype=float)
	return anchor + wrap(chart, np.asarray(q, dtype=float) - anchor)


def metric_at(field, q):
	q = as_point(q)
	return np.diag([1.0, 1.0, 1.0 + float(bump_value(field, q[1]))])


def straight_line_length(field, q1, q2):
	"""Metric length of the chart segment from q1 to q2 (no wraparound)."""
	q1 = as_point(q1)
	v = as_point(q2) - q1
	flat = v[0] ** 2 + v[1] ** 2
	if not v[2] or not field.bump.amplitude:
		return math.sqrt(flat + v[2] ** 2)
	if not v[1]:
		return math.sqrt(flat + (1 + float(bump_value(field, q1[1]))) * v[2] ** 2)

	def integrand(t):
		return math.sqrt(flat + (1 + float(bump_value(field, q1[1] + t * v[1]))) * v[2] ** 2)

	length, _ = integrate.quad(integrand, 0, 1, epsabs=0, epsrel=QUAD_TOL, limit=200)
	return length


def segment_lengths(field, starts, ends):
	starts = np.asarray(starts, dtype=float)
	v = np.asarray(ends, dtype=float) - starts
	flat = v[..., 0] ** 2 + v[..., 1] ** 2
	y = starts[..., 1, None] + GAUSS_NODES * v[..., 1, None]
	integrand = np.sqrt(flat[..., None] + (1 + bump_value(field, y)) * v[..., 2, None] ** 2)
	return integrand @ GAUSS_WEIGHTS


def slab_lower_bound(field, starts, deltas, reach):
	"""Lower bound on the distance along deltas, valid below reach.

	A path shorter than reach cannot leave the y-slab spanned by its ends
	widened by (reach - |dy|) / 2, so d >= min(bound, reach).
	"""
	starts = np.asarray(starts, dtype=float)
	deltas = np.asarray(deltas, dtype=float)
	y1 = starts[..., 1]
	y2 = y1 + deltas[..., 1]
	slack = np.maximum(reach - np.abs(deltas[..., 1]), 0) / 2
	floor = bump_minimum(field, np.minimum(y1, y2) - slack, np.maximum(y1, y2) + slack)
	return np.sqrt(deltas[..., 0] ** 2 + deltas[..., 1] ** 2 + (1 + floor) * deltas[..., 2] ** 2)
