#!/usr/bin/env python3

# Run: python3 cli.py reproduce

import argparse
import csv
import json
import logging
import os
import sys
import time
from collections import namedtuple

import matplotlib.pyplot as plt
import numpy as np

from chart import canonicalize, metric_field
from counterexample import (
	ConfigError,
	CounterexampleError,
	build_configuration,
	certify_rho,
	configuration_checks,
	counterexample_config,
	critical_xi,
	jacobian_analysis,
	scan_xi,
	select,
	solve_circumcentres,
	stability_probe,
	xi_table,
	xi_tilde_limit,
)
from delaunay import (
	check_genericity,
	coface_census,
	detect_defect,
	load_complex,
	local_delaunay,
	nerve_consistency,
	save_complex,
	verify_certificates,
)
from geodesic import SolverFailure, geodesic_distance, geodesic_distance_shooting
from sampling import (
	CHUNK,
	NEIGHBOURS,
	CoverageImpossible,
	exclusion_zones,
	generate_net,
	load_net,
	lower_bounds,
	neighbour_pairs,
	periodic_tree,
	save_net,
	upper_bounds,
	verify_exclusion,
	verify_net,
)

RunConfig = namedtuple(
	"RunConfig",
	("L", "A", "epsilon", "b_grid", "seed", "distance_tol", "newton_tol", "genericity_tol", "rho", "trials", "threads", "out_dir"),
)

DEFAULTS = RunConfig(2.0, 0.375, 0.1, 32, 42, 1e-8, 1e-10, 1e-7, None, 20, 1, "out")

# Slice figures: pixels per side and half-width in units of epsilon
PIXELS = 512
EXTENT = 2

FIGURE_TOL = 1e-6

PLANES = {"xz": (0, 2, 1), "xy": (0, 1, 2), "yz": (1, 2, 0)}

EXIT_CERTIFIED = 0
EXIT_ERROR = 1
EXIT_NOT_CERTIFIED = 2


class MissingArtifacts(Exception):
	pass


class StageFailure(Exception):
	def __init__(self, stage, error):
		super().__init__(f"{stage}: {error}")
		self.stage = stage
		self.error = error


STAGE_ERRORS = (CounterexampleError, SolverFailure, CoverageImpossible, MissingArtifacts, ValueError, OSError)


def timed(timings, stage, func, *args, **kwargs):
	logging.info("Stage %s", stage)
	start = time.perf_counter()
	try:
		result = func(*args, **kwargs)
	except STAGE_ERRORS as e:
		raise StageFailure(stage, e) from e
	timings[stage] = time.perf_counter() - start
	return result


def load_config(args):
	values = DEFAULTS._asdict()
	if args.config:
		with open(args.config, encoding="utf-8") as f:
			data = json.load(f)
		unknown = set(data) - set(RunConfig._fields)
		if unknown:
			msg = f"Unknown config keys: {', '.join(sorted(unknown))}"
			raise ConfigError(msg)
		values.update(data)
	for name in RunConfig._fields:
		value = getattr(args, name, None)
		if value is not None:
			values[name] = value
	cfg = RunConfig(**values)
	if cfg.b_grid < 3 or cfg.trials < 1 or cfg.threads < 1:
		msg = f"b_grid must be at least 3 and trials and threads positive, got {cfg.b_grid}, {cfg.trials} and {cfg.threads}"
		raise ConfigError(msg)
	counterexample_config(metric_field(cfg.A, cfg.L), cfg.epsilon)
	return cfg


def output_json(path, data):
	with open(path, "w", encoding="utf-8") as f:
		json.dump(data, f, ensure_ascii=False, indent="\t")
		f.write("\n")


def output_error(out_dir, stage, error):
	logging.critical("%s: %s: %s", stage, type(error).__name__, error)
	data = {"stage": stage, "error": type(error).__name__, "message": str(error)}
	print(json.dumps(data, ensure_ascii=False))
	try:
		os.makedirs(out_dir, exist_ok=True)
		output_json(os.path.join(out_dir, "error.json"), data)
	except OSError as e:
		logging.error("Could not write error.json: %s", e)


def output_scan_csv(path, rows):
	with open(path, "w", newline="", encoding="utf-8") as f:
		writer = csv.writer(f, lineterminator="\n")
		writer.writerow(("b", "xi_tilde", "xi_tilde_prime"))
		writer.writerows((repr(b), repr(xi), repr(slope)) for b, xi, slope in rows)


def output_certificate(cert):
	if cert is None:
		return None
	return {"simplex": list(cert.simplex), "centres": [list(map(float, q)) for q in cert.centres], "radii": list(cert.radii)}


def output_defect(report):
	return {
		"bad_triangles": [{"triangle": list(tri), "count": count} for tri, count in report.bad_triangles],
		"witness": output_certificate(report.witness),
		"generic": report.generic,
		"genericity_violations": report.violations,
		"exhausted": [list(c) for c in report.exhausted],
		"tetrahedra": len(report.complex.simplices[3]),
	}


def slice_labels(field, points, plane, offset, extent):
	"""Nearest sample of every pixel of a coordinate-plane slice through the origin.

	Chord upper bounds label the pixels. A pixel is resolved with the full
	solver when another sample's lower bound falls below its best upper bound,
	or when samples past the nearest few in the chart could still be closer.
	"""
	chart = field.chart
	first, second, normal = PLANES[plane]
	axis = np.linspace(-extent, extent, PIXELS)
	u, v = np.meshgrid(axis, axis, indexing="xy")
	pixels = np.zeros((PIXELS * PIXELS, 3))
	pixels[:, first] = u.ravel()
	pixels[:, second] = v.ravel()
	pixels[:, normal] = offset

	tree = periodic_tree(chart, points)
	k = min(NEIGHBOURS, len(points))
	reach, idx = tree.query(np.mod(pixels + chart.period / 2, chart.period), k=k)
	reach, idx = reach.reshape(len(pixels), k), idx.reshape(len(pixels), k)
	labels = np.empty(len(pixels), dtype=np.intp)
	best = np.empty(len(pixels))
	undecided = []
	for start in range(0, len(pixels), CHUNK):
		part = slice(start, start + CHUNK)
		near = points[idx[part]]
		starts = np.broadcast_to(pixels[part, None, :], near.shape)
		upper = upper_bounds(field, starts, near)
		winner = upper.argmin(axis=1)[:, None]
		best[part] = np.take_along_axis(upper, winner, axis=1)[:, 0]
		labels[part] = np.take_along_axis(idx[part], winner, axis=1)[:, 0]
		lower = lower_bounds(field, starts, near, best[part, None])
		np.put_along_axis(lower, winner, np.inf, axis=1)
		rivals = np.any(lower < best[part, None], axis=1)
		missed = reach[part, -1] < best[part]
		undecided.extend(start + np.flatnonzero(rivals | missed))

	logging.info("Resolving %s of %s pixels exactly", len(undecided), len(pixels))
	for i in undecided:
		_, near = neighbour_pairs(tree, chart, pixels[i][None], best[i])
		lower = lower_bounds(field, np.broadcast_to(pixels[i], (len(near), 3)), points[near], best[i])
		choices = np.union1d(near[lower < best[i]], labels[i : i + 1])
		distances = [geodesic_distance(field, pixels[i], points[j], FIGURE_TOL).distance for j in choices]
		labels[i] = choices[int(np.argmin(distances))]
	return labels.reshape(PIXELS, PIXELS)


def output_slice_figure(path, field, net, plane, centres=()):
	eps = net.epsilon
	extent = EXTENT * eps
	first, second, normal = PLANES[plane]
	points = np.asarray(net.points, dtype=float)
	labels = slice_labels(field, points, plane, 0.0, extent)

	plt.rcParams["svg.hashsalt"] = "torus-delaunay"
	fig, ax = plt.subplots(figsize=(8, 8))
	ax.imshow(labels % 20, cmap="tab20", origin="lower", extent=(-extent, extent, -extent, extent), interpolation="nearest")
	edges = (labels != np.roll(labels, 1, axis=0)) | (labels != np.roll(labels, 1, axis=1))
	edges[0, :] = edges[:, 0] = False
	ax.imshow(
		np.ma.masked_where(~edges, edges), cmap="gray_r", vmin=0, vmax=1, origin="lower", extent=(-extent, extent, -extent, extent)
	)

	lifted = np.array([canonicalize(field.chart, q) for q in points])
	near = (np.abs(lifted[:, normal]) < eps / 2) & np.all(np.abs(lifted[:, (first, second)]) <= extent, axis=1)
	ax.scatter(lifted[near, first], lifted[near, second], s=12, c="black", zorder=3)
	for name, k in zip("uvwp", net.fixed_indices):
		q = lifted[k]
		if abs(q[normal]) < eps / 2:
			ax.annotate(name, (q[first], q[second]), textcoords="offset points", xytext=(4, 4))
	for centre in centres:
		c = np.asarray(centre, dtype=float)
		ax.scatter(c[first], c[second], marker="x", s=60, c="red", zorder=4)

	ax.set_xlim(-extent, extent)
	ax.set_ylim(-extent, extent)
	ax.set_aspect("equal")
	ax.set_xlabel(plane[0])
	ax.set_ylabel(plane[1])
	ax.set_title(f"Voronoi regions in the {plane}-plane (A = {field.bump.amplitude:g}, ε = {eps:g})")

	fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
	plt.close(fig)
	logging.info("Wrote %s", path)


def solve_pipeline(cfg, timings):
	"""Scan, configuration and circumcentres, shared by several subcommands."""
	field = metric_field(cfg.A, cfg.L)
	ccfg = counterexample_config(field, cfg.epsilon)
	grid = ccfg.b_max * np.arange(1, cfg.b_grid + 1) / cfg.b_grid
	scan = timed(timings, "scan_xi", scan_xi, ccfg, grid)
	ccfg = timed(timings, "select", select, ccfg, scan)
	conf = timed(timings, "build_configuration", build_configuration, ccfg, scan)
	conf = timed(timings, "solve_circumcentres", solve_circumcentres, conf, ccfg, tol=cfg.newton_tol)
	return field, ccfg, scan, conf


def run_stability(cfg, conf, ccfg, timings, certify, net=None):
	if certify or cfg.rho is None:
		return timed(timings, "stability_probe", certify_rho, conf, ccfg, cfg.trials, cfg.seed, cfg.threads, net=net)
	return timed(timings, "stability_probe", stability_probe, conf, ccfg, cfg.rho, cfg.trials, cfg.seed, cfg.threads, net)


def certification_checks(net, conf, ccfg, jacobian, verified, defect, failures, stability):
	"""Every acceptance check of a reproduce run by name; the run is certified when all hold."""
	density, separation, excluded = verified
	sigma = tuple(sorted(net.fixed_indices))
	faces = {tuple(sorted((sigma[0], sigma[2], sigma[3]))), tuple(sorted((sigma[1], sigma[2], sigma[3])))}
	single = {tri for tri, count in defect.bad_triangles if count == 1}
	checks = configuration_checks(conf, ccfg, jacobian)
	checks |= {
		"density": bool(density),
		"separation": bool(separation),
		"exclusion": not excluded,
		"defect_detected": faces <= single and defect.witness is not None and defect.witness.simplex == sigma,
		"generic": bool(defect.generic),
		"certificates": not failures,
		"candidates_converged": not defect.exhausted,
		"nerve_consistent": not nerve_consistency(defect.complex, conf.field.chart.period),
		"stability": stability.trials > 0 and stability.successes == stability.trials,
	}
	return checks


def cmd_reproduce(cfg, _args):
	timings = {}
	os.makedirs(cfg.out_dir, exist_ok=True)
	field, ccfg, scan, conf = solve_pipeline(cfg, timings)
	limit = timed(timings, "xi_tilde_limit", xi_tilde_limit, ccfg)
	jacobian = timed(timings, "jacobian_analysis", jacobian_analysis, conf, ccfg)

	zones = timed(timings, "exclusion_zones", exclusion_zones, field, conf)
	net = timed(timings, "generate_net", generate_net, field, conf, cfg.epsilon, cfg.seed, zones)
	density, separation, witnesses = timed(timings, "verify_net", verify_net, field, net)
	excluded = timed(timings, "verify_exclusion", verify_exclusion, field, net, zones)

	defect = timed(timings, "detect_defect", detect_defect, field, net, conf, cfg.threads, cfg.genericity_tol)
	failures = timed(timings, "verify_certificates", verify_certificates, field, net, defect.complex)
	stability = run_stability(cfg, conf, ccfg, timings, False, net)

	flat = metric_field(0.0, cfg.L)
	control = timed(timings, "control_audit", detect_defect, flat, net, conf, cfg.threads, cfg.genericity_tol)

	checks = certification_checks(net, conf, ccfg, jacobian, (density, separation, excluded), defect, failures, stability)
	certified = all(checks.values())
	for name, ok in checks.items():
		if not ok:
			logging.warning("Check %s failed", name)

	save_net(os.path.join(cfg.out_dir, "net.json"), field, net)
	save_complex(os.path.join(cfg.out_dir, "complex.json"), defect.complex, "net.json")
	output_scan_csv(os.path.join(cfg.out_dir, "xi_scan.csv"), scan.rows)
	report = {
		"config": cfg._asdict(),
		"xi0": ccfg.xi0,
		"xi_tilde_limit": limit,
		"b_star": scan.b_star,
		"xi_selected": scan.xi_selected,
		"slope_star": scan.slope_star,
		"circumcentres": [conf.c_plus.tolist(), conf.c_minus.tolist()],
		"circumradius": conf.circumradius,
		"jacobian": {
			"Dh": jacobian.Dh.tolist(),
			"determinant": jacobian.determinant,
			"H_y_analytic": jacobian.H_y_analytic,
			"signs": {"H_z": jacobian.signs[0], "W_x": jacobian.signs[1], "H_y": jacobian.signs[2]},
			"structure_ok": jacobian.structure_ok,
		},
		"net": {
			"points": len(net.points),
			"density": density,
			"separation": separation,
			"covering_radius_bound": witnesses["covering_radius_bound"],
			"uncertified_cells": len(witnesses["uncertified"]),
			"exclusion_violations": len(excluded),
		},
		"defect": output_defect(defect) | {"certificate_failures": len(failures)},
		"stability": stability._asdict(),
		"control": output_defect(control),
		"checks": checks,
		"certified": certified,
	}
	output_json(os.path.join(cfg.out_dir, "report.json"), report)
	for plane in PLANES:
		path = os.path.join(cfg.out_dir, f"slice_{plane}.svg")
		timed(timings, f"figure_{plane}", output_slice_figure, path, field, net, plane, (conf.c_plus, conf.c_minus))
	output_json(os.path.join(cfg.out_dir, "timings.json"), timings)

	logging.info("Counterexample %s", "certified" if certified else "NOT certified")
	return EXIT_CERTIFIED if certified else EXIT_NOT_CERTIFIED


def cmd_distance(cfg, args):
	field = metric_field(cfg.A, cfg.L)
	result = timed({}, "distance", geodesic_distance, field, args.from_, args.to, cfg.distance_tol)
	try:
		shooting = geodesic_distance_shooting(field, args.from_, args.to, cfg.distance_tol).distance
	except SolverFailure as e:
		logging.warning("Shooting failed: %s", e)
		shooting = None
	data = {
		"distance": result.distance,
		"lower_bound": result.lower_bound,
		"upper_bound": result.upper_bound,
		"segments": len(result.path.vertices) - 1,
		"shooting": shooting,
		"agreement": None if shooting is None else abs(shooting - result.distance) / max(result.distance, 1e-300),
	}
	print(json.dumps(data, ensure_ascii=False, indent="\t"))
	return EXIT_CERTIFIED


def cmd_xi_scan(cfg, _args):
	field = metric_field(cfg.A, cfg.L)
	ccfg = counterexample_config(field, cfg.epsilon)
	grid = ccfg.b_max * np.arange(1, cfg.b_grid + 1) / cfg.b_grid
	rows = timed({}, "xi_scan", xi_table, ccfg, grid)
	os.makedirs(cfg.out_dir, exist_ok=True)
	path = os.path.join(cfg.out_dir, "xi_scan.csv")
	output_scan_csv(path, rows)
	logging.info("xi0 = %.9f, largest xi_tilde = %.9f", critical_xi(field), max(xi for _, xi, _ in rows))
	return EXIT_CERTIFIED


def cmd_net(cfg, args):
	timings = {}
	os.makedirs(cfg.out_dir, exist_ok=True)
	if args.control or not cfg.A:
		field = metric_field(cfg.A, cfg.L)
		net = timed(timings, "generate_net", generate_net, field, None, cfg.epsilon, cfg.seed)
	else:
		field, _, _, conf = solve_pipeline(cfg, timings)
		net = timed(timings, "generate_net", generate_net, field, conf, cfg.epsilon, cfg.seed)
	save_net(os.path.join(cfg.out_dir, "net.json"), field, net)
	logging.info("Net of %s points, density %s, separation %s", len(net.points), net.density_certified, net.separation_certified)
	return EXIT_CERTIFIED if net.density_certified and net.separation_certified else EXIT_NOT_CERTIFIED


def load_artifact(path, loader):
	if not os.path.exists(path):
		msg = f"{path} does not exist, run the net or reproduce subcommand first"
		raise MissingArtifacts(msg)
	return loader(path)


def cmd_complex(cfg, args):
	field, net = timed({}, "load_net", load_artifact, os.path.join(cfg.out_dir, "net.json"), load_net)
	radius = args.radius if args.radius is not None else 3 * net.epsilon
	complex_ = timed({}, "local_delaunay", local_delaunay, field, net, args.centre, radius, cfg.threads)
	save_complex(os.path.join(cfg.out_dir, "complex.json"), complex_, "net.json")
	census = coface_census(complex_)
	bad = sum(count is not None and count != 2 for count in census.values())
	logging.info("%s tetrahedra, %s triangles without two cofaces", len(complex_.simplices[3]), bad)
	return EXIT_CERTIFIED


def cmd_audit(cfg, _args):
	timings = {}
	field, net = timed(timings, "load_net", load_artifact, os.path.join(cfg.out_dir, "net.json"), load_net)
	complex_, _ = timed(timings, "load_complex", load_artifact, os.path.join(cfg.out_dir, "complex.json"), load_complex)
	density, separation, witnesses = timed(timings, "verify_net", verify_net, field, net)
	failures = timed(timings, "verify_certificates", verify_certificates, field, net, complex_)
	generic, violations = timed(timings, "check_genericity", check_genericity, field, net, complex_.certificates, cfg.genericity_tol)
	census = coface_census(complex_)
	mismatches = nerve_consistency(complex_, field.chart.period)
	data = {
		"density": density,
		"separation": separation,
		"covering_radius_bound": witnesses["covering_radius_bound"],
		"uncertified_cells": len(witnesses["uncertified"]),
		"certificate_failures": len(failures),
		"generic": generic,
		"genericity_violations": violations,
		"bad_triangles": [{"triangle": list(t), "count": c} for t, c in sorted(census.items()) if c is not None and c != 2],
		"double_centres": [list(cert.simplex) for cert in complex_.certificates if len(cert.centres) >= 2],
		"nerve_mismatches": [{"simplex": list(s), "reason": reason} for s, reason in mismatches],
	}
	output_json(os.path.join(cfg.out_dir, "audit.json"), data)
	print(json.dumps(data, ensure_ascii=False, indent="\t"))
	passed = density and separation and not failures and generic and not mismatches and data["double_centres"]
	return EXIT_CERTIFIED if passed else EXIT_NOT_CERTIFIED


def cmd_stability(cfg, args):
	timings = {}
	_, ccfg, _, conf = solve_pipeline(cfg, timings)
	net = None
	path = os.path.join(cfg.out_dir, "net.json")
	if os.path.exists(path):
		_, saved = timed(timings, "load_net", load_net, path)
		fixed = np.asarray(saved.points, dtype=float)[list(saved.fixed_indices)]
		if saved.epsilon == cfg.epsilon and fixed.shape == conf.sigma.shape and np.allclose(fixed, conf.sigma):
			logging.info("Checking circumballs against %s", path)
			net = saved
		else:
			logging.warning("%s was built for another configuration, ignoring it", path)
	report = run_stability(cfg, conf, ccfg, timings, args.certify, net)
	print(json.dumps(report._asdict(), ensure_ascii=False, indent="\t"))
	return EXIT_CERTIFIED if report.successes == report.trials else EXIT_NOT_CERTIFIED


def cmd_figure(cfg, args):
	field, net = timed({}, "load_net", load_artifact, os.path.join(cfg.out_dir, "net.json"), load_net)
	centres = ()
	report_path = os.path.join(cfg.out_dir, "report.json")
	if os.path.exists(report_path):
		with open(report_path, encoding="utf-8") as f:
			centres = json.load(f)["circumcentres"]
	path = os.path.join(cfg.out_dir, f"slice_{args.plane}.svg")
	timed({}, "figure", output_slice_figure, path, field, net, args.plane, centres)
	return EXIT_CERTIFIED


def build_parser():
	common = argparse.ArgumentParser(add_help=False)
	common.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
	common.add_argument("--out-dir", dest="out_dir")
	common.add_argument("--period", dest="L", type=float)
	common.add_argument("--amplitude", dest="A", type=float)
	common.add_argument("--epsilon", type=float)
	common.add_argument("--seed", type=int)
	common.add_argument("--rho", type=float)
	common.add_argument("--trials", type=int)
	common.add_argument("--b-grid", dest="b_grid", type=int)
	common.add_argument("--distance-tol", dest="distance_tol", type=float)
	common.add_argument("--newton-tol", dest="newton_tol", type=float)
	common.add_argument("--genericity-tol", dest="genericity_tol", type=float)
	common.add_argument("--threads", type=int)
	common.add_argument("-v", "--verbose", action="store_true")

	parser = argparse.ArgumentParser(description="Geodesic Delaunay counterexample on a perturbed flat torus")
	sub = parser.add_subparsers(dest="command", required=True)
	sub.add_parser("reproduce", parents=[common]).set_defaults(func=cmd_reproduce)

	distance = sub.add_parser("distance", parents=[common])
	distance.add_argument("--from", dest="from_", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
	distance.add_argument("--to", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
	distance.set_defaults(func=cmd_distance)

	sub.add_parser("xi-scan", parents=[common]).set_defaults(func=cmd_xi_scan)

	net = sub.add_parser("net", parents=[common])
	net.add_argument("--control", action="store_true", help="No fixed points or exclusion zones")
	net.set_defaults(func=cmd_net)

	complex_ = sub.add_parser("complex", parents=[common])
	complex_.add_argument("--centre", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("X", "Y", "Z"))
	complex_.add_argument("--radius", type=float)
	complex_.set_defaults(func=cmd_complex)

	sub.add_parser("audit", parents=[common]).set_defaults(func=cmd_audit)

	stability = sub.add_parser("stability", parents=[common])
	stability.add_argument("--certify", action="store_true", help="Bisect for the largest rho")
	stability.set_defaults(func=cmd_stability)

	figure = sub.add_parser("figure", parents=[common])
	figure.add_argument("--plane", choices=sorted(PLANES), default="xz")
	figure.set_defaults(func=cmd_figure)
	return parser


def main(argv=None):
	args = build_parser().parse_args(argv)

	logging.basicConfig(
		level=logging.DEBUG if args.verbose else logging.INFO,
		format="%(filename)s: [%(asctime)s]  %(levelname)s: %(message)s",
		force=True,
	)

	out_dir = args.out_dir or DEFAULTS.out_dir
	try:
		cfg = load_config(args)
	except (ValueError, OSError) as e:
		output_error(out_dir, "config", e)
		return EXIT_ERROR

	try:
		return args.func(cfg, args)
	except StageFailure as e:
		output_error(cfg.out_dir, e.stage, e.error)
		return EXIT_ERROR


if __name__ == "__main__":
	sys.exit(main())
