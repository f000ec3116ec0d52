import csv
import itertools
import json
import math

import numpy as np
import pytest

import cli
from chart import metric_field
from cli import DEFAULTS, EXIT_CERTIFIED, EXIT_ERROR, certification_checks, main
from counterexample import StabilityReport, jacobian_analysis
from delaunay import DefectReport, SimplicialComplex, VoronoiCertificate, faces
from geodesic import geodesic_distance
from sampling import PointSet, lower_bounds, save_net, upper_bounds

A = 1 / math.sqrt(2)


def read_json(path):
	with open(path, encoding="utf-8") as f:
		return json.load(f)


def read_scan(path):
	with open(path, newline="", encoding="utf-8") as f:
		rows = list(csv.reader(f))
	assert rows[0] == ["b", "xi_tilde", "xi_tilde_prime"]
	return np.array(rows[1:], dtype=float)


def test_distance_between_u_and_v(tmp_path, capsys):
	argv = ["distance", "--from", "0", "0", str(A * 0.1), "--to", "0", "0", str(-A * 0.1), "--out-dir", str(tmp_path)]
	assert main(argv) == EXIT_CERTIFIED
	data = json.loads(capsys.readouterr().out)
	assert data["distance"] == pytest.approx(0.1870829, abs=1e-7)
	assert data["shooting"] == pytest.approx(data["distance"], rel=1e-8)


@pytest.mark.parametrize("target", [("0.3", "0.2", "0.1"), ("2.3", "0.2", "-1.9")])
def test_distance_to_the_same_point(tmp_path, capsys, target):
	argv = ["distance", "--from", "0.3", "0.2", "0.1", "--to", *target, "--out-dir", str(tmp_path)]
	assert main(argv) == EXIT_CERTIFIED
	assert json.loads(capsys.readouterr().out)["distance"] == pytest.approx(0, abs=1e-12)


def test_xi_scan_on_flat_metric(tmp_path):
	assert main(["xi-scan", "--amplitude", "0", "--out-dir", str(tmp_path)]) == EXIT_CERTIFIED
	rows = read_scan(tmp_path / "xi_scan.csv")
	assert len(rows) == DEFAULTS.b_grid
	assert np.all(np.diff(rows[:, 0]) > 0)
	assert np.all(np.abs(rows[:, 1]) < 1e-10)


def test_xi_scan_stays_below_critical_value(tmp_path):
	assert main(["xi-scan", "--b-grid", "8", "--out-dir", str(tmp_path)]) == EXIT_CERTIFIED
	rows = read_scan(tmp_path / "xi_scan.csv")
	assert len(rows) == 8
	assert np.all(rows[:, 1] < 0.3228757)
	assert np.all(rows[:, 1] > 0)


def test_reproduce_on_flat_metric_fails_at_the_scan(tmp_path, capsys):
	assert main(["reproduce", "--amplitude", "0", "--out-dir", str(tmp_path)]) == EXIT_ERROR
	error = read_json(tmp_path / "error.json")
	assert error["stage"] == "scan_xi"
	assert error["error"] == "NoNegativeSlope"
	assert json.loads(capsys.readouterr().out) == error
	assert not (tmp_path / "report.json").exists()


@pytest.mark.parametrize(
	"flags", [["--epsilon", "0.3"], ["--amplitude", "0.5"], ["--b-grid", "2"], ["--trials", "0"], ["--threads", "0"]]
)
def test_invalid_configuration(tmp_path, flags):
	assert main(["distance", "--from", "0", "0", "0", "--to", "0.1", "0", "0", "--out-dir", str(tmp_path), *flags]) == EXIT_ERROR
	assert read_json(tmp_path / "error.json")["stage"] == "config"


def test_flags_override_config_file(tmp_path):
	config = tmp_path / "config.json"
	config.write_text(json.dumps({"epsilon": 0.3}))
	base = ["distance", "--from", "0", "0", "0", "--to", "0.1", "0", "0", "--out-dir", str(tmp_path), "--config", str(config)]
	assert main(base) == EXIT_ERROR
	assert main([*base, "--epsilon", "0.1"]) == EXIT_CERTIFIED


def test_unknown_config_keys(tmp_path):
	config = tmp_path / "config.json"
	config.write_text(json.dumps({"radius": 1}))
	argv = ["distance", "--from", "0", "0", "0", "--to", "0.1", "0", "0", "--out-dir", str(tmp_path), "--config", str(config)]
	assert main(argv) == EXIT_ERROR
	assert "radius" in read_json(tmp_path / "error.json")["message"]


def test_figure_needs_a_net(tmp_path):
	assert main(["figure", "--out-dir", str(tmp_path)]) == EXIT_ERROR
	assert read_json(tmp_path / "error.json")["error"] == "MissingArtifacts"


def test_figure_from_a_saved_net(tmp_path):
	# Offset in z so the slice does not sit on a Voronoi face
	points = np.array(list(itertools.product(-1 + 0.4 * np.arange(5), repeat=3))) + (0, 0, 0.1)
	save_net(tmp_path / "net.json", metric_field(0), PointSet(points, 0.39, [], 0, False, False))
	assert main(["figure", "--plane", "xy", "--out-dir", str(tmp_path)]) == EXIT_CERTIFIED
	assert "<svg" in (tmp_path / "slice_xy.svg").read_text()


@pytest.mark.slow
def test_reproduce(tmp_path):
	argv = ["reproduce", "--out-dir", str(tmp_path), "--rho", "1e-4", "--trials", "3", "--threads", "4"]
	assert main(argv) == EXIT_CERTIFIED
	report = read_json(tmp_path / "report.json")
	assert report["certified"]
	assert report["xi0"] == pytest.approx(0.3228757, abs=1e-7)
	assert report["xi_tilde_limit"] == pytest.approx(report["xi0"], abs=1e-3)
	assert [t["count"] for t in report["defect"]["bad_triangles"]] == [1, 1]
	assert len(report["defect"]["witness"]["centres"]) == 2
	assert report["control"]["bad_triangles"] == []
	for name in ("net.json", "complex.json", "xi_scan.csv", "timings.json", "slice_xz.svg", "slice_xy.svg", "slice_yz.svg"):
		assert (tmp_path / name).exists()
	assert main(["audit", "--out-dir", str(tmp_path)]) == EXIT_CERTIFIED


def sigma_report(configuration):
	tet = (0, 1, 2, 3)
	centres = [configuration.c_plus.tolist(), configuration.c_minus.tolist()]
	cert = VoronoiCertificate(tet, centres, [configuration.circumradius] * 2)
	simplices = {d: sorted({f for f in faces(tet) if len(f) == d + 1}) for d in range(4)}
	complex_ = SimplicialComplex(simplices, [cert], {tri: [tet] for tri in simplices[2]}, [0, 1, 2, 3], [], 0.1)
	return DefectReport([((0, 2, 3), 1), ((1, 2, 3), 1)], cert, True, [], [], complex_)


def test_certification_needs_every_check(selected, configuration):
	net = PointSet(configuration.sigma, 0.1, [0, 1, 2, 3], 0, True, True)
	jacobian = jacobian_analysis(configuration, selected)
	defect = sigma_report(configuration)
	stability = StabilityReport(1e-5, 3, 3, [])
	checks = certification_checks(net, configuration, selected, jacobian, (True, True, []), defect, [], stability)
	assert all(checks.values())

	bent = jacobian._replace(structure_ok=False)
	checks = certification_checks(net, configuration, selected, bent, (True, True, []), defect, [], stability)
	assert [name for name, ok in checks.items() if not ok] == ["jacobian_structure"]

	wide = configuration._replace(circumradius=0.1)
	checks = certification_checks(net, wide, selected, jacobian, (True, True, []), defect, [], stability)
	assert [name for name, ok in checks.items() if not ok] == ["circumradius_below_epsilon"]

	checks = certification_checks(net, configuration, selected, jacobian, (False, True, []), defect, [], stability)
	assert [name for name, ok in checks.items() if not ok] == ["density"]

	none = StabilityReport(1e-5, 0, 0, [])
	checks = certification_checks(net, configuration, selected, jacobian, (True, True, []), defect, [], none)
	assert [name for name, ok in checks.items() if not ok] == ["stability"]


def test_slice_labels_match_the_nearest_sample(monkeypatch, field):
	monkeypatch.setattr(cli, "PIXELS", 12)
	points = np.random.default_rng(5).uniform(-0.35, 0.35, (40, 3))
	extent = 0.2
	labels = cli.slice_labels(field, points, "xz", 0.0, extent)

	axis = np.linspace(-extent, extent, 12)
	for row, col in itertools.product(range(12), repeat=2):
		pixel = np.array((axis[col], 0.0, axis[row]))
		starts = np.broadcast_to(pixel, points.shape)
		upper = upper_bounds(field, starts, points)
		lower = lower_bounds(field, starts, points, upper.min())
		close = np.union1d(np.flatnonzero(lower < upper.min()), [upper.argmin()])
		distances = [geodesic_distance(field, pixel, points[j]).distance for j in close]
		assert labels[row, col] == close[int(np.argmin(distances))]


@pytest.mark.slow
def test_reproduce_at_smaller_epsilon(tmp_path):
	argv = ["reproduce", "--epsilon", "0.05", "--out-dir", str(tmp_path), "--rho", "5e-5", "--trials", "3", "--threads", "4"]
	assert main(argv) == EXIT_CERTIFIED
	report = read_json(tmp_path / "report.json")
	assert report["certified"]
	assert all(report["checks"].values())
	assert [t["count"] for t in report["defect"]["bad_triangles"]] == [1, 1]
	assert len(report["defect"]["witness"]["centres"]) == 2
