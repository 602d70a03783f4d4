import csv
import json

import numpy as np
import pytest

from spincluster.cli import EXIT_INFEASIBLE, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_OK, main
from spincluster.io import export_structure, load_dataset, import_structure


@pytest.fixture(scope="module")
def small_structure(tmp_path_factory):
    s = load_dataset().structures["diamond"].subset(["C1", "C2", "C3", "C4"])
    path = tmp_path_factory.mktemp("st") / "four.json"
    export_structure(s, path)
    return path


def _rows(path):
    with open(path) as fh:
        return [r for r in csv.reader(fh) if r and not r[0].startswith("#")]


def test_validate_snapshot(tmp_path):
    assert main(["validate", "--structure", "bundled:diamond", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "validate.json").read_text())
    assert doc["pairs"] == 183
    assert doc["xi"] == pytest.approx(20.759309256392832, rel=1e-12)
    assert doc["max_abs_residual"] == pytest.approx(1.9804698733810255, rel=1e-12)


def test_validate_stored_xi_mismatch(tmp_path, small_structure):
    s = import_structure(small_structure)
    s.xi = 123.0
    bad = tmp_path / "bad.json"
    export_structure(s, bad)
    assert main(["validate", "--structure", str(bad), "--out", str(tmp_path)]) == EXIT_INPUT


def test_missing_input(tmp_path):
    assert main(["refine", "--structure", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["validate", "--structure", "bundled:nope", "--out", str(tmp_path)]) == EXIT_INPUT


def test_bad_config_value(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("tolerance = -1\n")
    assert main(["refine", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_INPUT


def test_reconstruct_subset_is_reproducible(tmp_path):
    spins = "C1,C2,C3,C4,C5,C6"
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["reconstruct", "--spins", spins, "--out", str(a)]) == EXIT_OK
    assert main(["reconstruct", "--spins", spins, "--out", str(b), "--workers", "2"]) == EXIT_OK
    for name in ("structures.json", "best.xyz", "best.json", "steps.csv", "unmeasured.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    best = json.loads((a / "best.json").read_text())
    assert set(best["ids"]) == set(spins.split(","))


def test_reconstruct_exhausted(tmp_path):
    # an impossibly tight tolerance leaves no survivors
    rc = main(["reconstruct", "--spins", "C1,C2,C3,C4", "--tolerance", "1e-9", "--tolerance-single", "1e-9",
               "--out", str(tmp_path)])
    assert rc == EXIT_INFEASIBLE


def test_reconstruct_timeout(tmp_path):
    rc = main(["reconstruct", "--spins", "C1,C2,C3,C4,C5,C6,C7,C8", "--timeout", "1e-9", "--out", str(tmp_path)])
    assert rc == EXIT_NONCONVERGED


def test_refine(tmp_path):
    assert main(["refine", "--structure", "bundled:diamond_lattice", "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "delta_r.csv")
    assert rows[0] == ["spin", "delta_r"]
    dr = np.array([float(r[1]) for r in rows[1:]])
    assert len(dr) == 27 and dr.mean() == pytest.approx(0.4379, abs=2e-3)
    s = import_structure(tmp_path / "refined.json")
    assert np.array_equal(s.position(s.gauge["origin_spin"]), np.zeros(3))


def test_corrections_trivial_case(tmp_path, small_structure):
    rc = main(["corrections", "--structure", str(small_structure), "--zero-aperp", "--Bperp-max", "0",
               "--n-angle", "4", "--n-field", "1", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    for tg in ("ms_minus1", "ms_plus1", "averaged"):
        rows = _rows(tmp_path / f"corrections_{tg}.csv")
        vals = [float(v) for r in rows[1:] for v in r[1:] if v not in ("", "nan")]
        assert len(vals) == 12 and all(v == 0.0 for v in vals)


def test_corrections_single_target(tmp_path, small_structure):
    rc = main(["corrections", "--structure", str(small_structure), "--target", "averaged", "--n-angle", "6",
               "--n-field", "2", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    summary = json.loads((tmp_path / "corrections_summary.json").read_text())
    assert list(summary) == ["averaged"] and summary["averaged"]["pairs"] == 6
    assert summary["averaged"]["max"] > 0


def test_simulate(tmp_path):
    rc = main(["simulate", "--couplings", "19,1.9", "--p", "1,0.8", "--duration", "2", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    comb = {float(f): float(w) for f, w in _rows(tmp_path / "comb.csv")[1:]}
    assert comb[19.0] == pytest.approx(0.1) and comb[20.9] == pytest.approx(0.2)
    t = np.loadtxt(tmp_path / "trace.csv", delimiter=",")
    assert t.shape == (2000, 2)


def test_simulate_bad_probability(tmp_path):
    assert main(["simulate", "--couplings", "19", "--p", "1.5", "--out", str(tmp_path)]) == EXIT_INPUT


def test_sensor_position(tmp_path):
    assert main(["sensor-position", "--structure", "bundled:diamond_lattice", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "sensor.json").read_text())
    assert np.allclose(doc["nitrogen"], [3.783, -0.728, -8.752], atol=1e-3)
    assert doc["unique"]


def test_report(tmp_path):
    assert main(["report", "--structure", "bundled:diamond", "--out", str(tmp_path)]) == EXIT_OK
    text = (tmp_path / "report.txt").read_text()
    assert "measured pairs (averaged): 183" in text
    assert len(_rows(tmp_path / "spins.csv")) == 1 + len(load_dataset().spins)
    assert (tmp_path / "structure.csv").exists()


def test_entry_point_help(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    assert "reconstruct" in capsys.readouterr().out
