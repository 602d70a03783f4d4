import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spincluster.io import (LoadError, RunConfig, check_averaged_consistency, checksums, dump_coupling_table,
                            export_structure, format_uncertain, import_structure, load_coupling_table,
                            load_dataset, parse_cell, parse_uncertain, verify_structure_xi)
from spincluster.model import CouplingTable, Projection, Structure, residuals_and_xi


def test_parse_uncertain():
    assert parse_uncertain("61.90(9)") == pytest.approx((61.90, 0.09))
    assert parse_uncertain("236.0(2)") == pytest.approx((236.0, 0.2))
    assert parse_uncertain("3(1)") == pytest.approx((3.0, 1.0))


@given(st.integers(1, 99999), st.integers(0, 3), st.integers(1, 99))
def test_uncertain_round_trip(mant, decimals, unc):
    value = mant / 10 ** decimals
    sigma = unc / 10 ** decimals
    v, s = parse_uncertain(format_uncertain(value, sigma))
    assert v == pytest.approx(value) and s == pytest.approx(sigma)


def test_parse_cell_tokens():
    assert parse_cell("-", Projection.averaged) is None
    weak = parse_cell("<1", Projection.averaged)
    assert weak.weak_upper_bound and weak.value() == 0.5
    e = parse_cell("12.3(4)*", Projection.averaged)
    assert e.single_projection_only and e.frequency_hz == pytest.approx(12.3)


def test_bundled_table(dataset):
    t = dataset.averaged
    assert len(dataset.carbon_table()) == 171
    assert len([s for s in t.spins if s != "N"]) == 27 and "N" in t.spins
    e = t.get("C1", "C4")
    assert e.frequency_hz == pytest.approx(236.0) and e.sigma_hz == pytest.approx(0.2)


def test_empty_table(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("# units: Hz\n# projection: averaged\nspin\n")
    t = load_coupling_table(p)
    assert len(t) == 0


def _write(tmp_path, body):
    p = tmp_path / "t.csv"
    p.write_text("# units: Hz\n# projection: averaged\n" + body)
    return p


def test_conflicting_duplicates(tmp_path):
    p = _write(tmp_path, "spin,C1,C2\nC1,-,10.0(1)\nC2,11.0(1),-\n")
    with pytest.raises(LoadError, match="C1"):
        load_coupling_table(p)


def test_units_required(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("# units: kHz\n# projection: averaged\nspin,C1\nC1,-\n")
    with pytest.raises(LoadError):
        load_coupling_table(p)


def test_unknown_label(tmp_path):
    p = _write(tmp_path, "spin,C1,C2\nC1,-,10.0(1)\nX9,10.0(1),-\n")
    with pytest.raises(LoadError):
        load_coupling_table(p)


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_table_round_trip(tmp_path, dataset, fmt):
    p = tmp_path / f"t.{fmt}"
    dump_coupling_table(dataset.averaged, p, fmt)
    back = load_coupling_table(p)
    assert sorted(back.spins) == sorted(dataset.averaged.spins)
    for a, b, e in dataset.averaged:
        g = back.get(a, b)
        assert g.frequency_hz == e.frequency_hz and g.sigma_hz == pytest.approx(e.sigma_hz)
        assert g.weak_upper_bound == e.weak_upper_bound
        assert g.single_projection_only == e.single_projection_only


@pytest.mark.parametrize("fmt", ["json", "xyz"])
def test_structure_round_trip(tmp_path, published, dataset, fmt):
    s = published
    s = Structure(list(s.ids), s.coordinates + 1e-7 * np.pi, {"origin_spin": "C1"},
                  None, residuals_and_xi(s, dataset.averaged).xi)
    p = tmp_path / f"s.{fmt}"
    export_structure(s, p)
    back = import_structure(p)
    assert back.ids == s.ids
    assert np.array_equal(back.coordinates, s.coordinates)
    assert back.xi == s.xi
    if fmt == "xyz":
        lines = p.read_text().splitlines()
        assert len(lines) == 2 + 28 and lines[2].startswith("C ")
        assert any(l.startswith("N ") for l in lines[2:])
    else:
        assert verify_structure_xi(back, dataset.averaged)


def test_json_xi_mismatch_detected(tmp_path, published, dataset):
    s = Structure(list(published.ids), published.coordinates, {}, None, 1.0)
    assert not verify_structure_xi(s, dataset.averaged)


def test_checksums_stable(dataset):
    assert checksums() == dataset.provenance["checksums"]


def test_averaged_consistency(dataset):
    bad = check_averaged_consistency(dataset.tables["minus1"], dataset.tables["plus1"], dataset.averaged)
    # one pair is off by more than rounding but within the stated uncertainties
    assert bad == ["C6-C8"] or [b for b in bad if b != "C6-C8"] == []
    assert check_averaged_consistency(dataset.tables["minus1"], dataset.tables["plus1"], dataset.averaged,
                                      include_sigma=True) == []


def test_data_dir_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SPINCLUSTER_DATA_DIR", str(tmp_path))
    with pytest.raises((LoadError, FileNotFoundError)):
        load_dataset()


def test_run_config_file(tmp_path, monkeypatch):
    p = tmp_path / "run.cfg"
    p.write_text("mode = cubic\nN_L = 9\nx_cutoff = 200\ntolerance = 1.2\nspin_order = C1,C2,C3\n")
    monkeypatch.delenv("SPINCLUSTER_WORKERS", raising=False)
    cfg = RunConfig.from_file(p)
    assert (cfg.mode, cfg.N_L, cfg.x_cutoff, cfg.tolerance) == ("cubic", 9, 200, 1.2)
    assert cfg.spin_order == ["C1", "C2", "C3"]
    p2 = tmp_path / "again.cfg"
    p2.write_text(cfg.to_text())
    assert RunConfig.from_file(p2) == cfg
    monkeypatch.setenv("SPINCLUSTER_WORKERS", "3")
    assert RunConfig.from_file(p).workers == 3
    sp = cfg.to_solver_params()
    assert sp.mode == "cubic" and sp.x_cutoff == 200


def test_run_config_validation(tmp_path):
    with pytest.raises(ValueError):
        RunConfig(tolerance=0)
    with pytest.raises(ValueError):
        RunConfig(x_cutoff=0)
    p = tmp_path / "bad.cfg"
    p.write_text("nonsense = 1\n")
    with pytest.raises(LoadError):
        RunConfig.from_file(p)


def test_defaults_match_published_parameters():
    cfg = RunConfig()
    assert (cfg.N_L, cfg.a0, cfg.tolerance, cfg.tolerance_single, cfg.x_cutoff) == (11, 3.5668, 1.1, 3.0, 5000)
    assert cfg.Bz == 403.0 and cfg.Bperp_max == 1.0
