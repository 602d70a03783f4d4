import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spincluster import crystal
from spincluster.constants import DEFAULT
from spincluster.lattice import generate_diamond_lattice
from spincluster.model import Structure, SpinRecord, residuals_and_xi, synth_table
from spincluster.refine import (GaugeSpec, compare_structures, hyperfine_comparison, match_sites,
                                position_sensor, refine, rotation_z, transform)


def _cluster(seed, n=8):
    rng = np.random.default_rng(seed)
    while True:
        X = rng.uniform(-6, 6, size=(n, 3))
        X[0] = 0
        d = np.linalg.norm(X[:, None] - X[None], axis=-1) + np.eye(n) * 99
        if d.min() < 1.5:
            continue
        s = Structure([f"C{i + 1}" for i in range(n)], X)
        # |C| has a kink at the magic angle that can trap a local solver, keep pairs away from it
        if min(e.value() for _, _, e in synth_table(s)) > 2.0:
            return s


def test_rotation_and_transform():
    assert np.allclose(rotation_z(90) @ [1, 0, 0], [0, 1, 0])
    s = Structure(["C1"], np.array([[1.0, 2.0, 3.0]]))
    t = transform(s, 90, flip_y=True, flip_z=True, translate=(1, 0, 0))
    # flip first (1, -2, -3), then rotate (2, 1, -3), then translate
    assert np.allclose(t.coordinates, [[3.0, 1.0, -3.0]])


@given(st.integers(0, 10_000), st.floats(-180, 180), st.booleans(), st.booleans())
def test_compare_recovers_alignment(seed, ang, fy, fz):
    s = _cluster(seed, 6)
    moved = transform(s, ang, fy, fz, (0.3, -1.0, 2.0))
    c = compare_structures(s, moved)
    assert c.mean < 1e-6


def test_compare_requires_same_spins():
    with pytest.raises(ValueError):
        compare_structures(_cluster(0, 3), _cluster(0, 4))


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_continuous_round_trip(seed):
    truth = _cluster(seed)
    table = synth_table(truth)
    rng = np.random.default_rng(seed + 1)
    guess = Structure(list(truth.ids), truth.coordinates + rng.normal(scale=0.02, size=truth.coordinates.shape))
    res = refine(guess, table)
    assert res.converged
    assert res.final_xi < 1e-12
    assert compare_structures(truth, res.structure).mean < 1e-5


def test_gauge_is_exact():
    truth = _cluster(3)
    res = refine(truth, synth_table(truth), GaugeSpec("C2", "C5"))
    s = res.structure
    assert np.array_equal(s.position("C2"), np.zeros(3))
    assert s.position("C5")[1] == 0.0
    u = s.uncertainties
    assert np.isnan(u[s.index("C2")]).all() and np.isnan(u[s.index("C5"), 1])
    assert len(res.free_uncertainties) == 3 * len(s) - 4


def test_xi_never_increases(dataset, carbon_lattice_structure):
    res = refine(carbon_lattice_structure, dataset.carbon_table())
    assert res.final_xi <= res.initial_xi
    assert res.initial_xi == pytest.approx(residuals_and_xi(carbon_lattice_structure, dataset.carbon_table()).xi)
    # the gauge-frame result and the structure rotated back describe the same couplings
    back = res.in_input_frame()
    assert residuals_and_xi(back, dataset.carbon_table()).xi == pytest.approx(res.final_xi, rel=1e-9)
    assert compare_structures(back, res.structure).mean < 1e-6


def test_published_pre_rotation(carbon_lattice_structure, dataset):
    res = refine(carbon_lattice_structure, dataset.carbon_table())
    x2, y2 = carbon_lattice_structure.position("C2")[:2]
    assert res.structure.gauge["pre_rotation_deg"] == pytest.approx(-math.degrees(math.atan2(y2, x2)))
    assert res.structure.gauge["pre_rotation_deg"] == pytest.approx(-49.1066, abs=1e-3)


def test_refine_from_published_fit_reaches_same_minimum(dataset, carbon_lattice_structure):
    t = dataset.carbon_table()
    a = refine(carbon_lattice_structure, t)
    fit = dataset.structures["diamond_fit"]
    b = refine(fit.subset(carbon_lattice_structure.ids), t)
    assert b.final_xi == pytest.approx(a.final_xi, rel=1e-4)


def test_sensor_position(dataset, carbon_lattice_structure):
    res = position_sensor(dataset.averaged, carbon_lattice_structure)
    assert np.allclose(res.nitrogen, [3.78, -0.73, -8.75], atol=0.01)
    assert res.unique
    # the vacancy is the nearest site straight below the nitrogen
    d = res.nitrogen - res.vacancy
    assert np.allclose(d[:2], 0) and d[2] == pytest.approx(DEFAULT.a0 * math.sqrt(3) / 4)


def test_sensor_without_vacancy_constraint(dataset, carbon_lattice_structure):
    res = position_sensor(dataset.averaged, carbon_lattice_structure, require_vacancy=False)
    assert len(res.alternatives) >= 1
    assert np.allclose(res.alternatives[0][0], [3.78, -0.73, -8.75], atol=0.01)


def test_hyperfine_comparison_sign_flip():
    r = [SpinRecord("C1", 400.0, 460.0, A_par=10.0, A_perp=5.0)]
    d = hyperfine_comparison(r, {"C1": (-9.0, 4.0)}, sign_flip=True)
    assert d[0].d_par == pytest.approx(-1.0) and d[0].d_perp == pytest.approx(1.0)


def test_match_sites():
    lat = generate_diamond_lattice(3)
    s = Structure(["C1", "C2"], np.array([lat.sites[5] / 1.02, [100.0, 0, 0]]))
    m = match_sites(s, lat.sites)
    assert m["C1"] == 5 and m["C2"] is None
