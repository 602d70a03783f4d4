import numpy as np
import pytest
from hypothesis import given, strategies as st

from spincluster import crystal
from spincluster.constants import DEFAULT
from spincluster.model import coupling_frequencies

A0 = DEFAULT.a0
ALPHA = DEFAULT.alpha(DEFAULT.gamma_c, DEFAULT.gamma_c)


def test_nearest_neighbour_distance_and_axis():
    nn = crystal.to_lab(np.array([1, 1, 1]), A0)
    assert np.linalg.norm(nn) == pytest.approx(A0 * np.sqrt(3) / 4)
    assert np.allclose(nn[:2], 0.0)  # the bond to the B neighbour lies on z


def test_sublattice_rules():
    assert crystal.sublattice(np.array([0, 0, 0])) == 0
    assert crystal.sublattice(np.array([1, 1, 1])) == 1
    assert crystal.sublattice(np.array([-1, -1, -1])) == -1
    assert crystal.sublattice(np.array([2, 0, 0])) == -1
    assert crystal.sublattice(np.array([2, 2, 0])) == 0


def test_point_group_is_c3v():
    ops = crystal.point_group_ops(A0)
    assert len(ops) == 6
    for op in ops:
        assert np.allclose(op @ [0, 0, 1], [0, 0, 1])


@given(st.integers(0, 10_000))
def test_snap_recovers_sites(seed):
    rng = np.random.default_rng(seed)
    ints = crystal.sites_in_ball(10.0, A0)
    pick = ints[rng.choice(len(ints), 5)]
    noisy = crystal.to_lab(pick, A0) + rng.normal(scale=0.1, size=(5, 3))
    got, d = crystal.snap(noisy, A0)
    assert np.array_equal(got, pick)
    assert np.all(d < 0.5)


def test_sites_in_ball_count_by_brute_force():
    r = 6.0
    ints = crystal.sites_in_ball(r, A0)
    rng = np.arange(-12, 13)
    g = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), -1).reshape(-1, 3)
    g = g[crystal.is_site(g)]
    brute = (np.linalg.norm(crystal.to_lab(g, A0), axis=1) <= r + 1e-9).sum()
    assert len(ints) == brute


def test_point_group_preserves_couplings():
    v = crystal.to_lab(crystal.sites_in_ball(8.0, A0), A0)
    v = v[np.linalg.norm(v, axis=1) > 0]
    f = coupling_frequencies(v, ALPHA)
    for op in crystal.point_group_ops(A0):
        assert np.allclose(coupling_frequencies(v @ op.T, ALPHA), f, rtol=1e-12)
