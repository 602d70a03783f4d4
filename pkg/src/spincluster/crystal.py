"""Diamond crystal geometry in the lab frame ([111] along z).

Sites are addressed exactly by integer coordinates in units of a0/4 along
the cubic crystal axes. The A sublattice (containing the origin) has all
even coordinates with a sum divisible by 4; the B sublattice is A shifted
by (1, 1, 1).
"""

from __future__ import annotations

import itertools

import numpy as np

# rows: lab x, y, z expressed in crystal coordinates
LAB_FROM_CRYSTAL = np.array(
    [
        [1.0 / np.sqrt(2.0), -1.0 / np.sqrt(2.0), 0.0],
        [1.0 / np.sqrt(6.0), 1.0 / np.sqrt(6.0), -2.0 / np.sqrt(6.0)],
        [1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0)],
    ]
)

# FCC primitive vectors along [011], [101], [110] in a0/4 units
PRIMITIVE = np.array([[0, 2, 2], [2, 0, 2], [2, 2, 0]], dtype=np.int64)
BASIS_OFFSET = np.array([1, 1, 1], dtype=np.int64)


def to_lab(ints: np.ndarray, a0: float) -> np.ndarray:
    """Integer crystal coordinates -> Cartesian lab coordinates (angstrom)."""
    return (np.asarray(ints, dtype=float) * (a0 / 4.0)) @ LAB_FROM_CRYSTAL.T


def to_crystal(points: np.ndarray, a0: float) -> np.ndarray:
    """Cartesian lab coordinates -> (fractional) crystal coordinates in a0/4 units."""
    return np.asarray(points, dtype=float) @ LAB_FROM_CRYSTAL / (a0 / 4.0)


def is_site(ints: np.ndarray) -> np.ndarray:
    n = np.asarray(ints, dtype=np.int64)
    even = np.all(n % 2 == 0, axis=-1) & (n.sum(axis=-1) % 4 == 0)
    odd = np.all(n % 2 == 1, axis=-1) & ((n.sum(axis=-1) - 3) % 4 == 0)
    return even | odd


def sublattice(ints: np.ndarray) -> np.ndarray:
    """0 for the A sublattice, 1 for B; -1 for non-sites."""
    n = np.asarray(ints, dtype=np.int64)
    out = np.full(n.shape[:-1], -1, dtype=np.int64)
    even = np.all(n % 2 == 0, axis=-1) & (n.sum(axis=-1) % 4 == 0)
    odd = np.all(n % 2 == 1, axis=-1) & ((n.sum(axis=-1) - 3) % 4 == 0)
    out[even] = 0
    out[odd] = 1
    return out


def snap(points: np.ndarray, a0: float) -> tuple[np.ndarray, np.ndarray]:
    """Snap Cartesian points to the nearest diamond sites.

    Returns (integer coordinates, snap distances in angstrom).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    frac = to_crystal(pts, a0)
    base = np.floor(frac).astype(np.int64)
    offsets = np.array(list(itertools.product((-1, 0, 1, 2), repeat=3)), dtype=np.int64)
    cand = base[:, None, :] + offsets[None, :, :]
    ok = is_site(cand)
    d = np.linalg.norm(to_lab(cand, a0) - pts[:, None, :], axis=-1)
    d[~ok] = np.inf
    k = np.argmin(d, axis=1)
    rows = np.arange(len(pts))
    return cand[rows, k], d[rows, k]


def sites_in_ball(radius: float, a0: float, center: np.ndarray | None = None) -> np.ndarray:
    """Integer coordinates of every site within ``radius`` of ``center`` (lab frame)."""
    c = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    cc = to_crystal(c, a0)
    r = radius / (a0 / 4.0)
    lo = np.floor(cc - r).astype(np.int64)
    hi = np.ceil(cc + r).astype(np.int64)
    axes = [np.arange(lo[i], hi[i] + 1) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    grid = grid[is_site(grid)]
    keep = np.linalg.norm(to_lab(grid, a0) - c, axis=1) <= radius + 1e-9
    return grid[keep]


def sites_in_box(lo: np.ndarray, hi: np.ndarray, a0: float, eps: float = 1e-9) -> np.ndarray:
    """Lab-frame coordinates of every site inside the closed box [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    center = 0.5 * (lo + hi)
    radius = 0.5 * float(np.linalg.norm(hi - lo)) + a0
    pts = to_lab(sites_in_ball(radius, a0, center), a0)
    inside = np.all((pts >= lo - eps) & (pts <= hi + eps), axis=1)
    return pts[inside]


def point_group_ops(a0: float) -> list[np.ndarray]:
    """Lab-frame 3x3 operations that fix z and map the lattice about the origin onto itself.

    For an atom site this is C3v (6 elements).
    """
    probe = sites_in_ball(3.0 * a0, a0)
    probe_lab = to_lab(probe, a0)
    probe_set = {tuple(p) for p in probe.tolist()}
    ops = []
    for k in range(6):
        t = k * np.pi / 3.0
        rot = np.array([[np.cos(t), -np.sin(t), 0.0], [np.sin(t), np.cos(t), 0.0], [0.0, 0.0, 1.0]])
        for flip in (1.0, -1.0):
            op = rot @ np.diag([1.0, flip, 1.0])
            mapped = np.rint(to_crystal(probe_lab @ op.T, a0)).astype(np.int64)
            if all(tuple(m) in probe_set for m in mapped.tolist()):
                ops.append(op)
    return ops
