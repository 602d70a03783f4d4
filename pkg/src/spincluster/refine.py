"""Continuous least-squares refinement, structure comparison and sensor positioning."""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import math
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize
from scipy.spatial import cKDTree

from . import crystal
from .constants import ANGSTROM, DEFAULT, PhysicalConstants
from .lattice import (CouplingLookup, DiamondLattice, Tolerances, candidate_vectors, diamond_lookup,
                      generate_diamond_lattice)
from .model import (CouplingTable, SpinRecord, Structure, WEAK_SIGMA_HZ, WEAK_VALUE_HZ, gamma_for,
                    is_nitrogen, residuals_and_xi)


class RefinementError(RuntimeError):
    pass


def rotation_z(deg: float) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def transform(structure: Structure, rotate_deg: float = 0.0, flip_y: bool = False, flip_z: bool = False,
              translate=None) -> Structure:
    """Flip, then rotate about z, then translate. Returns a new structure."""
    X = structure.coordinates.copy()
    if flip_y:
        X[:, 1] *= -1
    if flip_z:
        X[:, 2] *= -1
    X = X @ rotation_z(rotate_deg).T
    if translate is not None:
        X = X + np.asarray(translate, dtype=float)
    return Structure(list(structure.ids), X, dict(structure.gauge), structure.uncertainties, structure.xi)


# ---------------------------------------------------------------------------
# residual model with analytic Jacobian


class _PairModel:
    def __init__(self, ids: Sequence[str], table: CouplingTable, constants: PhysicalConstants,
                 weak_value: float, weighted: bool, sigma_floor: float):
        I, J, F, entries = table.pair_arrays(ids, weak_value)
        self.I, self.J, self.F = I, J, F
        gam = np.array([gamma_for(s, constants) for s in ids])
        self.k = np.array([constants.alpha(gam[i], gam[j]) for i, j in zip(I, J)]) / ANGSTROM ** 3 / (4 * math.pi)
        if weighted:
            sig = np.array([WEAK_SIGMA_HZ if e.weak_upper_bound else max(e.sigma_hz, sigma_floor) for e in entries])
            self.w = 1.0 / sig
        else:
            self.w = np.ones(len(F))

    def predicted_signed(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = X[self.J] - X[self.I]
        r2 = np.einsum("ij,ij->i", d, d)
        if np.any(r2 == 0):
            raise RefinementError("two spins coincide")
        g = 3.0 * d[:, 2] ** 2 / r2 ** 2.5 - 1.0 / r2 ** 1.5
        return self.k * g, d

    def residuals(self, X: np.ndarray) -> np.ndarray:
        c, _ = self.predicted_signed(X)
        return self.w * (self.F - np.abs(c))

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        """d residual / d X, shape (npairs, M*3)."""
        c, d = self.predicted_signed(X)
        r2 = np.einsum("ij,ij->i", d, d)
        dz = d[:, 2]
        grad = (-15.0 * dz[:, None] ** 2 * d / r2[:, None] ** 3.5 + 3.0 * d / r2[:, None] ** 2.5)
        grad[:, 2] += 6.0 * dz / r2 ** 2.5
        grad *= (np.sign(c) * self.k * self.w)[:, None]  # d|f|/dd
        M = len(X)
        Jm = np.zeros((len(c), M, 3))
        rows = np.arange(len(c))
        Jm[rows, self.J] -= grad
        Jm[rows, self.I] += grad
        return Jm.reshape(len(c), 3 * M)


# ---------------------------------------------------------------------------
# refinement


@dataclass
class GaugeSpec:
    origin_spin: str | None = None  # default: first spin
    plane_spin: str | None = None  # default: second spin
    pre_rotation_deg: float | None = None  # default: the angle that zeroes the plane spin's y

    def resolve(self, ids: Sequence[str]) -> tuple[str, str]:
        o = self.origin_spin or ids[0]
        q = self.plane_spin or next(s for s in ids if s != o)
        if o == q:
            raise ValueError("origin_spin and plane_spin must differ")
        return o, q


@dataclass
class RefinementResult:
    structure: Structure  # gauge frame, with uncertainties (nan for fixed coordinates)
    initial: Structure  # the guess in the same gauge frame
    delta_r: np.ndarray  # per spin, angstrom
    converged: bool
    iterations: int
    initial_xi: float
    final_xi: float
    gradient_norm: float
    rank_deficient: list[tuple[str, str]] = field(default_factory=list)
    message: str = ""
    covariance: np.ndarray | None = None  # (3M, 3M) gauge frame, zero rows for fixed coordinates

    @property
    def mean_delta_r(self) -> float:
        return float(np.mean(self.delta_r))

    @property
    def free_uncertainties(self) -> np.ndarray:
        u = self.structure.uncertainties
        return u[~np.isnan(u)]

    def in_input_frame(self) -> Structure:
        """The refined structure rotated back to the frame of the initial guess.

        Uncertainties are propagated through the rotation with the full covariance,
        so both x and y of the plane spin become uncertain in this frame.
        """
        g = self.structure.gauge
        rot = g.get("pre_rotation_deg", 0.0)
        s = transform(self.structure, -rot)
        u = None
        if self.covariance is not None:
            R = rotation_z(-rot)
            M = len(s.ids)
            cov = self.covariance.reshape(M, 3, M, 3)
            u = np.empty((M, 3))
            for i in range(M):
                u[i] = np.sqrt(np.clip(np.diag(R @ cov[i, :, i, :] @ R.T), 0, None))
        return Structure(s.ids, s.coordinates, dict(g, frame="input"), u, s.xi)


def _prepare_frame(initial: Structure, gauge: GaugeSpec) -> tuple[Structure, str, str, float]:
    o, q = gauge.resolve(initial.ids)
    X = initial.coordinates - initial.position(o)
    if gauge.pre_rotation_deg is None:
        v = X[initial.index(q)]
        rot = -math.degrees(math.atan2(v[1], v[0]))
    else:
        rot = float(gauge.pre_rotation_deg)
    X = X @ rotation_z(rot).T
    X[initial.index(o)] = 0.0
    return Structure(list(initial.ids), X, {}, None, None), o, q, rot


def refine(initial: Structure, table: CouplingTable, gauge: GaugeSpec | None = None,
           constants: PhysicalConstants = DEFAULT, weak_value: float = WEAK_VALUE_HZ,
           weighted: bool = False, sigma_floor: float = 0.05, max_nfev: int = 2000,
           strict: bool = False) -> RefinementResult:
    """Minimise xi over the 3M - 4 free coordinates.

    The origin spin is pinned at 0 and the plane spin's y coordinate at 0 after
    rotating the guess about z. Uncertainties are 1 sigma from the Gauss-Newton
    covariance scaled by the residual variance.
    """
    gauge = gauge or GaugeSpec()
    ids = [s for s in initial.ids if s in set(table.spins)]
    init, o, q, rot = _prepare_frame(initial.subset(ids), gauge)
    io_, iq = ids.index(o), ids.index(q)
    y_fixed = init.coordinates[iq, 1]
    init.coordinates[iq, 1] = 0.0  # exactly zero after rotation up to rounding
    M = len(ids)
    free = np.ones((M, 3), dtype=bool)
    free[io_] = False
    free[iq, 1] = False
    fmask = free.ravel()
    model = _PairModel(ids, table, constants, weak_value, weighted, sigma_floor)

    X0 = init.coordinates.copy()

    def unpack(p):
        X = X0.ravel().copy()
        X[fmask] = p
        return X.reshape(M, 3)

    fun = lambda p: model.residuals(unpack(p))
    jac = lambda p: model.jacobian(unpack(p))[:, fmask]
    p0 = X0.ravel()[fmask]
    r0 = fun(p0)
    xi0 = float(r0 @ r0)
    sol = least_squares(fun, p0, jac=jac, method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=max_nfev)
    r = sol.fun
    xi = float(r @ r)
    p = sol.x
    converged = sol.status > 0
    if xi > xi0:
        # never accept a worse point
        p, r, xi, converged = p0, r0, xi0, False
    Jf = jac(p)
    grad = float(np.linalg.norm(Jf.T @ r))

    n, k = len(r), int(fmask.sum())
    dof = n - k
    if dof <= 0:
        raise RefinementError(f"{n} residuals cannot determine {k} free coordinates")
    s2 = xi / dof
    U, S, Vt = np.linalg.svd(Jf, full_matrices=False)
    good = S > S[0] * 1e-10
    inv = (Vt[good].T / S[good] ** 2) @ Vt[good]
    var = s2 * np.diag(inv)
    flagged = []
    if not good.all():
        # free coordinates touched by the null space
        null = Vt[~good]
        weight = np.sum(null ** 2, axis=0)
        names = [(s, ax) for s in ids for ax in "xyz"]
        fnames = [nm for nm, f in zip(names, fmask) if f]
        flagged = [fnames[i] for i in np.nonzero(weight > 1e-6)[0]]
        var[weight > 1e-6] = np.inf
    unc = np.full(M * 3, np.nan)
    unc[fmask] = np.sqrt(var)
    cov = np.zeros((M * 3, M * 3))
    cov[np.ix_(fmask, fmask)] = s2 * inv

    X = unpack(p)
    X[io_] = 0.0
    X[iq, 1] = 0.0
    g = {"origin_spin": o, "plane_spin": q, "plane_axis": "y", "pre_rotation_deg": rot,
         "weighted": weighted}
    if weighted:
        xi_report = residuals_and_xi(Structure(ids, X), table, constants, weak_value).xi
    else:
        xi_report = xi
    out = Structure(ids, X, g, unc.reshape(M, 3), xi_report)
    init_s = Structure(ids, X0, dict(g), None, residuals_and_xi(Structure(ids, X0), table, constants, weak_value).xi)
    dr = np.linalg.norm(X - X0, axis=1)
    msg = sol.message if converged else f"not converged: {sol.message} (|grad| = {grad:.3g})"
    if abs(y_fixed) > 1e-6:
        msg += f"; plane spin y of {y_fixed:.3g} A removed by the gauge"
    res = RefinementResult(out, init_s, dr, bool(converged), int(sol.nfev), xi0 if not weighted else init_s.xi,
                           xi_report, grad, flagged, msg, cov)
    if strict and not converged:
        raise RefinementError(msg)
    return res


# ---------------------------------------------------------------------------
# comparison


@dataclass
class Comparison:
    ids: list[str]
    delta_r: np.ndarray
    aligned: Structure  # b mapped onto a
    rotate_deg: float = 0.0
    flip_y: bool = False
    flip_z: bool = False
    translation: tuple = (0.0, 0.0, 0.0)

    @property
    def mean(self) -> float:
        return float(np.mean(self.delta_r))


def _kabsch_z(A: np.ndarray, B: np.ndarray) -> tuple[float, np.ndarray]:
    """Rotation angle about z (deg) and translation best mapping B onto A (least squares)."""
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    a, b = A - ca, B - cb
    s = np.sum(b[:, 0] * a[:, 1] - b[:, 1] * a[:, 0])
    c = np.sum(b[:, 0] * a[:, 0] + b[:, 1] * a[:, 1])
    th = math.degrees(math.atan2(s, c))
    t = ca - cb @ rotation_z(th).T
    return th, t


def compare_structures(a: Structure, b: Structure, align: bool = True, reflections: bool = True,
                       translate: bool = True) -> Comparison:
    """Per-spin distances between two structures of the same spins.

    With ``align`` the second structure is moved by a z-rotation, optional y and z
    reflections and (optionally) a translation, chosen to minimise the mean distance.
    """
    if set(a.ids) != set(b.ids):
        raise ValueError("structures must contain the same spins")
    B = b.subset(a.ids)
    A = a.coordinates
    if not align:
        d = np.linalg.norm(A - B.coordinates, axis=1)
        return Comparison(list(a.ids), d, B)
    best = None
    for fy, fz in itertools.product((False, True), repeat=2) if reflections else [(False, False)]:
        Bf = transform(B, 0.0, fy, fz).coordinates
        if translate:
            th, t = _kabsch_z(A, Bf)
        else:
            th, _ = _kabsch_z(A - A.mean(axis=0) * 0, Bf)
            t = np.zeros(3)

        def cost(x):
            R = rotation_z(x[0])
            tt = x[1:] if translate else np.zeros(3)
            return float(np.mean(np.linalg.norm(A - (Bf @ R.T + tt), axis=1)))

        x0 = np.concatenate([[th], t]) if translate else np.array([th])
        res = minimize(cost, x0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 20000, "maxfev": 40000})
        x = res.x if res.fun <= cost(x0) else x0
        val = cost(x)
        if best is None or val < best[0] - 1e-12:
            best = (val, fy, fz, x)
    _, fy, fz, x = best
    tt = tuple(x[1:]) if translate else (0.0, 0.0, 0.0)
    moved = transform(B, x[0], fy, fz, tt)
    d = np.linalg.norm(A - moved.coordinates, axis=1)
    return Comparison(list(a.ids), d, moved, float(x[0]), fy, fz, tt)


# ---------------------------------------------------------------------------
# sensor positioning


@dataclass
class SensorPlacement:
    nitrogen: np.ndarray
    vacancy: np.ndarray
    xi: float
    alternatives: list[tuple[np.ndarray, float]]  # every accepted site within tolerance, ranked
    unique: bool
    anchor: str
    constraints: int
    rejected: list[tuple[np.ndarray, float, str]] = field(default_factory=list)  # (site, xi, reason)
    refined: np.ndarray | None = None
    refined_sigma: np.ndarray | None = None
    refined_xi: float | None = None


def _nitrogen_pairs(table: CouplingTable, carbon: Structure, n_id: str):
    out = []
    for s in carbon.ids:
        e = table.get(n_id, s)
        if e is not None:
            out.append((s, e))
    return out


def position_sensor(table: CouplingTable, carbon_structure: Structure,
                    lattice: DiamondLattice | None = None, constants: PhysicalConstants = DEFAULT,
                    tolerances: Tolerances = Tolerances(), nitrogen_id: str = "N",
                    weak_value: float = WEAK_VALUE_HZ, refine_position: bool = True,
                    snap_tol: float = 0.05, require_vacancy: bool = True) -> SensorPlacement:
    """Place the nitrogen on the lattice from its couplings to the carbon cluster.

    The carbon structure must sit on the diamond lattice with its first spin on an
    atom at the origin (structures from :func:`spincluster.lattice.solve` do).
    The vacancy is put on the nearest site along -z from the nitrogen. Only one
    sublattice has such a neighbour; with ``require_vacancy`` nitrogen sites without
    a free -z neighbour are moved to ``rejected`` instead of being ranked.
    """
    lattice = lattice or generate_diamond_lattice(11, constants.a0)
    carbon = carbon_structure.subset([s for s in carbon_structure.ids if not is_nitrogen(s)])
    origin = carbon.coordinates[0]
    ints, dist = crystal.snap(carbon.coordinates - origin, lattice.a0)
    if np.max(dist) > snap_tol:
        bad = carbon.ids[int(np.argmax(dist))]
        raise ValueError(f"carbon structure is not on the diamond lattice ({bad} is {np.max(dist):.3f} A off)")
    if crystal.sublattice(ints[0]) != 0:
        raise ValueError("first carbon must be on the origin sublattice")
    pos = crystal.to_lab(ints, lattice.a0)

    pairs = _nitrogen_pairs(table, carbon, nitrogen_id)
    if len(pairs) < 4:
        raise ValueError(f"need at least 4 measured N-C couplings, got {len(pairs)}")
    lookup = diamond_lookup(lattice, constants.gamma_c, constants.gamma_n, constants)
    measured = [(s, e) for s, e in pairs if not e.weak_upper_bound]
    a_id, a_e = max(measured or pairs, key=lambda p: p[1].value(weak_value))
    ak = carbon.ids.index(a_id)
    _, vint = candidate_vectors(a_e, lookup, tolerances.for_entry(a_e), weak_value)
    sign = 1 if crystal.sublattice(ints[ak]) == 0 else -1
    cand = ints[ak] + sign * vint
    cand_lab = crystal.to_lab(cand, lattice.a0)
    keep = np.ones(len(cand), dtype=bool)
    xi = np.zeros(len(cand))
    for s, e in pairs:
        k = carbon.ids.index(s)
        r = e.value(weak_value) - _coupling_many(cand_lab - pos[k], lookup.alpha)
        keep &= np.abs(r) < tolerances.for_entry(e)
        xi += r * r
    for k in range(len(ints)):
        keep &= np.any(cand != ints[k], axis=1)
    cand, cand_lab, xi = cand[keep], cand_lab[keep], xi[keep]
    if len(cand) == 0:
        raise ValueError("no lattice site reproduces the nitrogen couplings within tolerance")
    order = np.lexsort((cand_lab[:, 2], cand_lab[:, 1], cand_lab[:, 0], xi))
    cand, cand_lab, xi = cand[order], cand_lab[order], xi[order]

    # the axial neighbour of a B site lies at -(1,1,1); A sites have theirs at +z
    vac = cand - crystal.BASIS_OFFSET
    has_vac = crystal.sublattice(cand) == 1
    free_vac = np.ones(len(cand), dtype=bool)
    for k in range(len(ints)):
        free_vac &= np.any(vac != ints[k], axis=1)
    rejected = []
    if require_vacancy:
        ok = has_vac & free_vac
        for c, x, hv in zip(cand_lab[~ok], xi[~ok], has_vac[~ok]):
            reason = "vacancy site occupied by a carbon" if hv else "no lattice neighbour along -z"
            rejected.append((c + origin, float(x), reason))
        cand, cand_lab, xi, vac, has_vac = cand[ok], cand_lab[ok], xi[ok], vac[ok], has_vac[ok]
        if len(cand) == 0:
            raise ValueError("no nitrogen site within tolerance has a free vacancy site along -z")
    if not has_vac[0]:
        raise ValueError("best nitrogen site has no lattice neighbour along -z")
    alts = [(c + origin, float(x)) for c, x in zip(cand_lab, xi)]
    out = SensorPlacement(cand_lab[0] + origin, crystal.to_lab(vac[0], lattice.a0) + origin, float(xi[0]),
                          alts, len(cand) == 1, a_id, len(pairs), rejected)
    if refine_position:
        _refine_nitrogen(out, pairs, carbon, constants, weak_value)
    return out


def _coupling_many(d: np.ndarray, alpha: float) -> np.ndarray:
    from .model import coupling_frequencies
    return coupling_frequencies(d, alpha)


def _refine_nitrogen(out: SensorPlacement, pairs, carbon: Structure, constants: PhysicalConstants,
                     weak_value: float) -> None:
    alpha = constants.alpha(constants.gamma_c, constants.gamma_n)
    P = np.array([carbon.position(s) for s, _ in pairs])
    F = np.array([e.value(weak_value) for _, e in pairs])

    def fun(x):
        return F - _coupling_many(x[None, :] - P, alpha)

    sol = least_squares(fun, out.nitrogen, method="lm", xtol=1e-12, ftol=1e-12)
    r = sol.fun
    dof = len(r) - 3
    s2 = float(r @ r) / dof if dof > 0 else np.nan
    cov = s2 * np.linalg.pinv(sol.jac.T @ sol.jac)
    out.refined = sol.x
    out.refined_sigma = np.sqrt(np.diag(cov))
    out.refined_xi = float(r @ r)


# ---------------------------------------------------------------------------
# hyperfine comparison


@dataclass
class HyperfineDifference:
    spin: str
    d_par: float  # kHz, sign * measured - reference
    d_perp: float  # kHz


def hyperfine_comparison(records: Sequence[SpinRecord], reference: Mapping[str, tuple[float, float]],
                         sign_flip: bool = False) -> list[HyperfineDifference]:
    """Measured minus reference hyperfine components for spins present in both.

    ``sign_flip`` applies the global minus sign allowed on A_par (A_perp is a magnitude).
    """
    s = -1.0 if sign_flip else 1.0
    out = []
    for r in records:
        if r.id in reference:
            ref_par, ref_perp = reference[r.id]
            out.append(HyperfineDifference(r.id, s * r.A_par - ref_par, r.A_perp - ref_perp))
    return out


def match_sites(structure: Structure, reference_sites: np.ndarray, origin=None, scale: float = 1.02,
                tol: float = 0.3) -> dict[str, int | None]:
    """Index of the reference site nearest to each (scaled) spin position, or None beyond ``tol``.

    Positions are measured from ``origin`` (e.g. the vacancy) before scaling.
    """
    o = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    pts = (structure.coordinates - o) * scale
    tree = cKDTree(np.asarray(reference_sites, dtype=float))
    d, k = tree.query(pts)
    return {s: (int(kk) if dd <= tol else None) for s, dd, kk in zip(structure.ids, d, k)}
