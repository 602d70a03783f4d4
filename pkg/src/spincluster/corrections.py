"""Electron-mediated corrections to nuclear-nuclear double-resonance frequencies.

One spin-1 electron and two spin-1/2 nuclei:

    H = D Sz^2 + ge B.S + gc B.(I1 + I2) + S.A1.I1 + S.A2.I2 + I1.C.I2

All energies are angular frequencies (rad/s); fields are given in gauss.
The double-resonance frequency for electron projection m_s is

    f(m_s) = |l(m_s,++) + l(m_s,--) - l(m_s,+-) - l(m_s,-+)| / 4 pi

which reduces to |C_zz| / 4 pi when nothing but the secular terms act.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import enum
import math
import warnings

import numpy as np
from scipy.optimize import minimize

from .constants import DEFAULT, GAUSS, TWO_PI, PhysicalConstants
from .model import SpinRecord, dipolar_tensor

KHZ = TWO_PI * 1e3  # kHz -> rad/s


class DegeneracyError(RuntimeError):
    def __init__(self, msg: str, overlaps=None):
        super().__init__(msg)
        self.overlaps = overlaps


class Target(str, enum.Enum):
    ms_minus1 = "ms_minus1"
    ms_plus1 = "ms_plus1"
    averaged = "averaged"


# spin operators
_SX1 = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex) / math.sqrt(2)
_SY1 = np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex) / math.sqrt(2)
_SZ1 = np.diag([1.0, 0.0, -1.0]).astype(complex)
_IX = np.array([[0, 1], [1, 0]], dtype=complex) / 2
_IY = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
_IZ = np.diag([0.5, -0.5]).astype(complex)
_E3, _E2 = np.eye(3), np.eye(2)

S_OPS = [np.kron(np.kron(o, _E2), _E2) for o in (_SX1, _SY1, _SZ1)]
I1_OPS = [np.kron(np.kron(_E3, o), _E2) for o in (_IX, _IY, _IZ)]
I2_OPS = [np.kron(np.kron(_E3, _E2), o) for o in (_IX, _IY, _IZ)]

MS_VALUES = (1, 0, -1)
MI_VALUES = (0.5, -0.5)


def basis_index(ms: int, m1: float, m2: float) -> int:
    """Index of |m_s, m_I1, m_I2> in the product basis (m_s = +1, 0, -1; m_I = +1/2, -1/2)."""
    return MS_VALUES.index(ms) * 4 + MI_VALUES.index(m1) * 2 + MI_VALUES.index(m2)


@dataclass
class SpinSystemHamiltonian:
    delta_zfs: float  # rad/s
    B: np.ndarray  # gauss (Bx, By, Bz)
    A1: np.ndarray  # 3x3 rad/s
    A2: np.ndarray  # 3x3 rad/s
    C: np.ndarray  # 3x3 rad/s
    gamma_e: float = DEFAULT.gamma_e
    gamma_c: float = DEFAULT.gamma_c

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        self.A1 = np.asarray(self.A1, dtype=float)
        self.A2 = np.asarray(self.A2, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        if not np.allclose(self.C, self.C.T, atol=1e-9 * (1 + np.abs(self.C).max())):
            raise ValueError("C tensor must be symmetric")

    @classmethod
    def from_parameters(cls, A_par1: float, A_perp1: float, phi1: float, A_par2: float, A_perp2: float,
                        phi2: float, pos1, pos2, Bz: float = 403.0, Bperp: float = 0.0, theta: float = 0.0,
                        constants: PhysicalConstants = DEFAULT) -> "SpinSystemHamiltonian":
        """Reduced parameterisation: hyperfine in kHz, positions in angstrom, fields in gauss."""
        C = dipolar_tensor(pos1, pos2, constants=constants)
        return cls(constants.delta_zfs, np.array([Bperp * math.cos(theta), Bperp * math.sin(theta), Bz]),
                   reduced_hyperfine(A_par1, A_perp1, phi1), reduced_hyperfine(A_par2, A_perp2, phi2), C,
                   constants.gamma_e, constants.gamma_c)

    def swapped(self) -> "SpinSystemHamiltonian":
        return SpinSystemHamiltonian(self.delta_zfs, self.B, self.A2, self.A1, self.C, self.gamma_e, self.gamma_c)

    def matrix(self) -> np.ndarray:
        Bt = self.B * GAUSS
        H = self.delta_zfs * S_OPS[2] @ S_OPS[2]
        for a in range(3):
            H = H + self.gamma_e * Bt[a] * S_OPS[a] + self.gamma_c * Bt[a] * (I1_OPS[a] + I2_OPS[a])
            for b in range(3):
                H = H + self.A1[a, b] * S_OPS[a] @ I1_OPS[b] + self.A2[a, b] * S_OPS[a] @ I2_OPS[b]
                H = H + self.C[a, b] * I1_OPS[a] @ I2_OPS[b]
        return H

    def secular_eigenvalues(self) -> dict[tuple, float]:
        """lambda_0(m_s, m1, m2) of the secular part."""
        gB = self.gamma_c * self.B[2] * GAUSS
        eB = self.gamma_e * self.B[2] * GAUSS
        out = {}
        for ms in MS_VALUES:
            for m1 in MI_VALUES:
                for m2 in MI_VALUES:
                    out[(ms, m1, m2)] = (ms * ms * self.delta_zfs + ms * eB + (m1 + m2) * gB
                                         + ms * m1 * self.A1[2, 2] + ms * m2 * self.A2[2, 2]
                                         + m1 * m2 * self.C[2, 2])
        return out


def reduced_hyperfine(A_par_khz: float, A_perp_khz: float, phi: float) -> np.ndarray:
    """Symmetric hyperfine tensor (rad/s) with the zz and zx/zy (= xz/yz) elements set.

    The in-plane elements A_xx, A_yy, A_xy are left at zero: they enter only at higher order.
    """
    A = np.zeros((3, 3))
    A[2, 0] = A[0, 2] = A_perp_khz * KHZ * math.cos(phi)
    A[2, 1] = A[1, 2] = A_perp_khz * KHZ * math.sin(phi)
    A[2, 2] = A_par_khz * KHZ
    return A


@dataclass
class DoubleResonancePrediction:
    f_de_minus1: float  # Hz
    f_de_plus1: float
    f_de_av: float
    correction_terms: dict = field(default_factory=dict)  # rad/s
    method: str = "exact"
    eigenvalues: dict | None = None  # (m_s, m1, m2) -> rad/s (exact only)

    def f(self, target: Target | str) -> float:
        t = Target(target)
        return {Target.ms_minus1: self.f_de_minus1, Target.ms_plus1: self.f_de_plus1,
                Target.averaged: self.f_de_av}[t]


def _f_combo(lam: dict, ms: int) -> float:
    return abs(lam[(ms, .5, .5)] + lam[(ms, -.5, -.5)] - lam[(ms, .5, -.5)] - lam[(ms, -.5, .5)]) / (4 * math.pi)


def exact_double_resonance(h: SpinSystemHamiltonian, min_overlap: float = 0.5) -> DoubleResonancePrediction:
    """Diagonalise the 12x12 Hamiltonian and label eigenstates by maximal overlap."""
    H = h.matrix()
    if H.shape != (12, 12):
        raise ValueError("expected a 12x12 Hamiltonian")
    # remove the large electron energies first for accuracy: they are diagonal
    shift = np.real(np.diag(H)).mean()
    w, v = np.linalg.eigh(H - shift * np.eye(12))
    ov = np.abs(v) ** 2  # ov[basis, eig]
    lam = {}
    used = set()
    for ms in (1, -1):
        for m1 in MI_VALUES:
            for m2 in MI_VALUES:
                b = basis_index(ms, m1, m2)
                k = int(np.argmax(ov[b]))
                if ov[b, k] < min_overlap or k in used:
                    raise DegeneracyError(f"cannot assign |{ms},{m1:+},{m2:+}>: overlap {ov[b, k]:.3f}",
                                          ov[b].copy())
                used.add(k)
                lam[(ms, m1, m2)] = w[k] + shift
    fm, fp = _f_combo(lam, -1), _f_combo(lam, 1)
    return DoubleResonancePrediction(fm, fp, 0.5 * (fm + fp), {}, "exact", lam)


def correction_terms(h: SpinSystemHamiltonian, ms: int | None = None) -> dict:
    """The second-order correction terms (rad/s). Dl1 is given for m_s = -1 and +1."""
    A1, A2, C = h.A1, h.A2, h.C
    Bt = h.B * GAUSS
    gB = h.gamma_c * Bt[2]
    eB = h.gamma_e * Bt[2]
    perp = A1[2, 0] * A2[2, 0] + A1[2, 1] * A2[2, 1]
    dl1 = {m: perp / (h.delta_zfs + m * eB) for m in (1, -1)}
    dl2_0 = ((A1[2, 0] + A2[2, 0]) * C[2, 0] + (A1[2, 1] + A2[2, 1]) * C[2, 1]) / gB
    dl2_1 = -sum((A[2, 0] * C[2, 0] + A[2, 1] * C[2, 1]) * A[2, 2] for A in (A1, A2)) / gB ** 2
    bc = Bt[0] * C[2, 0] + Bt[1] * C[2, 1]
    dl3_0 = 2.0 * bc / Bt[2]
    dl3_1 = (A1[2, 2] + A2[2, 2]) * bc / (h.gamma_c * Bt[2] ** 2)
    return {"dl1_minus1": dl1[-1], "dl1_plus1": dl1[1], "dl2_0": dl2_0, "dl2_1": dl2_1,
            "dl3_0": dl3_0, "dl3_1": dl3_1}


def _regime_ratio(h: SpinSystemHamiltonian) -> float:
    eB = h.gamma_e * h.B[2] * GAUSS
    small = max(abs(h.gamma_c * h.B[2] * GAUSS), abs(h.A1[2, 2]), abs(h.A2[2, 2]), abs(h.C[2, 2]))
    return small / min(abs(h.delta_zfs + eB), abs(h.delta_zfs - eB))


def perturbative_corrections(h: SpinSystemHamiltonian, warn_ratio: float = 0.1) -> DoubleResonancePrediction:
    """Second-order double-resonance frequencies for m_s = -1, +1 and their average."""
    ratio = _regime_ratio(h)
    if ratio > warn_ratio:
        warnings.warn(f"outside the perturbative regime (ratio {ratio:.3g})", RuntimeWarning, stacklevel=2)
    t = correction_terms(h)
    czz = h.C[2, 2]

    def f(ms):
        dl1 = t["dl1_plus1"] if ms == 1 else t["dl1_minus1"]
        return abs(czz + dl1 + ms * t["dl2_0"] + t["dl2_1"] + t["dl3_0"] + ms * t["dl3_1"]) / (4 * math.pi)

    # |C_zz + <dl1> + dl2_1 + dl3_0| / 4pi is the same number whenever both projections keep the
    # sign of C_zz; the mean below stays correct when a correction exceeds |C_zz|.
    t["f_av_closed_form_hz"] = averaged_closed_form(h.C, t)
    fm, fp = f(-1), f(1)
    return DoubleResonancePrediction(fm, fp, 0.5 * (fm + fp), t, "perturbative")


def averaged_closed_form(C: np.ndarray, terms: dict) -> float:
    """|C_zz + (dl1(+1) + dl1(-1))/2 + dl2_1 + dl3_0| / 4pi in Hz."""
    return abs(C[2, 2] + 0.5 * (terms["dl1_plus1"] + terms["dl1_minus1"]) + terms["dl2_1"]
               + terms["dl3_0"]) / (4 * math.pi)


def second_order_eigenvalues(H0_diag: np.ndarray, V: np.ndarray, degenerate_tol: float = 0.0) -> np.ndarray:
    """Rayleigh-Schroedinger eigenvalues to second order for H = diag(H0) + V.

    Pairs closer than ``degenerate_tol`` are skipped in the second-order sum.
    """
    e = np.asarray(H0_diag, dtype=float)
    V = np.asarray(V)
    d = e[:, None] - e[None, :]
    with np.errstate(divide="ignore"):
        inv = np.where(np.abs(d) > degenerate_tol, 1.0 / np.where(d == 0, 1.0, d), 0.0)
    np.fill_diagonal(inv, 0.0)
    return e + np.real(np.diag(V)) + np.sum(np.abs(V.T) ** 2 * inv, axis=1)


# ---------------------------------------------------------------------------
# vectorised perturbative corrections over the unknown angles


def _corrections_grid(A_par, A_perp, C, phi1, phi2, Bperp, theta, Bz, constants, target):
    """|f - |Czz|/4pi| (Hz) broadcast over the angle and field arrays."""
    a_par1, a_par2 = A_par[0] * KHZ, A_par[1] * KHZ
    ap1, ap2 = A_perp[0] * KHZ, A_perp[1] * KHZ
    zx1, zy1 = ap1 * np.cos(phi1), ap1 * np.sin(phi1)
    zx2, zy2 = ap2 * np.cos(phi2), ap2 * np.sin(phi2)
    czx, czy, czz = C[2, 0], C[2, 1], C[2, 2]
    Bzt = Bz * GAUSS
    gB = constants.gamma_c * Bzt
    eB = constants.gamma_e * Bzt
    bx, by = Bperp * GAUSS * np.cos(theta), Bperp * GAUSS * np.sin(theta)
    perp = zx1 * zx2 + zy1 * zy2
    dl2_0 = ((zx1 + zx2) * czx + (zy1 + zy2) * czy) / gB
    dl2_1 = -((zx1 * czx + zy1 * czy) * a_par1 + (zx2 * czx + zy2 * czy) * a_par2) / gB ** 2
    bc = bx * czx + by * czy
    dl3_0 = 2.0 * bc / Bzt
    dl3_1 = (a_par1 + a_par2) * bc / (constants.gamma_c * Bzt ** 2)
    def f(ms):
        return np.abs(czz + perp / (constants.delta_zfs + ms * eB) + ms * dl2_0 + dl2_1 + dl3_0 + ms * dl3_1)

    if target == Target.averaged:
        val = 0.5 * (f(1) + f(-1))
    else:
        val = f(1 if target == Target.ms_plus1 else -1)
    return np.abs(val - abs(czz)) / (4 * math.pi)


@dataclass
class CorrectionBound:
    bound_hz: float
    phi1: float
    phi2: float
    Bperp: float
    theta: float
    phi_mean_hz: float  # mean over (phi1, phi2) of the correction maximised over the field


def max_correction_bound(pair: tuple[SpinRecord, SpinRecord], geometry, Bz: float = 403.0,
                         Bperp_max: float = 1.0, target: Target | str = Target.averaged,
                         constants: PhysicalConstants = DEFAULT, n_angle: int = 24, n_field: int = 5,
                         polish: bool = True) -> CorrectionBound:
    """Largest |f_DE - |C_zz|/4pi| over phi1, phi2, theta in [0, 2 pi) and Bperp in [0, Bperp_max].

    ``geometry`` is the pair of positions (angstrom) or a precomputed 3x3 C tensor (rad/s).
    A dense grid is followed by a bounded local polish from the best grid point.
    """
    target = Target(target)
    r1, r2 = pair
    C = np.asarray(geometry, dtype=float)
    if C.shape != (3, 3):
        C = dipolar_tensor(C[0], C[1], constants=constants)
    A_par = (r1.A_par, r2.A_par)
    A_perp = (r1.A_perp, r2.A_perp)
    ang = np.arange(n_angle) * (TWO_PI / n_angle)
    fld = np.linspace(0.0, Bperp_max, n_field) if Bperp_max > 0 else np.zeros(1)
    P1, P2, BB, TH = np.meshgrid(ang, ang, fld, ang, indexing="ij")
    g = _corrections_grid(A_par, A_perp, C, P1, P2, BB, TH, Bz, constants, target)
    phi_mean = float(np.mean(g.max(axis=(2, 3))))
    k = np.unravel_index(int(np.argmax(g)), g.shape)
    x0 = np.array([ang[k[0]], ang[k[1]], fld[k[2]], ang[k[3]]])
    best = float(g[k])
    if polish and best > 0:
        def neg(x):
            return -float(_corrections_grid(A_par, A_perp, C, x[0], x[1], x[2], x[3], Bz, constants, target))

        bounds = [(x0[0] - 0.5, x0[0] + 0.5), (x0[1] - 0.5, x0[1] + 0.5), (0.0, Bperp_max),
                  (x0[3] - 0.5, x0[3] + 0.5)]
        res = minimize(neg, x0, method="L-BFGS-B", bounds=bounds)
        if -res.fun > best:
            best, x0 = -float(res.fun), res.x
    return CorrectionBound(best, float(x0[0] % TWO_PI), float(x0[1] % TWO_PI), float(x0[2]),
                           float(x0[3] % TWO_PI), phi_mean)


@dataclass
class CorrectionMatrix:
    ids: list[str]
    target: Target
    bound: np.ndarray  # (M, M) Hz, nan on the diagonal
    phi_mean: np.ndarray  # (M, M) Hz

    def summary(self, mask: np.ndarray | None = None) -> dict:
        iu = np.triu_indices(len(self.ids), 1)
        sel = np.ones(len(iu[0]), dtype=bool) if mask is None else mask[iu]
        b, m = self.bound[iu][sel], self.phi_mean[iu][sel]
        return {"max": float(b.max()), "mean_of_max": float(b.mean()), "mean_phi_average": float(m.mean()),
                "pairs": int(sel.sum())}


def correction_matrix(structure, records: dict[str, SpinRecord], Bz: float = 403.0, Bperp_max: float = 1.0,
                      target: Target | str = Target.averaged, constants: PhysicalConstants = DEFAULT,
                      n_angle: int = 24, n_field: int = 5, polish: bool = True) -> CorrectionMatrix:
    """Pairwise maximal corrections for every spin pair of a structure."""
    target = Target(target)
    ids = [s for s in structure.ids if s in records]
    M = len(ids)
    bound = np.full((M, M), np.nan)
    mean = np.full((M, M), np.nan)
    for i in range(M):
        for j in range(i + 1, M):
            C = dipolar_tensor(structure.position(ids[i]), structure.position(ids[j]), constants=constants)
            cb = max_correction_bound((records[ids[i]], records[ids[j]]), C, Bz, Bperp_max, target, constants,
                                      n_angle, n_field, polish)
            bound[i, j] = bound[j, i] = cb.bound_hz
            mean[i, j] = mean[j, i] = cb.phi_mean_hz
    return CorrectionMatrix(ids, target, bound, mean)
