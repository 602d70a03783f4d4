"""Spin records, coupling tables, structures and the point-dipole model.

Coordinates are in angstrom and coupling frequencies in Hz. The dipolar
coupling of two spins is

    C_ij = alpha_ij / r^3 * (3 dz^2 / r^2 - 1),   alpha_ij = mu0 gi gj hbar / 4 pi

and a double-resonance measurement observes f_ij = |C_ij| / 4 pi.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import enum
import math
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .constants import ANGSTROM, DEFAULT, OMEGA0_KHZ, PhysicalConstants
from . import crystal


class DegenerateGeometryError(ValueError):
    pass


class MissingCoordinatesError(KeyError):
    pass


class Projection(str, enum.Enum):
    minus1 = "minus1"
    plus1 = "plus1"
    averaged = "averaged"


# value/weight used for "<1 Hz" entries
WEAK_VALUE_HZ = 0.5
WEAK_SIGMA_HZ = 0.5


def is_nitrogen(spin_id: str) -> bool:
    return spin_id.upper().startswith("N")


def gamma_for(spin_id: str, constants: PhysicalConstants = DEFAULT) -> float:
    return constants.gamma_n if is_nitrogen(spin_id) else constants.gamma_c


@dataclass(frozen=True)
class SpinRecord:
    id: str
    omega_minus1: float  # kHz
    omega_plus1: float  # kHz
    omega_0: float = OMEGA0_KHZ  # kHz
    A_par: float = float("nan")  # kHz
    A_perp: float = float("nan")  # kHz
    imaginary_perp: bool = False

    def __post_init__(self):
        if not (self.omega_minus1 > 0 and self.omega_plus1 > 0):
            raise ValueError(f"{self.id}: precession frequencies must be positive")
        if self.A_perp < 0:
            raise ValueError(f"{self.id}: A_perp must be non-negative")

    @classmethod
    def from_frequencies(cls, spin_id: str, omega_minus1: float, omega_plus1: float,
                         omega_0: float = OMEGA0_KHZ) -> "SpinRecord":
        est = hyperfine_from_frequencies(omega_minus1, omega_plus1, omega_0)
        return cls(spin_id, omega_minus1, omega_plus1, omega_0, est.A_par, est.A_perp, est.imaginary)


@dataclass(frozen=True)
class CouplingEntry:
    frequency_hz: float
    sigma_hz: float = 0.0
    ms_projection: Projection = Projection.averaged
    weak_upper_bound: bool = False
    single_projection_only: bool = False
    # unit of the last printed digit (0 when unknown)
    resolution_hz: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if not self.weak_upper_bound and not self.frequency_hz > 0:
            raise ValueError("measured coupling frequencies must be positive")

    def value(self, weak_value: float = WEAK_VALUE_HZ) -> float:
        """Frequency used in fitting; weak entries map to ``weak_value``."""
        return weak_value if self.weak_upper_bound else self.frequency_hz


def _key(a: str, b: str) -> tuple[str, str]:
    if a == b:
        raise ValueError(f"no self-coupling entries allowed ({a})")
    return (a, b) if a < b else (b, a)


@dataclass
class CouplingTable:
    """Sparse symmetric table of measured couplings."""

    spins: list[str]
    entries: dict[tuple[str, str], CouplingEntry] = field(default_factory=dict)
    projection: Projection = Projection.averaged

    def __post_init__(self):
        if len(set(self.spins)) != len(self.spins):
            raise ValueError("duplicate spin labels")
        raw, self.entries = self.entries, {}
        for (a, b), e in raw.items():
            self.set(a, b, e)

    def set(self, a: str, b: str, entry: CouplingEntry) -> None:
        for s in (a, b):
            if s not in self.spins:
                raise KeyError(f"unknown spin label {s!r}")
        self.entries[_key(a, b)] = entry

    def get(self, a: str, b: str) -> CouplingEntry | None:
        if a == b:
            return None
        return self.entries.get(_key(a, b))

    def __contains__(self, pair) -> bool:
        a, b = pair
        return a != b and _key(a, b) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, str, CouplingEntry]]:
        order = {s: i for i, s in enumerate(self.spins)}
        pairs = [tuple(sorted(k, key=order.__getitem__)) for k in self.entries]
        for a, b in sorted(pairs, key=lambda p: (order[p[0]], order[p[1]])):
            yield a, b, self.entries[_key(a, b)]

    def neighbours(self, spin: str) -> dict[str, CouplingEntry]:
        out = {}
        for other in self.spins:
            e = self.get(spin, other)
            if e is not None:
                out[other] = e
        return out

    def subset(self, spins: Iterable[str]) -> "CouplingTable":
        keep = [s for s in self.spins if s in set(spins)]
        ks = set(keep)
        return CouplingTable(keep, {k: e for k, e in self.entries.items() if k[0] in ks and k[1] in ks},
                             self.projection)

    def pair_arrays(self, order: Sequence[str] | None = None, weak_value: float = WEAK_VALUE_HZ):
        """Index arrays (i, j), fitted values and entries for every measured pair."""
        order = list(self.spins if order is None else order)
        idx = {s: k for k, s in enumerate(order)}
        I, J, F, E = [], [], [], []
        for a, b, e in self:
            if a in idx and b in idx:
                I.append(idx[a])
                J.append(idx[b])
                F.append(e.value(weak_value))
                E.append(e)
        return np.array(I, dtype=int), np.array(J, dtype=int), np.array(F, dtype=float), E


@dataclass
class Structure:
    ids: list[str]
    coordinates: np.ndarray  # (M, 3) angstrom
    gauge: dict = field(default_factory=dict)
    uncertainties: np.ndarray | None = None  # (M, 3), nan for fixed coordinates
    xi: float | None = None

    def __post_init__(self):
        self.coordinates = np.asarray(self.coordinates, dtype=float).reshape(-1, 3)
        if len(self.ids) != len(self.coordinates):
            raise ValueError("one coordinate triple per spin required")
        if self.uncertainties is not None:
            self.uncertainties = np.asarray(self.uncertainties, dtype=float).reshape(-1, 3)

    def index(self, spin: str) -> int:
        try:
            return self.ids.index(spin)
        except ValueError:
            raise MissingCoordinatesError(f"no coordinates for spin {spin!r}") from None

    def position(self, spin: str) -> np.ndarray:
        return self.coordinates[self.index(spin)]

    def subset(self, ids: Iterable[str]) -> "Structure":
        ids = list(ids)
        rows = [self.index(s) for s in ids]
        unc = None if self.uncertainties is None else self.uncertainties[rows]
        return Structure(ids, self.coordinates[rows].copy(), dict(self.gauge), unc, None)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {s: self.coordinates[k] for k, s in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# point-dipole coupling


def dipolar_coupling_signed(pos_i, pos_j, gamma_i: float, gamma_j: float,
                            constants: PhysicalConstants = DEFAULT) -> float:
    """Signed zz coupling C_ij in rad/s."""
    d = (np.asarray(pos_j, dtype=float) - np.asarray(pos_i, dtype=float)) * ANGSTROM
    r2 = float(d @ d)
    if r2 == 0.0:
        raise DegenerateGeometryError("coincident spin positions")
    r = math.sqrt(r2)
    return constants.alpha(gamma_i, gamma_j) / (r2 * r) * (3.0 * d[2] ** 2 / r2 - 1.0)


def dipolar_coupling(pos_i, pos_j, gamma_i: float | None = None, gamma_j: float | None = None,
                     constants: PhysicalConstants = DEFAULT) -> float:
    """Observable coupling frequency |C_ij|/4pi in Hz (13C-13C by default)."""
    gi = constants.gamma_c if gamma_i is None else gamma_i
    gj = constants.gamma_c if gamma_j is None else gamma_j
    return abs(dipolar_coupling_signed(pos_i, pos_j, gi, gj, constants)) / (4.0 * math.pi)


def coupling_frequencies(vectors: np.ndarray, alpha: float) -> np.ndarray:
    """|C|/4pi in Hz for an (..., 3) array of displacements in angstrom.

    ``alpha`` is the dipolar prefactor in rad s^-1 m^3. Zero vectors give inf.
    """
    v = np.asarray(vectors, dtype=float)
    r2 = np.einsum("...i,...i->...", v, v)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = alpha / (ANGSTROM ** 3) / (r2 * np.sqrt(r2)) * (3.0 * v[..., 2] ** 2 / r2 - 1.0)
    out = np.abs(c) / (4.0 * math.pi)
    return np.where(r2 > 0, out, np.inf)


def dipolar_tensor(pos_i, pos_j, gamma_i: float | None = None, gamma_j: float | None = None,
                   constants: PhysicalConstants = DEFAULT) -> np.ndarray:
    """Full 3x3 nuclear-nuclear tensor (rad/s), alpha/r^3 (3 r r - 1).

    Symmetric, traceless, and its zz element equals ``dipolar_coupling_signed``.
    """
    gi = constants.gamma_c if gamma_i is None else gamma_i
    gj = constants.gamma_c if gamma_j is None else gamma_j
    d = (np.asarray(pos_j, dtype=float) - np.asarray(pos_i, dtype=float)) * ANGSTROM
    r = float(np.linalg.norm(d))
    if r == 0.0:
        raise DegenerateGeometryError("coincident spin positions")
    u = d / r
    return constants.alpha(gi, gj) / r ** 3 * (3.0 * np.outer(u, u) - np.eye(3))


# ---------------------------------------------------------------------------
# hyperfine estimates


@dataclass(frozen=True)
class HyperfineEstimate:
    A_par: float
    A_perp: float
    imaginary: bool


def hyperfine_from_frequencies(omega_minus1: float, omega_plus1: float,
                               omega_0: float = OMEGA0_KHZ) -> HyperfineEstimate:
    """Secular-model hyperfine components from the three precession frequencies.

    Units are whatever the inputs use (kHz in the bundled data). A negative
    radicand for A_perp returns A_perp = 0 with ``imaginary`` set.
    """
    if omega_0 == 0:
        raise ZeroDivisionError("omega_0 must be non-zero")
    for w in (omega_minus1, omega_plus1, omega_0):
        if not w > 0:
            raise ValueError("precession frequencies must be positive")
    a_par = (omega_plus1 ** 2 - omega_minus1 ** 2) / (4.0 * omega_0)
    rad = (omega_plus1 ** 2 + omega_minus1 ** 2 - 2.0 * omega_0 ** 2 - 2.0 * a_par ** 2) / 2.0
    if rad < 0:
        return HyperfineEstimate(a_par, 0.0, True)
    return HyperfineEstimate(a_par, math.sqrt(rad), False)


def frequencies_from_hyperfine(A_par: float, A_perp: float, omega_0: float = OMEGA0_KHZ):
    """Inverse secular model: (omega_-1, omega_+1)."""
    return (math.hypot(omega_0 - A_par, A_perp), math.hypot(omega_0 + A_par, A_perp))


# ---------------------------------------------------------------------------
# residuals


@dataclass
class Residuals:
    ids: list[str]
    matrix: np.ndarray  # (M, M) signed residual f - |C|/4pi, nan where unmeasured
    predicted: np.ndarray  # (M, M) model |C|/4pi for every pair
    xi: float

    def pairs(self) -> list[tuple[str, str, float]]:
        out = []
        M = len(self.ids)
        for i in range(M):
            for j in range(i + 1, M):
                if not np.isnan(self.matrix[i, j]):
                    out.append((self.ids[i], self.ids[j], float(self.matrix[i, j])))
        return out


def predicted_matrix(structure: Structure, constants: PhysicalConstants = DEFAULT) -> np.ndarray:
    X = structure.coordinates
    M = len(X)
    out = np.zeros((M, M))
    for i in range(M):
        for j in range(i + 1, M):
            gi = gamma_for(structure.ids[i], constants)
            gj = gamma_for(structure.ids[j], constants)
            out[i, j] = out[j, i] = dipolar_coupling(X[i], X[j], gi, gj, constants)
    return out


def residuals_and_xi(structure: Structure, table: CouplingTable,
                     constants: PhysicalConstants = DEFAULT,
                     weak_value: float = WEAK_VALUE_HZ) -> Residuals:
    """Residuals f_ij - |C_ij|/4pi over measured pairs and their sum of squares."""
    missing = [s for s in table.spins if s not in structure.ids]
    if missing:
        raise MissingCoordinatesError(f"no coordinates for spin {missing[0]!r}")
    # only table spins take part; keep the structure order
    ids = [s for s in structure.ids if s in set(table.spins)]
    sub = structure.subset(ids)
    pred = predicted_matrix(sub, constants)
    res = np.full_like(pred, np.nan)
    I, J, F, _ = table.pair_arrays(ids, weak_value)
    d = F - pred[I, J]
    res[I, J] = d
    res[J, I] = d
    return Residuals(ids, res, pred, float(np.sum(d ** 2)))


def synth_table(structure: Structure, pairs: Iterable[tuple[str, str]] | None = None,
                constants: PhysicalConstants = DEFAULT,
                projection: Projection = Projection.averaged) -> CouplingTable:
    """Exact coupling table generated from a structure (all pairs by default).

    Pairs at exactly the magic angle (zero coupling) are left unmeasured.
    """
    ids = list(structure.ids)
    if pairs is None:
        pairs = [(ids[i], ids[j]) for i in range(len(ids)) for j in range(i + 1, len(ids))]
    table = CouplingTable(ids, projection=projection)
    for a, b in pairs:
        f = dipolar_coupling(structure.position(a), structure.position(b),
                             gamma_for(a, constants), gamma_for(b, constants), constants)
        if f > 1e-9:
            table.set(a, b, CouplingEntry(f, 0.0, projection))
    return table


# ---------------------------------------------------------------------------
# lattice-density sanity estimate


@dataclass(frozen=True)
class SpinCountEstimate:
    volume_nm3: float
    lattice_sites: int
    expected_spins: float
    box_lo: tuple
    box_hi: tuple


def expected_spin_count(structure: Structure, abundance: float = 0.011,
                        constants: PhysicalConstants = DEFAULT) -> SpinCountEstimate:
    """Bounding-box volume, diamond sites inside it (closed box) and expected 13C count."""
    if len(structure) < 2:
        raise ValueError("need at least two spins")
    if not 0 < abundance <= 1:
        raise ValueError("abundance must be in (0, 1]")
    lo = structure.coordinates.min(axis=0)
    hi = structure.coordinates.max(axis=0)
    vol = float(np.prod(hi - lo)) * 1e-3
    n = len(crystal.sites_in_box(lo, hi, constants.a0))
    return SpinCountEstimate(vol, n, n * abundance, tuple(lo), tuple(hi))
