"""Physical constants used throughout the package.

Everything is stored in SI units. Gyromagnetic ratios are magnitudes
(positive) in rad s^-1 T^-1; signs enter only through the Hamiltonian
conventions in :mod:`spincluster.corrections`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import math

from scipy import constants as _sc

TWO_PI = 2.0 * math.pi
GAUSS = 1e-4  # tesla
ANGSTROM = 1e-10  # metre


@dataclass(frozen=True)
class PhysicalConstants:
    mu0: float = _sc.mu_0
    hbar: float = _sc.hbar
    # 13C: 10.7084 MHz/T (CODATA); not printed in the source data
    gamma_c: float = TWO_PI * 10.7084e6
    # 14N: 2 pi x 0.3077 kHz/G
    gamma_n: float = TWO_PI * 0.3077e3 / GAUSS
    gamma_e: float = TWO_PI * 28.024951e9
    delta_zfs: float = TWO_PI * 2.87e9
    a0: float = 3.5668  # angstrom

    def __post_init__(self):
        for name in ("mu0", "hbar", "gamma_c", "gamma_n", "gamma_e", "delta_zfs", "a0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def alpha(self, gamma_i: float, gamma_j: float) -> float:
        """Dipolar prefactor mu0*gi*gj*hbar/(4 pi) in rad s^-1 m^3."""
        return self.mu0 * gamma_i * gamma_j * self.hbar / (4.0 * math.pi)

    def with_(self, **kw) -> "PhysicalConstants":
        return replace(self, **kw)

    @property
    def bond_length(self) -> float:
        return math.sqrt(3.0) * self.a0 / 4.0


DEFAULT = PhysicalConstants()

# measured 13C m_s=0 precession frequency, kHz
OMEGA0_KHZ = 431.960
BZ_GAUSS = 403.0


def larmor_check(constants: PhysicalConstants = DEFAULT, bz_gauss: float = BZ_GAUSS,
                 omega0_khz: float = OMEGA0_KHZ, rel_tol: float = 5e-3) -> float:
    """Relative mismatch between gamma_c*Bz and the measured bare 13C frequency.

    Raises if the mismatch exceeds ``rel_tol``.
    """
    predicted_khz = constants.gamma_c * bz_gauss * GAUSS / TWO_PI / 1e3
    rel = abs(predicted_khz - omega0_khz) / omega0_khz
    if rel > rel_tol:
        raise ValueError(f"gamma_c*Bz = {predicted_khz:.3f} kHz disagrees with {omega0_khz} kHz")
    return rel
