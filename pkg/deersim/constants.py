"""Physical constants and unit conventions.

Values come from ``scipy.constants`` (CODATA snapshot shipped with the installed
SciPy; CODATA 2018 for SciPy 1.4 through 1.14, CODATA 2022 afterwards). The
snapshot in use is exposed as ``CODATA_SNAPSHOT``.

Canonical internal units: time in microseconds, angular frequency in rad/us,
distance in nanometres, field in gauss. Public functions take linear
frequencies in MHz and sequence times in ns.
"""
import math
from dataclasses import dataclass

import scipy
from scipy import constants as sp

from deersim.errors import DomainError

TWO_PI = 2.0 * math.pi

GAUSS_PER_TESLA = 1.0e4
NM_PER_M = 1.0e9
US_PER_S = 1.0e6
NS_PER_US = 1.0e3

# Angle between a (100) surface normal and a <111> NV axis.
MAGIC_ANGLE_DEG = math.degrees(math.acos(1.0 / math.sqrt(3.0)))

CODATA_SNAPSHOT = f"scipy.constants, SciPy {scipy.__version__}"


@dataclass(frozen=True)
class PhysicsConstants:
    """Physical constants in SI units, plus the derived dipolar prefactor."""

    # electron gyromagnetic ratio (rad s^-1 T^-1), free-electron g-factor
    gamma_e: float = sp.physical_constants["electron gyromag. ratio"][0]

    # reduced Planck constant (J s)
    hbar: float = sp.hbar

    # mu_0 / 4 pi (T^2 m^3 J^-1)
    mu0_over_4pi: float = sp.mu_0 / (4.0 * math.pi)

    @property
    def gamma_e_mhz_per_gauss(self) -> float:
        """Electron gyromagnetic ratio as linear frequency per gauss (MHz/G)."""
        return self.gamma_e / TWO_PI / GAUSS_PER_TESLA / US_PER_S

    @property
    def dipolar_prefactor_angular(self) -> float:
        """(mu0/4pi) gamma^2 hbar in rad/us * nm^3."""
        si = self.mu0_over_4pi * self.gamma_e ** 2 * self.hbar  # rad/s * m^3
        return si / US_PER_S * NM_PER_M ** 3

    @property
    def dipolar_prefactor_mhz(self) -> float:
        """(mu0/4pi) gamma^2 hbar / 2pi in MHz * nm^3."""
        return self.dipolar_prefactor_angular / TWO_PI


CONST = PhysicsConstants()


def mhz_to_angular(value):
    """Linear frequency in MHz to angular frequency in rad/us."""
    return value * TWO_PI


def angular_to_mhz(value):
    """Angular frequency in rad/us to linear frequency in MHz."""
    return value / TWO_PI


def gauss_to_tesla(value):
    return value / GAUSS_PER_TESLA


def tesla_to_gauss(value):
    return value * GAUSS_PER_TESLA


def nm_to_m(value):
    return value / NM_PER_M


def m_to_nm(value):
    return value * NM_PER_M


def ns_to_us(value):
    return value / NS_PER_US


def us_to_ns(value):
    return value * NS_PER_US


def larmor_frequency(field: float, constants: PhysicsConstants = CONST) -> float:
    """Electron Larmor frequency in MHz for a field in gauss.

    >>> round(larmor_frequency(233.0))
    653
    >>> larmor_frequency(0.0)
    0.0
    """
    if field < 0:
        raise DomainError(f"Magnetic field must be non-negative, got {field} G")
    return constants.gamma_e_mhz_per_gauss * field


def thermal_polarization(field_gauss: float, temperature_k: float,
                         constants: PhysicsConstants = CONST) -> float:
    """Equilibrium spin-1/2 polarization tanh(hbar*omega / 2kT)."""
    if temperature_k <= 0:
        raise DomainError(f"Temperature must be positive, got {temperature_k} K")
    omega = constants.gamma_e * gauss_to_tesla(field_gauss)
    beta = constants.hbar * omega / (sp.k * temperature_k)
    return math.tanh(beta / 2.0)
