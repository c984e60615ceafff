"""Physical constants (CODATA 2018, SI) and unit conversions used at config boundaries."""

from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    boltzmann_k: float = 1.380649e-23
    hbar: float = 1.054571817e-34
    elementary_charge: float = 1.602176634e-19
    atomic_mass_unit: float = 1.66053906660e-27


CONSTANTS = PhysicalConstants()

KB = CONSTANTS.boltzmann_k
HBAR = CONSTANTS.hbar
E_CHARGE = CONSTANTS.elementary_charge
AMU = CONSTANTS.atomic_mass_unit

# Hartree energy and Bohr radius; one atomic unit of C4 is E_h * a0**4.
HARTREE = 4.3597447222071e-18
BOHR = 5.29177210903e-11
C4_ATOMIC_UNIT = HARTREE * BOHR**4

MHZ = 1e6
NM = 1e-9
UM = 1e-6
UK = 1e-6
MK = 1e-3

# Isotope masses in u (AME2016).
SR88_MASS_U = 87.9056122571
RB87_MASS_U = 86.909180527

# Static dipole polarizability of ground-state Rb in atomic units, which equals
# C4 in atomic units for V(r) = -C4 / 2r^4.  Value: 318.8(1.4) a.u., Gregoire,
# Hromada, Holmgren, Trubko & Cronin, Phys. Rev. A 92, 052513 (2015).
RB_POLARIZABILITY_AU = 318.8
