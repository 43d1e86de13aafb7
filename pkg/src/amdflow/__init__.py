"""amdflow: high-throughput crystal structure search by substitution, screening and hull analysis."""

from .structure import CrystalStructure, Composition, Site, parse_poscar, write_poscar
from .hull import PhaseEntry, ReferenceSet, build_hull, energy_above_hull, formation_energy_per_atom

__version__ = "0.1.0"

__all__ = [
    "CrystalStructure", "Composition", "Site", "parse_poscar", "write_poscar",
    "PhaseEntry", "ReferenceSet", "build_hull", "energy_above_hull", "formation_energy_per_atom",
]
