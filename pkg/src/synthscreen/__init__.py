"""Synthesizability screening and solid-state synthesis planning for inorganic crystals."""

__version__ = "0.1.0"

from .chemcore import Composition, FormulaError, molar_mass, parse_formula, reduce
from .structio import CrystalStructure, Lattice, Site, cell_volume, parse_cif
from .fusion import rank_average, rank_average_columns

__all__ = [
    "Composition", "FormulaError", "molar_mass", "parse_formula", "reduce",
    "CrystalStructure", "Lattice", "Site", "cell_volume", "parse_cif",
    "rank_average", "rank_average_columns", "__version__",
]
