"""Immutable element property table loaded from ``data/elements.tsv``."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

PLATINOIDS = frozenset({"Ru", "Rh", "Pd", "Os", "Ir", "Pt"})

# Elements treated as nonmetals when deciding which contacts count as bonds.
NONMETALS = frozenset({
    "H", "He", "B", "C", "N", "O", "F", "Ne", "Si", "P", "S", "Cl", "Ar",
    "Ge", "As", "Se", "Br", "Kr", "Sb", "Te", "I", "Xe", "At", "Rn",
})


@dataclass(frozen=True)
class ElementData:
    symbol: str
    Z: int
    mass: Fraction
    electronegativity: Optional[float]
    oxidation_states: tuple[int, ...]
    covalent_radius: Optional[float]
    group: int
    row: int


def parse_element_table(text: str) -> dict[str, ElementData]:
    """Parse the tab-separated element table format.

    Columns: symbol, Z, mass, Pauling electronegativity, comma-separated
    oxidation states, covalent radius (Angstrom), group, row.  Lines starting
    with ``#`` are comments; empty fields mean missing data.
    """
    table: dict[str, ElementData] = {}
    seen_z: set[int] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 8:
            raise ValueError(f"element table line {lineno}: expected 8 columns, got {len(cols)}")
        sym, z, mass, en, states, rad, group, row = (c.strip() for c in cols)
        z_i = int(z)
        if not 1 <= z_i <= 118 or z_i in seen_z:
            raise ValueError(f"element table line {lineno}: bad or duplicate Z {z_i}")
        seen_z.add(z_i)
        m = Fraction(mass)
        if m <= 0:
            raise ValueError(f"element table line {lineno}: non-positive mass for {sym}")
        table[sym] = ElementData(
            symbol=sym,
            Z=z_i,
            mass=m,
            electronegativity=float(en) if en else None,
            oxidation_states=tuple(int(s) for s in states.split(",")) if states else (),
            covalent_radius=float(rad) if rad else None,
            group=int(group),
            row=int(row),
        )
    return table


@lru_cache(maxsize=None)
def _default_table() -> Mapping[str, ElementData]:
    text = resources.files("synthscreen").joinpath("data/elements.tsv").read_text(encoding="utf-8")
    return parse_element_table(text)


def element_table() -> Mapping[str, ElementData]:
    return _default_table()


def load_element_table(path: str | Path) -> dict[str, ElementData]:
    return parse_element_table(Path(path).read_text(encoding="utf-8"))


def get_element(symbol: str) -> ElementData:
    try:
        return _default_table()[symbol]
    except KeyError:
        raise KeyError(f"unknown element symbol {symbol!r}") from None


def is_element(symbol: str) -> bool:
    return symbol in _default_table()


def default_oxidation_states() -> dict[str, tuple[int, ...]]:
    return {s: e.oxidation_states for s, e in _default_table().items()}


def override_oxidation_states(
    overrides: Mapping[str, Sequence[int]],
) -> dict[str, tuple[int, ...]]:
    states = default_oxidation_states()
    for sym, vals in overrides.items():
        if sym not in states:
            raise KeyError(f"unknown element symbol {sym!r}")
        states[sym] = tuple(int(v) for v in vals)
    return states
