"""Regenerate src/synthscreen/data/elements.tsv from the mendeleev database.

Only needed when refreshing the shipped table; the package itself never
imports mendeleev.  Run with ``python scripts/build_element_table.py``.
"""
from __future__ import annotations

import math
from pathlib import Path

from mendeleev.fetch import fetch_table

OUT = Path(__file__).resolve().parents[1] / "src" / "synthscreen" / "data" / "elements.tsv"

# Pauling values absent from mendeleev but listed in common tables.
EN_FILL = {"Pm": 1.13, "Eu": 1.2, "Tb": 1.1, "Yb": 1.1, "Kr": 3.0}

# Oxidation states added on top of mendeleev's "main" category, for mixed-valence
# oxides routinely met in solid-state precursors and targets.
EXTRA_STATES = {"Mn": [3], "Tb": [4], "Pr": [4], "Ce": [4], "Co": [3], "Cu": [1], "V": [4], "Mo": [4]}

HEADER = """\
# Element property table for synthscreen.
# Columns (tab separated):
#   symbol  Z  mass_g_per_mol  pauling_en  oxidation_states  covalent_radius_A  group  row
# Empty fields mean "no data".  oxidation_states is a comma-separated list of integers.
# Masses are IUPAC standard atomic weights as decimal strings (parsed exactly).
# Covalent radii: Cordero et al. (2008), falling back to Pyykko single-bond radii.
# f-block elements are assigned to group 3.
"""


def fmt(x, nd=None):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if nd is not None:
        return f"{x:.{nd}f}".rstrip("0").rstrip(".")
    return str(x)


def main() -> None:
    el = fetch_table("elements").set_index("atomic_number")
    ox = fetch_table("oxidationstates")
    main_states: dict[int, set[int]] = {}
    for row in ox.itertuples():
        if row.category == "main":
            main_states.setdefault(int(row.atomic_number), set()).add(int(row.oxidation_state))

    lines = [HEADER.rstrip("\n")]
    for z in range(1, 119):
        r = el.loc[z]
        sym = r["symbol"]
        states = set(main_states.get(z, set())) | set(EXTRA_STATES.get(sym, []))
        states.discard(0)
        en = r["en_pauling"]
        if math.isnan(en):
            en = EN_FILL.get(sym, float("nan"))
        rad = r["covalent_radius_cordero"]
        if math.isnan(rad):
            rad = r["covalent_radius_pyykko"]
        group = r["group_id"]
        if math.isnan(group):
            group = 3
        lines.append("\t".join([
            sym,
            str(z),
            fmt(float(r["atomic_weight"]), 6),
            fmt(en, 2),
            ",".join(str(s) for s in sorted(states)),
            fmt(rad / 100.0, 3),
            str(int(group)),
            str(int(r["period"])),
        ]))
    OUT.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
