"""CIF subset parsing, lattice geometry and periodic neighbor search."""
from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .chemcore import Composition
from .elements import is_element

DEFAULT_CLASH_DISTANCE = 0.5


class CifError(ValueError):
    pass


class CifWarning(UserWarning):
    pass


class StructureClashError(ValueError):
    """Two atoms are closer than the clash distance."""

    def __init__(self, i: int, j: int, distance: float, threshold: float):
        super().__init__(f"atoms {i} and {j} are {distance:.4f} A apart (clash threshold {threshold} A)")
        self.i, self.j, self.distance, self.threshold = i, j, distance, threshold


@dataclass(frozen=True)
class Lattice:
    a: float
    b: float
    c: float
    alpha: float = 90.0
    beta: float = 90.0
    gamma: float = 90.0

    def __post_init__(self):
        for name in ("a", "b", "c"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"lattice length {name}={v} must be positive")
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (0.0 < v < 180.0):
                raise ValueError(f"lattice angle {name}={v} must lie in (0, 180)")
        if self._volume_factor() <= 0:
            raise ValueError("degenerate lattice: metric tensor is not positive definite")

    def _volume_factor(self) -> float:
        ca, cb, cg = (math.cos(math.radians(x)) for x in (self.alpha, self.beta, self.gamma))
        return 1 - ca * ca - cb * cb - cg * cg + 2 * ca * cb * cg

    @property
    def volume(self) -> float:
        return self.a * self.b * self.c * math.sqrt(self._volume_factor())

    @property
    def matrix(self) -> np.ndarray:
        """Rows are the a, b, c vectors in Cartesian Angstrom (a along x, b in the xy plane)."""
        al, be, ga = (math.radians(x) for x in (self.alpha, self.beta, self.gamma))
        ax = np.array([self.a, 0.0, 0.0])
        bx = np.array([self.b * math.cos(ga), self.b * math.sin(ga), 0.0])
        cx = self.c * math.cos(be)
        cy = self.c * (math.cos(al) - math.cos(be) * math.cos(ga)) / math.sin(ga)
        cz = math.sqrt(max(self.c**2 - cx**2 - cy**2, 0.0))
        return np.array([ax, bx, [cx, cy, cz]])

    @property
    def metric(self) -> np.ndarray:
        al, be, ga = (math.radians(x) for x in (self.alpha, self.beta, self.gamma))
        a, b, c = self.a, self.b, self.c
        return np.array([
            [a * a, a * b * math.cos(ga), a * c * math.cos(be)],
            [a * b * math.cos(ga), b * b, b * c * math.cos(al)],
            [a * c * math.cos(be), b * c * math.cos(al), c * c],
        ])

    @property
    def reciprocal_metric(self) -> np.ndarray:
        return np.linalg.inv(self.metric)


def cell_volume(lattice: Lattice) -> float:
    """Cell volume in cubic Angstrom from the six cell parameters."""
    return lattice.volume


def d_spacing(lattice: Lattice, hkl: Sequence[int]) -> float:
    h = np.asarray(hkl, dtype=float)
    if h.shape != (3,) or not np.any(h):
        raise ValueError("hkl must be a nonzero integer triple")
    return 1.0 / math.sqrt(float(h @ lattice.reciprocal_metric @ h))


@dataclass(frozen=True)
class Site:
    element: str
    frac: tuple[float, float, float]
    occupancy: float = 1.0
    label: str = ""

    def __post_init__(self):
        if not is_element(self.element):
            raise ValueError(f"unknown element symbol {self.element!r}")
        if not (0.0 < self.occupancy <= 1.0):
            raise ValueError(f"occupancy {self.occupancy} outside (0, 1]")
        object.__setattr__(self, "frac", tuple(_wrap(x) for x in self.frac))


def _wrap(x: float) -> float:
    w = float(x) % 1.0
    # values like -1e-17 wrap to 1.0 in floating point
    return 0.0 if w >= 1.0 else w


@dataclass(frozen=True)
class SymOp:
    """Affine map on fractional coordinates: r' = rot @ r + trans."""

    rot: tuple[tuple[float, float, float], ...]
    trans: tuple[float, float, float]

    def apply(self, frac: Sequence[float]) -> np.ndarray:
        return np.asarray(self.rot) @ np.asarray(frac, dtype=float) + np.asarray(self.trans)

    @classmethod
    def identity(cls) -> "SymOp":
        return cls(((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)), (0.0, 0.0, 0.0))

    @classmethod
    def from_xyz(cls, text: str) -> "SymOp":
        parts = [p.strip().lower() for p in text.strip().strip("'\"").split(",")]
        if len(parts) != 3:
            raise CifError(f"symmetry operation needs three components: {text!r}")
        rot, trans = [], []
        for p in parts:
            row = [0.0, 0.0, 0.0]
            t = Fraction(0)
            for sign, coef, var in re.findall(r"([+-]?)\s*([\d./]*)\s*\*?\s*([xyz]?)", p.replace(" ", "")):
                if not coef and not var:
                    continue
                s = -1 if sign == "-" else 1
                if var:
                    k = Fraction(coef) if coef else Fraction(1)
                    row["xyz".index(var)] += s * float(k)
                else:
                    t += s * Fraction(coef)
            rot.append(tuple(row))
            trans.append(float(t))
        return cls(tuple(rot), tuple(trans))


@dataclass(frozen=True)
class CrystalStructure:
    lattice: Lattice
    sites: tuple[Site, ...]
    symops: tuple[SymOp, ...] = (SymOp.identity(),)
    space_group: str = "P 1"
    info: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        object.__setattr__(self, "symops", tuple(self.symops) or (SymOp.identity(),))

    @property
    def frac_coords(self) -> np.ndarray:
        return np.array([s.frac for s in self.sites], dtype=float).reshape(-1, 3)

    @property
    def cart_coords(self) -> np.ndarray:
        return self.frac_coords @ self.lattice.matrix

    def expand_p1(self, tol: float = 1e-4) -> "CrystalStructure":
        """Apply every symmetry operation, wrap, and drop duplicate positions."""
        if len(self.symops) == 1 and self.symops[0] == SymOp.identity():
            return self
        out: list[Site] = []
        coords: list[np.ndarray] = []
        for site in self.sites:
            for op in self.symops:
                f = np.array([_wrap(x) for x in op.apply(site.frac)])
                dup = False
                for other, fo in zip(out, coords):
                    if other.element != site.element:
                        continue
                    d = f - fo
                    d -= np.round(d)
                    if np.all(np.abs(d) < tol):
                        dup = True
                        break
                if not dup:
                    out.append(Site(site.element, tuple(f), site.occupancy, site.label))
                    coords.append(f)
        return CrystalStructure(self.lattice, tuple(out), (SymOp.identity(),), self.space_group, dict(self.info))

    def composition(self) -> Composition:
        """Cell contents (after P1 expansion), occupancies included."""
        counts: dict[str, Fraction] = {}
        for s in self.expand_p1().sites:
            occ = Fraction(s.occupancy).limit_denominator(10000)
            counts[s.element] = counts.get(s.element, Fraction(0)) + occ
        return Composition(counts)

    # line-oriented JSON persistence
    def to_json_record(self) -> str:
        rec = {
            "lattice": [self.lattice.a, self.lattice.b, self.lattice.c,
                        self.lattice.alpha, self.lattice.beta, self.lattice.gamma],
            "space_group": self.space_group,
            "symops": [[list(op.rot[0]), list(op.rot[1]), list(op.rot[2]), list(op.trans)] for op in self.symops],
            "sites": [[s.element, list(s.frac), s.occupancy, s.label] for s in self.sites],
        }
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json_record(cls, line: str) -> "CrystalStructure":
        rec = json.loads(line)
        lat = Lattice(*rec["lattice"])
        ops = tuple(SymOp((tuple(o[0]), tuple(o[1]), tuple(o[2])), tuple(o[3])) for o in rec["symops"])
        sites = tuple(Site(e, tuple(f), occ, lab) for e, f, occ, lab in rec["sites"])
        return cls(lat, sites, ops, rec.get("space_group", "P 1"))


def composition_of(structure: CrystalStructure) -> Composition:
    return structure.composition()


# --- CIF -------------------------------------------------------------------

_CIF_TOKEN = re.compile(r"""'(?:[^']|'(?=\S))*'|"(?:[^"]|"(?=\S))*"|\S+""")

_CELL_TAGS = {
    "_cell_length_a": "a", "_cell_length_b": "b", "_cell_length_c": "c",
    "_cell_angle_alpha": "alpha", "_cell_angle_beta": "beta", "_cell_angle_gamma": "gamma",
}
_INFO_TAGS = {
    "_chemical_formula_structural", "_chemical_formula_sum", "_cell_volume",
    "_cell_formula_units_z", "_symmetry_int_tables_number", "_space_group_it_number",
}
_SG_TAGS = {"_symmetry_space_group_name_h-m", "_space_group_name_h-m_alt"}
_SYMOP_TAGS = {"_symmetry_equiv_pos_as_xyz", "_space_group_symop_operation_xyz"}


def _cif_number(text: str, what: str) -> float:
    t = re.sub(r"\(\d+\)$", "", text.strip())
    try:
        return float(t)
    except ValueError:
        raise CifError(f"non-numeric value {text!r} for {what}") from None


def _unquote(tok: str) -> str:
    if len(tok) >= 2 and tok[0] == tok[-1] and tok[0] in "'\"":
        return tok[1:-1]
    return tok


def _tokenize(text: str) -> list[tuple[str, int]]:
    """CIF tokens with line numbers; comments and ;-delimited text fields handled."""
    toks: list[tuple[str, int]] = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith(";"):
            buf = [line[1:]]
            start = i + 1
            i += 1
            while i < len(lines) and not lines[i].startswith(";"):
                buf.append(lines[i])
                i += 1
            toks.append(("'" + "\n".join(buf).strip() + "'", start))
            i += 1
            continue
        for m in _CIF_TOKEN.finditer(line):
            tok = m.group(0)
            if tok.startswith("#"):
                break
            toks.append((tok, i + 1))
        i += 1
    return toks


def _site_symbol(type_symbol: str) -> str:
    m = re.match(r"[A-Z][a-z]?", type_symbol)
    if not m:
        raise CifError(f"cannot read element from atom type {type_symbol!r}")
    sym = m.group(0)
    if not is_element(sym) and is_element(sym[0]):
        sym = sym[0]
    if not is_element(sym):
        raise CifError(f"unknown element in atom type {type_symbol!r}")
    return sym


def parse_cif(text: str) -> CrystalStructure:
    """Parse the first data block of a CIF into a :class:`CrystalStructure`.

    Reads cell parameters, the symmetry-operation loop and the atom-site
    loop.  Other tags are ignored; their names are reported once through a
    :class:`CifWarning`.
    """
    toks = _tokenize(text)
    blocks = [k for k, (t, _) in enumerate(toks) if t.lower().startswith("data_")]
    if not blocks:
        raise CifError("no data_ block found")
    if len(blocks) > 1:
        warnings.warn(f"CIF has {len(blocks)} data blocks; only the first is read", CifWarning, stacklevel=2)
        toks = toks[blocks[0]:blocks[1]]
    else:
        toks = toks[blocks[0]:]

    cell: dict[str, float] = {}
    info: dict[str, str] = {"block": toks[0][0][5:]}
    space_group = "P 1"
    symops: list[SymOp] = []
    site_rows: list[tuple[dict[str, str], int]] = []
    ignored: list[str] = []

    k = 1
    n = len(toks)
    while k < n:
        tok, lineno = toks[k]
        low = tok.lower()
        if low == "loop_":
            k += 1
            headers = []
            while k < n and toks[k][0].startswith("_"):
                headers.append(toks[k][0].lower())
                k += 1
            values = []
            while k < n and not toks[k][0].startswith("_") and toks[k][0].lower() != "loop_" \
                    and not toks[k][0].lower().startswith("data_"):
                values.append(toks[k])
                k += 1
            if not headers:
                raise CifError(f"line {lineno}: loop_ without tags")
            if len(values) % len(headers):
                bad_line = values[-1][1] if values else lineno
                raise CifError(f"line {bad_line}: malformed loop row ({len(values)} values for {len(headers)} tags)")
            rows = [values[r:r + len(headers)] for r in range(0, len(values), len(headers))]
            if any(h in _SYMOP_TAGS for h in headers):
                col = next(i for i, h in enumerate(headers) if h in _SYMOP_TAGS)
                for row in rows:
                    symops.append(SymOp.from_xyz(_unquote(row[col][0])))
            elif any(h.startswith("_atom_site_fract_") for h in headers):
                for row in rows:
                    site_rows.append(({h: _unquote(v) for h, (v, _) in zip(headers, row)}, row[0][1]))
            else:
                ignored.extend(headers)
            continue
        if tok.startswith("_"):
            if k + 1 >= n:
                raise CifError(f"line {lineno}: tag {tok} has no value")
            val = _unquote(toks[k + 1][0])
            if low in _CELL_TAGS:
                cell[_CELL_TAGS[low]] = _cif_number(val, tok)
            elif low in _SG_TAGS:
                space_group = val
            elif low in _INFO_TAGS:
                info[low.lstrip("_")] = val
            else:
                ignored.append(low)
            k += 2
            continue
        raise CifError(f"line {lineno}: unexpected token {tok!r}")

    missing = [tag for tag, p in _CELL_TAGS.items() if p not in cell]
    if missing:
        raise CifError(f"missing cell parameter(s): {', '.join(missing)}")
    lattice = Lattice(**cell)
    if not site_rows:
        raise CifError("no atom-site loop found")

    sites = []
    for row, lineno in site_rows:
        type_sym = row.get("_atom_site_type_symbol") or row.get("_atom_site_label")
        if type_sym is None:
            raise CifError(f"line {lineno}: atom site without type symbol or label")
        try:
            xyz = tuple(_cif_number(row[f"_atom_site_fract_{ax}"], f"fract_{ax}") for ax in "xyz")
        except KeyError as e:
            raise CifError(f"line {lineno}: missing coordinate {e.args[0]}") from None
        occ_txt = row.get("_atom_site_occupancy", "1")
        occ = 1.0 if occ_txt in (".", "?") else _cif_number(occ_txt, "occupancy")
        sites.append(Site(_site_symbol(type_sym), xyz, occ, row.get("_atom_site_label", "")))

    if ignored:
        warnings.warn(f"ignored CIF tags: {', '.join(sorted(set(ignored)))}", CifWarning, stacklevel=2)
    return CrystalStructure(lattice, tuple(sites), tuple(symops) or (SymOp.identity(),), space_group, info)


# --- neighbors -------------------------------------------------------------

class Neighbor(NamedTuple):
    i: int
    j: int
    image: tuple[int, int, int]
    distance: float


def image_range(lattice: Lattice, cutoff: float) -> tuple[int, int, int]:
    """Per-axis image counts so every pair within ``cutoff`` is reached.

    Fractional differences lie in (-1, 1), so ``n_i = ceil(cutoff * |b_i*|) + 1``
    where ``|b_i*|`` is the reciprocal lattice vector length (no 2 pi).
    """
    inv = np.linalg.inv(lattice.matrix)  # columns are reciprocal vectors
    recip_len = np.linalg.norm(inv, axis=0)
    return tuple(int(math.ceil(cutoff * r)) + 1 for r in recip_len)


def neighbor_list(
    structure: CrystalStructure,
    cutoff: float,
    clash_distance: float = DEFAULT_CLASH_DISTANCE,
    on_clash: str = "raise",
) -> list[Neighbor]:
    """Directed periodic pairs ``(i, j, image, d)`` with ``d <= cutoff``.

    Indices refer to ``structure.expand_p1().sites``.  Both ``(i, j)`` and
    ``(j, i)`` are listed, as are periodic self-images of a single atom.
    A pair closer than ``clash_distance`` raises :class:`StructureClashError`
    unless ``on_clash="keep"``.
    """
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    if on_clash not in ("raise", "keep"):
        raise ValueError("on_clash must be 'raise' or 'keep'")
    p1 = structure.expand_p1()
    frac = p1.frac_coords
    n = len(frac)
    if n == 0:
        return []
    mat = p1.lattice.matrix
    na, nb, nc = image_range(p1.lattice, cutoff)
    images = np.array(list(product(range(-na, na + 1), range(-nb, nb + 1), range(-nc, nc + 1))), dtype=float)
    img_cart = images @ mat
    cart = frac @ mat
    out: list[Neighbor] = []
    cut2 = cutoff * cutoff
    for i in range(n):
        # (n, m, 3) displacement from atom i to every j in every image
        disp = cart[None, :, :] + img_cart[:, None, :] - cart[i][None, None, :]
        d2 = np.einsum("mjk,mjk->mj", disp, disp)
        mask = d2 <= cut2
        zero = np.all(images == 0, axis=1)
        mask[zero, i] = False
        for m_idx, j in zip(*np.nonzero(mask)):
            d = math.sqrt(float(d2[m_idx, j]))
            if d < clash_distance and on_clash == "raise":
                raise StructureClashError(i, int(j), d, clash_distance)
            out.append(Neighbor(i, int(j), tuple(int(x) for x in images[m_idx]), d))
    out.sort(key=lambda nb_: (nb_.i, nb_.j, nb_.image))
    return out


def coordination_numbers(neighbors: Iterable[Neighbor], n_sites: int) -> np.ndarray:
    cn = np.zeros(n_sites, dtype=int)
    for nb in neighbors:
        cn[nb.i] += 1
    return cn
