"""Chemical formula grammar and exact composition algebra.

Amounts are kept as exact rationals: ``int`` when integral, otherwise
``fractions.Fraction``.  Both compare and hash consistently, so callers can
treat every amount as a rational number.
"""
from __future__ import annotations

import math
import re
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Iterator, Mapping, Optional, Sequence, Union

from .elements import PLATINOIDS, default_oxidation_states, element_table, get_element

Number = Union[int, Fraction]

__all__ = [
    "ChargeBalanceUndetermined",
    "Composition",
    "FormulaError",
    "PLATINOIDS",
    "charge_balance_assignments",
    "contains_any",
    "format_amount",
    "molar_mass",
    "parse_formula",
    "reduce",
]


class FormulaError(ValueError):
    """Raised for text that is not a valid chemical formula."""


class ChargeBalanceUndetermined(RuntimeError):
    """The oxidation-state search space exceeds the configured budget."""


def _rational(x) -> Number:
    if isinstance(x, bool):
        raise TypeError("booleans are not amounts")
    if isinstance(x, int):
        return x
    if isinstance(x, Fraction):
        return x.numerator if x.denominator == 1 else x
    if isinstance(x, float):
        if not math.isfinite(x):
            raise ValueError(f"non-finite amount {x!r}")
        f = Fraction(repr(x))
    else:
        f = Fraction(x)
    return f.numerator if f.denominator == 1 else f


def format_amount(x: Number) -> str:
    """Shortest exact text for a rational amount (``2``, ``0.5``, ``1/3``)."""
    x = Fraction(x)
    if x.denominator == 1:
        return str(x.numerator)
    d = x.denominator
    twos = fives = 0
    while d % 2 == 0:
        d //= 2
        twos += 1
    while d % 5 == 0:
        d //= 5
        fives += 1
    if d != 1:
        return f"{x.numerator}/{x.denominator}"
    places = max(twos, fives)
    scaled = x * 10**places
    s = str(scaled.numerator).rjust(places + 1, "0")
    return (s[:-places] + "." + s[-places:]).rstrip("0").rstrip(".")


def _order_key(sym: str):
    e = get_element(sym)
    en = e.electronegativity
    return (en is None, en if en is not None else 0.0, e.Z)


class Composition(Mapping[str, Number]):
    """Immutable element -> exact amount mapping.

    Zero amounts are dropped, negative amounts and unknown symbols raise.
    ``provenance`` is an informational tag and does not take part in
    equality or hashing.

    >>> Composition({"Fe": 4, "O": 6}).reduced_formula
    'Fe2O3'
    """

    __slots__ = ("_counts", "provenance", "_hash")

    def __init__(self, counts: Optional[Mapping[str, object]] = None, provenance: Optional[str] = None, **kwargs):
        table = element_table()
        clean: dict[str, Number] = {}
        items = dict(counts or {})
        items.update(kwargs)
        for sym, amt in items.items():
            if sym not in table:
                raise FormulaError(f"unknown element symbol {sym!r}")
            q = _rational(amt)
            if q < 0:
                raise FormulaError(f"negative amount for {sym}: {amt!r}")
            if q:
                clean[sym] = clean.get(sym, 0) + q
        self._counts = clean
        self.provenance = provenance
        self._hash = None

    @classmethod
    def _trusted(cls, counts: dict[str, Number], provenance: Optional[str] = None) -> "Composition":
        obj = cls.__new__(cls)
        obj._counts = counts
        obj.provenance = provenance
        obj._hash = None
        return obj

    # Mapping protocol
    def __getitem__(self, sym: str) -> Number:
        return self._counts[sym]

    def get(self, sym, default=0):
        return self._counts.get(sym, default)

    def __iter__(self) -> Iterator[str]:
        return iter(self._counts)

    def __len__(self) -> int:
        return len(self._counts)

    def __contains__(self, sym) -> bool:
        return sym in self._counts

    def __eq__(self, other) -> bool:
        if isinstance(other, Composition):
            return self._counts == other._counts
        if isinstance(other, Mapping):
            try:
                return self == Composition(other)
            except (FormulaError, TypeError, ValueError):
                return False
        return NotImplemented

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(frozenset(self._counts.items()))
        return self._hash

    def __repr__(self) -> str:
        return f"Composition({self.formula!r})"

    def __str__(self) -> str:
        return self.formula

    # algebra
    def __add__(self, other: "Composition") -> "Composition":
        if not isinstance(other, Composition):
            return NotImplemented
        out = dict(self._counts)
        for k, v in other._counts.items():
            out[k] = out.get(k, 0) + v
        return Composition._trusted(out)

    def __sub__(self, other: "Composition") -> "Composition":
        if not isinstance(other, Composition):
            return NotImplemented
        out = dict(self._counts)
        for k, v in other._counts.items():
            r = out.get(k, 0) - v
            if r < 0:
                raise FormulaError(f"subtraction leaves negative amount of {k}")
            if r:
                out[k] = _rational(r)
            else:
                out.pop(k, None)
        return Composition._trusted(out)

    def __mul__(self, factor) -> "Composition":
        q = _rational(factor)
        if q < 0:
            raise FormulaError("cannot scale a composition by a negative factor")
        if q == 0:
            return Composition._trusted({})
        return Composition._trusted({k: _rational(v * q) for k, v in self._counts.items()})

    __rmul__ = __mul__

    def __truediv__(self, factor) -> "Composition":
        return self * (1 / Fraction(_rational(factor)))

    # derived properties
    @property
    def elements(self) -> list[str]:
        """Symbols in canonical order (increasing electronegativity, then Z)."""
        return sorted(self._counts, key=_order_key)

    @property
    def chemical_system(self) -> str:
        return "-".join(sorted(self._counts))

    @property
    def num_atoms(self) -> Number:
        return _rational(sum(self._counts.values(), 0))

    def fraction(self, sym: str) -> Fraction:
        total = self.num_atoms
        return Fraction(self._counts.get(sym, 0)) / total if total else Fraction(0)

    @property
    def formula(self) -> str:
        parts = []
        for sym in self.elements:
            amt = self._counts[sym]
            parts.append(sym if amt == 1 else sym + format_amount(amt))
        return "".join(parts)

    @property
    def reduced_formula(self) -> str:
        return reduce(self)[0].formula

    @property
    def anonymous_formula(self) -> str:
        """Prototype formula with amounts sorted ascending, e.g. DyO2 -> AB2."""
        red, _ = reduce(self)
        amounts = sorted(red._counts.values())
        out = []
        for i, amt in enumerate(amounts):
            letter = _anon_letter(i)
            out.append(letter if amt == 1 else letter + format_amount(amt))
        return "".join(out)

    def as_dict(self) -> dict[str, Number]:
        return dict(self._counts)


def _anon_letter(i: int) -> str:
    s = ""
    i += 1
    while i:
        i, r = divmod(i - 1, 26)
        s = chr(65 + r) + s
    return s


_TOKEN = re.compile(
    r"\s*(?:(?P<el>[A-Z][a-z]?)|(?P<num>\d+(?:\.\d+)?(?:/\d+)?)|(?P<open>[(\[])|(?P<close>[)\]])|(?P<bad>\S))"
)


def _number(text: str) -> Number:
    if "/" in text:
        num, den = text.split("/")
        if int(den) == 0:
            raise FormulaError(f"zero denominator in amount {text!r}")
        return _rational(Fraction(Fraction(num), int(den)))
    if "." in text:
        return _rational(Fraction(text))
    return int(text)


@lru_cache(maxsize=65536)
def _parse_cached(text: str) -> Composition:
    table = element_table()
    stack: list[dict[str, Number]] = [{}]
    openers: list[str] = []
    # a closed group stays on the stack until we know whether a multiplier follows
    group_pending = False
    last_el: Optional[str] = None
    pos, n = 0, len(text)
    while pos < n:
        m = _TOKEN.match(text, pos)
        if m is None:  # trailing whitespace
            break
        pos = m.end()
        kind = m.lastgroup
        tok = m.group(kind)
        if group_pending and kind != "num":
            _merge_group(stack, 1)
            group_pending = False
        if kind == "el":
            if tok not in table:
                raise FormulaError(f"unknown element symbol {tok!r} in {text!r}")
            top = stack[-1]
            top[tok] = top.get(tok, 0) + 1
            last_el = tok
        elif kind == "num":
            amt = _number(tok)
            if amt == 0:
                raise FormulaError(f"zero multiplier in {text!r}")
            if group_pending:
                _merge_group(stack, amt)
                group_pending = False
            elif last_el is not None:
                top = stack[-1]
                top[last_el] = top[last_el] - 1 + amt
            else:
                raise FormulaError(f"amount {tok!r} not attached to an element or group in {text!r}")
            last_el = None
        elif kind == "open":
            stack.append({})
            openers.append(tok)
            last_el = None
        elif kind == "close":
            if not openers:
                raise FormulaError(f"unbalanced parentheses in {text!r}")
            opener = openers.pop()
            if (opener, tok) not in (("(", ")"), ("[", "]")):
                raise FormulaError(f"mismatched brackets in {text!r}")
            if not stack[-1]:
                raise FormulaError(f"empty group in {text!r}")
            group_pending = True
            last_el = None
        elif tok == "-":
            raise FormulaError(f"negative multiplier in {text!r}")
        else:
            raise FormulaError(f"unexpected character {tok!r} in {text!r}")
    if group_pending:
        _merge_group(stack, 1)
    if openers:
        raise FormulaError(f"unbalanced parentheses in {text!r}")
    counts = stack[0]
    if not counts:
        raise FormulaError(f"empty formula {text!r}")
    return Composition._trusted({k: _rational(v) for k, v in counts.items()})


def _merge_group(stack: list[dict[str, Number]], mult: Number) -> None:
    group = stack.pop()
    top = stack[-1]
    for k, v in group.items():
        top[k] = top.get(k, 0) + v * mult


def parse_formula(text: str) -> Composition:
    """Parse a formula such as ``"DyAl3(BO3)4"`` or ``"Nd6 B2 Te2 O18"``.

    Grammar: element symbols with optional amounts (integer, decimal or
    ``p/q``), nested ``(...)`` / ``[...]`` groups with optional multipliers,
    and free interior whitespace.
    """
    if not isinstance(text, str) or not text.strip():
        raise FormulaError("formula text must be a nonempty string")
    return _parse_cached(text)


def reduce(c: Composition) -> tuple[Composition, Fraction]:
    """Return ``(reduced, multiplier)`` with ``c == multiplier * reduced``.

    The reduced amounts are coprime integers.
    """
    if not c:
        raise FormulaError("cannot reduce an empty composition")
    vals = [Fraction(v) for v in c.values()]
    lcm = 1
    for v in vals:
        lcm = lcm * v.denominator // math.gcd(lcm, v.denominator)
    ints = [int(v * lcm) for v in vals]
    g = 0
    for i in ints:
        g = math.gcd(g, i)
    reduced = Composition._trusted({k: i // g for k, i in zip(c.keys(), ints)})
    return reduced, Fraction(g, lcm)


def molar_mass(c: Composition) -> Fraction:
    """Exact molar mass in g/mol from the element table's decimal weights."""
    total = Fraction(0)
    for sym, amt in c.items():
        total += get_element(sym).mass * amt
    return total


def contains_any(c: Mapping[str, object], elems: Iterable[str]) -> bool:
    return any(e in c for e in elems)


def charge_balance_assignments(
    c: Composition,
    states: Optional[Mapping[str, Sequence[int]]] = None,
    max_combinations: int = 1_000_000,
) -> list[dict[str, int]]:
    """All single-valence oxidation-state assignments with zero net charge.

    Each element takes exactly one state from its list.  Raises
    :class:`ChargeBalanceUndetermined` when the full product of state lists
    exceeds ``max_combinations``.
    """
    if states is None:
        states = default_oxidation_states()
    syms = c.elements
    options = []
    for s in syms:
        opts = tuple(sorted(set(states.get(s, ()))))
        if not opts:
            raise ValueError(f"no oxidation states configured for {s}")
        options.append(opts)
    size = 1
    for o in options:
        size *= len(o)
    if size > max_combinations:
        raise ChargeBalanceUndetermined(
            f"{size} oxidation-state combinations exceed the budget of {max_combinations}"
        )
    red, _ = reduce(c)
    counts = [int(red[s]) for s in syms]

    # Backtracking with interval pruning on the remaining achievable charge.
    n = len(syms)
    lo_rest = [0] * (n + 1)
    hi_rest = [0] * (n + 1)
    for i in range(n - 1, -1, -1):
        lo_rest[i] = lo_rest[i + 1] + counts[i] * options[i][0]
        hi_rest[i] = hi_rest[i + 1] + counts[i] * options[i][-1]

    out: list[dict[str, int]] = []
    chosen = [0] * n

    def walk(i: int, charge: int) -> None:
        if i == n:
            if charge == 0:
                out.append(dict(zip(syms, chosen)))
            return
        if charge + lo_rest[i] > 0 or charge + hi_rest[i] < 0:
            return
        for st in options[i]:
            chosen[i] = st
            walk(i + 1, charge + counts[i] * st)

    walk(0, 0)
    return out
