"""Solid-state synthesis planning.

Rule-based precursor suggestion, exact reaction balancing with furnace slack
gases, precursor masses, table-driven calcination temperatures, and greedy
furnace batching.
"""
from __future__ import annotations

import io
import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations, product
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .chemcore import Composition, format_amount, molar_mass, parse_formula

SLACK_SPECIES = {"O2": parse_formula("O2"), "CO2": parse_formula("CO2"), "H2O": parse_formula("H2O")}

# Lower value = preferred.  Unlisted classes rank after these.
DEFAULT_PREFERENCE = ("oxide", "carbonate", "hydroxide", "nitrate")

FURNACE_MIN_C = 20.0
FURNACE_MAX_C = 1700.0


class BalanceError(ValueError):
    pass


class InfeasibleReaction(BalanceError):
    pass


class UnderdeterminedReaction(BalanceError):
    def __init__(self, msg: str, free: Sequence[str]):
        super().__init__(msg)
        self.free = tuple(free)


class MissingElementError(BalanceError):
    def __init__(self, element: str):
        super().__init__(f"element {element} of the target is supplied by no precursor or slack species")
        self.element = element


class UncoveredElementError(KeyError):
    def __init__(self, element: str):
        super().__init__(f"no precursor listed for element {element}")
        self.element = element

    def __str__(self) -> str:
        return self.args[0]


# --- precursors -----------------------------------------------------------

def precursor_class(c: Composition) -> str:
    els = set(c)
    if "O" not in els:
        return "other"
    if "C" in els and not els & {"H", "N"}:
        return "carbonate"
    if "N" in els:
        return "nitrate"
    if "H" in els:
        return "hydroxide"
    return "oxide"


def parse_precursor_table(text: str) -> dict[str, list[Composition]]:
    """Lines ``Element: Formula1, Formula2, ...`` in preference-independent order."""
    table: dict[str, list[Composition]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        el, sep, rest = line.partition(":")
        if not sep:
            raise ValueError(f"precursor table line {lineno}: expected 'Element: formula, ...'")
        el = el.strip()
        forms = [parse_formula(f.strip()) for f in rest.split(",") if f.strip()]
        for f in forms:
            if el not in f:
                raise ValueError(f"precursor table line {lineno}: {f.formula} does not contain {el}")
        table.setdefault(el, []).extend(forms)
    return table


def load_precursor_table(path: str | Path) -> dict[str, list[Composition]]:
    return parse_precursor_table(Path(path).read_text(encoding="utf-8"))


def default_precursor_table() -> dict[str, list[Composition]]:
    from importlib import resources

    text = resources.files("synthscreen").joinpath("data/precursors.txt").read_text(encoding="utf-8")
    return parse_precursor_table(text)


@dataclass(frozen=True)
class PrecursorSet:
    precursors: tuple[Composition, ...]
    score: float

    def __str__(self) -> str:
        return " + ".join(p.formula for p in self.precursors)


def suggest_precursors(
    target: Composition,
    table: Mapping[str, Sequence[Composition]],
    preference: Sequence[str] = DEFAULT_PREFERENCE,
    limit: Optional[int] = None,
) -> list[PrecursorSet]:
    """Rank one-precursor-per-element sets covering every non-oxygen element of ``target``.

    A set's score is the mean preference weight of its members (oxide highest
    by default).  Ties keep table order, so the first listed precursors win.
    """
    weight = {cls: float(len(preference) - i) for i, cls in enumerate(preference)}
    cations = [e for e in target.elements if e != "O"]
    if not cations:
        raise ValueError(f"target {target.formula} has no non-oxygen element")
    options = []
    for el in cations:
        opts = list(table.get(el, ()))
        if not opts:
            raise UncoveredElementError(el)
        options.append(opts)
    seen = set()
    ranked = []
    for order, combo in enumerate(product(*options)):
        key = frozenset(combo)
        if key in seen:
            continue
        seen.add(key)
        unique = tuple(dict.fromkeys(combo))
        score = sum(weight.get(precursor_class(p), 0.0) for p in unique) / len(unique)
        ranked.append((-score, order, PrecursorSet(unique, score)))
    ranked.sort(key=lambda t: (t[0], t[1]))
    out = [r[2] for r in ranked]
    return out[:limit] if limit else out


# --- exact linear algebra -------------------------------------------------

def _rref(mat: list[list[Fraction]]) -> tuple[list[list[Fraction]], list[int]]:
    """Reduced row echelon form over the rationals; returns (matrix, pivot columns)."""
    m = [row[:] for row in mat]
    rows = len(m)
    cols = len(m[0]) if rows else 0
    pivots = []
    r = 0
    for c in range(cols):
        pivot = next((i for i in range(r, rows) if m[i][c] != 0), None)
        if pivot is None:
            continue
        m[r], m[pivot] = m[pivot], m[r]
        pv = m[r][c]
        m[r] = [x / pv for x in m[r]]
        for i in range(rows):
            if i != r and m[i][c] != 0:
                f = m[i][c]
                m[i] = [a - f * b for a, b in zip(m[i], m[r])]
        pivots.append(c)
        r += 1
        if r == rows:
            break
    return m, pivots


def _integerize(values: Sequence[Fraction]) -> list[int]:
    lcm = 1
    for v in values:
        lcm = lcm * v.denominator // math.gcd(lcm, v.denominator)
    ints = [int(v * lcm) for v in values]
    g = 0
    for i in ints:
        g = math.gcd(g, abs(i))
    return [i // g for i in ints] if g else ints


@dataclass(frozen=True)
class Reaction:
    """Balanced reaction with minimal positive integer coefficients.

    ``reactants`` and ``products`` are ``(species, coefficient)`` pairs; slack
    gases appear on whichever side their sign puts them and are also listed
    in ``slack`` with a signed coefficient (positive = consumed).
    """

    target: Composition
    reactants: tuple[tuple[Composition, int], ...]
    products: tuple[tuple[Composition, int], ...]
    slack: tuple[tuple[str, int], ...] = ()

    @property
    def precursors(self) -> tuple[tuple[Composition, int], ...]:
        slack_set = {SLACK_SPECIES[n] for n, _ in self.slack}
        return tuple((c, k) for c, k in self.reactants if c not in slack_set)

    @property
    def target_coefficient(self) -> int:
        return next(k for c, k in self.products if c == self.target)

    def element_balance(self) -> dict[str, tuple[Fraction, Fraction]]:
        left: dict[str, Fraction] = {}
        right: dict[str, Fraction] = {}
        for side, terms in ((left, self.reactants), (right, self.products)):
            for comp, k in terms:
                for el, amt in comp.items():
                    side[el] = side.get(el, Fraction(0)) + Fraction(amt) * k
        return {el: (left.get(el, Fraction(0)), right.get(el, Fraction(0))) for el in set(left) | set(right)}

    def is_balanced(self) -> bool:
        return all(a == b for a, b in self.element_balance().values())

    def __str__(self) -> str:
        def side(terms):
            return " + ".join(c.formula if k == 1 else f"{k} {c.formula}" for c, k in terms)

        return f"{side(self.reactants)} -> {side(self.products)}"


def balance(
    target: Composition,
    precursors: Sequence[Composition],
    slack: Iterable[str] = ("O2",),
    minimize_slack: bool = False,
) -> Reaction:
    """Solve element conservation exactly for the precursor and slack coefficients.

    The target coefficient is fixed at 1 before scaling to minimal integers.
    Precursors must come out strictly positive; slack gases may take either
    sign.  A solution family with free parameters raises
    :class:`UnderdeterminedReaction` unless ``minimize_slack`` is set, in
    which case the uniquely determined solution using the fewest slack moles
    (over subsets of the allowed slack species) is returned.
    """
    slack = tuple(dict.fromkeys(slack))
    bad = [s for s in slack if s not in SLACK_SPECIES]
    if bad:
        raise ValueError(f"unsupported slack species {bad}; allowed: {sorted(SLACK_SPECIES)}")
    precursors = tuple(dict.fromkeys(precursors))
    if not precursors:
        raise ValueError("at least one precursor is required")

    supplied = set().union(*(set(p) for p in precursors), *(set(SLACK_SPECIES[s]) for s in slack))
    for el in target.elements:
        if el not in supplied:
            raise MissingElementError(el)

    try:
        return _solve(target, precursors, slack)
    except UnderdeterminedReaction:
        if not minimize_slack:
            raise
    best = None
    for k in range(len(slack)):
        for subset in combinations(slack, k):
            try:
                r = _solve(target, precursors, subset)
            except BalanceError:
                continue
            moles = sum(abs(Fraction(c, r.target_coefficient)) for _, c in r.slack)
            if best is None or moles < best[0]:
                best = (moles, r)
    if best is None:
        raise UnderdeterminedReaction(
            "no uniquely determined solution with a reduced slack set", [s for s in slack]
        )
    return best[1]


def _solve(target: Composition, precursors: Sequence[Composition], slack: Sequence[str]) -> Reaction:
    species = list(precursors) + [SLACK_SPECIES[s] for s in slack]
    names = [p.formula for p in precursors] + list(slack)
    elements = sorted(set(target).union(*(set(s) for s in species)))
    # sum_k x_k * species_k = target
    aug = [[Fraction(s.get(el, 0)) for s in species] + [Fraction(target.get(el, 0))] for el in elements]
    m, pivots = _rref(aug)
    nvar = len(species)
    if nvar in pivots:
        raise InfeasibleReaction("element conservation has no solution with these precursors")
    free = [names[c] for c in range(nvar) if c not in pivots]
    if free:
        raise UnderdeterminedReaction(
            f"coefficients not unique; free choice in {', '.join(free)}", free
        )
    x = [Fraction(0)] * nvar
    for row, c in enumerate(pivots):
        x[c] = m[row][-1]
    for p, v in zip(precursors, x):
        if v < 0:
            raise InfeasibleReaction(f"precursor {p.formula} would need a negative coefficient")
        if v == 0:
            raise InfeasibleReaction(f"precursor {p.formula} is not consumed")
    ints = _integerize(x + [Fraction(1)])
    coeffs, t = ints[:-1], ints[-1]
    reactants = [(p, k) for p, k in zip(precursors, coeffs[: len(precursors)])]
    products = [(target, t)]
    slack_terms = []
    for name, k in zip(slack, coeffs[len(precursors):]):
        if k > 0:
            reactants.append((SLACK_SPECIES[name], k))
        elif k < 0:
            products.append((SLACK_SPECIES[name], -k))
        if k:
            slack_terms.append((name, k))
    r = Reaction(target, tuple(reactants), tuple(products), tuple(slack_terms))
    assert r.is_balanced()
    return r


# --- masses ---------------------------------------------------------------

def species_masses(r: Reaction, target_grams) -> tuple[dict[Composition, Fraction], dict[Composition, Fraction]]:
    """Grams of every reactant and product for ``target_grams`` of target (exact)."""
    g = Fraction(target_grams) if not isinstance(target_grams, float) else Fraction(repr(target_grams))
    if g <= 0:
        raise ValueError("target mass must be positive")
    mt = molar_mass(r.target)
    if mt == 0:
        raise ValueError("target has zero molar mass")
    moles_per_unit = g / mt / r.target_coefficient
    left = {c: k * moles_per_unit * molar_mass(c) for c, k in r.reactants}
    right = {c: k * moles_per_unit * molar_mass(c) for c, k in r.products}
    return left, right


def precursor_masses(r: Reaction, target_grams) -> dict[Composition, Fraction]:
    """Exact precursor grams; volatility losses are not compensated."""
    left, _ = species_masses(r, target_grams)
    return {c: left[c] for c, _ in r.precursors}


# --- temperatures ---------------------------------------------------------

@dataclass(frozen=True)
class TemperatureRule:
    elements: frozenset[str]
    temperature: float
    hours: float
    name: str = ""

    @property
    def specificity(self) -> int:
        return len(self.elements)

    def matches(self, target: Composition) -> bool:
        return self.elements <= set(target)


class AmbiguousRuleError(ValueError):
    pass


def parse_temperature_rules(text: str) -> list[TemperatureRule]:
    """Lines ``El1-El2-... = temperature_C, hours [, name]``; ``*`` matches any target."""
    rules = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        pat, sep, rest = line.partition("=")
        if not sep:
            raise ValueError(f"temperature rules line {lineno}: expected 'pattern = T, hours'")
        parts = [p.strip() for p in rest.split(",")]
        if len(parts) < 2:
            raise ValueError(f"temperature rules line {lineno}: expected temperature and hours")
        pat = pat.strip()
        els = frozenset() if pat == "*" else frozenset(e.strip() for e in pat.split("-") if e.strip())
        t, h = float(parts[0]), float(parts[1])
        if not (FURNACE_MIN_C <= t <= FURNACE_MAX_C) or h <= 0:
            raise ValueError(f"temperature rules line {lineno}: temperature or time outside furnace envelope")
        rules.append(TemperatureRule(els, t, h, parts[2] if len(parts) > 2 else pat))
    return rules


def load_temperature_rules(path: str | Path) -> list[TemperatureRule]:
    return parse_temperature_rules(Path(path).read_text(encoding="utf-8"))


def assign_temperature(
    target: Composition,
    precursors: Sequence[Composition] = (),
    rules: Sequence[TemperatureRule] = (),
    default: tuple[float, float] = (1100.0, 12.0),
) -> tuple[float, float]:
    """(temperature in C, dwell hours) from the most specific matching rule."""
    matching = [r for r in rules if r.matches(target)]
    if not matching:
        return default
    top = max(r.specificity for r in matching)
    best = [r for r in matching if r.specificity == top]
    if len(best) > 1:
        raise AmbiguousRuleError(
            f"{target.formula}: rules {', '.join(r.name for r in best)} match with equal specificity"
        )
    return best[0].temperature, best[0].hours


# --- recipes and batching -------------------------------------------------

@dataclass
class Recipe:
    id: str
    target: Composition
    reaction: Reaction
    temperature: float
    hours: float
    masses: dict[Composition, Fraction] = field(default_factory=dict)
    rank_avg: float = 0.0

    def __post_init__(self):
        if not (FURNACE_MIN_C <= self.temperature <= FURNACE_MAX_C):
            raise ValueError(f"temperature {self.temperature} C outside furnace envelope")
        if any(m <= 0 for m in self.masses.values()):
            raise ValueError("precursor masses must be positive")


def plan_recipe(cid: str, target: Composition, table, rules=(), slack=("O2", "CO2", "H2O"),
                target_grams: float = 1.0, rank_avg: float = 0.0, default=(1100.0, 12.0),
                preference: Sequence[str] = DEFAULT_PREFERENCE) -> Recipe:
    """Top-ranked precursor set that balances, with temperature and masses."""
    errors = []
    for ps in suggest_precursors(target, table, preference):
        try:
            rxn = balance(target, ps.precursors, slack)
        except BalanceError as e:
            # a slack gas with no element in play makes the system underdetermined; retry without it
            try:
                rxn = balance(target, ps.precursors, slack, minimize_slack=True)
            except BalanceError:
                errors.append(f"{ps}: {e}")
                continue
        t, h = assign_temperature(target, ps.precursors, rules, default)
        masses = precursor_masses(rxn, target_grams)
        return Recipe(cid, target, rxn, t, h, masses, rank_avg)
    raise BalanceError(f"{target.formula}: no precursor set balances ({'; '.join(errors[:3])})")


@dataclass
class BatchPlan:
    batches: list[list[Recipe]]
    unplaced: list[Recipe]


def batch_select(recipes: Sequence[Recipe], batch_size: int, n_batches: int, tolerance: float = 0.0) -> BatchPlan:
    """Fill up to ``n_batches`` furnace runs of ``batch_size`` recipes sharing one profile.

    Recipes in a batch have identical dwell time and temperatures within
    ``tolerance`` of each other.  Each round picks the compatible group that
    fills the most slots (ties: higher summed RankAvg, then lower
    temperature) and takes its highest-RankAvg members.
    """
    if batch_size < 1 or n_batches < 0:
        raise ValueError("batch_size must be >= 1 and n_batches >= 0")
    remaining = sorted(recipes, key=lambda r: (-r.rank_avg, r.id))
    batches: list[list[Recipe]] = []
    for _ in range(n_batches):
        if not remaining:
            break
        best_key, best_group = None, None
        anchors = sorted({(r.hours, r.temperature) for r in remaining})
        for hours, t0 in anchors:
            group = [r for r in remaining if r.hours == hours and t0 <= r.temperature <= t0 + tolerance]
            chosen = group[:batch_size]  # already RankAvg-ordered
            key = (len(chosen), sum(r.rank_avg for r in chosen), -t0)
            if best_key is None or key > best_key:
                best_key, best_group = key, chosen
        batches.append(best_group)
        taken = {id(r) for r in best_group}
        remaining = [r for r in remaining if id(r) not in taken]
    return BatchPlan(batches, remaining)


def profile_key(r: Recipe) -> tuple[float, float]:
    return (r.temperature, r.hours)


RECIPE_COLUMNS = ("id", "target", "precursors", "reaction", "temperature_C", "time_h", "target_grams", "masses_g")


def recipes_csv(recipes: Sequence[Recipe], target_grams: float = 1.0) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECIPE_COLUMNS)
    for r in recipes:
        w.writerow([
            r.id, r.target.formula, " + ".join(c.formula for c, _ in r.reaction.precursors), str(r.reaction),
            format_amount(Fraction(repr(r.temperature))), format_amount(Fraction(repr(r.hours))), repr(target_grams),
            "; ".join(f"{c.formula}={float(m):.6f}" for c, m in r.masses.items()),
        ])
    return buf.getvalue()


def batches_csv(plan: BatchPlan) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["batch", "slot", "id", "target", "temperature_C", "time_h", "rank_avg"])
    for b, batch in enumerate(plan.batches, 1):
        for s, r in enumerate(batch, 1):
            w.writerow([b, s, r.id, r.target.formula, repr(r.temperature), repr(r.hours), repr(r.rank_avg)])
    return buf.getvalue()


@dataclass(frozen=True)
class PlanConfig:
    batch_size: int = 12
    n_batches: int = 2
    tolerance: float = 0.0
    target_grams: float = 1.0
    slack: tuple[str, ...] = ("O2", "CO2", "H2O")
    default_temperature: float = 1100.0
    default_hours: float = 12.0
    preference: tuple[str, ...] = DEFAULT_PREFERENCE

    def __post_init__(self):
        if self.batch_size < 1 or self.n_batches < 0:
            raise ValueError("batch_size must be >= 1 and n_batches >= 0")
        if self.tolerance < 0 or self.target_grams <= 0:
            raise ValueError("tolerance must be >= 0 and target_grams > 0")
        bad = [s for s in self.slack if s not in SLACK_SPECIES]
        if bad:
            raise ValueError(f"unsupported slack species {bad}")
