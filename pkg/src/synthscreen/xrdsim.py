"""Powder-diffraction peak lists, phase-presence matching and R_wp.

Intensities use constant form factors f = Z; the Lorentz-polarization factor
is optional.  Reflections with the same d-spacing are merged into one peak
whose multiplicity counts the merged (h, k, l) triples.
"""
from __future__ import annotations

import io
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .elements import get_element
from .structio import CrystalStructure, Lattice

CU_KA1 = 1.5406
DEFAULT_TWO_THETA_MAX = 90.0
DEFAULT_INTENSITY_FLOOR = 5.0

_D_REL_TOL = 1e-8
_ZERO_REL = 1e-12


@dataclass(frozen=True)
class Reflection:
    hkl: tuple[int, int, int]
    d: float
    two_theta: float
    intensity: float = 0.0
    multiplicity: int = 1
    members: tuple[tuple[int, int, int], ...] = field(default=(), compare=False, repr=False)
    f2: float = 0.0


class MeasuredPattern:
    """Peak positions or a binned scan: strictly increasing 2θ, nonnegative counts."""

    def __init__(self, two_theta: Sequence[float], intensity: Sequence[float], wavelength: float = CU_KA1):
        tt = np.asarray(two_theta, dtype=float)
        yy = np.asarray(intensity, dtype=float)
        if tt.ndim != 1 or tt.shape != yy.shape:
            raise ValueError("two_theta and intensity must be 1-D arrays of equal length")
        if np.any(np.diff(tt) <= 0):
            raise ValueError("two_theta must be strictly increasing")
        if np.any(yy < 0) or not np.all(np.isfinite(yy)):
            raise ValueError("intensities must be finite and nonnegative")
        if wavelength <= 0:
            raise ValueError("wavelength must be positive")
        self.two_theta = tt
        self.intensity = yy
        self.wavelength = float(wavelength)

    def __len__(self) -> int:
        return len(self.two_theta)


def two_theta_of(d: float, wavelength: float = CU_KA1) -> float:
    s = wavelength / (2.0 * d)
    if s > 1.0:
        return math.nan
    return math.degrees(2.0 * math.asin(s))


def d_min_for(wavelength: float, two_theta_max: float) -> float:
    return wavelength / (2.0 * math.sin(math.radians(two_theta_max) / 2.0))


def _representative(members: list[tuple[int, int, int]]) -> tuple[int, int, int]:
    # fewest negative indices, then lexicographically largest
    return min(members, key=lambda h: (sum(x < 0 for x in h), tuple(-x for x in h)))


def enumerate_reflections(
    lattice: Lattice | CrystalStructure,
    wavelength: float = CU_KA1,
    two_theta_max: float = DEFAULT_TWO_THETA_MAX,
) -> list[Reflection]:
    """All reflections with 2θ ≤ ``two_theta_max``, merged by equal d, sorted by 2θ."""
    if isinstance(lattice, CrystalStructure):
        lattice = lattice.lattice
    if wavelength <= 0:
        raise ValueError("wavelength must be positive")
    if two_theta_max <= 0:
        return []
    two_theta_max = min(two_theta_max, 180.0)
    d_min = d_min_for(wavelength, two_theta_max)
    # |h| = |G . a| <= |G| |a| <= |a| / d_min
    bounds = [int(math.floor(x / d_min + 1e-9)) for x in (lattice.a, lattice.b, lattice.c)]
    if not any(bounds):
        return []
    rng = [np.arange(-n, n + 1) for n in bounds]
    H = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, 3)
    H = H[np.any(H != 0, axis=1)]
    g = lattice.reciprocal_metric
    inv_d2 = np.einsum("ni,ij,nj->n", H, g, H)
    keep = inv_d2 <= 1.0 / d_min**2 * (1 + 1e-12)
    H, inv_d2 = H[keep], inv_d2[keep]
    if len(H) == 0:
        return []
    d = 1.0 / np.sqrt(inv_d2)
    order = np.lexsort((H[:, 2], H[:, 1], H[:, 0], -d))
    H, d = H[order], d[order]
    out = []
    start = 0
    for i in range(1, len(d) + 1):
        if i == len(d) or d[start] - d[i] > _D_REL_TOL * d[start]:
            members = [tuple(int(x) for x in h) for h in H[start:i]]
            dd = float(d[start:i].mean())
            out.append(Reflection(_representative(members), dd, two_theta_of(dd, wavelength),
                                  multiplicity=len(members), members=tuple(sorted(members))))
            start = i
    return out


def _site_arrays(s: CrystalStructure) -> tuple[np.ndarray, np.ndarray]:
    if s.symops and len(s.symops) > 1:
        s = s.expand_p1()
    if not s.sites:
        raise ValueError("structure has no sites")
    frac = s.frac_coords
    weight = np.array([site.occupancy * get_element(site.element).Z for site in s.sites], dtype=float)
    return frac, weight


def structure_factor(s: CrystalStructure, hkl: Sequence[int]) -> complex:
    """F = Σ occupancy × Z × exp(2πi h·r) over sites."""
    frac, w = _site_arrays(s)
    phase = 2.0 * np.pi * (frac @ np.asarray(hkl, dtype=float))
    return complex(np.sum(w * np.cos(phase)), np.sum(w * np.sin(phase)))


def lorentz_polarization(two_theta_deg: float) -> float:
    th = math.radians(two_theta_deg) / 2.0
    return (1.0 + math.cos(2 * th) ** 2) / (math.sin(th) ** 2 * math.cos(th))


def intensities(s: CrystalStructure, reflections: Sequence[Reflection], lorentz_polarization_factor: bool = False) -> list[Reflection]:
    """Attach |F|² (mean over merged members) and relative intensities scaled to max 100.

    |F|² values below 1e-12 of (Σf)² are set to exactly zero so systematic
    absences do not show up as rounding noise.
    """
    frac, w = _site_arrays(s)
    f0_sq = float(np.sum(np.abs(w))) ** 2
    raw = []
    f2s = []
    for r in reflections:
        H = np.asarray(r.members or (r.hkl,), dtype=float)
        phase = 2.0 * np.pi * (H @ frac.T)
        re = np.cos(phase) @ w
        im = np.sin(phase) @ w
        f2 = re**2 + im**2
        f2[f2 < _ZERO_REL * f0_sq] = 0.0
        total = float(f2.sum())
        lp = lorentz_polarization(r.two_theta) if lorentz_polarization_factor else 1.0
        raw.append(total * lp)
        f2s.append(total / len(H))
    top = max(raw, default=0.0)
    scale = 100.0 / top if top > 0 else 0.0
    return [replace(r, intensity=v * scale, f2=f2) for r, v, f2 in zip(reflections, raw, f2s)]


def simulate_pattern(s: CrystalStructure, wavelength: float = CU_KA1, two_theta_max: float = DEFAULT_TWO_THETA_MAX,
                     lorentz_polarization_factor: bool = False, drop_zero: bool = True) -> list[Reflection]:
    refl = intensities(s, enumerate_reflections(s.lattice, wavelength, two_theta_max), lorentz_polarization_factor)
    return [r for r in refl if r.intensity > 0] if drop_zero else refl


def _augment(u: int, adj: list[list[int]], match_m: dict[int, int], seen: set[int]) -> bool:
    for v in adj[u]:
        if v in seen:
            continue
        seen.add(v)
        if v not in match_m or _augment(match_m[v], adj, match_m, seen):
            match_m[v] = u
            return True
    return False


@dataclass(frozen=True)
class PhaseMatch:
    score: float
    pairs: tuple[tuple[int, int], ...]  # (simulated index, measured index)
    considered: int


def match_phase_detail(measured: MeasuredPattern | Sequence[float], simulated: Sequence[Reflection],
                       tol: float = 0.1, floor: float = DEFAULT_INTENSITY_FLOOR) -> PhaseMatch:
    """One-to-one matching of simulated peaks (I ≥ floor) to measured peaks within ``tol`` degrees.

    Peaks are taken in decreasing intensity; each is kept if an augmenting
    path can fit it into the current one-to-one assignment.  This greedy is
    exact for maximum matched intensity, which makes the score monotone in
    the measured peak set.  Candidate measured peaks are tried nearest first.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not simulated:
        raise ValueError("empty simulated reflection list")
    meas = measured.two_theta if isinstance(measured, MeasuredPattern) else np.asarray(measured, dtype=float)
    meas = np.sort(meas)
    idx = [i for i, r in enumerate(simulated) if r.intensity >= floor]
    total = sum(simulated[i].intensity for i in idx)
    if total <= 0:
        return PhaseMatch(0.0, (), len(idx))
    adj = []
    for i in idx:
        t = simulated[i].two_theta
        lo, hi = np.searchsorted(meas, t - tol, "left"), np.searchsorted(meas, t + tol, "right")
        cand = list(range(lo, hi))
        cand.sort(key=lambda j: (abs(meas[j] - t), j))
        adj.append(cand)
    order = sorted(range(len(idx)), key=lambda u: (-simulated[idx[u]].intensity, simulated[idx[u]].two_theta))
    match_m: dict[int, int] = {}
    chosen = []
    for u in order:
        if adj[u] and _augment(u, adj, match_m, set()):
            chosen.append(u)
    weight = sum(simulated[idx[u]].intensity for u in chosen)
    pairs = tuple(sorted((idx[u], m) for m, u in match_m.items()))
    return PhaseMatch(min(1.0, weight / total), pairs, len(idx))


def match_phase(measured: MeasuredPattern | Sequence[float], simulated: Sequence[Reflection],
                tol: float = 0.1, floor: float = DEFAULT_INTENSITY_FLOOR) -> float:
    """Intensity-weighted fraction of simulated peaks found in the measured list."""
    return match_phase_detail(measured, simulated, tol, floor).score


def rwp(observed: Sequence[float], calculated: Sequence[float], weights: Optional[Sequence[float]] = None) -> float:
    """sqrt(Σ w (obs − calc)² / Σ w obs²); default weights 1/max(obs, 1)."""
    y = np.asarray(observed, dtype=float)
    yc = np.asarray(calculated, dtype=float)
    if y.shape != yc.shape or y.ndim != 1:
        raise ValueError("observed and calculated must be 1-D arrays of equal length")
    w = 1.0 / np.maximum(y, 1.0) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != y.shape:
        raise ValueError("weights must match observed length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    den = float(np.sum(w * y * y))
    if den == 0:
        raise ValueError("observed signal is all zero")
    return math.sqrt(float(np.sum(w * (y - yc) ** 2)) / den)


PEAK_COLUMNS = ("hkl", "d", "two_theta", "I_rel", "multiplicity")


def peaks_csv(reflections: Sequence[Reflection]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PEAK_COLUMNS)
    for r in reflections:
        w.writerow([" ".join(map(str, r.hkl)), f"{r.d:.6f}", f"{r.two_theta:.4f}", f"{r.intensity:.3f}", r.multiplicity])
    return buf.getvalue()


def read_peaks_csv(text: str) -> list[Reflection]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        hkl = tuple(int(x) for x in row["hkl"].split())
        out.append(Reflection(hkl, float(row["d"]), float(row["two_theta"]), float(row["I_rel"]), int(row["multiplicity"])))
    return out


def read_measured(path: str | Path, wavelength: float = CU_KA1) -> MeasuredPattern:
    """Two-column text (2θ, counts); whitespace or comma separated, ``#`` comments."""
    tt, yy = [], []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected two columns")
        try:
            tt.append(float(parts[0]))
            yy.append(float(parts[1]))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    return MeasuredPattern(tt, yy, wavelength)


@dataclass(frozen=True)
class XrdConfig:
    wavelength: float = CU_KA1
    two_theta_max: float = DEFAULT_TWO_THETA_MAX
    lorentz_polarization: bool = False
    tol: float = 0.1
    floor: float = DEFAULT_INTENSITY_FLOOR

    def __post_init__(self):
        if self.wavelength <= 0 or self.tol <= 0:
            raise ValueError("wavelength and tol must be positive")
