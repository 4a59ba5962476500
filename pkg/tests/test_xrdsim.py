import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, strategies as st

from synthscreen.elements import get_element
from synthscreen.structio import CrystalStructure, Lattice, Site
from synthscreen.xrdsim import (
    CU_KA1, MeasuredPattern, Reflection, XrdConfig, d_min_for, enumerate_reflections, intensities,
    lorentz_polarization, match_phase, match_phase_detail, peaks_csv, read_measured, read_peaks_csv, rwp,
    simulate_pattern, structure_factor, two_theta_of,
)

from test_structio import rock_salt

Z = lambda el: get_element(el).Z  # noqa: E731


def brute_reflections(lattice, wavelength, two_theta_max, n=10):
    """Scan |h|,|k|,|l| <= n using Cartesian reciprocal vectors; group equal d by rounding."""
    recip = np.linalg.inv(lattice.matrix).T  # rows a*, b*, c* (no 2*pi)
    d_min = wavelength / (2 * math.sin(math.radians(two_theta_max) / 2))
    groups = {}
    for h, k, l in product(range(-n, n + 1), repeat=3):
        if h == k == l == 0:
            continue
        g = h * recip[0] + k * recip[1] + l * recip[2]
        d = 1 / math.sqrt(float(g @ g))
        if d >= d_min * (1 - 1e-12):
            groups.setdefault(round(d, 7), []).append((h, k, l))
    return sorted(((d, len(m)) for d, m in groups.items()), reverse=True)


def bcc(a=3.0, el="Fe", c=None):
    lat = Lattice(a, a, c or a)
    return CrystalStructure(lat, [Site(el, (0, 0, 0)), Site(el, (.5, .5, .5))])


FIXTURES = {
    "hexagonal": Lattice(8.76075, 8.76075, 5.55533, 90, 90, 120),
    "cubic": Lattice(4.0, 4.0, 4.0),
    "tetragonal": Lattice(4.0, 4.0, 6.5),
    "orthorhombic": Lattice(3.1, 4.7, 5.9),
    "monoclinic": Lattice(5.0, 6.0, 7.0, 90, 103.5, 90),
    "triclinic": Lattice(4.2, 5.1, 6.3, 81, 97, 112),
}


@pytest.mark.parametrize("name", FIXTURES)
def test_enumeration_matches_brute_force(name):
    lat = FIXTURES[name]
    got = enumerate_reflections(lat, CU_KA1, 60.0)
    expected = brute_reflections(lat, CU_KA1, 60.0)
    assert [r.multiplicity for r in got] == [m for _, m in expected]
    assert [r.d for r in got] == pytest.approx([d for d, _ in expected], rel=1e-7)
    assert all(0 < r.two_theta <= 60.0 for r in got)
    assert [r.two_theta for r in got] == sorted(r.two_theta for r in got)


def test_nd_100_position(nd_structure):
    refl = enumerate_reflections(nd_structure, CU_KA1, 90.0)
    first = refl[0]
    assert first.d == pytest.approx(8.76075 * math.sqrt(3) / 2, rel=1e-9)
    assert first.two_theta == pytest.approx(11.66, abs=0.02)
    assert first.multiplicity == 6
    assert (1, 0, 0) in first.members


def test_empty_ranges():
    assert enumerate_reflections(Lattice(2, 2, 2), CU_KA1, 30.0) == []
    assert enumerate_reflections(Lattice(2, 2, 2), CU_KA1, 0.0) == []
    assert d_min_for(CU_KA1, 30.0) == pytest.approx(2.976, abs=1e-3)
    with pytest.raises(ValueError):
        enumerate_reflections(Lattice(2, 2, 2), -1.0, 30.0)


def test_bragg_roundtrip():
    for d in (1.2, 2.5, 7.587):
        tt = two_theta_of(d)
        assert CU_KA1 == pytest.approx(2 * d * math.sin(math.radians(tt / 2)), rel=1e-12)


# --- structure factors ----------------------------------------------------

def test_single_atom():
    s = CrystalStructure(Lattice(3.5, 4.0, 4.5), [Site("Fe", (0, 0, 0))])
    for hkl in [(1, 0, 0), (1, 2, 3), (-2, 1, 4)]:
        F = structure_factor(s, hkl)
        assert F.real == pytest.approx(Z("Fe")) and F.imag == 0.0
    for r in intensities(s, enumerate_reflections(s, CU_KA1, 80.0)):
        assert r.f2 == pytest.approx(Z("Fe") ** 2, rel=1e-12)


def test_cscl():
    s = CrystalStructure(Lattice(4.12, 4.12, 4.12), [Site("Cs", (0, 0, 0)), Site("Cl", (.5, .5, .5))])
    by_hkl = {r.hkl: r for r in intensities(s, enumerate_reflections(s, CU_KA1, 60.0))}
    assert by_hkl[(1, 0, 0)].f2 == pytest.approx((Z("Cs") - Z("Cl")) ** 2, rel=1e-12)
    assert by_hkl[(1, 1, 0)].f2 == pytest.approx((Z("Cs") + Z("Cl")) ** 2, rel=1e-12)


# c = 1.5 a would put (003) and (200) at the same d and merge opposite parities
@pytest.mark.parametrize("structure", [bcc(), bcc(3.0, "W", 4.7)], ids=["cubic", "tetragonal"])
def test_body_centered_absences(structure):
    refl = intensities(structure, enumerate_reflections(structure, CU_KA1, 120.0))
    odd = [r for r in refl if sum(r.hkl) % 2]
    even = [r for r in refl if not sum(r.hkl) % 2]
    assert odd and even
    assert all(r.f2 == 0.0 and r.intensity == 0.0 for r in odd)
    assert all(r.f2 == pytest.approx(4 * Z(structure.sites[0].element) ** 2) for r in even)
    kept = simulate_pattern(structure, two_theta_max=120.0)
    assert all(sum(r.hkl) % 2 == 0 for r in kept)


def test_normalization_and_lp(nd_structure):
    refl = simulate_pattern(nd_structure, two_theta_max=60.0)
    assert max(r.intensity for r in refl) == pytest.approx(100.0)
    assert all(0 < r.intensity <= 100.0 for r in refl)
    lp = simulate_pattern(nd_structure, two_theta_max=60.0, lorentz_polarization_factor=True)
    assert max(r.intensity for r in lp) == pytest.approx(100.0)
    assert lorentz_polarization(90.0) == pytest.approx(1 / (0.5 * math.sqrt(0.5)))


def test_rock_salt_parity():
    s = rock_salt(5.64)
    by_hkl = {r.hkl: r for r in intensities(s, enumerate_reflections(s, CU_KA1, 60.0))}
    assert by_hkl[(1, 0, 0)].f2 == 0.0  # fcc: mixed parity absent
    assert by_hkl[(1, 1, 1)].f2 == pytest.approx(16 * (Z("Na") - Z("Cl")) ** 2)
    assert by_hkl[(2, 0, 0)].f2 == pytest.approx(16 * (Z("Na") + Z("Cl")) ** 2)


def _swap_ab(s):
    lat = s.lattice
    return CrystalStructure(Lattice(lat.b, lat.a, lat.c, lat.beta, lat.alpha, lat.gamma),
                            [Site(x.element, (x.frac[1], x.frac[0], x.frac[2])) for x in s.sites])


@given(st.lists(st.tuples(st.sampled_from(["O", "Ti", "Ba", "Sr"]),
                          st.tuples(*[st.floats(0, 0.999)] * 3)), min_size=1, max_size=4))
def test_tetragonal_ab_swap_invariance(sites):
    s = CrystalStructure(Lattice(4.0, 4.0, 6.0), [Site(e, f) for e, f in sites])
    a = simulate_pattern(s, two_theta_max=70.0, drop_zero=False)
    b = simulate_pattern(_swap_ab(s), two_theta_max=70.0, drop_zero=False)
    assert [r.d for r in a] == pytest.approx([r.d for r in b], rel=1e-12)
    assert [r.multiplicity for r in a] == [r.multiplicity for r in b]
    assert [r.intensity for r in a] == pytest.approx([r.intensity for r in b], abs=1e-8)


def test_empty_sites():
    with pytest.raises(ValueError):
        intensities(CrystalStructure(Lattice(3, 3, 3), []), [])


# --- matching -------------------------------------------------------------

def _peaks(tts, ints):
    return [Reflection((1, 0, 0), 1.0, t, i) for t, i in zip(tts, ints)]


def test_match_examples():
    sim = _peaks([20.0, 30.0, 40.0], [100, 50, 20])
    assert match_phase([20.0, 30.0, 40.0], sim) == 1.0
    assert match_phase([20.2, 30.2, 40.2], sim, tol=0.1) == 0.0
    assert match_phase([20.0], _peaks([20.0, 30.0], [60, 60])) == 0.5
    # floor drops weak peaks from the denominator
    assert match_phase([20.0], _peaks([20.0, 30.0], [100, 4])) == 1.0
    with pytest.raises(ValueError):
        match_phase([20.0], [])
    with pytest.raises(ValueError):
        match_phase([20.0], sim, tol=0)


def test_match_is_one_to_one():
    sim = _peaks([20.0, 20.05], [100, 100])
    d = match_phase_detail([20.02], sim)
    assert d.score == 0.5 and len(d.pairs) == 1


def _best_weight(sim_tt, sim_w, meas, tol):
    """Maximum matched weight by trying every assignment."""
    best = 0.0
    choices = [[None] + [j for j, m in enumerate(meas) if abs(m - t) <= tol] for t in sim_tt]
    for pick in product(*choices):
        used = [p for p in pick if p is not None]
        if len(used) == len(set(used)):
            best = max(best, sum(w for w, p in zip(sim_w, pick) if p is not None))
    return best


match_case = st.tuples(
    st.lists(st.tuples(st.floats(10, 12), st.floats(5, 100)), min_size=1, max_size=5),
    st.lists(st.floats(10, 12), min_size=0, max_size=5, unique=True),
    st.floats(10, 12),
)


@given(match_case)
def test_match_is_optimal_and_monotone(case):
    sim_pairs, meas, extra = case
    sim = _peaks([t for t, _ in sim_pairs], [w for _, w in sim_pairs])
    tol = 0.3
    score = match_phase(meas, sim, tol=tol)
    total = sum(w for _, w in sim_pairs)
    # tolerance boundary checks use the same float comparisons as searchsorted
    opt = _best_weight([t for t, _ in sim_pairs], [w for _, w in sim_pairs], meas, tol)
    assert score == pytest.approx(min(1.0, opt / total), abs=1e-12)
    assert match_phase(meas + [extra], sim, tol=tol) >= score - 1e-12


# --- R_wp -----------------------------------------------------------------

def test_rwp_examples():
    obs = [3.0, 10.0, 50.0, 0.0]
    assert rwp(obs, obs) == 0.0
    assert rwp(obs, [0, 0, 0, 0]) == pytest.approx(1.0)
    assert rwp([10, 10], [10, 5], [1, 1]) == pytest.approx(0.3536, abs=1e-4)
    with pytest.raises(ValueError):
        rwp([0, 0], [1, 1])
    with pytest.raises(ValueError):
        rwp([1, 2], [1])
    with pytest.raises(ValueError):
        rwp([1, 2], [1, 2], [1, -1])


# counts below 1e-6 are snapped to zero: subnormal inputs underflow the denominator
counts = st.floats(0, 1e3).map(lambda v: 0.0 if v < 1e-6 else v)


@given(st.lists(st.tuples(counts, counts), min_size=1, max_size=30),
       st.floats(0, 1), st.floats(0, 1))
def test_rwp_decreases_toward_obs(pairs, t1, t2):
    obs = np.array([p[0] for p in pairs])
    if not np.any(obs > 0):
        return
    calc = np.array([p[1] for p in pairs])
    lo, hi = sorted((t1, t2))
    near = calc + hi * (obs - calc)
    far = calc + lo * (obs - calc)
    assert rwp(obs, near) <= rwp(obs, far) + 1e-12


# --- I/O ------------------------------------------------------------------

def test_measured_pattern_validation(tmp_path):
    with pytest.raises(ValueError):
        MeasuredPattern([10, 10], [1, 2])
    with pytest.raises(ValueError):
        MeasuredPattern([10, 11], [1, -2])
    p = tmp_path / "m.xy"
    p.write_text("# 2theta counts\n10.0 5\n11.5, 7\n\n")
    m = read_measured(p)
    assert m.two_theta.tolist() == [10.0, 11.5] and m.intensity.tolist() == [5, 7]
    p.write_text("10.0\n")
    with pytest.raises(ValueError):
        read_measured(p)


def test_peaks_csv_roundtrip(nd_structure):
    refl = simulate_pattern(nd_structure, two_theta_max=40.0)
    text = peaks_csv(refl)
    assert text.splitlines()[0] == "hkl,d,two_theta,I_rel,multiplicity"
    back = read_peaks_csv(text)
    assert [r.hkl for r in back] == [r.hkl for r in refl]
    assert [r.two_theta for r in back] == pytest.approx([r.two_theta for r in refl], abs=1e-4)


def test_config():
    assert XrdConfig().wavelength == CU_KA1
    with pytest.raises(ValueError):
        XrdConfig(tol=0)
