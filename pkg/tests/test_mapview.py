import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from synthscreen.mapview import (
    GridSpec, MapConfig, cell_index, covariance, grid_summary, histogram_csv, pca_fit, project, reconstruct,
)


def test_collinear():
    X = np.array([[1, 0], [-1, 0], [2, 0], [-2, 0]], dtype=float)
    m = pca_fit(X, k=1)
    assert m.components[0] == pytest.approx([1.0, 0.0])
    assert m.explained_variance_ratio[0] == pytest.approx(1.0)


def test_cross():
    X = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=float)
    m = pca_fit(X, k=2)
    assert m.explained_variance_ratio == pytest.approx([0.5, 0.5])
    assert abs(m.components[0] @ m.components[1]) < 1e-9


def test_errors():
    with pytest.raises(ValueError):
        pca_fit(np.ones((1, 3)))
    with pytest.raises(ValueError):
        pca_fit(np.ones((5, 3)))
    with pytest.raises(ValueError):
        pca_fit(np.random.default_rng(0).random((5, 3)), k=4)
    with pytest.raises(ValueError):
        pca_fit(np.array([[0.0, np.nan], [1.0, 2.0]]))


matrices = st.integers(2, 40).flatmap(lambda n: st.integers(1, 6).flatmap(
    lambda d: arrays(np.float64, (n, d), elements=st.floats(-100, 100))))


def _has_variance(X):
    return np.trace(np.cov(X.T, ddof=1).reshape(X.shape[1], X.shape[1])) > 1e-6


@given(matrices)
def test_axes_and_variance(X):
    if not _has_variance(X):
        return
    d = X.shape[1]
    m = pca_fit(X, k=d)
    C = m.components
    assert np.allclose(C @ C.T, np.eye(d), atol=1e-9)
    ratio = m.explained_variance_ratio
    assert np.all(ratio >= 0) and np.all(np.diff(ratio) <= 1e-12) and ratio.sum() <= 1 + 1e-9
    ref = np.sort(np.linalg.eigvalsh(np.cov(X.T, ddof=1).reshape(d, d)))[::-1]
    total = np.trace(np.cov(X.T, ddof=1).reshape(d, d))
    assert ratio == pytest.approx(np.clip(ref, 0, None) / total, abs=1e-9)
    for row in C:
        assert row[np.argmax(np.abs(row))] > 0
    assert np.allclose(reconstruct(m, project(m, X)), X, atol=1e-9 * max(1.0, np.abs(X).max()))


@given(matrices, st.integers(1, 7))
def test_covariance_independent_of_block(X, block):
    mean, cov = covariance(X, block=block)
    assert mean == pytest.approx(X.mean(axis=0), abs=1e-9)
    assert cov == pytest.approx(np.cov(X.T, ddof=1).reshape(X.shape[1], X.shape[1]), abs=1e-8)


def test_joint_fit_contract():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(50, 5))
    B = rng.normal(loc=2.0, size=(30, 5))
    union = np.vstack([A, B])
    m = pca_fit(union, k=2)
    Z = project(m, union)
    assert np.array_equal(project(m, A), Z[:50])
    assert np.array_equal(project(m, B), Z[50:])


def test_blocked_fit_is_deterministic():
    X = np.random.default_rng(1).normal(size=(1000, 4))
    a, b = pca_fit(X, block=64), pca_fit(X, block=64)
    assert np.array_equal(a.components, b.components)
    assert np.allclose(pca_fit(X, block=7).components, a.components, atol=1e-10)


# --- grids ----------------------------------------------------------------

def test_grid_examples():
    spec = GridSpec(0, 1, 0, 1, 2, 2)
    one = grid_summary([[0.1, 0.1], [0.2, 0.3]], [0.5, 0.7], spec)
    assert np.count_nonzero(one.counts) == 1 and one.counts[0, 0] == 2
    two = grid_summary([[0.1, 0.1], [0.9, 0.9]], [0.2, 0.8], spec)
    assert two.means[0, 0] == pytest.approx(0.2) and two.means[1, 1] == pytest.approx(0.8)
    assert np.isnan(two.means[0, 1])
    with pytest.raises(ValueError):
        grid_summary(np.empty((0, 2)), [], spec)
    with pytest.raises(ValueError):
        grid_summary([[0, 0]], [1, 2], spec)


def test_edges_go_to_lower_cell():
    edges = np.array([0.0, 0.5, 1.0])
    assert cell_index(np.array([0.0, 0.5, 0.50001, 1.0, -3.0, 7.0]), edges).tolist() == [0, 0, 1, 1, 0, 1]


def _counting_oracle(P, spec):
    ex, ey = spec.edges()
    counts = np.zeros((spec.nx, spec.ny), dtype=int)
    for x, y in P:
        i = next((k for k in range(spec.nx) if x <= ex[k + 1]), spec.nx - 1)
        j = next((k for k in range(spec.ny) if y <= ey[k + 1]), spec.ny - 1)
        counts[i, j] += 1
    return counts


@given(arrays(np.float64, st.tuples(st.integers(1, 60), st.just(2)), elements=st.floats(-5, 5)),
       st.integers(1, 6), st.integers(1, 6))
def test_counts_match_oracle(P, nx, ny):
    spec = GridSpec(-5, 5, -5, 5, nx, ny)
    g = grid_summary(P, np.ones(len(P)), spec)
    assert g.counts.sum() == len(P)
    assert np.array_equal(g.counts, _counting_oracle(P, spec))


@given(arrays(np.float64, st.tuples(st.integers(1, 60), st.just(2)), elements=st.floats(-5, 5)),
       st.floats(0, 1))
def test_constant_mean(P, v):
    g = grid_summary(P, np.full(len(P), v))
    nz = g.counts > 0
    assert np.allclose(g.means[nz], v, rtol=1e-12, atol=0)
    assert g.density.sum() == pytest.approx(1.0)


def test_missing_values_skip_means():
    g = grid_summary([[0.1, 0.1], [0.2, 0.2], [0.9, 0.9]], [0.4, np.nan, np.nan], GridSpec(0, 1, 0, 1, 2, 2))
    assert g.counts[0, 0] == 2 and g.counts[1, 1] == 1
    assert g.means[0, 0] == 0.4 and np.isnan(g.means[1, 1])
    assert "1,1,1,\n" in g.to_csv()


def test_csv_outputs():
    g = grid_summary([[0.1, 0.1]], [0.4], GridSpec(0, 1, 0, 1, 2, 1))
    lines = g.to_csv().splitlines()
    assert lines == ["cell_x,cell_y,count,mean_rankavg", "0,0,1,0.4", "1,0,0,"]
    h = histogram_csv([0.05, 0.5, 1.0], bins=2).splitlines()
    assert h == ["bin_lo,bin_hi,count", "0.0,0.5,1", "0.5,1.0,2"]


def test_config():
    with pytest.raises(ValueError):
        MapConfig(k=1)
    with pytest.raises(ValueError):
        GridSpec(0, 0, 0, 1)
