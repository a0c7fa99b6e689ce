import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from cra_pcn import geometry, kernels
from cra_pcn import tensor as T
from cra_pcn.errors import ContractError
from conftest import max_rel_error, numeric_grad

seeds = st.integers(0, 2**32 - 1)


def cloud(seed, n, lattice=None):
    rng = np.random.default_rng(seed)
    return oracles.random_cloud(rng, n, lattice=bool(seed % 2) if lattice is None else lattice)


def min_pairwise(pts):
    return min(np.linalg.norm(a - b) for a, b in itertools.combinations(pts, 2))


# -- fps ---------------------------------------------------------------------

def test_fps_collinear_trace():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]])
    assert list(geometry.fps(pts, 3)) == [3, 0, 2]


def test_fps_full_is_permutation(rng):
    pts = rng.normal(size=(20, 3))
    assert sorted(geometry.fps(pts, 20)) == list(range(20))


@pytest.mark.parametrize("n_out", [0, 5])
def test_fps_range(n_out):
    with pytest.raises(ContractError):
        geometry.fps(np.zeros((4, 3)), n_out)


def test_fps_beats_random_subsets():
    rng = np.random.default_rng(7)
    pts = rng.uniform(size=(64, 3))
    picked = min_pairwise(pts[geometry.fps(pts, 16)])
    best = max(min_pairwise(pts[rng.choice(64, 16, replace=False)]) for _ in range(1000))
    assert picked >= best


@given(seeds, st.integers(2, 40))
def test_fps_matches_oracle(seed, n):
    pts = cloud(seed, n)
    n_out = 1 + seed % n
    assert list(geometry.fps(pts, n_out)) == oracles.fps(pts, n_out)


@given(seeds)
def test_fps_coverage_non_increasing(seed):
    pts = cloud(seed, 24, lattice=False)
    order = geometry.fps(pts, 24)
    covers = [min_pairwise(pts[order[:m]]) for m in range(2, 25)]
    assert all(a >= b for a, b in zip(covers, covers[1:]))


@given(seeds, st.integers(1, 40))
def test_fps_permutation_invariant(seed, n):
    pts = cloud(seed, n)
    perm = np.random.default_rng(seed + 1).permutation(n)
    n_out = 1 + seed % n
    a = pts[geometry.fps(pts, n_out)]
    b = pts[perm][geometry.fps(pts[perm], n_out)]
    assert a.tobytes() == b.tobytes()


# -- knn ---------------------------------------------------------------------

def test_knn_self():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(geometry.knn(pts, pts, 1)[:, 0], np.arange(10))


def test_knn_ordered_distances():
    sup = np.array([[1.0, 0, 0], [0, 2, 0], [0, 0, 3]])
    np.testing.assert_array_equal(geometry.knn(np.zeros((1, 3)), sup, 2), [[0, 1]])


def test_knn_tie_break_by_coordinate_not_index():
    sup = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    np.testing.assert_array_equal(geometry.knn(np.zeros((1, 3)), sup, 3), [[1, 2, 0]])


def test_knn_k_too_large():
    with pytest.raises(ContractError):
        geometry.knn(np.zeros((1, 3)), np.zeros((2, 3)), 3)


def test_knn_random_oracle():
    rng = np.random.default_rng(3)
    q, s = rng.uniform(size=(32, 3)), rng.uniform(size=(48, 3))
    assert geometry.knn(q, s, 8).tolist() == oracles.knn(q, s, 8)


@given(seeds, st.integers(1, 30), st.integers(1, 30))
def test_knn_matches_oracle(seed, nq, ns):
    q, s = cloud(seed, nq), cloud(seed + 1, ns)
    k = 1 + seed % ns
    assert geometry.knn(q, s, k).tolist() == oracles.knn(q, s, k)


@given(seeds)
def test_knn_support_permutation_invariant(seed):
    q, s = cloud(seed, 12), cloud(seed + 1, 20)
    perm = np.random.default_rng(seed).permutation(20)
    a = s[geometry.knn(q, s, 5)]
    b = s[perm][geometry.knn(q, s[perm], 5)]
    assert a.tobytes() == b.tobytes()


# -- interpolate -------------------------------------------------------------

def test_interpolate_coincident_returns_feature_exactly(rng):
    src = rng.normal(size=(6, 3))
    feats = rng.normal(size=(6, 4))
    out = geometry.interpolate(src, feats, src[[4, 1]]).data
    assert out.tobytes() == feats[[4, 1]].tobytes()


def test_interpolate_equidistant():
    src = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [5, 5, 5]])
    feats = np.array([[0.0], [3.0], [6.0], [100.0]])
    np.testing.assert_allclose(geometry.interpolate(src, feats, np.zeros((1, 3))).data, [[3.0]], rtol=0, atol=1e-15)


def test_interpolate_uses_all_when_fewer_than_three():
    src = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    out = geometry.interpolate(src, np.array([[2.0], [4.0]]), np.zeros((1, 3))).data
    np.testing.assert_allclose(out, [[3.0]], rtol=0, atol=1e-15)


def test_interpolate_empty_source():
    with pytest.raises(ContractError):
        geometry.interpolate(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((1, 3)))


@given(seeds)
def test_interpolate_matches_weight_formula(seed):
    rng = np.random.default_rng(seed)
    src, dst = rng.normal(size=(9, 3)), rng.normal(size=(5, 3))
    dst[0] = src[2]
    feats = rng.normal(size=(9, 2))
    np.testing.assert_allclose(geometry.interpolate(src, feats, dst).data,
                               oracles.interpolate(src, feats, dst), rtol=1e-12, atol=1e-12)


@given(seeds, st.integers(1, 20), st.integers(1, 20))
def test_interpolation_weights_sum_to_one(seed, ns, nd):
    _, w = geometry.interpolation_weights(cloud(seed, ns), cloud(seed + 1, nd))
    assert np.max(np.abs(w.data.sum(axis=1) - 1.0)) <= 1e-12


def test_interpolate_gradients(rng):
    src = T.Tensor(rng.normal(size=(7, 3)), requires_grad=True)
    feats = T.Tensor(rng.normal(size=(7, 2)), requires_grad=True)
    dst = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    probe = rng.normal(size=(4, 2))

    def value():
        return float(np.sum(geometry.interpolate(src, feats, dst).data * probe))

    with T.Tape() as tape:
        loss = T.sum(T.mul(geometry.interpolate(src, feats, dst), probe))
    g = T.backward(tape, loss)
    for t in (src, feats, dst):
        assert max_rel_error(g[t], numeric_grad(value, t.data)) < 1e-5


# -- chamfer / fscore ----------------------------------------------------------

@pytest.mark.parametrize("variant", ["CD-L1", "CD-L2"])
def test_chamfer_self_is_zero(variant, rng):
    p = rng.normal(size=(30, 3))
    assert float(geometry.chamfer(p, p, variant).data) == 0.0


def test_chamfer_closed_form():
    a, b = np.zeros((1, 3)), np.array([[1.0, 0, 0]])
    assert float(geometry.chamfer(a, b, "CD-L1").data) == 1.0
    assert float(geometry.chamfer(a, b, "CD-L2").data) == 2.0


def test_chamfer_bad_inputs():
    with pytest.raises(ContractError):
        geometry.chamfer(np.zeros((0, 3)), np.zeros((1, 3)))
    with pytest.raises(ContractError):
        geometry.chamfer(np.zeros((1, 3)), np.zeros((1, 3)), "EMD")


@pytest.mark.parametrize("variant", ["CD-L1", "CD-L2"])
def test_chamfer_random_oracle(variant):
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(30, 3))
    assert abs(float(geometry.chamfer(a, b, variant).data) - oracles.chamfer(a, b, variant)) <= 1e-12


@given(seeds, st.sampled_from(["CD-L1", "CD-L2"]))
def test_chamfer_symmetric_and_permutation_invariant(seed, variant):
    a, b = cloud(seed, 17), cloud(seed + 1, 11)
    v = float(geometry.chamfer(a, b, variant).data)
    assert v == float(geometry.chamfer(b, a, variant).data)
    perm = np.random.default_rng(seed).permutation(17)
    assert v == float(geometry.chamfer(a[perm], b, variant).data)


@pytest.mark.parametrize("variant", ["CD-L1", "CD-L2"])
def test_chamfer_gradients(variant, rng):
    a = T.Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    with T.Tape() as tape:
        loss = geometry.chamfer(a, b, variant)
    g = T.backward(tape, loss)
    for t in (a, b):
        num = numeric_grad(lambda: float(geometry.chamfer(a, b, variant).data), t.data)
        assert max_rel_error(g[t], num) < 1e-6


def test_fscore_examples():
    p = np.random.default_rng(2).normal(size=(10, 3))
    assert geometry.fscore(p, p, 0.01) == 1.0
    assert geometry.fscore(p, p + 100.0, 1.0) == 0.0
    gt = np.array([[0.0, 0, 0], [1, 0, 0]])
    pred = np.array([[0.0, 0, 0], [1, 0, 0], [0, 50, 0], [0, 60, 0]])
    assert geometry.fscore(pred, gt, 0.1) == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(ContractError):
        geometry.fscore(p, p, 0.0)


@given(seeds, st.floats(0.05, 2.0))
def test_fscore_matches_oracle(seed, thr):
    a, b = cloud(seed, 15), cloud(seed + 1, 9)
    assert geometry.fscore(a, b, thr) == oracles.fscore(a, b, thr)


# -- backends ------------------------------------------------------------------

@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="compiled extension not built")
@given(seeds, st.integers(1, 60))
def test_backends_bit_identical(seed, n):
    pts = cloud(seed, n)
    q = cloud(seed + 1, 7)
    k = 1 + seed % n
    n_out = 1 + seed % n
    rows = np.random.default_rng(seed).integers(0, 5, size=3 * n)
    src = np.random.default_rng(seed).normal(size=(3 * n, 4))
    results = {}
    before = kernels.BACKEND
    try:
        for backend in ("python", "cython"):
            kernels.use_backend(backend)
            out = np.zeros((5, 4))
            kernels.scatter_add_rows(out, rows, src)
            idx, d2 = kernels.knn_indices(q, pts, k)
            results[backend] = (kernels.fps_indices(pts, n_out, geometry.centroid(pts)).tobytes(),
                                idx.tobytes(), d2.tobytes(), out.tobytes())
    finally:
        kernels.use_backend(before)
    assert results["python"] == results["cython"]
