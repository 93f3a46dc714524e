from __future__ import annotations

import numpy as np
import pytest

import oracles
import pcmae.autodiff as ad
from pcmae import geometry
from pcmae.errors import ConfigError, NumericError, UsageError

from conftest import backends, random_cloud

pytestmark = pytest.mark.usefixtures("restore_backend")


def _rotation(seed: int) -> np.ndarray:
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ---------------------------------------------------------------------------
# pairwise_sq_dist
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("backend", backends())
def test_pairwise_hand_values(backend):
    geometry.use_backend(backend)
    a = np.zeros((1, 3))
    assert np.array_equal(geometry.pairwise_sq_dist(a, a), [[0.0]])
    b = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    assert np.array_equal(geometry.pairwise_sq_dist(a, b), [[1.0, 4.0]])


@pytest.mark.parametrize("backend", backends())
def test_pairwise_matches_scalar_loop_oracle(backend):
    geometry.use_backend(backend)
    for seed in range(5):
        a = random_cloud(seed, 16)
        b = random_cloud(100 + seed, 8)
        got = geometry.pairwise_sq_dist(a, b)
        assert np.abs(got - oracles.pairwise_sq_dist(a, b)).max() < 1e-6


@pytest.mark.parametrize("backend", backends())
def test_pairwise_self_symmetric_zero_diagonal(backend):
    geometry.use_backend(backend)
    a = random_cloud(7, 24)
    d = geometry.pairwise_sq_dist(a, a)
    assert np.array_equal(d, d.T)
    assert np.array_equal(np.diag(d), np.zeros(24))


def test_pairwise_rejects_empty():
    with pytest.raises(UsageError):
        geometry.pairwise_sq_dist(np.zeros((0, 3)), np.zeros((2, 3)))


def test_pairwise_rejects_bad_shape():
    with pytest.raises(UsageError):
        geometry.pairwise_sq_dist(np.zeros((2, 2)), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# fps
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("backend", backends())
def test_fps_line_points(backend):
    geometry.use_backend(backend)
    pts = np.array([[0.0, 0, 0], [10.0, 0, 0], [5.0, 0, 0], [1.0, 0, 0]])
    assert geometry.fps(pts, 2, start=0).tolist() == [0, 1]
    assert geometry.fps(pts, 3, start=0).tolist() == [0, 1, 2]


@pytest.mark.parametrize("backend", backends())
def test_fps_matches_greedy_oracle(backend):
    geometry.use_backend(backend)
    for seed in range(5):
        pts = random_cloud(seed, 64)
        start = seed % 64
        got = geometry.fps(pts, 8, start=start)
        assert np.array_equal(got, oracles.fps(pts, 8, start=start))


@pytest.mark.parametrize("backend", backends())
def test_fps_indices_distinct_and_start_first(backend):
    geometry.use_backend(backend)
    pts = random_cloud(11, 40)
    idx = geometry.fps(pts, 40, start=5)
    assert idx[0] == 5
    assert len(set(idx.tolist())) == 40


def test_fps_permutation_consistent():
    pts = random_cloud(3, 32)
    base = geometry.fps(pts, 6, start=4)
    perm = np.random.default_rng(0).permutation(32)
    inv = np.argsort(perm)
    # Relabel points by perm: new[i] = old[inv[i]] so old index j -> new perm[j].
    relabeled = geometry.fps(pts[inv], 6, start=int(perm[4]))
    assert np.array_equal(relabeled, perm[base])


def test_fps_rejects_too_many_picks():
    with pytest.raises(UsageError):
        geometry.fps(np.zeros((3, 3)), 4)
    with pytest.raises(UsageError):
        geometry.fps(random_cloud(0, 4), 2, start=9)


# ---------------------------------------------------------------------------
# knn
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("backend", backends())
def test_knn_sorted_distances_hand_case(backend):
    geometry.use_backend(backend)
    q = np.zeros((1, 3))
    ref = np.array([[3.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    assert geometry.knn(q, ref, 2).tolist() == [[1, 2]]


@pytest.mark.parametrize("backend", backends())
def test_knn_coincident_point_is_nearest(backend):
    geometry.use_backend(backend)
    ref = random_cloud(2, 10)
    q = ref[4:5]
    assert geometry.knn(q, ref, 1)[0, 0] == 4


@pytest.mark.parametrize("backend", backends())
def test_knn_matches_full_sort_oracle(backend):
    geometry.use_backend(backend)
    for seed in range(5):
        q = random_cloud(seed, 32)
        ref = random_cloud(200 + seed, 128)
        got = geometry.knn(q, ref, 20)
        assert np.array_equal(got, oracles.knn(q, ref, 20))


@pytest.mark.parametrize("backend", backends())
def test_knn_ties_break_to_lower_index(backend):
    geometry.use_backend(backend)
    ref = np.array([[1.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1], [1.0, 0, 0]])
    # Rows 0, 1, 2, 3 are all at distance 1 from the origin.
    assert geometry.knn(np.zeros((1, 3)), ref, 3).tolist() == [[0, 1, 2]]


def test_knn_self_query_returns_self():
    pts = random_cloud(8, 16)
    assert np.array_equal(geometry.knn(pts, pts, 1)[:, 0], np.arange(16))


def test_knn_rejects_k_too_large():
    with pytest.raises(UsageError):
        geometry.knn(np.zeros((1, 3)), np.zeros((2, 3)), 3)


def test_nearest_indices_is_knn_first_column():
    q = random_cloud(1, 12)
    ref = random_cloud(2, 20)
    assert np.array_equal(
        geometry.nearest_indices(q, ref), geometry.knn(q, ref, 1)[:, 0]
    )


# ---------------------------------------------------------------------------
# chamfer_l2
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("backend", backends())
def test_chamfer_identity_and_hand_value(backend):
    geometry.use_backend(backend)
    x = random_cloud(5, 10)
    assert geometry.chamfer_l2(x, x) == 0.0
    a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    b = np.array([[0.0, 0, 0]])
    assert abs(geometry.chamfer_l2(a, b) - 0.5) < 1e-12


@pytest.mark.parametrize("backend", backends())
def test_chamfer_matches_double_loop_oracle(backend):
    geometry.use_backend(backend)
    for seed in range(5):
        x = random_cloud(seed, 32)
        y = random_cloud(300 + seed, 32)
        assert abs(geometry.chamfer_l2(x, y) - oracles.chamfer_l2(x, y)) < 1e-6


def test_chamfer_symmetric():
    x = random_cloud(6, 20)
    y = random_cloud(7, 13)
    assert geometry.chamfer_l2(x, y) == geometry.chamfer_l2(y, x)


@pytest.mark.parametrize("seed", range(5))
def test_chamfer_rotation_invariant(seed):
    x = random_cloud(seed, 24)
    y = random_cloud(50 + seed, 24)
    r = _rotation(seed)
    base = geometry.chamfer_l2(x, y)
    rotated = geometry.chamfer_l2(x @ r.T, y @ r.T)
    assert abs(base - rotated) < 1e-5


def test_chamfer_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((6, 3))

    def f(ts):
        return geometry.chamfer_l2(ts[0], y)

    x = ad.Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    assert ad.grad_check(f, [x]) < 1e-4


def test_chamfer_tensor_value_matches_float_path():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 3))
    y = rng.standard_normal((7, 3))
    plain = geometry.chamfer_l2(x, y)
    traced = geometry.chamfer_l2(
        ad.Tensor(x, requires_grad=True), ad.Tensor(y, requires_grad=True)
    )
    assert abs(plain - traced.item()) < 1e-9


def test_chamfer_rejects_empty_sets():
    with pytest.raises(UsageError):
        geometry.chamfer_l2(np.zeros((0, 3)), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# normalize_unit_sphere / PointCloud
# ---------------------------------------------------------------------------


def test_normalize_hand_example():
    out = geometry.normalize_unit_sphere(np.array([[2.0, 0, 0], [0.0, 0, 0]]))
    assert np.allclose(out, [[1.0, 0, 0], [-1.0, 0, 0]], atol=1e-12)


def test_normalize_invariants_and_idempotence():
    pts = random_cloud(9, 50) * 4.0 + 2.0
    out = geometry.normalize_unit_sphere(pts)
    assert np.abs(out.mean(axis=0)).max() < 1e-6
    assert abs(np.linalg.norm(out, axis=1).max() - 1.0) < 1e-6
    again = geometry.normalize_unit_sphere(out)
    assert np.abs(again - out).max() < 1e-6


def test_normalize_degenerate_cloud_returns_zeros():
    pts = np.full((5, 3), 7.25)
    assert np.array_equal(geometry.normalize_unit_sphere(pts), np.zeros((5, 3)))


def test_point_cloud_validation():
    pc = geometry.PointCloud(np.zeros((4, 3)), label=2)
    assert pc.size == 4 and pc.label == 2
    with pytest.raises(UsageError):
        geometry.PointCloud(np.zeros((0, 3)))
    with pytest.raises((UsageError, NumericError)):
        geometry.PointCloud(np.array([[np.nan, 0, 0]]))


# ---------------------------------------------------------------------------
# Backend plumbing
# ---------------------------------------------------------------------------


def test_backend_switch_changes_name_and_results_agree():
    names = backends()
    assert "python" in names
    results = {}
    pts = random_cloud(13, 48)
    for name in names:
        geometry.use_backend(name)
        assert geometry.backend_name() == name
        results[name] = (
            geometry.fps(pts, 6),
            geometry.knn(pts[:4], pts, 5),
            geometry.pairwise_sq_dist(pts[:4], pts),
        )
    base = results["python"]
    for name, (f, k, d) in results.items():
        assert np.array_equal(f, base[0]), name
        assert np.array_equal(k, base[1]), name
        assert np.abs(d - base[2]).max() < 1e-6, name


def test_unknown_backend_rejected():
    with pytest.raises(ConfigError):
        geometry.use_backend("gpu")
