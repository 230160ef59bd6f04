"""Spectral utility tests: Hausdorff distances, gap handling, edge tracking,
Riesz projections, and the Holder exponent fit."""

import numpy as np
import pytest

from hofmat import (
    GapList,
    drop_boundary_states,
    eigenvalues_hermitian,
    eigh_checked,
    find_gaps,
    hausdorff,
    hermitian_defect,
    holder_fit,
    operator_norm,
    random_hermitian,
    riesz_project,
    track_gap_edge,
)


def brute_hausdorff(x, y):
    x = np.asarray(x)[:, None]
    y = np.asarray(y)[None, :]
    d = np.abs(x - y)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def test_hausdorff_two_pointer_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = np.sort(rng.normal(size=rng.integers(1, 40)))
        y = np.sort(rng.normal(size=rng.integers(1, 40)))
        assert abs(hausdorff(x, y) - brute_hausdorff(x, y)) < 1e-15


def test_hausdorff_requires_sorted_nonempty():
    with pytest.raises(ValueError):
        hausdorff(np.array([2.0, 1.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        hausdorff(np.array([]), np.array([0.0]))


def test_hausdorff_bounded_by_operator_norm_of_difference():
    # classic perturbation bound: d_H(spec(A), spec(B)) <= ||A - B||
    rng = np.random.default_rng(1)
    for _ in range(25):
        A = random_hermitian(rng, 24)
        B = A + random_hermitian(rng, 24, scale=0.3)
        dh = hausdorff(eigenvalues_hermitian(A).eigenvalues, eigenvalues_hermitian(B).eigenvalues)
        assert dh <= operator_norm(A - B) + 1e-10


def test_eigh_checked_rejects_nonhermitian():
    M = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
    assert hermitian_defect(M) > 0.1
    with pytest.raises(ValueError):
        eigh_checked(M)


def test_eigh_checked_residuals_and_sorting():
    rng = np.random.default_rng(2)
    M = random_hermitian(rng, 60)
    res, V = eigh_checked(M)
    assert res.residual < 1e-9
    assert np.all(np.diff(res.eigenvalues) >= 0)
    assert res.matrix_dim == 60
    # explicit residual of the extreme pair
    v = V[:, 0]
    assert np.linalg.norm(M @ v - res.eigenvalues[0] * v) < 1e-9 * max(
        1.0, np.abs(res.eigenvalues).max()
    )


def test_find_gaps():
    spec = np.array([0.0, 0.1, 0.2, 1.0, 1.05, 2.5])
    gl = find_gaps(spec, min_width=0.5)
    assert len(gl.gaps) == 2
    assert gl.gaps[0] == pytest.approx((0.2, 1.0, 0.8))
    assert gl.gaps[1] == pytest.approx((1.05, 2.5, 1.45))
    assert gl.widest() == pytest.approx((1.05, 2.5, 1.45))
    assert gl.hull == pytest.approx((0.0, 2.5))
    with pytest.raises(ValueError):
        find_gaps(spec, min_width=0.0)


def test_drop_boundary_states_splits_by_weight():
    # two orthonormal states: one fully on boundary rows, one fully interior
    vectors = np.zeros((4, 2), dtype=complex)
    vectors[0, 0] = 1.0  # boundary row
    vectors[2, 1] = 1.0  # interior row
    mask = np.array([True, True, False, False])
    kept, weights = drop_boundary_states(np.array([5.0, 7.0]), vectors, mask, threshold=0.5)
    assert kept.tolist() == [7.0]
    assert weights == pytest.approx([1.0, 0.0])
    with pytest.raises(ValueError):
        drop_boundary_states(np.array([1.0]), np.zeros((3, 1)), np.array([True, False]), 0.5)


def test_track_gap_edge_follows_and_closes():
    grid = [0.0, 0.1, 0.2, 0.3]

    def gl(gaps):
        triples = [(lo, hi, hi - lo) for lo, hi in gaps]
        return GapList(gaps=triples, min_width=1.0, hull=(0.0, 100.0))

    lists = [
        gl([(1.0, 2.0), (5.0, 6.0)]),
        gl([(1.1, 2.1)]),
        gl([(1.3, 2.0), (3.0, 4.0)]),
        gl([(6.0, 7.0)]),  # no overlap: track closes here
    ]
    track = track_gap_edge(grid, lists, window=(0.9, 2.2))
    assert track.left[:3] == pytest.approx([1.0, 1.1, 1.3])
    assert track.right[:3] == pytest.approx([2.0, 2.1, 2.0])
    assert track.closed_at == 3
    assert np.isnan(track.left[3])
    assert not track.is_open_throughout
    # quotients: |delta edge| / |delta b|
    assert track.left_quotients[0] == pytest.approx(1.0)
    assert track.right_quotients[1] == pytest.approx(1.0)
    assert np.isnan(track.left_quotients[2])


def test_riesz_projection_agrees_with_eigenfilter():
    rng = np.random.default_rng(3)
    for _ in range(10):
        M = random_hermitian(rng, 18)
        w = np.linalg.eigvalsh(M)
        lo = 0.5 * (w[5] + w[6])
        hi = 0.5 * (w[11] + w[12])
        out = riesz_project(M, (lo, hi), n_quad=512)
        assert out.difference_norm < 1e-6
        assert out.inside.size == 6
        # projector part is idempotent and reproduces the filtered window op
        P = out.projector
        assert np.linalg.norm(P @ P - P, 2) < 1e-6
        assert np.linalg.norm(P @ M @ P - out.filtered, 2) < 1e-5


def test_riesz_rejects_contour_through_spectrum():
    M = np.diag([0.0, 1.0, 2.0]).astype(complex)
    # circle through 0 and 2 passes exactly through eigenvalues 0 and 2
    with pytest.raises(ValueError):
        riesz_project(M, (0.0, 2.0), n_quad=64)


def test_holder_fit_recovers_power_law():
    rng = np.random.default_rng(4)
    deltas = np.array([0.2, 0.1, 0.05, 0.025, 0.0125])
    for alpha, C in ((0.5, 2.0), (1.0, 0.7)):
        dists = C * deltas**alpha * np.exp(rng.normal(scale=1e-3, size=deltas.size))
        fit = holder_fit(deltas, dists)
        assert abs(fit.alpha - alpha) < 0.01
        assert abs(fit.constant - C) < 0.05
        assert fit.residual < 0.01
    # c_star for an exact sqrt law is the constant itself at every delta
    fit = holder_fit(deltas, 2.0 * np.sqrt(deltas))
    assert fit.c_star == pytest.approx(2.0)
    assert fit.c_star_ratio == pytest.approx(1.0)
    with pytest.raises(ValueError):
        holder_fit([0.1, 0.2], [1.0, 2.0])
