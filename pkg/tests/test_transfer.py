import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfpipe.core import lab_to_rgb, rgb_to_lab
from lfpipe.correspondence import CorrespondenceSet
from lfpipe.transfer import (
    InsufficientCorrespondences,
    TpsTransform,
    TransferConfig,
    TransferError,
    control_lattice,
    fit_transfer,
    gmm_cost,
    gmm_cost_gradient,
    recolour_image,
    side_condition_projector,
    tps_apply,
)


def _corr(c_t, c_p):
    n = len(c_t)
    z = np.zeros((n, 2))
    return CorrespondenceSet(z, z, c_t, c_p, (1, 1))


def _lab_cloud(n, seed):
    rng = np.random.default_rng(seed)
    return rgb_to_lab(rng.uniform(0.05, 0.9, (n, 3)))


def _random_problem(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(5, 40)), int(rng.integers(4, 12))
    c_t = rng.normal(50, 15, (n, 3))
    c_p = c_t + rng.normal(0, 5, (n, 3))
    cp = rng.normal(50, 20, (m, 3))
    tps = TpsTransform(cp, rng.normal(0, 0.02, (m, 3)), np.eye(3) + rng.normal(0, 0.05, (3, 3)),
                       rng.normal(0, 2, 3))
    h = float(rng.uniform(4, 20))
    lam = float(rng.choice([0.0, 1e-4]))
    return tps, _corr(c_t, c_p), h, lam


def test_gradient_matches_finite_differences():
    worst = 0.0
    for seed in range(100):
        tps, corr, h, lam = _random_problem(seed)
        grad = gmm_cost_gradient(tps, corr, h, lam)
        analytic = np.concatenate([grad.W.ravel(), grad.A.ravel(), grad.t.ravel()])
        numeric = np.empty_like(analytic)
        k = 0
        for name in ("W", "A", "t"):
            arr = getattr(tps, name)
            for idx in np.ndindex(arr.shape):
                eps = 1e-6 * max(1.0, abs(arr[idx]))
                old = arr[idx]
                arr[idx] = old + eps
                fp = gmm_cost(tps, corr, h, lam)
                arr[idx] = old - eps
                fm = gmm_cost(tps, corr, h, lam)
                arr[idx] = old
                numeric[k] = (fp - fm) / (2 * eps)
                k += 1
        worst = max(worst, np.linalg.norm(numeric - analytic) / np.linalg.norm(analytic))
    assert worst < 1e-5


def test_cost_of_perfect_match():
    c = _lab_cloud(20, 0)
    h = 3.0
    # every residual is zero, so each term contributes the Gaussian peak
    expected = -(4 * np.pi * h * h) ** -1.5 / 20
    assert gmm_cost(TpsTransform.identity(c[:4]), _corr(c, c), h) == pytest.approx(expected, rel=1e-12)


def test_cost_rejects_bad_inputs():
    c = _lab_cloud(5, 0)
    tps = TpsTransform.identity(c)
    with pytest.raises(TransferError):
        gmm_cost(tps, _corr(c, c), 0.0)
    with pytest.raises(InsufficientCorrespondences):
        gmm_cost(tps, _corr(c[:0], c[:0]), 1.0)


def test_identity_correspondences_fit_identity():
    c = _lab_cloud(200, 1)
    tps = fit_transfer(_corr(c, c))
    q = _lab_cloud(500, 2)
    assert np.abs(tps(q) - q).max() < 0.5


def test_lightness_shift_is_recovered():
    c = _lab_cloud(300, 3)
    shift = np.array([15.0, 0.0, 0.0])
    tps = fit_transfer(_corr(c, c + shift))
    err = np.linalg.norm(tps(c) - (c + shift), axis=1)
    assert np.median(err) < 1.0
    assert np.percentile(err, 90) < 2.0


def test_affine_map_is_recovered():
    c = _lab_cloud(300, 4)
    A = np.array([[0.9, 0.0, 0.0], [0.05, 1.1, 0.0], [0.0, -0.05, 0.95]])
    t = np.array([4.0, -3.0, 2.0])
    tps = fit_transfer(_corr(c, c @ A.T + t))
    assert np.median(np.linalg.norm(tps(c) - (c @ A.T + t), axis=1)) < 1.0


def test_cost_never_increases_within_a_stage():
    c = _lab_cloud(150, 5)
    rng = np.random.default_rng(5)
    costs = {}
    fit_transfer(_corr(c, c + [8.0, -4.0, 3.0] + rng.normal(0, 1, c.shape)),
                 callback=lambda s, h, f: costs.setdefault(s, []).append(f))
    assert len(costs) == 4
    for vals in costs.values():
        assert np.all(np.diff(vals) <= 1e-12 * np.abs(vals[:-1]))


def test_fitted_weights_satisfy_side_conditions():
    c = _lab_cloud(150, 6)
    tps = fit_transfer(_corr(c, c + np.sin(c / 20.0) * 5))
    W, p = tps.W, tps.control_points
    scale = np.abs(W).max() * len(W) * np.abs(p).max()
    np.testing.assert_allclose(W.sum(axis=0), 0, atol=1e-9 * scale)
    np.testing.assert_allclose(p.T @ W, 0, atol=1e-9 * scale)


def test_too_few_correspondences():
    c = _lab_cloud(49, 0)
    with pytest.raises(InsufficientCorrespondences):
        fit_transfer(_corr(c, c))


@pytest.mark.parametrize("sched", [(), (5.0, 10.0), (3.0, 0.0), (2.0, 2.0)])
def test_schedule_validation(sched):
    with pytest.raises(TransferError):
        TransferConfig(h_schedule=sched)


def test_negative_lambda_rejected():
    with pytest.raises(TransferError):
        TransferConfig(lambda_reg=-1.0)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_projector_properties(seed):
    rng = np.random.default_rng(seed)
    cp = rng.normal(0, 30, (int(rng.integers(5, 30)), 3))
    Q = side_condition_projector(cp)
    np.testing.assert_allclose(Q @ Q, Q, atol=1e-9)
    np.testing.assert_allclose(Q, Q.T, atol=1e-12)
    W = Q @ rng.normal(size=(len(cp), 3))
    np.testing.assert_allclose(W.sum(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(cp.T @ W, 0, atol=1e-7)


def test_affine_part_is_reproduced_exactly():
    # zero kernel weights leave a pure affine map
    cp = control_lattice(_lab_cloud(50, 0), (3, 3, 3))
    A, t = np.diag([1.2, 0.8, 1.0]), np.array([1.0, 2.0, 3.0])
    tps = TpsTransform(cp, np.zeros_like(cp), A, t)
    q = _lab_cloud(10, 1)
    np.testing.assert_allclose(tps_apply(tps, q), q @ A.T + t)
    np.testing.assert_allclose(tps_apply(tps, q[0]), q[0] @ A.T + t)


def test_control_lattice_spans_colours():
    c = _lab_cloud(100, 7)
    cp = control_lattice(c, (4, 5, 6))
    assert cp.shape == (120, 3)
    np.testing.assert_allclose(cp.min(axis=0), c.min(axis=0))
    np.testing.assert_allclose(cp.max(axis=0), c.max(axis=0))


def test_serialisation_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    cp = rng.normal(size=(8, 3))
    tps = TpsTransform(cp, rng.normal(size=(8, 3)), rng.normal(size=(3, 3)), rng.normal(size=3))
    tps.save(tmp_path / "t.json")
    back = TpsTransform.load(tmp_path / "t.json")
    q = rng.normal(50, 10, (20, 3))
    np.testing.assert_array_equal(back(q), tps(q))
    np.testing.assert_array_equal(TpsTransform.from_dict(tps.to_dict()).W, tps.W)


def test_weight_shape_validation():
    with pytest.raises(TransferError):
        TpsTransform(np.zeros((4, 3)), np.zeros((3, 3)))


def test_recolour_identity_and_shift():
    rng = np.random.default_rng(8)
    img = rng.uniform(0.1, 0.8, (16, 16, 3))
    cp = control_lattice(rgb_to_lab(img), (3, 3, 3))
    same, clipped = recolour_image(img, TpsTransform.identity(cp))
    assert clipped == 0
    np.testing.assert_allclose(same, img, atol=1e-9)

    shifted = TpsTransform(cp, np.zeros_like(cp), np.eye(3), [5.0, 0.0, 0.0])
    out, _ = recolour_image(img, shifted)
    expected, _ = lab_to_rgb(rgb_to_lab(img) + [5.0, 0.0, 0.0])
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_recolour_counts_gamut_clipping():
    img = np.full((4, 4, 3), 0.9)
    cp = control_lattice(rgb_to_lab(img), (2, 2, 2))
    out, clipped = recolour_image(img, TpsTransform(cp, np.zeros_like(cp), np.eye(3), [30.0, 0.0, 0.0]))
    assert clipped == 16
    assert out.max() <= 1.0


def test_single_pair_cost_closed_form():
    c = np.array([[50.0, 10.0, -5.0]])
    tps = TpsTransform.identity(c)
    assert gmm_cost(tps, _corr(c, c), 1.0) == pytest.approx(-(4 * np.pi) ** -1.5, rel=1e-12)
    # the rounded literal quoted for this case is a slightly high approximation of -0.0224484
    assert gmm_cost(tps, _corr(c, c), 1.0) == pytest.approx(-0.022467, rel=1e-3)


def test_cost_vanishes_for_far_residuals():
    c = _lab_cloud(10, 0)
    h = 2.0
    far = c + [100 * h, 0.0, 0.0]
    assert abs(gmm_cost(TpsTransform.identity(c[:3]), _corr(c, far), h)) < 1e-12


def _loop_cost(tps, corr, h):
    total = 0.0
    n = corr.n
    for k in range(n):
        phi = tps.A @ corr.c_t[k] + tps.t
        for i, p in enumerate(tps.control_points):
            phi = phi + tps.W[i] * -np.linalg.norm(corr.c_t[k] - p)
        r2 = float(np.sum((phi - corr.c_p[k]) ** 2))
        total -= np.exp(-r2 / (4 * h * h)) / (4 * np.pi * h * h) ** 1.5 / n**2
    return total


@pytest.mark.parametrize("seed", range(5))
def test_cost_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    c_t = _lab_cloud(20, seed)
    c_p = c_t + rng.normal(0, 3, c_t.shape)
    cp = control_lattice(c_t, (2, 2, 2))
    tps = TpsTransform(cp, side_condition_projector(cp) @ rng.normal(0, 0.01, cp.shape),
                       np.eye(3) + rng.normal(0, 0.02, (3, 3)), rng.normal(0, 1, 3))
    assert gmm_cost(tps, _corr(c_t, c_p), 5.0) == pytest.approx(_loop_cost(tps, _corr(c_t, c_p), 5.0), abs=1e-10)


def test_gradient_at_perfect_alignment():
    c = np.array([[40.0, 5.0, 5.0]])
    g = gmm_cost_gradient(TpsTransform.identity(c), _corr(c, c), 1.0)
    np.testing.assert_array_equal(g.t, 0.0)


def test_regulariser_gradient():
    rng = np.random.default_rng(3)
    cp = rng.normal(50, 20, (6, 3))
    tps = TpsTransform(cp, rng.normal(size=(6, 3)))
    # residuals 100 h away switch the data term off
    c = np.array([[0.0, 0.0, 0.0]])
    corr = _corr(c, c + 1e4)
    lam = 0.3
    g = gmm_cost_gradient(tps, corr, 1.0, lam)
    np.testing.assert_allclose(g.W, 2 * lam * tps.kernel_matrix() @ tps.W, atol=1e-12)


def test_exact_interpolation_system():
    # standard TPS linear system with the kernel centred on the data points
    rng = np.random.default_rng(4)
    src = rng.uniform([20, -40, -40], [80, 40, 40], (5, 3))
    dst = src + rng.normal(0, 5, (5, 3))
    K = -np.linalg.norm(src[:, None] - src[None], axis=-1)
    P = np.hstack([np.ones((5, 1)), src])
    M = np.block([[K, P], [P.T, np.zeros((4, 4))]])
    sol = np.linalg.solve(M, np.vstack([dst, np.zeros((4, 3))]))
    W, t, A = sol[:5], sol[5], sol[6:].T
    tps = TpsTransform(src, W, A, t)
    np.testing.assert_allclose(tps(src), dst, atol=1e-6)
    np.testing.assert_allclose(side_condition_projector(src) @ W, W, atol=1e-9)


def test_diagonal_affine_fixture():
    c = _lab_cloud(300, 9)
    A0 = np.diag([1.1, 0.9, 1.0])
    tps = fit_transfer(_corr(c, c @ A0.T))
    assert np.abs(tps(c) - c @ A0.T).max() < 2.0


def test_cost_permutation_invariant():
    tps, corr, h, lam = _random_problem(7)
    perm = np.random.default_rng(0).permutation(corr.n)
    shuffled = _corr(corr.c_t[perm], corr.c_p[perm])
    assert gmm_cost(tps, shuffled, h, lam) == pytest.approx(gmm_cost(tps, corr, h, lam), rel=1e-12)


def test_cost_translation_consistent():
    tps, corr, h, _ = _random_problem(8)
    off = np.array([7.0, -3.0, 12.0])
    # phi'(c) = phi(c - off) + off keeps every residual, with control points moved alongside
    moved = TpsTransform(tps.control_points + off, tps.W, tps.A, tps.t + off - tps.A @ off)
    a = gmm_cost(tps, corr, h)
    b = gmm_cost(moved, _corr(corr.c_t + off, corr.c_p + off), h)
    assert b == pytest.approx(a, rel=1e-10)


def test_lattice_matches_direct_evaluation():
    rng = np.random.default_rng(10)
    img = rng.uniform(0.1, 0.6, (24, 24, 3))
    lab = rgb_to_lab(img)
    cp = control_lattice(lab, (3, 3, 3))
    tps = TpsTransform(cp, side_condition_projector(cp) @ rng.normal(0, 0.01, cp.shape),
                       np.eye(3) + 0.03 * rng.normal(size=(3, 3)), [2.0, -1.0, 1.0])
    out, clipped = recolour_image(img, tps)
    assert clipped == 0
    assert np.linalg.norm(rgb_to_lab(out) - tps(lab), axis=-1).max() < 0.5


def test_lightness_translation_through_image():
    img = np.random.default_rng(11).uniform(0.05, 0.5, (12, 12, 3))
    cp = control_lattice(rgb_to_lab(img), (2, 2, 2))
    out, clipped = recolour_image(img, TpsTransform(cp, np.zeros_like(cp), np.eye(3), [10.0, 0.0, 0.0]))
    assert clipped == 0
    np.testing.assert_allclose(rgb_to_lab(out)[..., 0] - rgb_to_lab(img)[..., 0], 10.0, atol=0.1)


def test_recolouring_reduces_histogram_distance():
    from lfpipe.metrics import hist_chi2

    rng = np.random.default_rng(12)
    palette = rng.uniform(0.05, 0.8, (32, 32, 3))
    target = np.clip(palette * [0.7, 0.9, 1.1], 0, 1)
    lab_t, lab_p = rgb_to_lab(target), rgb_to_lab(palette)
    before = hist_chi2(lab_t, lab_p)
    assert before > 0.01
    tps = fit_transfer(_corr(lab_t.reshape(-1, 3)[::8], lab_p.reshape(-1, 3)[::8]))
    out, _ = recolour_image(target, tps)
    assert hist_chi2(rgb_to_lab(out), lab_p) < before
