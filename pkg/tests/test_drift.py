"""Drift-field geometry against the loop oracle, the worked examples, and the
mass-balance / scale-equivariance / gradient properties."""

from __future__ import annotations

import numpy as np
import pytest

from driftkit.autodiff import Tensor, backward
from driftkit.drift import (DriftConfig, DriftConfigError, HypothesisBatch,
                            MULTISCALE_TEMPERATURES, ReferencePool,
                            aggregate_and_target, balanced_coefficients,
                            build_reference_pool, compute_drift_field, fixed_point_loss,
                            drift_loss, global_scale, pairwise_distances,
                            per_scale_force, rms_normalize, symmetric_affinity)

from .oracles import drift_field_loops, finite_diff


def random_instance(rng, b=None, g=None, u_extra=None, s=None):
    b = b or int(rng.integers(1, 4))
    g = g or int(rng.integers(1, 5))
    c_p = u_extra or int(rng.integers(1, 3))
    s = s or int(rng.integers(1, 5))
    hyp = rng.uniform(-2, 2, size=(b, g, s))
    pos = rng.uniform(-2, 2, size=(b, c_p, s))
    batch = HypothesisBatch.from_values(Tensor(hyp, requires_grad=True))
    pool = build_reference_pool(batch, pos)
    return batch, pool


# -- pairwise distances ---------------------------------------------------


def test_distance_three_four_five():
    det = np.array([[[0.0, 0.0]]])
    refs = np.array([[[3.0, 4.0]]])
    assert pairwise_distances(det, refs)[0, 0, 0] == 5.0


def test_distance_zero_for_identical():
    det = np.array([[[1.5, -2.0, 0.25]]])
    assert pairwise_distances(det, det)[0, 0, 0] == 0.0


def test_distances_match_loop_oracle():
    rng = np.random.default_rng(11)
    det = rng.normal(size=(2, 3, 4))
    refs = rng.normal(size=(2, 5, 4))
    d = pairwise_distances(det, refs)
    expected = np.zeros((2, 3, 5))
    for i in range(2):
        for r in range(3):
            for k in range(5):
                expected[i, r, k] = np.sqrt(((det[i, r] - refs[i, k]) ** 2).sum())
    np.testing.assert_allclose(d, expected, atol=1e-12, rtol=0)


def test_distance_shape_mismatch():
    with pytest.raises(DriftConfigError):
        pairwise_distances(np.zeros((1, 2, 3)), np.zeros((2, 2, 3)))


# -- global scale ---------------------------------------------------------


def test_global_scale_uniform_mean():
    d = np.array([[[1.0, 2.0, 3.0]]])  # B=1, G=1, U=3
    w = np.ones((1, 3))
    assert global_scale(d, w, 1e-6) == 2.0


def test_global_scale_floor_active():
    d = np.zeros((1, 2, 3))
    w = np.ones((1, 3))
    assert global_scale(d, w, 1e-6) == 1e-6


def test_global_scale_weighted():
    d = np.array([[[1.0, 3.0]]])
    w = np.array([[1.0, 3.0]])
    assert global_scale(d, w, 1e-6) == pytest.approx(2.5, abs=0)


def test_global_scale_weight_counted_once_per_reference():
    # G=2 hypotheses share the same per-(i, u) weights
    d = np.array([[[1.0, 3.0], [5.0, 7.0]]])
    w = np.array([[2.0, 2.0]])
    expected = (1 + 3 + 5 + 7) * 2.0 / (2 * 4.0)
    assert global_scale(d, w, 1e-6) == pytest.approx(expected, abs=0)


def test_global_scale_zero_weight_rejected():
    with pytest.raises(DriftConfigError):
        global_scale(np.ones((1, 1, 2)), np.zeros((1, 2)), 1e-6)


# -- symmetric affinity ---------------------------------------------------


def test_affinity_degenerate_single_pair_is_one():
    d = np.array([[[4.2]]])
    w = np.ones((1, 1))
    a = symmetric_affinity(d, 1.0, 0.2, w)
    assert a[0, 0, 0] == 1.0


def test_affinity_equal_distances_gives_half():
    d = np.full((1, 2, 2), 3.0)
    w = np.ones((1, 2))
    a = symmetric_affinity(d, 1.0, 0.5, w)
    np.testing.assert_allclose(a, 0.5, atol=1e-15, rtol=0)


def test_affinity_matches_loop_oracle():
    rng = np.random.default_rng(5)
    batch, pool = random_instance(rng)
    d = pairwise_distances(batch.detached, pool.refs)
    scale = global_scale(d, pool.weights, 1e-6)
    for temp in (0.05, 0.2, 1.0):
        a = symmetric_affinity(d, scale, temp, pool.weights)
        oracle = drift_field_loops(batch.detached, pool.refs, pool.weights,
                                   pool.negative_indices, pool.positive_indices,
                                   (temp,), 1e-6, 1e-6)
        np.testing.assert_allclose(a, oracle["affinities"][temp], atol=1e-12, rtol=0)


# -- balanced coefficients ------------------------------------------------


def test_coefficients_two_element_identity():
    a_self, a_pos = 0.3, 0.8
    aff = np.array([[[a_self, a_pos]]])
    alpha = balanced_coefficients(aff, np.array([0]), np.array([1]))
    np.testing.assert_allclose(alpha[0, 0], [-a_self * a_pos, a_pos * a_self],
                               atol=0, rtol=0)
    assert alpha.sum() == 0.0


def test_coefficients_zero_side_gives_zero():
    aff = np.array([[[0.0, 0.0, 0.7]]])
    alpha = balanced_coefficients(aff, np.array([0, 1]), np.array([2]))
    np.testing.assert_array_equal(alpha, np.zeros_like(alpha))


def test_coefficients_empty_positive_side_rejected():
    with pytest.raises(DriftConfigError):
        balanced_coefficients(np.ones((1, 1, 2)), np.array([0, 1]), np.array([], dtype=int))


def test_mass_balance_and_oracle_on_random_affinities():
    rng = np.random.default_rng(17)
    for _ in range(25):
        g, c_p = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        aff = rng.uniform(0, 1, size=(2, g, g + c_p))
        neg, pos = np.arange(g), np.arange(g, g + c_p)
        alpha = balanced_coefficients(aff, neg, pos)
        residual = alpha[:, :, neg].sum(axis=2) + alpha[:, :, pos].sum(axis=2)
        assert np.max(np.abs(residual)) < 1e-12


# -- forces and normalization ---------------------------------------------


def test_force_zero_when_reference_coincides():
    det = np.array([[[1.0, 2.0]]])
    refs = det.copy()
    alpha = np.array([[[0.9]]])
    f = per_scale_force(alpha, refs, det, 0.5)
    np.testing.assert_array_equal(f, np.zeros((1, 1, 2)))


def test_force_zero_for_zero_coefficients():
    rng = np.random.default_rng(2)
    det = rng.normal(size=(1, 2, 3))
    refs = rng.normal(size=(1, 4, 3))
    f = per_scale_force(np.zeros((1, 2, 4)), refs, det, 1.0)
    np.testing.assert_array_equal(f, np.zeros((1, 2, 3)))


def test_force_matches_loop_oracle():
    rng = np.random.default_rng(23)
    batch, pool = random_instance(rng)
    config = DriftConfig(hypothesis_count=batch.values.shape[1])
    field = compute_drift_field(batch.detached, pool, config)
    oracle = drift_field_loops(batch.detached, pool.refs, pool.weights,
                               pool.negative_indices, pool.positive_indices,
                               config.temperatures, config.scale_floor,
                               config.force_floor)
    np.testing.assert_allclose(field.forces[0.2], oracle["forces"][0.2],
                               atol=1e-12, rtol=0)


def test_rms_normalize_zero_input_stays_zero():
    f = np.zeros((2, 3, 4))
    np.testing.assert_array_equal(rms_normalize(f, 1e-6), f)


def test_rms_normalize_equal_rows_near_unit():
    c = 50.0  # row norm much larger than sqrt(floor)
    f = np.zeros((1, 2, 2))
    f[:, :, 0] = c
    eps = 1e-6
    out = rms_normalize(f, eps)
    norms = np.sqrt(np.square(out).sum(axis=-1))
    # first-order bound plus float rounding slack
    np.testing.assert_allclose(norms, 1.0, atol=eps / (2 * c * c) + 1e-15, rtol=0)


def test_rms_normalize_mean_square_identity():
    rng = np.random.default_rng(9)
    f = rng.normal(size=(3, 4, 5))
    eps = 1e-6
    out = rms_normalize(f, eps)
    m = np.square(f).sum(axis=-1).mean()
    got = np.square(out).sum(axis=-1).mean()
    np.testing.assert_allclose(got, m / (m + eps), rtol=1e-12)


# -- aggregation and target ------------------------------------------------


def test_aggregate_single_temperature_passthrough():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(1, 2, 3))
    det = rng.normal(size=(1, 2, 3))
    v, target = aggregate_and_target([f], det, 2.0)
    np.testing.assert_array_equal(v, f)
    np.testing.assert_allclose(target, det / 2.0 + f, rtol=0, atol=0)


def test_zero_drift_target_is_scaled_hypotheses():
    det = np.array([[[2.0, 4.0]]])
    v, target = aggregate_and_target([np.zeros((1, 1, 2))], det, 2.0)
    np.testing.assert_array_equal(target, det / 2.0)


def test_aggregate_two_temperatures_sum():
    f1 = np.full((1, 1, 2), 1.0)
    f2 = np.full((1, 1, 2), 0.25)
    v, _ = aggregate_and_target([f1, f2], np.zeros((1, 1, 2)), 1.0)
    np.testing.assert_array_equal(v, f1 + f2)


# -- the regression loss ----------------------------------------------------


def test_loss_zero_when_target_equals_prediction():
    det = np.array([[[1.0, -1.0]]])
    values = Tensor(det, requires_grad=True)
    target = det / 2.0  # V = 0 at scale 2
    loss = fixed_point_loss(values, target, 2.0)
    assert loss.item() == 0.0


def test_loss_constant_field_squares():
    det = np.ones((2, 2, 3))
    v = 0.37
    target = det / 1.0 + v
    loss = fixed_point_loss(Tensor(det, requires_grad=True), target, 1.0)
    assert loss.item() == pytest.approx(v * v, rel=1e-15)


def test_forward_loss_equals_mean_squared_drift():
    rng = np.random.default_rng(31)
    for _ in range(20):
        batch, pool = random_instance(rng)
        config = DriftConfig(hypothesis_count=batch.values.shape[1],
                             temperatures=MULTISCALE_TEMPERATURES)
        field = compute_drift_field(batch.detached, pool, config)
        loss = fixed_point_loss(batch.values, field.target, field.scale)
        assert abs(loss.item() - np.mean(np.square(field.aggregate))) < 1e-10


def test_loss_gradient_matches_finite_differences_with_fixed_target():
    rng = np.random.default_rng(13)
    batch, pool = random_instance(rng, b=2, g=3, s=4)
    config = DriftConfig(hypothesis_count=3)
    field = compute_drift_field(batch.detached, pool, config)
    loss = fixed_point_loss(batch.values, field.target, field.scale)
    grads = backward(loss)
    analytic = grads[batch.values]

    def fd_target(arr):
        return fixed_point_loss(Tensor(arr), field.target, field.scale).item()

    numeric = finite_diff(fd_target, batch.detached.copy())
    denom = np.maximum(np.abs(numeric), 1e-8)
    assert np.max(np.abs(analytic - numeric) / denom) < 1e-4


def test_loss_shape_mismatch_rejected():
    with pytest.raises(DriftConfigError):
        fixed_point_loss(Tensor(np.zeros((1, 1, 2))), np.zeros((1, 1, 3)), 1.0)
    with pytest.raises(DriftConfigError):
        fixed_point_loss(Tensor(np.zeros((1, 1, 2))), np.zeros((1, 1, 2)), 1.0, mode="bogus")


# -- full pipeline vs oracle -----------------------------------------------


def test_pipeline_matches_loop_oracle_100_instances():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(100):
        b, g, s = (int(rng.integers(1, 7)) for _ in range(3))
        c_p = int(rng.integers(1, max(2, 7 - g)))
        hyp = rng.uniform(-2, 2, size=(b, g, s))
        pos = rng.uniform(-2, 2, size=(b, c_p, s))
        batch = HypothesisBatch.from_values(Tensor(hyp, requires_grad=True))
        pool = build_reference_pool(batch, pos)
        config = DriftConfig(hypothesis_count=g, temperatures=MULTISCALE_TEMPERATURES)
        field = compute_drift_field(batch.detached, pool, config)
        loss = fixed_point_loss(batch.values, field.target, field.scale)
        oracle = drift_field_loops(hyp, pool.refs, pool.weights,
                                   pool.negative_indices, pool.positive_indices,
                                   config.temperatures, config.scale_floor,
                                   config.force_floor)
        worst = max(worst, abs(field.scale - oracle["scale"]))
        worst = max(worst, np.max(np.abs(field.distances - oracle["distances"])))
        for t in config.temperatures:
            worst = max(worst, np.max(np.abs(field.affinities[t] - oracle["affinities"][t])))
            worst = max(worst, np.max(np.abs(field.coefficients[t] - oracle["coefficients"][t])))
            worst = max(worst, np.max(np.abs(field.forces[t] - oracle["forces"][t])))
        worst = max(worst, np.max(np.abs(field.aggregate - oracle["aggregate"])))
        worst = max(worst, np.max(np.abs(field.target - oracle["target"])))
        worst = max(worst, abs(loss.item() - oracle["loss"]))
    assert worst < 1e-10


def test_mass_balance_through_pipeline():
    rng = np.random.default_rng(77)
    for _ in range(20):
        batch, pool = random_instance(rng)
        config = DriftConfig(hypothesis_count=batch.values.shape[1],
                             temperatures=(0.05, 0.2))
        field = compute_drift_field(batch.detached, pool, config)
        for alpha in field.coefficients.values():
            residual = (alpha[:, :, pool.negative_indices].sum(axis=2)
                        + alpha[:, :, pool.positive_indices].sum(axis=2))
            assert np.max(np.abs(residual)) < 1e-9


def test_softmax_axis_sums_through_pipeline():
    rng = np.random.default_rng(19)
    batch, pool = random_instance(rng, b=2, g=3, s=4)
    d = pairwise_distances(batch.detached, pool.refs)
    scale = global_scale(d, pool.weights, 1e-6)
    logits = -(d / scale) / 0.2
    shifted_u = logits - logits.max(axis=2, keepdims=True)
    p_u = np.exp(shifted_u) / np.exp(shifted_u).sum(axis=2, keepdims=True)
    shifted_r = logits - logits.max(axis=1, keepdims=True)
    p_r = np.exp(shifted_r) / np.exp(shifted_r).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(p_u.sum(axis=2), 1.0, atol=1e-12, rtol=0)
    np.testing.assert_allclose(p_r.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_scale_equivariance_of_normalized_geometry():
    rng = np.random.default_rng(41)
    batch, pool = random_instance(rng, b=2, g=3, s=4)
    config = DriftConfig(hypothesis_count=3, temperatures=(0.2,))
    base = compute_drift_field(batch.detached, pool, config)
    c = 3.7
    scaled_batch = HypothesisBatch.from_values(Tensor(batch.detached * c,
                                                      requires_grad=True))
    scaled_pool = ReferencePool(refs=pool.refs * c, weights=pool.weights,
                                negative_indices=pool.negative_indices,
                                positive_indices=pool.positive_indices)
    scaled = compute_drift_field(scaled_batch.detached, scaled_pool, config)
    assert scaled.scale == pytest.approx(c * base.scale, rel=1e-12)
    np.testing.assert_allclose(scaled.affinities[0.2], base.affinities[0.2],
                               atol=1e-9, rtol=0)
    np.testing.assert_allclose(scaled.coefficients[0.2], base.coefficients[0.2],
                               atol=1e-9, rtol=0)


def test_equilibrium_field_statistically_symmetric():
    """Hypotheses resampled from the expert distribution see a drift whose
    magnitude does not depend on which sample plays which role."""
    rng = np.random.default_rng(4242)
    g, s = 4, 6
    config = DriftConfig(hypothesis_count=g, positive_count=g)

    def mixture(n):
        centers = np.where(rng.random((n, 1)) < 0.5, -0.6, 0.6)
        return centers + rng.normal(scale=0.15, size=(n, s))

    stats_a, stats_b = [], []
    for _ in range(200):
        a = mixture(g)[None, :, :]
        b = mixture(g)[None, :, :]
        for hyp, pos, sink in ((a, b, stats_a), (b, a, stats_b)):
            batch = HypothesisBatch.from_values(Tensor(hyp))
            pool = build_reference_pool(batch, pos)
            field = compute_drift_field(batch.detached, pool, config)
            sink.append(np.sqrt(np.square(field.aggregate).sum(axis=-1)).mean())
    mean_a, mean_b = np.mean(stats_a), np.mean(stats_b)
    se = np.sqrt(np.var(stats_a, ddof=1) / len(stats_a)
                 + np.var(stats_b, ddof=1) / len(stats_b))
    assert abs(mean_a - mean_b) < 2.0 * se


# -- step-wise mode ---------------------------------------------------------


def test_step_wise_loss_matches_manual_slices():
    rng = np.random.default_rng(8)
    b, g, horizon, d_a = 2, 3, 4, 2
    hyp = rng.uniform(-1, 1, size=(b, g, horizon * d_a))
    pos = rng.uniform(-1, 1, size=(b, 1, horizon * d_a))
    batch = HypothesisBatch.from_values(Tensor(hyp, requires_grad=True))
    config = DriftConfig(hypothesis_count=g, loss_mode="step_wise")
    loss, fields = drift_loss(batch, pos, config, slice_width=d_a)
    assert len(fields) == horizon

    chunk_cfg = DriftConfig(hypothesis_count=g, loss_mode="chunk")
    manual = 0.0
    for h in range(horizon):
        lo, hi = h * d_a, (h + 1) * d_a
        sl = HypothesisBatch.from_values(Tensor(hyp[:, :, lo:hi], requires_grad=True))
        pool = build_reference_pool(sl, pos[:, :, lo:hi])
        fld = compute_drift_field(sl.detached, pool, chunk_cfg)
        manual += fixed_point_loss(sl.values, fld.target, fld.scale).item()
    assert loss.item() == pytest.approx(manual / horizon, rel=1e-12)


def test_step_wise_requires_slice_width():
    rng = np.random.default_rng(8)
    batch = HypothesisBatch.from_values(Tensor(rng.normal(size=(1, 2, 4))))
    config = DriftConfig(hypothesis_count=2, loss_mode="step_wise")
    with pytest.raises(DriftConfigError):
        drift_loss(batch, rng.normal(size=(1, 1, 4)), config)


def test_config_validation():
    with pytest.raises(DriftConfigError):
        DriftConfig(hypothesis_count=0)
    with pytest.raises(DriftConfigError):
        DriftConfig(temperatures=())
    with pytest.raises(DriftConfigError):
        DriftConfig(temperatures=(0.2, 0.2))
    with pytest.raises(DriftConfigError):
        DriftConfig(positive_count=0)
    with pytest.raises(DriftConfigError):
        DriftConfig(loss_mode="other")
