import numpy as np
import pytest

from distill import (OPERATORS, AttentionParams, HarmonizeParams, SEParams, build_params, check_param_names,
                     feature_harmonize,
                     feature_propagation, mtinet_distill, naive_distill, naive_harmonize, naive_propagation,
                     naive_se, padnet_distill, random_attention_params, random_harmonize_params, random_se_params,
                     run_distill_check, se_gate)
from errors import DimensionError, DomainError


def test_zero_cross_features_leave_a_task_unchanged(rng):
    stack = rng.standard_normal((3, 2, 4, 4))
    stack[1:] = 0.0
    out = padnet_distill(stack, random_attention_params(rng, 3, 2))
    np.testing.assert_array_equal(out[0], stack[0])


def test_zero_weights_give_half_mask():
    stack = np.arange(2 * 1 * 3 * 3, dtype=np.float64).reshape(2, 1, 3, 3)
    params = AttentionParams(np.zeros((2, 2, 1, 1)), np.zeros((2, 2, 1)))
    out = padnet_distill(stack, params)
    np.testing.assert_allclose(out[0], stack[0] + 0.5 * stack[1], atol=1e-15)
    np.testing.assert_allclose(out[1], stack[1] + 0.5 * stack[0], atol=1e-15)


@pytest.mark.parametrize('kernel_size', [1, 3])
def test_padnet_matches_per_pixel_loop(rng, kernel_size):
    for _ in range(5):
        n, c = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        stack = rng.standard_normal((n, c, h, w))
        params = random_attention_params(rng, n, c, kernel_size)
        np.testing.assert_allclose(padnet_distill(stack, params), naive_distill(stack, params), rtol=0, atol=1e-12)


def test_padnet_residual_structure(rng):
    stack = rng.standard_normal((3, 2, 4, 4))
    params = random_attention_params(rng, 3, 2)
    delta = rng.standard_normal((2, 4, 4))
    bumped = stack.copy()
    bumped[1] += delta
    diff = padnet_distill(bumped, params)[1] - padnet_distill(stack, params)[1]
    np.testing.assert_allclose(diff, delta, atol=1e-12)


def test_padnet_rejects_value_maps_and_bad_shapes(rng):
    with pytest.raises(DomainError):
        padnet_distill(rng.standard_normal((2, 2, 3, 3)), random_attention_params(rng, 2, 2, with_values=True))
    with pytest.raises(DimensionError):
        padnet_distill(rng.standard_normal((3, 2, 3, 3)), random_attention_params(rng, 2, 2))
    with pytest.raises(DimensionError):
        AttentionParams(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 3)))


def test_mtinet_with_identity_values_reduces_to_padnet(rng):
    n, c = 3, 2
    stack = rng.standard_normal((n, c, 4, 4))
    base = random_attention_params(rng, n, c)
    eye = np.broadcast_to(np.eye(c), (n, n, c, c)).copy()
    multi = AttentionParams(base.weight, base.bias, eye, np.zeros((n, n, c)))
    np.testing.assert_allclose(mtinet_distill([stack], [multi])[0], padnet_distill(stack, base), atol=1e-12)


def test_mtinet_scales_are_independent(rng):
    stacks = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 2, 2))]
    params = [random_attention_params(rng, 2, 3, with_values=True) for _ in range(2)]
    both = mtinet_distill(stacks, params)
    for s in range(2):
        np.testing.assert_array_equal(both[s], mtinet_distill([stacks[s]], [params[s]])[0])
        np.testing.assert_allclose(both[s], naive_distill(stacks[s], params[s]), atol=1e-12)
    with pytest.raises(DimensionError):
        mtinet_distill(stacks, params[:1])


def test_masks_lie_strictly_inside_unit_interval(rng):
    # unit cross features expose the mask itself
    stack = np.ones((2, 2, 3, 3))
    stack[0] = 0.0
    params = random_attention_params(rng, 2, 2)
    mask = padnet_distill(stack, params)[0]
    assert np.all((mask > 0) & (mask < 1))


def test_harmonize_equal_logits_give_uniform_attention(rng):
    n, c = 4, 2
    params = HarmonizeParams(np.zeros((n * c, n * c)), np.zeros(n * c), rng.standard_normal((c, n * c)),
                             rng.standard_normal(c))
    res = feature_harmonize(rng.standard_normal((n, c, 3, 3)), params)
    np.testing.assert_allclose(res.attention, 0.25, atol=1e-15)


def test_harmonize_single_task(rng):
    stack = rng.standard_normal((1, 3, 2, 2))
    params = random_harmonize_params(rng, 1, 3)
    res = feature_harmonize(stack, params)
    np.testing.assert_array_equal(res.attention, np.ones((1, 3, 2, 2)))
    expected = np.einsum('oc,chw->ohw', params.reduce_weight, stack[0]) + params.reduce_bias[:, None, None]
    np.testing.assert_allclose(res.shared, expected, atol=1e-12)


def test_harmonize_attention_normalized_and_matches_loop(rng):
    stack = rng.standard_normal((3, 2, 4, 4))
    params = random_harmonize_params(rng, 3, 2)
    res = feature_harmonize(stack, params)
    np.testing.assert_allclose(res.attention.sum(axis=0), 1.0, atol=1e-12)
    ref = naive_harmonize(stack, params)
    np.testing.assert_allclose(res.shared, ref.shared, atol=1e-12)
    np.testing.assert_allclose(res.attention, ref.attention, atol=1e-12)


def test_se_zero_mlp_halves_every_channel(rng):
    feature = rng.standard_normal((3, 4, 4))
    res = se_gate(feature, SEParams(np.zeros((3, 3))))
    np.testing.assert_array_equal(res.gates, [0.5, 0.5, 0.5])
    np.testing.assert_allclose(res.output, feature / 2, atol=1e-15)


def test_se_saturated_gate_passes_input(rng):
    feature = rng.standard_normal((2, 3, 3))
    res = se_gate(feature, SEParams(np.zeros((2, 2)), np.full(2, 60.0)))
    np.testing.assert_allclose(res.output, feature, atol=1e-15)


def test_se_pools_constant_map_to_its_value():
    feature = np.full((2, 3, 3), 0.7)
    res = se_gate(feature, SEParams(np.eye(2)))
    np.testing.assert_allclose(res.gates, 1 / (1 + np.exp(-0.7)), atol=1e-15)


def test_se_bottleneck_matches_loop(rng):
    feature = rng.standard_normal((4, 3, 3))
    params = random_se_params(rng, 4, hidden=2)
    res, ref = se_gate(feature, params), naive_se(feature, params)
    np.testing.assert_allclose(res.output, ref.output, atol=1e-12)
    assert np.all((res.gates > 0) & (res.gates < 1))
    with pytest.raises(DimensionError):
        se_gate(rng.standard_normal((3, 3, 3)), params)


def test_feature_propagation_matches_loop(rng):
    stack = rng.standard_normal((2, 3, 4, 4))
    harmonize = random_harmonize_params(rng, 2, 3)
    gates = [random_se_params(rng, 3, hidden=1) for _ in range(2)]
    np.testing.assert_allclose(feature_propagation(stack, harmonize, gates),
                               naive_propagation(stack, harmonize, gates), atol=1e-12)


@pytest.mark.parametrize('operator', OPERATORS)
def test_distill_check_agrees_with_loops(operator):
    rng = np.random.default_rng(1)
    scales = 2 if operator == 'mtinet' else 1
    features = [rng.standard_normal((3, 2, 4, 4)) for _ in range(scales)]
    params = build_params(operator, 3, 2, scales, rng)
    result = run_distill_check(operator, features, params)
    assert result['max_abs_error'] <= 1e-12
    assert len(result['outputs']) >= 1


def test_build_params_from_loaded_arrays(rng):
    loaded = {'weight': np.zeros((2, 2, 1, 1)), 'bias': np.zeros((2, 2, 1))}
    params = build_params('padnet', 2, 1, 1, rng, loaded=loaded)
    stack = np.ones((2, 1, 2, 2))
    np.testing.assert_allclose(padnet_distill(stack, params[0]), 1.5 * stack, atol=1e-15)
    with pytest.raises(DomainError):
        build_params('jtrl', 2, 1, 1, rng)


def test_param_names_checked_per_operator(rng):
    check_param_names('mtinet', ['weight', 'bias', 'value_weight'])
    check_param_names('fpm', ['mix_weight', 'mix_bias', 'reduce_weight', 'reduce_bias', 'gate_weight1'])
    with pytest.raises(DomainError, match="wieght"):
        check_param_names('padnet', ['wieght', 'bias'])
    with pytest.raises(DomainError, match="missing se"):
        check_param_names('se', ['bias1'])
    with pytest.raises(DomainError, match="value_weight"):
        check_param_names('padnet', ['weight', 'bias', 'value_weight'])
    with pytest.raises(DomainError, match="wieght"):
        build_params('padnet', 2, 1, 1, rng, loaded={'wieght': np.zeros((2, 2, 1, 1))})
