import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from malleable25d import checks, convops
from malleable25d.geometry import CameraIntrinsics, DepthField, RfSpec
from malleable25d.rfield import RFieldParams

CAM = CameraIntrinsics(40.0, 40.0, 4.0, 4.0)
seeds = st.integers(0, 2**32 - 1)


def _inst(seed, K=3):
    return checks.random_instance(np.random.default_rng(seed), K)


def test_standard_conv_hand_example():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 2.0
    w[0, 0, 0, 0] = 1.0
    y = convops.conv2d_forward(x, w, RfSpec(), bias=np.array([0.5]))
    # cross-correlation: top-left tap reads the up-left neighbour
    expect = 2 * x[0, 0] + np.pad(x[0, 0], 1)[:3, :3] + 0.5
    np.testing.assert_array_equal(y[0, 0], expect)


@pytest.mark.parametrize("kind", ["standard", "malleable", "depthaware", "hard25d"])
@given(seed=seeds, K=st.sampled_from([1, 3, 5]))
def test_matches_oracle(kind, seed, K):
    inst = _inst(seed, K)
    fast = checks.fast_forward(kind, inst)
    slow = checks.oracle_forward(kind, inst)
    assert fast.shape == slow.shape
    assert np.max(np.abs(fast - slow)) < 1e-10


@given(seed=seeds, K=st.sampled_from([1, 3, 5]), depth=st.floats(0.5, 80.0))
def test_constant_depth_collapse(seed, K, depth):
    inst = _inst(seed, K)
    flat = DepthField(np.full(inst.depth.shape, depth), None, inst.spec.r_down)
    p = convops.MalleableParams(inst.weights, inst.rfield, inst.spec, inst.bias)
    merged = convops.merged_kernel(p)
    ref = convops.conv2d_forward(inst.x, merged, inst.spec, inst.bias)
    np.testing.assert_allclose(convops.malleable_forward(inst.x, flat, inst.cam, p), ref, rtol=0, atol=1e-10)

    hard = convops.hard25d_forward(inst.x, flat, inst.cam, convops.Hard25DParams(inst.weights, inst.spec, inst.bias))
    middle = convops.conv2d_forward(inst.x, inst.weights[K // 2], inst.spec, inst.bias)
    np.testing.assert_allclose(hard, middle, rtol=0, atol=1e-10)

    da = convops.depthaware_forward(inst.x, flat, convops.DepthAwareParams(inst.weights[0], inst.alpha, inst.spec,
                                                                            inst.bias))
    std = convops.conv2d_forward(inst.x, inst.weights[0], inst.spec, inst.bias)
    np.testing.assert_allclose(da, std, rtol=0, atol=1e-10)


def test_hard_bins_half_open():
    d = np.array([-1.5, -0.5000001, -0.5, 0.0, 0.4999, 0.5, 1.4999, 1.5])
    bins = convops.hard25d_bins(d, 3)
    assert bins.argmax(axis=0)[[0, 1, 2, 3, 4, 5, 6]].tolist() == [0, 0, 1, 1, 1, 2, 2]
    assert bins[:, -1].sum() == 0  # d = 1.5 falls outside every bin
    assert np.all(bins.sum(axis=0) <= 1)


@given(seed=seeds)
def test_malleable_gradients(seed):
    inst = _inst(seed, 3)
    r = np.random.default_rng(seed)
    target = checks._target(r, inst)
    for name, analytic, numeric in checks._malleable_groups(inst, target, 1e-5):
        assert checks.group_error(analytic, numeric) < 1e-6, name


@pytest.mark.parametrize("kind", ["standard", "depthaware", "hard25d"])
@given(seed=seeds)
def test_baseline_gradients(kind, seed):
    inst = _inst(seed, 2)
    target = checks._target(np.random.default_rng(seed), inst)
    for name, analytic, numeric in checks._baseline_groups(kind, inst, target, 1e-5):
        assert checks.group_error(analytic, numeric) < 1e-6, name


def test_no_bias_means_no_bias_gradient():
    inst = _inst(3)
    p = convops.MalleableParams(inst.weights, inst.rfield, inst.spec)
    y, cache = convops.malleable_forward(inst.x, inst.depth, inst.cam, p, with_cache=True)
    assert convops.malleable_backward(np.ones_like(y), cache).bias is None


@given(seed=seeds)
def test_kernel_outputs_decompose_forward(seed):
    inst = _inst(seed, 3)
    p = convops.MalleableParams(inst.weights, inst.rfield, inst.spec, inst.bias)
    parts = convops.malleable_kernel_outputs(inst.x, inst.depth, inst.cam, p)
    full = convops.malleable_forward(inst.x, inst.depth, inst.cam, p)
    np.testing.assert_allclose(parts.sum(axis=0) + inst.bias[None, :, None, None], full, rtol=0, atol=1e-10)


def test_duplicate_pretrained_equals_scaled_standard_on_flat_depth():
    r = np.random.default_rng(0)
    w = r.standard_normal((2, 3, 3, 3))
    x = r.standard_normal((1, 3, 6, 6))
    p = convops.duplicate_pretrained(w, 3)
    assert p.rfield.a.tolist() == [-2, -1, 0, 1, 2] and p.introduced_params == 9
    flat = DepthField(np.full((1, 1, 6, 6), 3.0))
    y = convops.malleable_forward(x, flat, CAM, p)
    g = np.exp([-1.0, 0.0, -1.0]) / (1 + 2 * np.exp(-1) + 2 * np.exp(-4))
    ref = convops.conv2d_forward(x, w) * (g.sum() / 3)
    np.testing.assert_allclose(y, ref, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        convops.duplicate_pretrained(w[0], 3)


def test_shape_errors():
    with pytest.raises(ValueError):
        convops.MalleableParams(np.zeros((2, 1, 1, 3, 3)), RFieldParams.init(3))
    with pytest.raises(ValueError):
        convops.DepthAwareParams(np.zeros((1, 1, 3, 3)), alpha=0.0)
    p = convops.MalleableParams(np.zeros((3, 1, 2, 3, 3)), RFieldParams.init(3))
    with pytest.raises(ValueError):
        convops.malleable_forward(np.zeros((1, 3, 5, 5)), DepthField(np.ones((1, 1, 5, 5))), CAM, p)
    with pytest.raises(ValueError):
        convops.malleable_forward(np.zeros((1, 2, 5, 5)), DepthField(np.ones((1, 1, 4, 5))), CAM, p)


@pytest.mark.parametrize("K", range(1, 9))
def test_parameter_overhead(K):
    common = dict(c_in=16, c_out=32, kernel=(3, 3), K=K, out_hw=(20, 20))
    mall = convops.count_params(convops.LayerDescriptor("malleable", **common))
    hard = convops.count_params(convops.LayerDescriptor("hard25d", **common))
    assert mall - hard == 2 * K + 3


def test_flop_overhead_small():
    common = dict(c_in=256, c_out=256, kernel=(3, 3), K=3, out_hw=(64, 64))
    m = convops.estimate_flops(convops.LayerDescriptor("malleable", **common)).total_flops
    h = convops.estimate_flops(convops.LayerDescriptor("hard25d", **common)).total_flops
    assert m > h and (m - h) / h < 1e-3


def test_descriptor_rejects_multi_kernel_standard():
    with pytest.raises(ValueError):
        convops.LayerDescriptor("standard", 1, 1, K=2)
