"""Backbone/adapter/head forward passes vs hand arithmetic and FD oracles."""

import numpy as np
import pytest

from qkdcil.errors import ConfigError, StateError
from qkdcil.network import (
    AdapterStack,
    Backbone,
    BackboneBlock,
    TaskHead,
    adapter_backward,
    adapter_forward,
    adapter_parameter_count,
    backbone_forward,
    forward_with_cache,
    gelu,
    gelu_prime,
    head_forward,
    head_parameter_count,
    init_adapter,
    init_backbone,
    init_head,
    require_unfrozen,
)


def test_gelu_prime_matches_finite_differences():
    z = np.linspace(-4, 4, 41)
    h = 1e-6
    fd = (gelu(z + h) - gelu(z - h)) / (2 * h)
    np.testing.assert_allclose(gelu_prime(z), fd, atol=1e-8)


def test_backbone_is_frozen():
    bb = init_backbone(input_dim=8, width=8, num_blocks=2, seed=0)
    with pytest.raises(ValueError):
        bb.blocks[0].weight[0, 0] = 1.0
    with pytest.raises(ValueError):
        bb.input_weight[0, 0] = 1.0


def test_backbone_seeding():
    a = init_backbone(input_dim=8, width=8, num_blocks=2, seed=5)
    b = init_backbone(input_dim=8, width=8, num_blocks=2, seed=5)
    c = init_backbone(input_dim=8, width=8, num_blocks=2, seed=6)
    np.testing.assert_array_equal(a.blocks[1].weight, b.blocks[1].weight)
    assert not np.array_equal(a.blocks[1].weight, c.blocks[1].weight)


def test_identity_backbone_passthrough():
    bb = init_backbone(input_dim=6, width=6, num_blocks=2, seed=0, mode="identity")
    x = np.arange(6.0)
    np.testing.assert_array_equal(backbone_forward(bb, x), x)
    with pytest.raises(ConfigError):
        init_backbone(input_dim=6, width=8, num_blocks=2, seed=0, mode="identity")
    with pytest.raises(ConfigError):
        init_backbone(input_dim=6, width=6, num_blocks=2, seed=0, mode="conv")


def test_adapter_forward_zero_down_is_silent():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(5)
    mlp = lambda v: 2.0 * v
    out = adapter_forward(x, mlp, np.zeros((5, 2)), rng.standard_normal((2, 5)))
    np.testing.assert_array_equal(out, 2.0 * x)


def test_adapter_forward_relu_kills_negative_branch():
    x = np.ones(4)
    w_down = -np.ones((4, 2))  # branch pre-activation strictly negative
    w_up = np.ones((2, 4))
    out = adapter_forward(x, lambda v: v, w_down, w_up)
    np.testing.assert_array_equal(out, x)


def test_adapter_forward_projector_case():
    # identity MLP, orthonormal W_down = [e1 e2], W_up = W_down^T, x >= 0:
    # output must be x + P x with P the projector onto span(e1, e2)
    w_down = np.zeros((4, 2))
    w_down[0, 0] = 1.0
    w_down[1, 1] = 1.0
    w_up = w_down.T.copy()
    x = np.array([0.5, 2.0, 3.0, 1.0])
    out = adapter_forward(x, lambda v: v, w_down, w_up)
    projected = np.array([0.5, 2.0, 0.0, 0.0])
    np.testing.assert_allclose(out, x + projected, atol=1e-15)


def test_adapter_forward_shape_mismatch():
    with pytest.raises(ValueError):
        adapter_forward(np.ones(3), lambda v: v, np.zeros((4, 2)), np.zeros((2, 4)))


def test_backbone_forward_hand_case():
    # d=4, one block, hand-set weights: out = gelu(x @ I @ W + b)
    w = np.array(
        [
            [0.5, -0.2, 0.0, 0.1],
            [0.3, 0.4, -0.5, 0.2],
            [-0.1, 0.6, 0.2, -0.3],
            [0.0, 0.1, 0.7, 0.4],
        ]
    )
    b = np.array([0.1, -0.2, 0.3, 0.0])
    bb = Backbone(
        input_weight=np.eye(4),
        blocks=(BackboneBlock(weight=w, bias=b),),
        mode="mlp",
        input_dim=4,
        width=4,
        seed=0,
    )
    x = np.array([1.0, -0.5, 0.25, 2.0])
    pre = x @ w + b
    expect = 0.5 * pre * (1 + np.tanh(np.sqrt(2 / np.pi) * (pre + 0.044715 * pre**3)))
    np.testing.assert_allclose(backbone_forward(bb, x), expect, atol=1e-15)


def test_backbone_none_vs_zero_adapters():
    bb = init_backbone(input_dim=8, width=8, num_blocks=2, seed=1)
    stack = init_adapter(width=8, r_adapter=3, num_blocks=2, seed=2, task_id=0)
    rng = np.random.default_rng(3)
    x = rng.standard_normal(8)
    np.testing.assert_array_equal(
        backbone_forward(bb, x), backbone_forward(bb, x, stack)
    )  # fresh adapters have w_up = 0


def test_backbone_forward_deterministic_and_batched():
    bb = init_backbone(input_dim=8, width=8, num_blocks=2, seed=1)
    rng = np.random.default_rng(4)
    xs = rng.standard_normal((5, 8))
    batch = backbone_forward(bb, xs)
    # same call repeated: bit-identical
    np.testing.assert_array_equal(batch, backbone_forward(bb, xs))
    # single-row path may order BLAS reductions differently; equal to 1e-12
    for i in range(5):
        np.testing.assert_allclose(
            batch[i], backbone_forward(bb, xs[i]), rtol=1e-12, atol=1e-12
        )


def test_backbone_depth_mismatch():
    bb = init_backbone(input_dim=8, width=8, num_blocks=2, seed=1)
    stack = init_adapter(width=8, r_adapter=3, num_blocks=1, seed=2, task_id=0)
    with pytest.raises(ConfigError):
        backbone_forward(bb, np.zeros(8), stack)


def test_init_adapter_seeding_and_bounds():
    a = init_adapter(width=8, r_adapter=3, num_blocks=2, seed=7, task_id=1)
    b = init_adapter(width=8, r_adapter=3, num_blocks=2, seed=7, task_id=1)
    c = init_adapter(width=8, r_adapter=3, num_blocks=2, seed=8, task_id=1)
    np.testing.assert_array_equal(a.blocks[0].w_down, b.blocks[0].w_down)
    assert not np.array_equal(a.blocks[0].w_down, c.blocks[0].w_down)
    np.testing.assert_array_equal(a.blocks[0].w_up, 0.0)
    bound = np.sqrt(6.0 / 8)
    assert np.max(np.abs(a.blocks[0].w_down)) <= bound
    with pytest.raises(ValueError):
        init_adapter(width=4, r_adapter=4, num_blocks=1, seed=0, task_id=0)


def test_adapter_freeze():
    stack = init_adapter(width=8, r_adapter=3, num_blocks=2, seed=0, task_id=0)
    require_unfrozen(stack)  # fine before freezing
    stack.freeze()
    assert stack.frozen
    with pytest.raises(ValueError):
        stack.blocks[0].w_down[0, 0] = 1.0
    with pytest.raises(StateError):
        require_unfrozen(stack)


def test_head_forward_cases():
    head = init_head(width=4, num_classes=3, class_offset=2)
    np.testing.assert_array_equal(head_forward(np.zeros(4), head), head.bias)
    rng = np.random.default_rng(5)
    head.weight[:] = rng.standard_normal((3, 4))
    head.bias[:] = rng.standard_normal(3)
    f = rng.standard_normal(4)
    expect = np.array(
        [sum(head.weight[c, j] * f[j] for j in range(4)) + head.bias[c] for c in range(3)]
    )
    np.testing.assert_allclose(head_forward(f, head), expect, atol=1e-12)
    with pytest.raises(ValueError):
        head_forward(np.zeros(5), head)
    with pytest.raises(ValueError):
        init_head(width=4, num_classes=0, class_offset=0)


def test_head_freeze():
    head = init_head(width=4, num_classes=2, class_offset=0)
    head.freeze()
    with pytest.raises(ValueError):
        head.weight[0, 0] = 1.0


def test_parameter_counts():
    stack = init_adapter(width=8, r_adapter=3, num_blocks=2, seed=0, task_id=0)
    assert adapter_parameter_count(stack) == 2 * (8 * 3 + 3 * 8)
    head = init_head(width=8, num_classes=2, class_offset=0)
    assert head_parameter_count(head) == 2 * 8 + 2


def test_forward_with_cache_matches_plain():
    bb = init_backbone(input_dim=6, width=6, num_blocks=2, seed=1)
    stack = init_adapter(width=6, r_adapter=2, num_blocks=2, seed=2, task_id=0)
    rng = np.random.default_rng(6)
    for blk in stack.blocks:
        blk.w_up[:] = rng.standard_normal(blk.w_up.shape) * 0.3
    xs = rng.standard_normal((4, 6))
    feats, cache = forward_with_cache(bb, xs, stack)
    np.testing.assert_allclose(feats, backbone_forward(bb, xs, stack), atol=1e-15)
    assert len(cache) == 2


@pytest.mark.parametrize("mode", ["mlp", "identity"])
def test_adapter_backward_matches_finite_differences(mode):
    rng = np.random.default_rng(7)
    bb = init_backbone(input_dim=6, width=6, num_blocks=2, seed=3, mode=mode)
    stack = init_adapter(width=6, r_adapter=2, num_blocks=2, seed=4, task_id=0)
    for blk in stack.blocks:
        blk.w_up[:] = rng.standard_normal(blk.w_up.shape) * 0.4
        blk.w_down[:] = rng.standard_normal(blk.w_down.shape) * 0.6
    xs = rng.standard_normal((3, 6))
    probe = rng.standard_normal(6)

    def loss():
        return float(backbone_forward(bb, xs, stack) @ probe @ np.ones(3))

    feats, cache = forward_with_cache(bb, xs, stack)
    d_feature = np.tile(probe, (3, 1))
    grads = adapter_backward(bb, stack, cache, d_feature)

    h = 1e-6
    for i, blk in enumerate(stack.blocks):
        for name, arr in (("w_down", blk.w_down), ("w_up", blk.w_up)):
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss()
                arr[idx] = orig - h
                down = loss()
                arr[idx] = orig
                fd = (up - down) / (2 * h)
                assert abs(grads[i][name][idx] - fd) < 1e-5 * max(1.0, abs(fd)), (
                    mode,
                    i,
                    name,
                    idx,
                )
