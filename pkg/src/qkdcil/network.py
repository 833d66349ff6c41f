"""Frozen feed-forward backbone with per-task residual adapters and heads.

The backbone stands in for a large pretrained encoder: a fixed input
projection into the working width followed by L_b frozen affine+GELU
blocks.  Each task owns one adapter stack (a down-project / ReLU /
up-project branch added in parallel to every block) and one linear head
over its own class range.  Only the current task's adapter and head are
ever trainable; freezing is enforced by marking arrays read-only.

Row-vector convention throughout: activations are (B, d) or (d,), and
layers compute x @ W + b.

An identity backbone mode skips the affine blocks entirely so the same
adapter/head machinery can run on top of externally precomputed feature
files (the input dimension must then equal the working width).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError

# Initialization scales for the frozen backbone.  The input projection
# keeps pre-activations inside the GELU's curved region (larger gains
# drift into the linear tails, where the map stops separating task
# clusters and a wrong adapter costs almost nothing at inference).
# Block weights mix identity with noise: the identity part keeps the
# residual stream legible (adapter weight directions and feature
# directions share a coordinate system, which the relevance gate
# depends on), while the noise plus the GELU kink keeps blocks
# nonlinear enough that adapters are not interchangeable.
INPUT_GAIN = 1.5
BLOCK_IDENTITY_GAIN = 1.0
BLOCK_MIX_GAIN = 0.3
BIAS_SCALE = 0.1

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(z: np.ndarray) -> np.ndarray:
    """tanh-form GELU."""
    inner = _GELU_C * (z + _GELU_A * z**3)
    return 0.5 * z * (1.0 + np.tanh(inner))


def gelu_prime(z: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (z + _GELU_A * z**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * z**2)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BackboneBlock:
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class Backbone:
    """Immutable feature extractor; `mode` is "mlp" or "identity"."""

    input_weight: np.ndarray | None
    blocks: tuple[BackboneBlock, ...]
    mode: str
    input_dim: int
    width: int
    seed: int

    @property
    def depth(self) -> int:
        return len(self.blocks)


def init_backbone(
    input_dim: int, width: int, num_blocks: int, seed: int, mode: str = "mlp"
) -> Backbone:
    """Build and freeze the random backbone (or the identity passthrough)."""
    if mode == "identity":
        if input_dim != width:
            raise ConfigError(
                "identity backbone requires input_dim == width "
                f"(got {input_dim} vs {width})"
            )
        blocks = tuple(
            BackboneBlock(weight=_freeze(np.zeros((0, 0))), bias=_freeze(np.zeros(0)))
            for _ in range(num_blocks)
        )
        return Backbone(None, blocks, "identity", input_dim, width, seed)
    if mode != "mlp":
        raise ConfigError(f"unknown backbone mode {mode!r}; expected mlp or identity")
    rng = np.random.default_rng([seed, 70000])
    input_weight = _freeze(
        rng.standard_normal((input_dim, width)) * (INPUT_GAIN / np.sqrt(input_dim))
    )
    blocks = []
    for i in range(num_blocks):
        block_rng = np.random.default_rng([seed, 70001 + i])
        weight = BLOCK_IDENTITY_GAIN * np.eye(width) + block_rng.standard_normal(
            (width, width)
        ) * (BLOCK_MIX_GAIN / np.sqrt(width))
        bias = block_rng.standard_normal(width) * BIAS_SCALE
        blocks.append(BackboneBlock(weight=_freeze(weight), bias=_freeze(bias)))
    return Backbone(input_weight, tuple(blocks), "mlp", input_dim, width, seed)


@dataclass
class AdapterBlock:
    w_down: np.ndarray
    w_up: np.ndarray


@dataclass
class AdapterStack:
    """One task's residual adapter parameters, one block pair per backbone block."""

    blocks: list[AdapterBlock]
    task_id: int
    frozen: bool = False

    def freeze(self) -> None:
        for blk in self.blocks:
            blk.w_down.setflags(write=False)
            blk.w_up.setflags(write=False)
        self.frozen = True


def init_adapter(width: int, r_adapter: int, num_blocks: int, seed: int, task_id: int) -> AdapterStack:
    """Kaiming-style uniform down-projection, zero up-projection (silent start)."""
    if not r_adapter < width:
        raise ValueError(f"r_adapter must be < width, got {r_adapter} >= {width}")
    bound = np.sqrt(6.0 / width)
    blocks = []
    for i in range(num_blocks):
        rng = np.random.default_rng([seed, 80000, task_id, i])
        w_down = rng.uniform(-bound, bound, size=(width, r_adapter))
        blocks.append(AdapterBlock(w_down=w_down, w_up=np.zeros((r_adapter, width))))
    return AdapterStack(blocks=blocks, task_id=task_id)


@dataclass
class TaskHead:
    """Affine classifier over one task's contiguous class range."""

    weight: np.ndarray
    bias: np.ndarray
    class_offset: int

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def freeze(self) -> None:
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)


def init_head(width: int, num_classes: int, class_offset: int) -> TaskHead:
    if num_classes < 1:
        raise ValueError("a head needs at least one class")
    return TaskHead(
        weight=np.zeros((num_classes, width)),
        bias=np.zeros(num_classes),
        class_offset=class_offset,
    )


def adapter_forward(x_in: np.ndarray, block_mlp, w_down: np.ndarray, w_up: np.ndarray) -> np.ndarray:
    """block_mlp(x) plus the ReLU bottleneck branch."""
    x_in = np.asarray(x_in, dtype=np.float64)
    if x_in.shape[-1] != w_down.shape[0]:
        raise ValueError(
            f"input width {x_in.shape[-1]} does not match adapter down-projection "
            f"rows {w_down.shape[0]}"
        )
    return block_mlp(x_in) + relu(x_in @ w_down) @ w_up


def _block_mlp(backbone: Backbone, index: int):
    if backbone.mode == "identity":
        return lambda x: x
    blk = backbone.blocks[index]
    return lambda x: gelu(x @ blk.weight + blk.bias)


def _check_depth(backbone: Backbone, adapters: AdapterStack | None) -> None:
    if adapters is not None and len(adapters.blocks) != backbone.depth:
        raise ConfigError(
            f"adapter stack has {len(adapters.blocks)} blocks but the backbone "
            f"has {backbone.depth}"
        )


def backbone_forward(
    backbone: Backbone, x: np.ndarray, adapters: AdapterStack | None = None
) -> np.ndarray:
    """Feature vector(s) for input x, optionally with one adapter stack engaged."""
    _check_depth(backbone, adapters)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != backbone.input_dim:
        raise ValueError(
            f"input has width {x.shape[-1]}, backbone expects {backbone.input_dim}"
        )
    out = x if backbone.input_weight is None else x @ backbone.input_weight
    for i in range(backbone.depth):
        mlp = _block_mlp(backbone, i)
        if adapters is None:
            out = mlp(out)
        else:
            blk = adapters.blocks[i]
            out = adapter_forward(out, mlp, blk.w_down, blk.w_up)
    return out


def forward_with_cache(
    backbone: Backbone, x: np.ndarray, adapters: AdapterStack
) -> tuple[np.ndarray, list[dict]]:
    """Forward pass retaining per-block activations for adapter_backward."""
    _check_depth(backbone, adapters)
    out = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if backbone.input_weight is not None:
        out = out @ backbone.input_weight
    cache = []
    for i in range(backbone.depth):
        blk = adapters.blocks[i]
        entry: dict = {"x_in": out}
        if backbone.mode == "identity":
            base = out
        else:
            pre = out @ backbone.blocks[i].weight + backbone.blocks[i].bias
            base = gelu(pre)
            entry["pre"] = pre
        branch_pre = out @ blk.w_down
        branch_act = relu(branch_pre)
        entry["branch_pre"] = branch_pre
        entry["branch_act"] = branch_act
        out = base + branch_act @ blk.w_up
        cache.append(entry)
    return out, cache


def adapter_backward(
    backbone: Backbone,
    adapters: AdapterStack,
    cache: list[dict],
    d_feature: np.ndarray,
) -> list[dict[str, np.ndarray]]:
    """Gradients of a scalar loss w.r.t. every adapter block, given dL/dfeature.

    ReLU uses subgradient 0 at exactly 0.  Backbone parameters receive no
    gradient (frozen); the pass still propagates through their values so
    earlier blocks see the correct upstream signal.
    """
    d_out = np.atleast_2d(np.asarray(d_feature, dtype=np.float64))
    grads: list[dict[str, np.ndarray]] = [{} for _ in adapters.blocks]
    for i in reversed(range(backbone.depth)):
        entry = cache[i]
        blk = adapters.blocks[i]
        d_branch_act = d_out @ blk.w_up.T
        d_branch_pre = np.where(entry["branch_pre"] > 0, d_branch_act, 0.0)
        grads[i]["w_up"] = entry["branch_act"].T @ d_out
        grads[i]["w_down"] = entry["x_in"].T @ d_branch_pre
        if backbone.mode == "identity":
            d_base_in = d_out
        else:
            d_pre = d_out * gelu_prime(entry["pre"])
            d_base_in = d_pre @ backbone.blocks[i].weight.T
        d_out = d_base_in + d_branch_pre @ blk.w_down.T
    return grads


def head_forward(feature: np.ndarray, head: TaskHead) -> np.ndarray:
    """Affine logits over the head's own classes."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-1] != head.weight.shape[1]:
        raise ValueError(
            f"feature width {feature.shape[-1]} does not match head width "
            f"{head.weight.shape[1]}"
        )
    return feature @ head.weight.T + head.bias


def adapter_parameter_count(adapters: AdapterStack) -> int:
    return sum(b.w_down.size + b.w_up.size for b in adapters.blocks)


def head_parameter_count(head: TaskHead) -> int:
    return head.weight.size + head.bias.size


def require_unfrozen(adapters: AdapterStack) -> None:
    if adapters.frozen:
        raise StateError(f"adapter stack for task {adapters.task_id} is frozen")
