"""Shared fixtures for gradient and protocol tests.

Builds small but fully wired training slices (backbone + frozen teachers
+ current adapter/head + gate + embedding pool) and provides the central
finite-difference harness used by both the unit tests and the acceptance
suite.  Teacher tensors and gate inputs are snapshotted once per slice,
matching the stop-gradient semantics of the loss.
"""

import numpy as np

from qkdcil.gating import init_gate, init_mlp_gate
from qkdcil.losses import loss_gradients, teacher_snapshot
from qkdcil.network import backbone_forward, init_adapter, init_backbone, init_head
from qkdcil.taskembed import compute_task_embedding


def unit_rows(arr):
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    return arr / np.where(norms < 1e-12, 1.0, norms)


def build_desk_slice(
    seed,
    *,
    input_dim=8,
    width=8,
    num_blocks=2,
    r_adapter=2,
    q=2,
    layers=2,
    pool_size=2,
    num_classes=3,
    batch=4,
    gate_kind="quantum",
    distill_space="logit_kl",
    sparsity_target="p",
    lambda_kd=1.0,
    lambda_s=0.05,
    tau=1.0,
):
    """A miniature mid-stream training state with randomized parameters."""
    rng = np.random.default_rng([seed, 1234])
    backbone = init_backbone(input_dim, width, num_blocks, seed)
    gate = init_gate(width, q, layers, tau, seed)
    gate.circuit.layer_angles[:] = rng.uniform(-0.8, 0.8, gate.circuit.layer_angles.shape)

    teacher_stacks = []
    pool = []
    for i in range(pool_size):
        stack = init_adapter(width, r_adapter, num_blocks, seed + 10 + i, task_id=i)
        for blk in stack.blocks:
            blk.w_up[:] = rng.standard_normal(blk.w_up.shape) * 0.3
        emb = compute_task_embedding(stack, r_svd=2, gate=gate, task_id=i)
        stack.freeze()
        teacher_stacks.append(stack)
        pool.append(emb)

    adapters = init_adapter(width, r_adapter, num_blocks, seed + 99, task_id=pool_size)
    for blk in adapters.blocks:
        blk.w_up[:] = rng.standard_normal(blk.w_up.shape) * 0.2
    head = init_head(width, num_classes, class_offset=0)
    head.weight[:] = rng.standard_normal(head.weight.shape) * 0.3
    head.bias[:] = rng.standard_normal(head.bias.shape) * 0.1

    mlp_gate = None
    if gate_kind == "mlp":
        mlp_gate = init_mlp_gate(width, seed, hidden=6)
        for _ in range(pool_size):
            mlp_gate.add_task()
        mlp_gate.w2[:] = rng.standard_normal(mlp_gate.w2.shape) * 0.4

    x = rng.standard_normal((batch, input_dim))
    labels = rng.integers(num_classes, size=batch)

    # detached gate input: features under the first frozen adapter
    gate_input = unit_rows(backbone_forward(backbone, x, teacher_stacks[0]))
    t_feats, t_logits = teacher_snapshot(backbone, teacher_stacks, head, x, distill_space)

    random_weights = None
    if gate_kind == "random":
        picks = np.random.default_rng([seed, 555]).integers(pool_size, size=batch)
        random_weights = np.zeros((batch, pool_size))
        random_weights[np.arange(batch), picks] = 1.0

    return {
        "backbone": backbone,
        "adapters": adapters,
        "head": head,
        "x": x,
        "labels": labels,
        "pool": pool,
        "teacher_stacks": teacher_stacks,
        "teacher_features": t_feats,
        "teacher_logits": t_logits,
        "gate_kind": gate_kind,
        "gate": gate,
        "mlp_gate": mlp_gate,
        "random_weights": random_weights,
        "gate_input_rows": gate_input,
        "lambda_kd": lambda_kd,
        "lambda_s": lambda_s,
        "tau": tau,
        "distill_space": distill_space,
        "sparsity_target": sparsity_target,
    }


def slice_loss_and_grads(sl):
    return loss_gradients(
        sl["backbone"],
        sl["adapters"],
        sl["head"],
        sl["x"],
        sl["labels"],
        pool=sl["pool"],
        teacher_features=sl["teacher_features"],
        teacher_logits=sl["teacher_logits"],
        gate_kind=sl["gate_kind"],
        gate=sl["gate"],
        mlp_gate=sl["mlp_gate"],
        random_weights=sl["random_weights"],
        gate_input_rows=sl["gate_input_rows"],
        lambda_kd=sl["lambda_kd"],
        lambda_s=sl["lambda_s"],
        tau=sl["tau"],
        distill_space=sl["distill_space"],
        sparsity_target=sl["sparsity_target"],
    )


def trainable_arrays(sl):
    """(name, array, gradient lookup) triples for every trainable scalar."""
    entries = [
        ("head_weight", sl["head"].weight, lambda g: g["head_weight"]),
        ("head_bias", sl["head"].bias, lambda g: g["head_bias"]),
    ]
    for i, blk in enumerate(sl["adapters"].blocks):
        entries.append((f"adapter{i}.w_down", blk.w_down, lambda g, i=i: g["adapter"][i]["w_down"]))
        entries.append((f"adapter{i}.w_up", blk.w_up, lambda g, i=i: g["adapter"][i]["w_up"]))
    if sl["gate_kind"] == "quantum":
        entries.append(("gate_projection", sl["gate"].projection, lambda g: g["gate_projection"]))
        entries.append(
            ("gate_theta", sl["gate"].circuit.layer_angles, lambda g: g["gate_theta"])
        )
    elif sl["gate_kind"] == "mlp":
        for name in ("w1", "b1", "w2", "b2"):
            entries.append(
                (f"mlp_{name}", getattr(sl["mlp_gate"], name), lambda g, n=name: g[f"mlp_{n}"])
            )
    return entries


def fd_check_slice(sl, rel_tol=1e-4, h=1e-5):
    """Assert analytic gradients match central differences for every scalar.

    Perturbations run against frozen teacher snapshots and gate inputs, so
    the finite-difference loss sees exactly the function the analytic pass
    differentiates.
    """
    _, grads = slice_loss_and_grads(sl)
    worst = 0.0
    for name, arr, pick in trainable_arrays(sl):
        analytic = pick(grads)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = slice_loss_and_grads(sl)[0].total
            arr[idx] = orig - h
            down = slice_loss_and_grads(sl)[0].total
            arr[idx] = orig
            fd = (up - down) / (2 * h)
            err = abs(analytic[idx] - fd) / max(abs(fd), 1e-6)
            worst = max(worst, err)
            assert err < rel_tol, f"{name}{idx}: analytic {analytic[idx]} vs fd {fd}"
    return worst
