"""Training objective: cross-entropy + relevance-weighted distillation.

The distillation term transfers each frozen teacher adapter's view of the
current batch into the new adapter, weighted by the gate's relevance
weights.  Teachers are fully detached: their features and logits are
treated as constants, so no gradient ever reaches frozen parameters.

Everything is plain numpy with hand-derived reverse passes.  The public
entry point for training is `loss_gradients`, which returns the loss
breakdown plus gradients for exactly the trainable parameters (current
adapter, current head, and the gate when it has parameters).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .gating import (
    GateParams,
    MlpGateParams,
    RelevanceVector,
    cosine_gate_batch,
    gate_gradients_batch,
    mlp_gate_batch,
    mlp_gate_gradients,
    relevance_batch,
    sparsity_batch,
    stable_softmax,
)
from .network import (
    AdapterStack,
    Backbone,
    TaskHead,
    adapter_backward,
    backbone_forward,
    forward_with_cache,
    head_forward,
)

DISTILL_SPACES = ("logit_kl", "feature_mse")


@dataclass(frozen=True)
class LossBreakdown:
    """Component losses and their weighted total."""

    ce: float
    distill: float
    sparsity: float
    lambda_kd: float
    lambda_s: float
    total: float = 0.0

    def __post_init__(self) -> None:
        expected = self.ce + self.lambda_kd * self.distill + self.lambda_s * self.sparsity
        object.__setattr__(self, "total", float(expected))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def kl_divergence(teacher: np.ndarray, student: np.ndarray) -> float:
    """Forward KL sum(t * ln(t/s)) with the 0 ln 0 = 0 convention."""
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise ValueError("distributions must have matching shapes")
    for name, dist in (("teacher", teacher), ("student", student)):
        if abs(float(dist.sum()) - 1.0) > 1e-9:
            raise ValueError(f"{name} distribution does not sum to 1")
    if np.any(student <= 0):
        raise ValueError("student probabilities must be strictly positive")
    mask = teacher > 0
    return float(np.sum(teacher[mask] * np.log(teacher[mask] / student[mask])))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Negative log softmax probability of the labeled class."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    return float(-log_softmax(logits)[label])


def tikd_loss(
    rel: RelevanceVector,
    teacher_logits: Sequence[np.ndarray],
    student_logits: np.ndarray,
) -> float:
    """Relevance-weighted sum of teacher-to-student KL terms."""
    if len(teacher_logits) != len(rel):
        raise ValueError(
            f"{len(teacher_logits)} teachers but {len(rel)} relevance weights"
        )
    student = stable_softmax(np.asarray(student_logits, dtype=np.float64))
    total = 0.0
    for weight, logits in zip(rel.weights, teacher_logits):
        total += float(weight) * kl_divergence(stable_softmax(np.asarray(logits)), student)
    return total


def total_loss(
    ce: float, distill: float, sparsity: float, lambda_kd: float, lambda_s: float
) -> LossBreakdown:
    if lambda_kd < 0 or lambda_s < 0:
        raise ConfigError("loss weights must be non-negative")
    for name, val in (("ce", ce), ("distill", distill), ("sparsity", sparsity)):
        if not np.isfinite(val):
            raise ValueError(f"{name} loss is not finite: {val}")
    return LossBreakdown(
        ce=float(ce),
        distill=float(distill),
        sparsity=float(sparsity),
        lambda_kd=float(lambda_kd),
        lambda_s=float(lambda_s),
    )


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _relevance_for_training(
    gate_kind: str,
    gate_input_rows: np.ndarray,
    pool: Sequence,
    gate: GateParams | None,
    mlp_gate: MlpGateParams | None,
    random_weights: np.ndarray | None,
    tau: float,
):
    """Dispatch to the configured gate; returns (scores, weights, mlp_cache)."""
    if gate_kind == "quantum":
        if gate is None:
            raise ValueError("quantum gate requires GateParams")
        scores, weights = relevance_batch(gate_input_rows, pool, gate)
        return scores, weights, None
    if gate_kind == "cosine":
        vectors = np.stack([entry.s_tilde for entry in pool])
        scores, weights = cosine_gate_batch(gate_input_rows, vectors, tau)
        return scores, weights, None
    if gate_kind == "mlp":
        if mlp_gate is None:
            raise ValueError("mlp gate requires MlpGateParams")
        scores, weights, cache = mlp_gate_batch(gate_input_rows, mlp_gate, tau)
        return scores, weights, cache
    if gate_kind == "random":
        if random_weights is None:
            raise ValueError("random gate requires precomputed one-hot weights")
        return random_weights, random_weights, None
    raise ConfigError(f"unknown gate kind {gate_kind!r}")


def teacher_snapshot(
    backbone: Backbone,
    teacher_stacks: Sequence[AdapterStack],
    head: TaskHead,
    x: np.ndarray,
    distill_space: str = "logit_kl",
) -> tuple[np.ndarray, np.ndarray | None]:
    """Detached teacher tensors for one batch.

    Runs every frozen adapter forward and, for logit distillation, pushes
    the features through the current head.  The results are constants for
    the upcoming gradient step: the stop-gradient of the distillation loss
    is realized by snapshotting here and passing the arrays into
    loss_gradients, never by backpropagating through them.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    feats = np.stack([backbone_forward(backbone, x, stack) for stack in teacher_stacks])
    logits = None
    if distill_space == "logit_kl":
        logits = np.stack([head_forward(tf, head) for tf in feats])
    return feats, logits


def loss_gradients(
    backbone: Backbone,
    adapters: AdapterStack,
    head: TaskHead,
    x: np.ndarray,
    labels: np.ndarray,
    *,
    pool: Sequence = (),
    teacher_features: np.ndarray | None = None,
    teacher_logits: np.ndarray | None = None,
    gate_kind: str = "quantum",
    gate: GateParams | None = None,
    mlp_gate: MlpGateParams | None = None,
    random_weights: np.ndarray | None = None,
    gate_input_rows: np.ndarray | None = None,
    lambda_kd: float = 1.0,
    lambda_s: float = 0.05,
    tau: float = 1.0,
    distill_space: str = "logit_kl",
    sparsity_target: str = "p",
) -> tuple[LossBreakdown, dict]:
    """Loss breakdown and gradients for one batch.

    Gradients are returned only for trainable parameters; frozen teachers
    and the backbone get none by construction.  Teacher tensors must come
    in precomputed (see teacher_snapshot) so they stay constant under
    differentiation.  The relevance machinery is skipped entirely (no gate
    evaluation, no RNG use) when the pool is empty or when both loss
    weights are zero, which makes a first task with distillation
    configured bit-identical to a plain CE run.

    Per-sample terms are averaged over the batch; gate_input_rows are the
    (detached, unit-norm) features fed to the gate.
    """
    if lambda_kd < 0 or lambda_s < 0:
        raise ConfigError("loss weights must be non-negative")
    if distill_space not in DISTILL_SPACES:
        raise ConfigError(
            f"unknown distill space {distill_space!r}; expected one of {DISTILL_SPACES}"
        )
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    batch = x.shape[0]
    if labels.size != batch:
        raise ValueError("labels must align with the batch")
    num_classes = head.num_classes
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError("labels out of the head's class range")

    feats, cache = forward_with_cache(backbone, x, adapters)
    logits = head_forward(feats, head)
    logp = log_softmax(logits)
    probs = np.exp(logp)
    ce = float(-np.mean(logp[np.arange(batch), labels]))

    d_logits = (probs - _one_hot(labels, num_classes)) / batch
    d_feats_extra = np.zeros_like(feats)

    use_relevance = len(pool) > 0 and (lambda_kd != 0.0 or lambda_s != 0.0)
    distill_val = 0.0
    sparsity_val = 0.0
    gate_grads: dict[str, np.ndarray] = {}

    if use_relevance:
        if gate_input_rows is None:
            raise ValueError("gate input rows are required when relevance is active")
        scores, weights, mlp_cache = _relevance_for_training(
            gate_kind, gate_input_rows, pool, gate, mlp_gate, random_weights, tau
        )

        if distill_space == "logit_kl":
            if teacher_logits is None or teacher_logits.shape[0] != len(pool):
                raise ValueError("logit distillation needs teacher logits per pool entry")
            t_logp = log_softmax(teacher_logits)
            t_probs = np.exp(t_logp)
            # KL(teacher_i || student) per (sample, teacher)
            kl_matrix = np.sum(t_probs * (t_logp - logp[None, :, :]), axis=-1).T
            kl_matrix = np.maximum(kl_matrix, 0.0)  # clamp -0.0 roundoff
            distill_val = float(np.mean(np.sum(weights * kl_matrix, axis=1)))
            # dKL/d student logits = student_probs - teacher_probs
            weighted_gap = (
                probs[None, :, :] - t_probs
            ) * weights.T[:, :, None]  # (m, B, C)
            d_logits = d_logits + (lambda_kd / batch) * weighted_gap.sum(axis=0)
            per_pair = kl_matrix
        else:  # feature_mse
            if teacher_features is None or teacher_features.shape[0] != len(pool):
                raise ValueError("feature distillation needs teacher features per pool entry")
            gaps = feats[None, :, :] - teacher_features  # (m, B, d)
            sq = np.sum(gaps**2, axis=-1).T / feats.shape[-1]  # (B, m)
            distill_val = float(np.mean(np.sum(weights * sq, axis=1)))
            d_feats_extra += (
                (lambda_kd / batch)
                * 2.0
                / feats.shape[-1]
                * np.einsum("bm,mbd->bd", weights, gaps)
            )
            per_pair = sq

        sparsity_val = float(np.mean(sparsity_batch(scores, weights, sparsity_target)))

        upstream_weights = (lambda_kd / batch) * per_pair
        upstream_sparsity = np.full(batch, lambda_s / batch)
        if gate_kind == "quantum":
            d_proj, d_theta = gate_gradients_batch(
                gate_input_rows, pool, gate, upstream_weights, upstream_sparsity,
                sparsity_target,
            )
            gate_grads = {"gate_projection": d_proj, "gate_theta": d_theta}
        elif gate_kind == "mlp":
            mlp_grads = mlp_gate_gradients(
                mlp_cache, weights, mlp_gate, tau, upstream_weights,
                upstream_sparsity, sparsity_target,
            )
            gate_grads = {f"mlp_{k}": v for k, v in mlp_grads.items()}
        # cosine and random gates have no trainable parameters

    breakdown = total_loss(ce, distill_val, sparsity_val, lambda_kd, lambda_s)

    d_head_weight = d_logits.T @ feats
    d_head_bias = d_logits.sum(axis=0)
    d_feats = d_logits @ head.weight + d_feats_extra
    adapter_grads = adapter_backward(backbone, adapters, cache, d_feats)

    grads = {
        "head_weight": d_head_weight,
        "head_bias": d_head_bias,
        "adapter": adapter_grads,
        **gate_grads,
    }
    return breakdown, grads
