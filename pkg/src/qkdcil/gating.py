"""Relevance gating: score a sample against the pool of task embeddings.

The quantum gate projects a unit feature vector to bounded rotation
angles, runs the layered circuit, and reads task relevance off as
fidelity against each stored task state.  A temperature softmax over
the raw fidelities produces the mixing weights used for distillation
and for adapter fusion at inference.

Classical baselines (cosine, two-layer MLP, random one-hot) share the
RelevanceVector contract so the trainer can swap gates behind a config
key.  All gradients are assembled analytically; the quantum path uses
the parameter-shift Jacobians from qsim.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, StateError
from .qsim import CircuitParams, fidelity_batch, run_circuit_batch, shift_rule_jacobians

MLP_GATE_HIDDEN = 64
SPARSITY_TARGETS = ("p", "entropy_alpha")

# Kernel bandwidth of the fidelity gate.  Unit-variance rows push the
# tanh into saturation and the per-qubit angles toward +-pi, where the
# product kernel is so narrow that same-task samples no longer overlap
# their task state.  0.15 keeps angles in the near-linear region; the
# fidelity then behaves like an RBF on the projected feature, wide
# enough to absorb within-task scatter.
GATE_PROJECTION_SCALE = 0.15


def stable_softmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction; exact for any finite input."""
    shifted = values - np.max(values, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


@dataclass
class GateParams:
    """Trainable state of the quantum gate.

    projection maps features (length d) to qubit angles (length q) and is
    shared between sample encoding and task-state encoding; tau scales the
    softmax over fidelities.
    """

    projection: np.ndarray
    circuit: CircuitParams
    tau: float = 1.0

    def __post_init__(self) -> None:
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.ndim != 2:
            raise ValueError(f"projection must be 2-D, got shape {self.projection.shape}")
        if not np.all(np.isfinite(self.projection)):
            raise ValueError("projection entries must be finite")
        if self.projection.shape[0] != self.circuit.num_qubits:
            raise ValueError(
                f"projection has {self.projection.shape[0]} rows but the circuit "
                f"is {self.circuit.num_qubits} qubits wide"
            )
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class RelevanceVector:
    """Raw per-task fidelity scores and their softmax mixing weights."""

    scores: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if scores.shape != weights.shape or scores.ndim != 1:
            raise ValueError("scores and weights must be 1-D and the same length")
        if scores.size == 0:
            raise ValueError("relevance over an empty pool is undefined")
        if np.any(scores < -1e-9) or np.any(scores > 1 + 1e-9):
            raise ValueError("scores must lie in [0, 1]")
        if np.any(weights < 0) or abs(float(weights.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return self.scores.size


def init_gate(
    feature_dim: int, num_qubits: int, num_layers: int, tau: float, seed: int
) -> GateParams:
    """Fresh gate: small random projection, zero variational angles.

    Zero theta keeps the initial circuit an encoding-only kernel, so
    early fidelities already separate tasks; see GATE_PROJECTION_SCALE
    for why the projection starts small.
    """
    rng = np.random.default_rng([seed, 90001])
    projection = GATE_PROJECTION_SCALE * rng.standard_normal((num_qubits, feature_dim))
    circuit = CircuitParams(np.zeros((num_layers, num_qubits)))
    return GateParams(projection=projection, circuit=circuit, tau=tau)


def angle_map(projection: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """pi * tanh of the linear projection; bounded in (-pi, pi)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != projection.shape[1]:
        raise ValueError(
            f"feature length {vec.shape[-1]} does not match projection "
            f"width {projection.shape[1]}"
        )
    return np.pi * np.tanh(vec @ projection.T)


def project_to_angles(h_tilde: np.ndarray, gate: GateParams) -> np.ndarray:
    """Encode one unit feature vector as per-qubit rotation angles."""
    return angle_map(gate.projection, np.ravel(h_tilde))


def _pool_states(pool: Sequence) -> np.ndarray:
    if len(pool) == 0:
        raise StateError("relevance requested with an empty task pool")
    return np.stack([entry.task_state.amplitudes for entry in pool])


def relevance_batch(
    h_rows: np.ndarray, pool: Sequence, gate: GateParams
) -> tuple[np.ndarray, np.ndarray]:
    """Scores and weights for a batch of features, shapes (B, m)."""
    targets = _pool_states(pool)
    angles = angle_map(gate.projection, np.atleast_2d(h_rows))
    states = run_circuit_batch(angles, gate.circuit)
    scores = fidelity_batch(states, targets)
    weights = stable_softmax(scores / gate.tau, axis=-1)
    return scores, weights


def compute_relevance(h_tilde: np.ndarray, pool: Sequence, gate: GateParams) -> RelevanceVector:
    """Fidelity of the encoded sample against every pool state, softmaxed."""
    scores, weights = relevance_batch(np.ravel(h_tilde)[None, :], pool, gate)
    return RelevanceVector(scores=scores[0], weights=weights[0])


def sparsity_loss(rel: RelevanceVector, target: str = "p") -> float:
    """Regularizer discouraging indiscriminate relevance.

    target "p" sums the raw fidelities (their softmax weights always sum
    to one, so an L1 there would be constant); "entropy_alpha" penalizes
    the entropy of the mixing weights instead.
    """
    if target == "p":
        return float(np.sum(rel.scores))
    if target == "entropy_alpha":
        w = np.clip(rel.weights, 1e-300, None)
        return float(-np.sum(w * np.log(w)))
    raise ConfigError(f"unknown sparsity target {target!r}; expected one of {SPARSITY_TARGETS}")


def sparsity_batch(scores: np.ndarray, weights: np.ndarray, target: str = "p") -> np.ndarray:
    """Per-sample sparsity values for (B, m) score/weight arrays."""
    if target == "p":
        return np.sum(scores, axis=-1)
    if target == "entropy_alpha":
        w = np.clip(weights, 1e-300, None)
        return -np.sum(w * np.log(w), axis=-1)
    raise ConfigError(f"unknown sparsity target {target!r}; expected one of {SPARSITY_TARGETS}")


def upstream_to_scores(
    weights: np.ndarray,
    upstream_weights: np.ndarray,
    upstream_sparsity: np.ndarray,
    tau: float,
    target: str = "p",
) -> np.ndarray:
    """Pull gradients w.r.t. weights and sparsity back to the raw scores.

    Softmax Jacobian is (diag(w) - w w^T) / tau, symmetric, so the
    vector-Jacobian product is elementwise-and-projective.  Shapes are
    (B, m) for weights/upstream_weights and (B,) for upstream_sparsity.
    """
    up = np.asarray(upstream_weights, dtype=np.float64)
    if target == "entropy_alpha":
        w = np.clip(weights, 1e-300, None)
        up = up + np.asarray(upstream_sparsity)[..., None] * (-(np.log(w) + 1.0))
    inner = np.sum(weights * up, axis=-1, keepdims=True)
    d_scores = weights * (up - inner) / tau
    if target == "p":
        d_scores = d_scores + np.asarray(upstream_sparsity)[..., None]
    elif target != "entropy_alpha":
        raise ConfigError(
            f"unknown sparsity target {target!r}; expected one of {SPARSITY_TARGETS}"
        )
    return d_scores


def gate_gradients_batch(
    h_rows: np.ndarray,
    pool: Sequence,
    gate: GateParams,
    upstream_weights: np.ndarray,
    upstream_sparsity: np.ndarray,
    sparsity_target: str = "p",
) -> tuple[np.ndarray, np.ndarray]:
    """Batch-summed gradients of the loss w.r.t. projection and theta.

    upstream_weights[b, i] = dL/d weights[b, i]; upstream_sparsity[b]
    multiplies that sample's sparsity term.  The fidelity Jacobians come
    from the parameter-shift rule; the angle map contributes its tanh
    Jacobian; everything chains together linearly.
    """
    targets = _pool_states(pool)
    h_rows = np.atleast_2d(np.asarray(h_rows, dtype=np.float64))
    weights = relevance_batch(h_rows, pool, gate)[1]
    d_scores = upstream_to_scores(
        weights, upstream_weights, upstream_sparsity, gate.tau, sparsity_target
    )

    angles = angle_map(gate.projection, h_rows)
    j_angles, j_theta = shift_rule_jacobians(angles, gate.circuit, targets)
    # (B, m) x (B, m, q) -> (B, q); likewise for theta
    d_angles = np.einsum("bm,bmq->bq", d_scores, j_angles)
    d_theta = np.einsum("bm,bmlq->lq", d_scores, j_theta)

    # angles = pi * tanh(z), z = h @ projection^T
    tanh_z = angles / np.pi
    d_z = d_angles * np.pi * (1.0 - tanh_z**2)
    d_projection = d_z.T @ h_rows
    return d_projection, d_theta


def gate_gradients(
    h_tilde: np.ndarray,
    pool: Sequence,
    gate: GateParams,
    upstream_weights: np.ndarray,
    upstream_sparsity: float = 0.0,
    sparsity_target: str = "p",
) -> tuple[np.ndarray, np.ndarray]:
    """Single-sample wrapper over gate_gradients_batch."""
    return gate_gradients_batch(
        np.ravel(h_tilde)[None, :],
        pool,
        gate,
        np.asarray(upstream_weights, dtype=np.float64)[None, :],
        np.array([upstream_sparsity], dtype=np.float64),
        sparsity_target,
    )


@dataclass
class MlpGateParams:
    """Two-layer relevance scorer: features -> hidden tanh -> per-task logit.

    Scores go through a sigmoid so they live in [0, 1] like fidelities do;
    new tasks append a zero output column, which scores 0.5 until trained.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def pool_size(self) -> int:
        return self.w2.shape[1]

    def add_task(self) -> None:
        self.w2 = np.hstack([self.w2, np.zeros((self.w2.shape[0], 1))])
        self.b2 = np.append(self.b2, 0.0)

    def parameter_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size


def init_mlp_gate(feature_dim: int, seed: int, hidden: int = MLP_GATE_HIDDEN) -> MlpGateParams:
    rng = np.random.default_rng([seed, 90002])
    bound = np.sqrt(6.0 / feature_dim)
    w1 = rng.uniform(-bound, bound, size=(feature_dim, hidden))
    return MlpGateParams(
        w1=w1,
        b1=np.zeros(hidden),
        w2=np.zeros((hidden, 0)),
        b2=np.zeros(0),
    )


def mlp_gate_batch(h_rows: np.ndarray, mlp: MlpGateParams, tau: float):
    """Forward pass; returns (scores, weights, cache) with (B, m) shapes."""
    if mlp.pool_size == 0:
        raise StateError("MLP gate has no task outputs yet")
    h_rows = np.atleast_2d(np.asarray(h_rows, dtype=np.float64))
    hidden = np.tanh(h_rows @ mlp.w1 + mlp.b1)
    logits = hidden @ mlp.w2 + mlp.b2
    scores = 1.0 / (1.0 + np.exp(-logits))
    weights = stable_softmax(scores / tau, axis=-1)
    cache = (h_rows, hidden, scores)
    return scores, weights, cache


def mlp_gate_gradients(
    cache,
    weights: np.ndarray,
    mlp: MlpGateParams,
    tau: float,
    upstream_weights: np.ndarray,
    upstream_sparsity: np.ndarray,
    sparsity_target: str = "p",
) -> dict[str, np.ndarray]:
    """Backprop the relevance upstream through sigmoid and both layers."""
    h_rows, hidden, scores = cache
    d_scores = upstream_to_scores(
        weights, upstream_weights, upstream_sparsity, tau, sparsity_target
    )
    d_logits = d_scores * scores * (1.0 - scores)
    d_w2 = hidden.T @ d_logits
    d_b2 = d_logits.sum(axis=0)
    d_hidden = d_logits @ mlp.w2.T
    d_pre = d_hidden * (1.0 - hidden**2)
    d_w1 = h_rows.T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}


def cosine_gate_batch(
    h_rows: np.ndarray, pool_vectors: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    """Clipped cosine similarity against pool vectors, then softmax."""
    h_rows = np.atleast_2d(np.asarray(h_rows, dtype=np.float64))
    scores = np.maximum(0.0, h_rows @ np.asarray(pool_vectors).T)
    weights = stable_softmax(scores / tau, axis=-1)
    return scores, weights


def classical_gate(
    kind: str,
    h_tilde: np.ndarray,
    pool_vectors: np.ndarray,
    *,
    tau: float = 1.0,
    rng: np.random.Generator | None = None,
    mlp: MlpGateParams | None = None,
) -> RelevanceVector:
    """Non-quantum relevance baselines sharing the RelevanceVector contract.

    cosine scores by clipped inner product with the stored task vectors;
    mlp scores with a trained two-layer network; random ignores the input
    and puts all weight on one uniformly drawn pool index (rng required).
    """
    pool_vectors = np.atleast_2d(np.asarray(pool_vectors, dtype=np.float64))
    m = pool_vectors.shape[0]
    if m == 0:
        raise StateError("relevance requested with an empty task pool")
    if kind == "cosine":
        scores, weights = cosine_gate_batch(np.ravel(h_tilde)[None, :], pool_vectors, tau)
        return RelevanceVector(scores=scores[0], weights=weights[0])
    if kind == "mlp":
        if mlp is None:
            raise ValueError("mlp gate requires MlpGateParams")
        scores, weights, _ = mlp_gate_batch(np.ravel(h_tilde)[None, :], mlp, tau)
        return RelevanceVector(scores=scores[0], weights=weights[0])
    if kind == "random":
        if rng is None:
            raise ValueError("random gate requires a Generator")
        pick = int(rng.integers(m))
        one_hot = np.zeros(m)
        one_hot[pick] = 1.0
        return RelevanceVector(scores=one_hot.copy(), weights=one_hot)
    raise ConfigError(f"unknown gate kind {kind!r}; expected quantum, cosine, mlp or random")
