"""Task embeddings: summarize an adapter stack as one unit vector.

The adapter parameters of a finished task are stacked into a d x k
matrix, reduced by truncated SVD, and collapsed to a single direction by
multiplying the rank-r reconstruction with an all-ones vector.  The
normalized result, plus its encoded quantum state, is frozen into the
task pool and never touched again.

The SVD here is deliberately self-contained: eigendecomposition of the
Gram matrix S^T S by cyclic Jacobi rotations.  numpy's LAPACK-backed
decompositions serve as independent oracles in the test suite rather
than as the implementation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateTaskError, StateError
from .gating import GateParams, angle_map
from .network import AdapterStack
from .qsim import CircuitParams, Statevector, run_circuit

log = logging.getLogger(__name__)

JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 60
DEGENERATE_NORM = 1e-12

TASK_STATE_MODES = ("angle_enc", "angle_enc_shared_theta")


@dataclass(frozen=True)
class TaskEmbedding:
    """Frozen per-task summary: unit vector, its encoded state, task id."""

    s_tilde: np.ndarray
    task_state: Statevector
    task_id: int

    def __post_init__(self) -> None:
        vec = np.asarray(self.s_tilde, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"task vector must be unit-norm, got |v| = {norm}")
        vec = vec.copy()
        vec.setflags(write=False)
        object.__setattr__(self, "s_tilde", vec)


def stack_adapter_matrix(adapters: AdapterStack) -> np.ndarray:
    """Stack every block's W_down columns and W_up^T columns into d x k.

    Both projections contribute directions, so k = num_blocks * 2 * r.
    """
    if not adapters.blocks:
        raise StateError("cannot stack an empty adapter stack")
    columns = []
    for blk in adapters.blocks:
        columns.append(blk.w_down)
        columns.append(blk.w_up.T)
    stacked = np.hstack(columns)
    if not np.all(np.isfinite(stacked)):
        raise ValueError("adapter parameters contain non-finite entries")
    return stacked


def jacobi_eigh(sym: np.ndarray, tol: float = JACOBI_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvector columns.  Sweeps stop once the off-diagonal Frobenius mass
    falls below tol relative to the matrix norm.
    """
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"matrix must be square, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-10):
        raise ValueError("matrix must be symmetric")
    vecs = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(a)))

    def off_mass() -> float:
        return float(np.sqrt(2.0 * np.sum(np.tril(a, -1) ** 2)))

    for _ in range(_JACOBI_MAX_SWEEPS):
        if off_mass() <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                # classic stable rotation choice zeroing a[p, q]
                phi = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(phi) / (abs(phi) + np.sqrt(phi * phi + 1.0))
                if phi == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp = vecs[:, p].copy()
                vq = vecs[:, q].copy()
                vecs[:, p] = c * vp - s * vq
                vecs[:, q] = s * vp + c * vq
    order = np.argsort(np.diag(a))[::-1]
    return np.diag(a)[order].copy(), vecs[:, order]


def _canonical_sign(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip paired columns so each V column's largest-magnitude entry is positive."""
    for j in range(v.shape[1]):
        lead = np.argmax(np.abs(v[:, j]))
        if v[lead, j] < 0:
            v[:, j] = -v[:, j]
            u[:, j] = -u[:, j]
    return u, v


def _orthonormal_fill(u: np.ndarray, start: int) -> np.ndarray:
    """Replace columns from `start` on with canonical-basis Gram-Schmidt picks."""
    d = u.shape[0]
    col = start
    basis_idx = 0
    while col < u.shape[1]:
        if basis_idx >= d:
            raise RuntimeError("ran out of basis vectors during orthonormal fill")
        cand = np.zeros(d)
        cand[basis_idx] = 1.0
        basis_idx += 1
        cand -= u[:, :col] @ (u[:, :col].T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            u[:, col] = cand / norm
            col += 1
    return u


def truncated_svd(
    matrix: np.ndarray, r_svd: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-r singular triplets of a d x k matrix via the Gram eigenproblem.

    Returns (U, sigma, V) with sigma descending and orthonormal columns in
    both factors.  Right vectors come from jacobi_eigh(S^T S); left vectors
    are S V / sigma, re-orthonormalized by modified Gram-Schmidt because
    the Gram route loses orthogonality for ill-conditioned inputs. Columns
    whose singular value underflows are filled from the canonical basis.
    """
    s = np.asarray(matrix, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {s.shape}")
    d, k = s.shape
    if not 1 <= r_svd <= min(d, k):
        raise ValueError(f"r_svd must be in [1, {min(d, k)}], got {r_svd}")

    gram = s.T @ s
    eigvals, eigvecs = jacobi_eigh(gram)
    sigma = np.sqrt(np.clip(eigvals[:r_svd], 0.0, None))
    v = eigvecs[:, :r_svd].copy()

    # Gram eigenvalues carry noise ~eps * lambda_max, so singular values are
    # only trustworthy above sqrt of that; below it they are numerical zero.
    noise_floor = sigma[0] * np.sqrt(max(d, k) * np.finfo(np.float64).eps)
    rank = int(np.sum(sigma > noise_floor))  # sigma is descending
    sigma[rank:] = 0.0
    u = np.zeros((d, r_svd))
    for j in range(rank):
        u[:, j] = (s @ v[:, j]) / sigma[j]
    # modified Gram-Schmidt polish of the computed left vectors
    for j in range(rank):
        for prev in range(j):
            u[:, j] -= float(u[:, prev] @ u[:, j]) * u[:, prev]
        norm = np.linalg.norm(u[:, j])
        if norm > 1e-12:
            u[:, j] /= norm
    u = _orthonormal_fill(u, rank)
    u, v = _canonical_sign(u, v)
    return u, sigma, v


def task_vector(u: np.ndarray, sigma: np.ndarray, v: np.ndarray) -> np.ndarray:
    """All-ones aggregation of the truncated reconstruction, normalized.

    v_agg = U diag(sigma) (V^T 1_k), i.e. the rank-r reconstruction applied
    to a k-length ones vector.  Raises when the aggregation cancels to
    (near) zero; callers decide the fallback.
    """
    weights = sigma * v.sum(axis=0)
    agg = u @ weights
    norm = float(np.linalg.norm(agg))
    if norm < DEGENERATE_NORM:
        raise DegenerateTaskError(
            f"task-vector aggregation collapsed (norm {norm:.3e})"
        )
    return agg / norm


def encode_task_state(
    s_tilde: np.ndarray,
    gate_projection: np.ndarray,
    circuit_params: CircuitParams,
    mode: str = "angle_enc",
) -> Statevector:
    """Run the task vector through the gate's encoder to get its circuit state.

    "angle_enc" uses the circuit topology with zeroed variational angles;
    "angle_enc_shared_theta" reuses the gate's current angles, making task
    states depend on the trained circuit.
    """
    if mode == "angle_enc":
        params = CircuitParams(np.zeros_like(circuit_params.layer_angles))
    elif mode == "angle_enc_shared_theta":
        params = circuit_params
    else:
        raise ConfigError(
            f"unknown task_state_mode {mode!r}; expected one of {TASK_STATE_MODES}"
        )
    angles = angle_map(gate_projection, np.ravel(s_tilde))
    return run_circuit(angles, params)


def compute_task_embedding(
    adapters: AdapterStack,
    r_svd: int,
    gate: GateParams,
    task_id: int,
    mode: str = "angle_enc",
) -> TaskEmbedding:
    """Full pipeline: stack, truncate, aggregate, encode, freeze.

    Degenerate aggregation (exactly cancelling columns) falls back to the
    top left-singular vector so the pool stays total.
    """
    stacked = stack_adapter_matrix(adapters)
    u, sigma, v = truncated_svd(stacked, r_svd)
    try:
        s_tilde = task_vector(u, sigma, v)
    except DegenerateTaskError:
        log.warning(
            "task %d aggregation degenerate; falling back to top singular vector",
            task_id,
        )
        s_tilde = u[:, 0]
    state = encode_task_state(s_tilde, gate.projection, gate.circuit, mode)
    return TaskEmbedding(s_tilde=s_tilde, task_state=state, task_id=task_id)
