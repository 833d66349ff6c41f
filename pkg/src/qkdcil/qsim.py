"""Exact statevector simulation of shallow Ry/CNOT circuits.

The circuit family simulated here is fixed: per layer, a data-encoding
round of per-qubit Ry rotations, a variational round of per-qubit Ry
rotations, and a CNOT chain between adjacent qubits.  States are unit
complex vectors of length 2**q with qubit 0 as the most significant bit
of the amplitude index.  Everything is pure and deterministic; fidelity
is computed exactly from amplitudes (no sampling, no noise).

Gradients use the parameter-shift rule, which is exact for Ry gates:
d<P>/da = (F(a + pi/2) - F(a - pi/2)) / 2 for any projector expectation.
`fidelity_grad_shift` is the plain re-run form; `shift_rule_jacobians`
computes the same numbers with a single forward/backward sweep and is
batched over samples, which is what the training loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MAX_QUBITS = 20
_ORACLE_MAX_QUBITS = 6
_SHIFT = np.pi / 2.0


@dataclass(frozen=True)
class Statevector:
    """Unit complex amplitude vector of a q-qubit register."""

    amplitudes: np.ndarray
    num_qubits: int

    @property
    def dim(self) -> int:
        return 1 << self.num_qubits


@dataclass
class CircuitParams:
    """Variational rotation angles, one row per layer, one column per qubit.

    Angles are stored unwrapped (no reduction mod 2*pi) so gradients stay
    smooth across updates.
    """

    layer_angles: np.ndarray

    def __post_init__(self) -> None:
        arr = np.atleast_2d(np.asarray(self.layer_angles, dtype=np.float64))
        if arr.ndim != 2:
            raise ValueError(f"layer_angles must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("layer_angles must be finite")
        self.layer_angles = arr

    @property
    def num_layers(self) -> int:
        return self.layer_angles.shape[0]

    @property
    def num_qubits(self) -> int:
        return self.layer_angles.shape[1]


def _frozen_state(amplitudes: np.ndarray, num_qubits: int) -> Statevector:
    amplitudes = np.ascontiguousarray(amplitudes, dtype=np.complex128)
    amplitudes.setflags(write=False)
    return Statevector(amplitudes=amplitudes, num_qubits=num_qubits)


def zero_state(num_qubits: int) -> Statevector:
    """All-zero computational basis state |0...0>."""
    if not 1 <= int(num_qubits) <= MAX_QUBITS:
        raise ConfigError(f"qubit count must be in [1, {MAX_QUBITS}], got {num_qubits}")
    num_qubits = int(num_qubits)
    amps = np.zeros(1 << num_qubits, dtype=np.complex128)
    amps[0] = 1.0
    return _frozen_state(amps, num_qubits)


def ry_on_array(amps: np.ndarray, num_qubits: int, qubit: int, angle) -> np.ndarray:
    """Apply Ry(angle) on one qubit of an amplitude array.

    `amps` has shape (..., 2**num_qubits); `angle` is a scalar or an array
    broadcastable to the leading dimensions, enabling per-sample rotation
    angles in batched runs.  Returns a new array.
    """
    lead = amps.shape[:-1]
    block = 1 << (num_qubits - 1 - qubit)
    view = amps.reshape(lead + (-1, 2, block))
    angle = np.asarray(angle, dtype=np.float64)
    half = angle / 2.0
    cos = np.cos(half)
    sin = np.sin(half)
    if angle.ndim:
        cos = cos[..., None, None]
        sin = sin[..., None, None]
    a0 = view[..., 0, :]
    a1 = view[..., 1, :]
    out = np.empty_like(view)
    out[..., 0, :] = cos * a0 - sin * a1
    out[..., 1, :] = sin * a0 + cos * a1
    return out.reshape(amps.shape)


def cnot_on_array(amps: np.ndarray, num_qubits: int, control: int, target: int) -> np.ndarray:
    """Apply CNOT(control -> target) on an amplitude array of shape (..., 2**q)."""
    lead = amps.shape[:-1]
    out = amps.copy()
    view = out.reshape(lead + (2,) * num_qubits)
    base = [slice(None)] * (len(lead) + num_qubits)
    sel0 = list(base)
    sel0[len(lead) + control] = 1
    sel1 = list(sel0)
    sel0[len(lead) + target] = 0
    sel1[len(lead) + target] = 1
    sel0 = tuple(sel0)
    sel1 = tuple(sel1)
    tmp = view[sel0].copy()
    view[sel0] = view[sel1]
    view[sel1] = tmp
    return out


def _check_qubit(index: int, num_qubits: int, name: str = "qubit") -> None:
    if not 0 <= index < num_qubits:
        raise IndexError(f"{name} index {index} out of range for {num_qubits} qubits")


def apply_ry(state: Statevector, qubit: int, angle: float) -> Statevector:
    """Rotate one qubit by Ry(angle) = [[cos a/2, -sin a/2], [sin a/2, cos a/2]]."""
    _check_qubit(qubit, state.num_qubits)
    return _frozen_state(
        ry_on_array(state.amplitudes, state.num_qubits, qubit, float(angle)),
        state.num_qubits,
    )


def apply_cnot(state: Statevector, control: int, target: int) -> Statevector:
    """Flip the target qubit on amplitudes where the control qubit is 1."""
    if control == target:
        raise ValueError("control and target qubits must differ")
    _check_qubit(control, state.num_qubits, "control")
    _check_qubit(target, state.num_qubits, "target")
    return _frozen_state(
        cnot_on_array(state.amplitudes, state.num_qubits, control, target),
        state.num_qubits,
    )


def _layer_ops(num_qubits: int, num_layers: int):
    """Yield the gate sequence (kind, layer, qubit) in application order."""
    for layer in range(num_layers):
        for j in range(num_qubits):
            yield ("enc", layer, j)
        for j in range(num_qubits):
            yield ("var", layer, j)
        for j in range(num_qubits - 1):
            yield ("ent", layer, j)


def run_circuit_batch(angle_rows: np.ndarray, params: CircuitParams) -> np.ndarray:
    """Run the layered circuit for a batch of encoding-angle rows.

    angle_rows has shape (B, q); the same variational parameters apply to
    every row.  Returns amplitudes of shape (B, 2**q).
    """
    angle_rows = np.asarray(angle_rows, dtype=np.float64)
    q = params.num_qubits
    if angle_rows.ndim != 2 or angle_rows.shape[1] != q:
        raise ValueError(
            f"angle rows must have shape (B, {q}), got {angle_rows.shape}"
        )
    theta = params.layer_angles
    amps = np.zeros((angle_rows.shape[0], 1 << q), dtype=np.complex128)
    amps[:, 0] = 1.0
    for kind, layer, j in _layer_ops(q, params.num_layers):
        if kind == "enc":
            amps = ry_on_array(amps, q, j, angle_rows[:, j])
        elif kind == "var":
            amps = ry_on_array(amps, q, j, theta[layer, j])
        else:
            amps = cnot_on_array(amps, q, j, j + 1)
    return amps


def run_circuit(input_angles: np.ndarray, params: CircuitParams) -> Statevector:
    """Apply the full layered circuit to |0...0>.

    Each layer encodes `input_angles` as per-qubit Ry rotations, applies the
    layer's variational Ry rotations, then the ascending CNOT chain.
    """
    input_angles = np.asarray(input_angles, dtype=np.float64).ravel()
    if input_angles.shape[0] != params.num_qubits:
        raise ValueError(
            f"expected {params.num_qubits} input angles, got {input_angles.shape[0]}"
        )
    amps = run_circuit_batch(input_angles[None, :], params)[0]
    return _frozen_state(amps, params.num_qubits)


def _ry_matrix(angle: float) -> np.ndarray:
    half = angle / 2.0
    c, s = np.cos(half), np.sin(half)
    return np.array([[c, -s], [s, c]], dtype=np.complex128)


def _cnot_matrix(num_qubits: int, control: int, target: int) -> np.ndarray:
    dim = 1 << num_qubits
    mat = np.zeros((dim, dim), dtype=np.complex128)
    for col in range(dim):
        row = col
        if (col >> (num_qubits - 1 - control)) & 1:
            row = col ^ (1 << (num_qubits - 1 - target))
        mat[row, col] = 1.0
    return mat


def dense_circuit_unitary(input_angles: np.ndarray, params: CircuitParams) -> np.ndarray:
    """Build the whole circuit as one dense 2**q x 2**q unitary.

    Kronecker-product construction, intended as a small-scale cross-check
    for `run_circuit`; refuses q above the oracle ceiling.
    """
    q = params.num_qubits
    if q > _ORACLE_MAX_QUBITS:
        raise ValueError(
            f"dense unitary limited to {_ORACLE_MAX_QUBITS} qubits, got {q}"
        )
    input_angles = np.asarray(input_angles, dtype=np.float64).ravel()
    if input_angles.shape[0] != q:
        raise ValueError(f"expected {q} input angles, got {input_angles.shape[0]}")

    def kron_ry(angles: np.ndarray) -> np.ndarray:
        mat = _ry_matrix(angles[0])
        for a in angles[1:]:
            mat = np.kron(mat, _ry_matrix(a))
        return mat

    dim = 1 << q
    total = np.eye(dim, dtype=np.complex128)
    for layer in range(params.num_layers):
        layer_u = kron_ry(input_angles)
        layer_u = kron_ry(params.layer_angles[layer]) @ layer_u
        for j in range(q - 1):
            layer_u = _cnot_matrix(q, j, j + 1) @ layer_u
        total = layer_u @ total
    return total


def fidelity(a: Statevector, b: Statevector) -> float:
    """Squared magnitude of the overlap |<a|b>|**2 (conjugation on `a`)."""
    if a.num_qubits != b.num_qubits:
        raise ValueError(
            f"qubit counts differ: {a.num_qubits} vs {b.num_qubits}"
        )
    return float(np.abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2)


def fidelity_batch(states: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Pairwise fidelities between state rows (B, dim) and target rows (m, dim)."""
    overlaps = states.conj() @ targets.T
    return np.abs(overlaps) ** 2


def _run_with_shift(
    input_angles: np.ndarray,
    params: CircuitParams,
    kind: str,
    layer: int,
    qubit: int,
    delta: float,
) -> np.ndarray:
    """Run the circuit with one specific gate occurrence shifted by delta."""
    q = params.num_qubits
    theta = params.layer_angles
    amps = np.zeros(1 << q, dtype=np.complex128)
    amps[0] = 1.0
    for g_kind, g_layer, j in _layer_ops(q, params.num_layers):
        if g_kind == "ent":
            amps = cnot_on_array(amps, q, j, j + 1)
            continue
        angle = input_angles[j] if g_kind == "enc" else theta[g_layer, j]
        if g_kind == kind and g_layer == layer and j == qubit:
            angle = angle + delta
        amps = ry_on_array(amps, q, j, angle)
    return amps


def fidelity_grad_shift(
    input_angles: np.ndarray,
    params: CircuitParams,
    target: Statevector,
) -> tuple[np.ndarray, np.ndarray]:
    """Parameter-shift gradient of the circuit-vs-target fidelity.

    Returns (grad_input, grad_theta) where grad_input[j] is the derivative
    with respect to input angle j (summed over its per-layer occurrences)
    and grad_theta[l, j] the derivative for the variational angle of layer
    l on qubit j.  Each occurrence contributes (F(a+pi/2) - F(a-pi/2)) / 2.
    """
    input_angles = np.asarray(input_angles, dtype=np.float64).ravel()
    q = params.num_qubits
    if input_angles.shape[0] != q:
        raise ValueError(f"expected {q} input angles, got {input_angles.shape[0]}")
    if target.num_qubits != q:
        raise ValueError("target qubit count does not match circuit width")
    tgt = target.amplitudes

    def shifted_fid(kind: str, layer: int, qubit: int, delta: float) -> float:
        amps = _run_with_shift(input_angles, params, kind, layer, qubit, delta)
        return float(np.abs(np.vdot(tgt, amps)) ** 2)

    grad_input = np.zeros(q)
    grad_theta = np.zeros_like(params.layer_angles)
    for layer in range(params.num_layers):
        for j in range(q):
            plus = shifted_fid("enc", layer, j, _SHIFT)
            minus = shifted_fid("enc", layer, j, -_SHIFT)
            grad_input[j] += 0.5 * (plus - minus)
            plus = shifted_fid("var", layer, j, _SHIFT)
            minus = shifted_fid("var", layer, j, -_SHIFT)
            grad_theta[layer, j] = 0.5 * (plus - minus)
    return grad_input, grad_theta


def shift_rule_jacobians(
    angle_rows: np.ndarray,
    params: CircuitParams,
    targets: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched parameter-shift Jacobians of fidelity against many targets.

    angle_rows: (B, q) encoding angles per sample; targets: (m, 2**q)
    amplitude rows.  Returns (j_input, j_theta) with shapes (B, m, q) and
    (B, m, L, q).  Values are identical to `fidelity_grad_shift` run per
    sample/target pair, computed here in one reverse sweep: the forward
    state is unwound gate by gate while targets are pulled back through
    the circuit suffix, so each shifted fidelity costs two overlaps
    instead of a full re-simulation.
    """
    angle_rows = np.asarray(angle_rows, dtype=np.float64)
    q = params.num_qubits
    num_layers = params.num_layers
    theta = params.layer_angles
    batch = angle_rows.shape[0]
    targets = np.asarray(targets, dtype=np.complex128)
    m = targets.shape[0]

    state = run_circuit_batch(angle_rows, params)
    pulled = np.broadcast_to(targets[None, :, :], (batch, m, targets.shape[1])).copy()

    j_input = np.zeros((batch, m, q))
    j_theta = np.zeros((batch, m, num_layers, q))

    def overlap_fid(shifted: np.ndarray) -> np.ndarray:
        ov = np.einsum("bmk,bk->bm", pulled.conj(), shifted)
        return np.abs(ov) ** 2

    for kind, layer, j in reversed(list(_layer_ops(q, num_layers))):
        if kind == "ent":
            state = cnot_on_array(state, q, j, j + 1)
            pulled = cnot_on_array(pulled, q, j, j + 1)
            continue
        plus = overlap_fid(ry_on_array(state, q, j, _SHIFT))
        minus = overlap_fid(ry_on_array(state, q, j, -_SHIFT))
        grad = 0.5 * (plus - minus)
        if kind == "var":
            j_theta[:, :, layer, j] = grad
            angle = theta[layer, j]
            state = ry_on_array(state, q, j, -angle)
            pulled = ry_on_array(pulled, q, j, -angle)
        else:
            j_input[:, :, j] += grad
            angle = angle_rows[:, j]
            state = ry_on_array(state, q, j, -angle)
            pulled = ry_on_array(pulled, q, j, -angle[:, None])
    return j_input, j_theta
