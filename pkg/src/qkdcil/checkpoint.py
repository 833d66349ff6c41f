"""Binary checkpointing of incremental models.

Layout: an 8-byte magic "QKDCKPT1", then a flat sequence of sections.
Each section is

    u16  key length          (little-endian)
    ...  key bytes           (utf-8)
    u8   ndim
    u64  dim_0 .. dim_{n-1}  (little-endian)
    f64  payload             (little-endian, C order)

Every value is stored as a float64 array: integers and enum codes as 0-d
scalars, complex amplitudes as a trailing real/imag axis.  Loading parses
the whole file before constructing anything, so a corrupt file never
yields a partial model.  Training bookkeeping (loss curves) is not part
of a checkpoint; only state that affects inference is.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import fields

import numpy as np

from .errors import FormatError, VersionError
from .gating import GateParams, MlpGateParams
from .network import AdapterBlock, AdapterStack, Backbone, BackboneBlock, TaskHead, init_backbone
from .qsim import CircuitParams, Statevector
from .taskembed import TASK_STATE_MODES, TaskEmbedding
from .trainer import GATE_INPUTS, GATE_KINDS, IncrementalModel, TrainConfig

MAGIC = b"QKDCKPT1"
_MAGIC_FAMILY = b"QKDCKPT"

_ENUM_FIELDS: dict[str, tuple[str, ...]] = {
    "gate_kind": GATE_KINDS,
    "gate_input": GATE_INPUTS,
    "distill_space": ("logit_kl", "feature_mse"),
    "sparsity_target": ("p", "entropy_alpha"),
    "task_state_mode": TASK_STATE_MODES,
    "backbone_mode": ("mlp", "identity"),
}
_INT_FIELDS = frozenset(
    ("epochs", "batch_size", "r_adapter", "r_svd", "q", "l_q", "width", "num_blocks", "seed")
)


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


class _Writer:
    def __init__(self) -> None:
        self.chunks: list[bytes] = [MAGIC]

    def put(self, key: str, value) -> None:
        # ascontiguousarray would promote 0-d scalars to 1-d; keep shapes as is
        arr = np.asarray(value, dtype=np.float64)
        kb = key.encode("utf-8")
        self.chunks.append(struct.pack("<H", len(kb)))
        self.chunks.append(kb)
        self.chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            self.chunks.append(struct.pack("<Q", dim))
        self.chunks.append(arr.astype("<f8", order="C").tobytes())

    def payload(self) -> bytes:
        return b"".join(self.chunks)


def read_sections(data: bytes) -> dict[str, np.ndarray]:
    """Parse the section stream after the magic; strict about truncation."""
    sections: dict[str, np.ndarray] = {}
    offset = len(MAGIC)
    total = len(data)

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > total:
            raise FormatError(f"truncated checkpoint: {what} cut off at byte {offset}")
        piece = data[offset : offset + count]
        offset += count
        return piece

    while offset < total:
        (key_len,) = struct.unpack("<H", take(2, "section key length"))
        key = take(key_len, "section key").decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<B", take(1, f"ndim of {key!r}"))
        shape = tuple(
            struct.unpack("<Q", take(8, f"shape of {key!r}"))[0] for _ in range(ndim)
        )
        if any(dim > total for dim in shape):
            raise FormatError(f"section {key!r} declares an impossible shape {shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(count * 8, f"payload of {key!r}")
        if key in sections:
            raise FormatError(f"duplicate section {key!r} at byte {offset}")
        sections[key] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return sections


def _check_magic(data: bytes) -> None:
    if len(data) < len(MAGIC):
        raise FormatError(f"truncated checkpoint: magic cut off at byte {len(data)}")
    magic = data[: len(MAGIC)]
    if magic == MAGIC:
        return
    if magic.startswith(_MAGIC_FAMILY):
        raise VersionError(
            f"unsupported checkpoint version {magic[len(_MAGIC_FAMILY):]!r}; "
            f"this build reads {MAGIC[len(_MAGIC_FAMILY):]!r}"
        )
    raise FormatError("bad magic at byte 0: not a checkpoint file")


def serialize_model(model: IncrementalModel) -> bytes:
    w = _Writer()
    for f in fields(TrainConfig):
        value = getattr(model.config, f.name)
        if f.name in _ENUM_FIELDS:
            value = _ENUM_FIELDS[f.name].index(value)
        w.put(f"config/{f.name}", float(value))

    w.put("model/input_dim", model.input_dim)
    w.put("model/seen_classes", model.seen_classes)
    w.put("model/num_tasks", model.num_tasks)
    w.put("model/random_gate_counter", model.random_gate_counter)

    if model.backbone.mode == "mlp":
        w.put("backbone/input_weight", model.backbone.input_weight)
        for i, blk in enumerate(model.backbone.blocks):
            w.put(f"backbone/block{i}/weight", blk.weight)
            w.put(f"backbone/block{i}/bias", blk.bias)

    w.put("gate/projection", model.gate.projection)
    w.put("gate/theta", model.gate.circuit.layer_angles)
    if model.mlp_gate is not None:
        for name in ("w1", "b1", "w2", "b2"):
            w.put(f"mlp/{name}", getattr(model.mlp_gate, name))

    for t, stack in enumerate(model.adapter_pool):
        for i, blk in enumerate(stack.blocks):
            w.put(f"adapter{t}/block{i}/w_down", blk.w_down)
            w.put(f"adapter{t}/block{i}/w_up", blk.w_up)
    for t, head in enumerate(model.heads):
        w.put(f"head{t}/weight", head.weight)
        w.put(f"head{t}/bias", head.bias)
        w.put(f"head{t}/class_offset", head.class_offset)
    for t, emb in enumerate(model.embeddings):
        w.put(f"embedding{t}/s_tilde", emb.s_tilde)
        amps = emb.task_state.amplitudes
        w.put(f"embedding{t}/state", np.stack([amps.real, amps.imag], axis=-1))
    return w.payload()


def save_checkpoint(model: IncrementalModel, path: str) -> None:
    """Write atomically: temp file in the target directory, then replace."""
    payload = serialize_model(model)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _as_int(value: np.ndarray, key: str) -> int:
    scalar = float(np.asarray(value).reshape(()))
    if not math.isfinite(scalar) or scalar != round(scalar):
        raise FormatError(f"section {key!r} holds {scalar!r}, expected an integer")
    return int(round(scalar))


def _decode_config(sections: dict[str, np.ndarray]) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        key = f"config/{f.name}"
        if key not in sections:
            raise FormatError(f"missing section {key!r}")
        if f.name in _ENUM_FIELDS:
            code = _as_int(sections[key], key)
            options = _ENUM_FIELDS[f.name]
            if not 0 <= code < len(options):
                raise FormatError(f"section {key!r} holds invalid enum code {code}")
            kwargs[f.name] = options[code]
        elif f.name in _INT_FIELDS:
            kwargs[f.name] = _as_int(sections[key], key)
        else:
            kwargs[f.name] = float(np.asarray(sections[key]).reshape(()))
    return TrainConfig(**kwargs)


def deserialize_model(data: bytes) -> IncrementalModel:
    _check_magic(data)
    sections = read_sections(data)

    def need(key: str) -> np.ndarray:
        if key not in sections:
            raise FormatError(f"missing section {key!r}")
        return sections[key]

    config = _decode_config(sections)
    input_dim = _as_int(need("model/input_dim"), "model/input_dim")
    seen_classes = _as_int(need("model/seen_classes"), "model/seen_classes")
    num_tasks = _as_int(need("model/num_tasks"), "model/num_tasks")
    counter = _as_int(need("model/random_gate_counter"), "model/random_gate_counter")

    if config.backbone_mode == "identity":
        backbone = init_backbone(
            input_dim, config.width, config.num_blocks, config.seed, "identity"
        )
    else:
        blocks = tuple(
            BackboneBlock(
                weight=_frozen(need(f"backbone/block{i}/weight")),
                bias=_frozen(need(f"backbone/block{i}/bias")),
            )
            for i in range(config.num_blocks)
        )
        backbone = Backbone(
            _frozen(need("backbone/input_weight")), blocks, "mlp",
            input_dim, config.width, config.seed,
        )

    gate = GateParams(
        projection=np.array(need("gate/projection")),
        circuit=CircuitParams(np.array(need("gate/theta"))),
        tau=config.tau,
    )
    mlp_gate = None
    if config.gate_kind == "mlp":
        mlp_gate = MlpGateParams(
            w1=np.array(need("mlp/w1")),
            b1=np.array(need("mlp/b1")),
            w2=np.array(need("mlp/w2")),
            b2=np.array(need("mlp/b2")),
        )

    adapter_pool, heads, embeddings = [], [], []
    for t in range(num_tasks):
        stack = AdapterStack(
            blocks=[
                AdapterBlock(
                    w_down=np.array(need(f"adapter{t}/block{i}/w_down")),
                    w_up=np.array(need(f"adapter{t}/block{i}/w_up")),
                )
                for i in range(config.num_blocks)
            ],
            task_id=t,
        )
        stack.freeze()
        adapter_pool.append(stack)

        head = TaskHead(
            weight=np.array(need(f"head{t}/weight")),
            bias=np.array(need(f"head{t}/bias")),
            class_offset=_as_int(need(f"head{t}/class_offset"), f"head{t}/class_offset"),
        )
        head.freeze()
        heads.append(head)

        packed = need(f"embedding{t}/state")
        if packed.ndim != 2 or packed.shape[1] != 2:
            raise FormatError(f"section 'embedding{t}/state' must have a real/imag axis")
        amps = (packed[:, 0] + 1j * packed[:, 1]).astype(np.complex128)
        num_qubits = int(round(math.log2(amps.shape[0])))
        if 1 << num_qubits != amps.shape[0]:
            raise FormatError(f"section 'embedding{t}/state' length is not a power of two")
        amps.setflags(write=False)
        embeddings.append(
            TaskEmbedding(
                s_tilde=np.array(need(f"embedding{t}/s_tilde")),
                task_state=Statevector(amplitudes=amps, num_qubits=num_qubits),
                task_id=t,
            )
        )

    return IncrementalModel(
        backbone=backbone,
        gate=gate,
        config=config,
        input_dim=input_dim,
        adapter_pool=adapter_pool,
        heads=heads,
        embeddings=embeddings,
        mlp_gate=mlp_gate,
        seen_classes=seen_classes,
        random_gate_counter=counter,
    )


def load_checkpoint(path: str) -> IncrementalModel:
    with open(path, "rb") as fh:
        data = fh.read()
    return deserialize_model(data)


def inspect_checkpoint(path: str) -> dict:
    """Summary of a checkpoint without constructing the model."""
    with open(path, "rb") as fh:
        data = fh.read()
    _check_magic(data)
    sections = read_sections(data)
    config = _decode_config(sections)
    return {
        "num_tasks": _as_int(sections["model/num_tasks"], "model/num_tasks"),
        "seen_classes": _as_int(sections["model/seen_classes"], "model/seen_classes"),
        "input_dim": _as_int(sections["model/input_dim"], "model/input_dim"),
        "config": config.as_dict(),
        "sections": [(key, list(arr.shape)) for key, arr in sections.items()],
        "total_bytes": len(data),
    }
