"""Incremental training protocol and gated inference.

Each task gets a fresh adapter and head, trained jointly with the gate by
SGD with momentum under a cosine learning-rate schedule.  Previous tasks'
parameters are frozen and act only as distillation teachers, weighted by
the gate's relevance.  After a task finishes, its adapter is summarized
into a task embedding and the pair joins the frozen pool.

Inference is task-agnostic: relevance weights over all adapters fuse the
per-adapter features into one vector, all heads score it, and the argmax
over the concatenated logits is the prediction.  No task labels and no
stored samples are ever used.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .datagen import LabeledSet
from .errors import ConfigError, DataError, StateError
from .gating import (
    GateParams,
    MlpGateParams,
    cosine_gate_batch,
    init_gate,
    init_mlp_gate,
    mlp_gate_batch,
    relevance_batch,
)
from .losses import loss_gradients, teacher_snapshot
from .network import (
    AdapterBlock,
    AdapterStack,
    Backbone,
    TaskHead,
    backbone_forward,
    head_forward,
    init_adapter,
    init_backbone,
    init_head,
)
from .taskembed import TASK_STATE_MODES, TaskEmbedding, compute_task_embedding

GATE_KINDS = ("quantum", "cosine", "mlp", "random")
GATE_INPUTS = ("raw_backbone", "first_adapter", "first_two")
_RANDOM_GATE_STREAM = 91000
_SHUFFLE_STREAM = 201


@dataclass
class TrainConfig:
    """Hyperparameters of one incremental run."""

    epochs: int = 20
    batch_size: int = 32
    base_lr: float = 0.05
    momentum: float = 0.9
    r_adapter: int = 8
    r_svd: int = 12
    q: int = 8
    l_q: int = 2
    tau: float = 1.0
    lambda_kd: float = 1.0
    lambda_s: float = 0.05
    gate_kind: str = "quantum"
    gate_input: str = "first_adapter"
    distill_space: str = "logit_kl"
    sparsity_target: str = "p"
    task_state_mode: str = "angle_enc"
    backbone_mode: str = "mlp"
    width: int = 48
    num_blocks: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.r_adapter < 1 or self.r_svd < 1:
            raise ConfigError("r_adapter and r_svd must be positive")
        if not 1 <= self.q <= 20:
            raise ConfigError("q must be in [1, 20]")
        if self.l_q < 1:
            raise ConfigError("l_q must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.lambda_kd < 0 or self.lambda_s < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.gate_kind not in GATE_KINDS:
            raise ConfigError(f"gate_kind must be one of {GATE_KINDS}, got {self.gate_kind!r}")
        if self.gate_input not in GATE_INPUTS:
            raise ConfigError(
                f"gate_input must be one of {GATE_INPUTS}, got {self.gate_input!r}"
            )
        if self.distill_space not in ("logit_kl", "feature_mse"):
            raise ConfigError(f"unknown distill_space {self.distill_space!r}")
        if self.sparsity_target not in ("p", "entropy_alpha"):
            raise ConfigError(f"unknown sparsity_target {self.sparsity_target!r}")
        if self.task_state_mode not in TASK_STATE_MODES:
            raise ConfigError(f"unknown task_state_mode {self.task_state_mode!r}")
        if self.backbone_mode not in ("mlp", "identity"):
            raise ConfigError(f"unknown backbone_mode {self.backbone_mode!r}")
        if self.width < 2 or self.num_blocks < 1:
            raise ConfigError("width must be >= 2 and num_blocks >= 1")
        if self.r_adapter >= self.width:
            raise ConfigError("r_adapter must be smaller than width")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class Metrics:
    """Per-stage Top-1 accuracies plus their final and average values."""

    per_stage_accuracy: tuple[float, ...]
    final: float = 0.0
    average: float = 0.0

    def __post_init__(self) -> None:
        accs = tuple(float(a) for a in self.per_stage_accuracy)
        if not accs:
            raise ValueError("metrics need at least one stage")
        object.__setattr__(self, "per_stage_accuracy", accs)
        object.__setattr__(self, "final", accs[-1])
        object.__setattr__(self, "average", float(np.mean(accs)))


@dataclass
class IncrementalModel:
    """Everything accumulated over the stream so far."""

    backbone: Backbone
    gate: GateParams
    config: TrainConfig
    input_dim: int
    adapter_pool: list[AdapterStack] = field(default_factory=list)
    heads: list[TaskHead] = field(default_factory=list)
    embeddings: list[TaskEmbedding] = field(default_factory=list)
    mlp_gate: MlpGateParams | None = None
    seen_classes: int = 0
    random_gate_counter: int = 0
    loss_curves: list[list[float]] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.adapter_pool)


def new_model(config: TrainConfig, input_dim: int) -> IncrementalModel:
    backbone = init_backbone(
        input_dim, config.width, config.num_blocks, config.seed, config.backbone_mode
    )
    gate = init_gate(config.width, config.q, config.l_q, config.tau, config.seed)
    mlp_gate = (
        init_mlp_gate(config.width, config.seed) if config.gate_kind == "mlp" else None
    )
    return IncrementalModel(
        backbone=backbone, gate=gate, config=config, input_dim=input_dim, mlp_gate=mlp_gate
    )


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if total_steps < 1:
        raise ConfigError("total_steps must be positive")
    if step > total_steps or step < 0:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def _unit_rows(arr: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    return arr / np.where(norms < 1e-12, 1.0, norms)


def gate_input_features(model: IncrementalModel, x: np.ndarray) -> np.ndarray:
    """Detached, unit-normalized features fed to the gate.

    The configured extraction mirrors passing the raw backbone, the first
    task's adapter, or the first two adapters (averaged).  Gradients never
    flow through this path; adapters referenced here are frozen ones.
    """
    kind = model.config.gate_input
    x = np.atleast_2d(x)
    if kind == "raw_backbone" or not model.adapter_pool:
        feats = backbone_forward(model.backbone, x)
    elif kind == "first_adapter" or len(model.adapter_pool) == 1:
        feats = backbone_forward(model.backbone, x, model.adapter_pool[0])
    else:  # first_two
        feats = 0.5 * (
            backbone_forward(model.backbone, x, model.adapter_pool[0])
            + backbone_forward(model.backbone, x, model.adapter_pool[1])
        )
    return _unit_rows(feats)


def _random_one_hot(model: IncrementalModel, batch: int, pool_size: int) -> np.ndarray:
    """One-hot relevance rows from the model's counted random stream."""
    rng = np.random.default_rng(
        [model.config.seed, _RANDOM_GATE_STREAM, model.random_gate_counter]
    )
    model.random_gate_counter += 1
    picks = rng.integers(pool_size, size=batch)
    out = np.zeros((batch, pool_size))
    out[np.arange(batch), picks] = 1.0
    return out


def _inference_weights(model: IncrementalModel, x: np.ndarray) -> np.ndarray:
    """Relevance weights over all trained adapters, shape (B, t)."""
    cfg = model.config
    pool_size = model.num_tasks
    if cfg.gate_kind == "random":
        return _random_one_hot(model, x.shape[0], pool_size)
    rows = gate_input_features(model, x)
    if cfg.gate_kind == "quantum":
        return relevance_batch(rows, model.embeddings, model.gate)[1]
    if cfg.gate_kind == "cosine":
        vectors = np.stack([emb.s_tilde for emb in model.embeddings])
        return cosine_gate_batch(rows, vectors, cfg.tau)[1]
    return mlp_gate_batch(rows, model.mlp_gate, cfg.tau)[1]


def infer_batch(model: IncrementalModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted global class per row, plus the relevance weights used.

    Fuses per-adapter features with the relevance weights, concatenates
    every head's logits over the fused feature, and takes the argmax
    (numpy argmax breaks exact ties toward the lowest class index).
    """
    if model.num_tasks == 0:
        raise StateError("model has no trained tasks")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    weights = _inference_weights(model, x)
    feats = np.stack(
        [backbone_forward(model.backbone, x, stack) for stack in model.adapter_pool]
    )  # (t, B, d)
    fused = np.einsum("bt,tbd->bd", weights, feats)
    logits = np.concatenate([head_forward(fused, head) for head in model.heads], axis=-1)
    return np.argmax(logits, axis=-1), weights


def infer(model: IncrementalModel, x: np.ndarray) -> int:
    """Single-sample prediction."""
    pred, _ = infer_batch(model, np.ravel(x)[None, :])
    return int(pred[0])


def _sgd_apply(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float) -> None:
    velocity *= momentum
    velocity -= lr * grad
    param += velocity


def _trained_delta(adapters: AdapterStack, cfg: TrainConfig, task_id: int) -> AdapterStack:
    """Adapter stack holding parameters minus their deterministic init.

    The task embedding should summarize what the task learned; at this
    scale the random down-projection init otherwise carries several times
    more Frobenius mass than the trained signal and every task vector
    degenerates to near-identical init noise.  Init is recomputed from the
    same seed stream used at allocation, so the delta is exact.
    """
    fresh = init_adapter(cfg.width, cfg.r_adapter, cfg.num_blocks, cfg.seed, task_id)
    return AdapterStack(
        blocks=[
            AdapterBlock(w_down=blk.w_down - ref.w_down, w_up=blk.w_up - ref.w_up)
            for blk, ref in zip(adapters.blocks, fresh.blocks)
        ],
        task_id=task_id,
    )


def train_task(
    model: IncrementalModel, dataset: LabeledSet, config: TrainConfig | None = None
) -> IncrementalModel:
    """Train one incremental stage in place and freeze its artifacts.

    Only the fresh adapter, fresh head, and the gate receive updates; the
    first task (empty teacher pool) trains with cross-entropy alone and
    touches neither the gate nor any RNG stream beyond batch shuffling.
    """
    cfg = config or model.config
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.class_offset != model.seen_classes:
        raise DataError(
            f"task classes start at {dataset.class_offset}, expected {model.seen_classes}"
        )
    task_id = model.num_tasks
    adapters = init_adapter(cfg.width, cfg.r_adapter, cfg.num_blocks, cfg.seed, task_id)
    head = init_head(cfg.width, dataset.num_classes, dataset.class_offset)

    pool = list(model.embeddings)
    teacher_stacks = list(model.adapter_pool)
    use_relevance = bool(pool) and (cfg.lambda_kd != 0.0 or cfg.lambda_s != 0.0)

    velocities: dict = {
        "head_weight": np.zeros_like(head.weight),
        "head_bias": np.zeros_like(head.bias),
        "adapter": [
            {"w_down": np.zeros_like(b.w_down), "w_up": np.zeros_like(b.w_up)}
            for b in adapters.blocks
        ],
    }
    if use_relevance and cfg.gate_kind == "quantum":
        velocities["gate_projection"] = np.zeros_like(model.gate.projection)
        velocities["gate_theta"] = np.zeros_like(model.gate.circuit.layer_angles)
    if use_relevance and cfg.gate_kind == "mlp":
        for name in ("w1", "b1", "w2", "b2"):
            velocities[f"mlp_{name}"] = np.zeros_like(getattr(model.mlp_gate, name))

    n = len(dataset)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    local_labels = dataset.labels - dataset.class_offset
    step = 0
    epoch_losses: list[float] = []

    for epoch in range(cfg.epochs):
        perm = np.random.default_rng(
            [cfg.seed, _SHUFFLE_STREAM, task_id, epoch]
        ).permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x = dataset.features[idx]
            y = local_labels[idx]
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            step += 1

            gate_rows = None
            t_feats = t_logits = None
            random_weights = None
            if use_relevance:
                gate_rows = gate_input_features(model, x)
                t_feats, t_logits = teacher_snapshot(
                    model.backbone, teacher_stacks, head, x, cfg.distill_space
                )
                if cfg.gate_kind == "random":
                    random_weights = _random_one_hot(model, x.shape[0], len(pool))

            breakdown, grads = loss_gradients(
                model.backbone,
                adapters,
                head,
                x,
                y,
                pool=pool,
                teacher_features=t_feats,
                teacher_logits=t_logits,
                gate_kind=cfg.gate_kind,
                gate=model.gate,
                mlp_gate=model.mlp_gate,
                random_weights=random_weights,
                gate_input_rows=gate_rows,
                lambda_kd=cfg.lambda_kd,
                lambda_s=cfg.lambda_s,
                tau=cfg.tau,
                distill_space=cfg.distill_space,
                sparsity_target=cfg.sparsity_target,
            )
            running += breakdown.total

            _sgd_apply(head.weight, grads["head_weight"], velocities["head_weight"], lr, cfg.momentum)
            _sgd_apply(head.bias, grads["head_bias"], velocities["head_bias"], lr, cfg.momentum)
            for blk, g, v in zip(adapters.blocks, grads["adapter"], velocities["adapter"]):
                _sgd_apply(blk.w_down, g["w_down"], v["w_down"], lr, cfg.momentum)
                _sgd_apply(blk.w_up, g["w_up"], v["w_up"], lr, cfg.momentum)
            if "gate_projection" in grads:
                _sgd_apply(
                    model.gate.projection, grads["gate_projection"],
                    velocities["gate_projection"], lr, cfg.momentum,
                )
                _sgd_apply(
                    model.gate.circuit.layer_angles, grads["gate_theta"],
                    velocities["gate_theta"], lr, cfg.momentum,
                )
            for name in ("w1", "b1", "w2", "b2"):
                key = f"mlp_{name}"
                if key in grads:
                    _sgd_apply(
                        getattr(model.mlp_gate, name), grads[key], velocities[key],
                        lr, cfg.momentum,
                    )
        epoch_losses.append(running / batches_per_epoch)

    embedding = compute_task_embedding(
        _trained_delta(adapters, cfg, task_id), cfg.r_svd, model.gate,
        task_id, cfg.task_state_mode,
    )
    adapters.freeze()
    head.freeze()
    model.adapter_pool.append(adapters)
    model.heads.append(head)
    model.embeddings.append(embedding)
    if model.mlp_gate is not None:
        model.mlp_gate.add_task()
    model.seen_classes += dataset.num_classes
    model.loss_curves.append(epoch_losses)
    return model


def evaluate(model: IncrementalModel, test_sets: list[LabeledSet]) -> float:
    """Top-1 accuracy over the union of the given test splits."""
    return evaluate_detailed(model, test_sets)[0]


def evaluate_detailed(
    model: IncrementalModel, test_sets: list[LabeledSet]
) -> tuple[float, dict]:
    """Accuracy plus relevance statistics over one deterministic pass."""
    if not test_sets or sum(len(s) for s in test_sets) == 0:
        raise ValueError("evaluation needs at least one test sample")
    features = np.concatenate([s.features for s in test_sets])
    labels = np.concatenate([s.labels for s in test_sets])
    preds, weights = infer_batch(model, features)
    accuracy = float(np.mean(preds == labels))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(weights > 0, weights * np.log(weights), 0.0)
    stats = {
        "mean_max_weight": float(np.mean(weights.max(axis=1))),
        "mean_weight_entropy": float(np.mean(-np.sum(plogp, axis=1))),
    }
    return accuracy, stats


def run_protocol_full(
    stream: list[tuple[LabeledSet, LabeledSet]], config: TrainConfig
) -> tuple[Metrics, IncrementalModel, list[dict]]:
    """Train every stage in order, evaluating after each one.

    Returns the metrics, the final model, and per-stage records (accuracy,
    relevance stats, loss curve, wall-clock seconds).
    """
    if not stream:
        raise ValueError("stream must contain at least one task")
    seen: set[int] = set()
    for train_set, test_set in stream:
        labels = set(np.unique(train_set.labels)) | set(np.unique(test_set.labels))
        if labels & seen:
            raise DataError("label sets across tasks must be disjoint")
        seen |= labels

    model = new_model(config, stream[0][0].features.shape[1])
    stage_records: list[dict] = []
    accuracies = []
    for b, (train_set, _) in enumerate(stream):
        t0 = time.perf_counter()
        train_task(model, train_set, config)
        train_seconds = time.perf_counter() - t0
        acc, stats = evaluate_detailed(model, [test for _, test in stream[: b + 1]])
        accuracies.append(acc)
        stage_records.append(
            {
                "stage": b + 1,
                "accuracy": acc,
                "train_seconds": train_seconds,
                "loss_curve": model.loss_curves[b],
                **stats,
            }
        )
    return Metrics(tuple(accuracies)), model, stage_records


def run_protocol(
    stream: list[tuple[LabeledSet, LabeledSet]], config: TrainConfig
) -> Metrics:
    return run_protocol_full(stream, config)[0]


def model_checksums(model: IncrementalModel) -> dict[str, str]:
    """Stable digests of every frozen component, keyed by component name."""
    import hashlib

    def digest(*arrays: np.ndarray) -> str:
        h = hashlib.sha256()
        for arr in arrays:
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    sums = {}
    backbone_arrays = []
    if model.backbone.input_weight is not None:
        backbone_arrays.append(model.backbone.input_weight)
    for blk in model.backbone.blocks:
        backbone_arrays.extend([blk.weight, blk.bias])
    sums["backbone"] = digest(*backbone_arrays) if backbone_arrays else digest(np.zeros(0))
    for t, stack in enumerate(model.adapter_pool):
        sums[f"adapter{t}"] = digest(*[a for b in stack.blocks for a in (b.w_down, b.w_up)])
    for t, head in enumerate(model.heads):
        sums[f"head{t}"] = digest(head.weight, head.bias)
    for t, emb in enumerate(model.embeddings):
        sums[f"embedding{t}"] = digest(emb.s_tilde, emb.task_state.amplitudes.view(np.float64))
    return sums
