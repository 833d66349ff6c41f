"""Synthetic incremental streams and the precomputed-feature file format.

Each task lives in its own low-dimensional subspace of the input space.
A tunable fraction of consecutive tasks' basis vectors is shared, which
manufactures the cross-task feature entanglement that makes adapter
routing hard; overlap 0 gives mutually orthogonal tasks, overlap 1 makes
consecutive tasks share their whole subspace.  Class means are unit
offsets around a per-task center inside the task subspace, kept at a
global minimum separation of 4 * noise_sigma, and samples are means
plus isotropic Gaussian noise.

Everything is exactly reproducible from (spec, seed): separate derived
RNG streams cover bases, means, and per-class noise, and the train/test
split partitions sample indices before any noise is drawn.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError, GenerationError

FEATURE_MAGIC = b"QKDFEAT1"
_MEAN_SEPARATION_FACTOR = 4.0
_MAX_MEAN_ATTEMPTS = 1000
# Distance of each task's class cluster from the origin, in units of the
# unit sphere the class means are drawn on.  Tasks need more room between
# them than classes do: every stage is scored over the union label space,
# and with centers much below ~1.5 the cross-task confusions drown out
# the within-task ones that adapter routing is supposed to fix.
_TASK_CENTER_SPREAD = 1.5


@dataclass(frozen=True)
class StreamSpec:
    """Shape and difficulty of a synthetic incremental benchmark."""

    num_tasks: int = 5
    classes_per_task: int = 2
    train_per_class: int = 100
    test_per_class: int = 100
    input_dim: int = 32
    subspace_dim: int = 6
    overlap: float = 0.5
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_tasks < 1 or self.classes_per_task < 1:
            raise ConfigError("need at least one task and one class per task")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("need at least one train and one test sample per class")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must be in [0, 1], got {self.overlap}")
        if self.subspace_dim > self.input_dim:
            raise ConfigError("subspace_dim cannot exceed input_dim")
        if self.subspace_dim < 1:
            raise ConfigError("subspace_dim must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class LabeledSet:
    """One split of one task: features, global labels, class bookkeeping."""

    features: np.ndarray
    labels: np.ndarray
    task_id: int
    class_offset: int
    num_classes: int

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features and labels must align")
        lo, hi = self.class_offset, self.class_offset + self.num_classes
        if self.labels.size and (self.labels.min() < lo or self.labels.max() >= hi):
            raise DataError(
                f"labels outside task {self.task_id} range [{lo}, {hi})"
            )

    def __len__(self) -> int:
        return self.labels.size


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int
    task_id: int


def _fresh_direction(rng: np.random.Generator, existing: list[np.ndarray], dim: int) -> np.ndarray:
    """Random unit vector orthogonal to every direction generated so far."""
    for _ in range(100):
        cand = rng.standard_normal(dim)
        for vec in existing:
            cand -= (vec @ cand) * vec
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            return cand / norm
    raise GenerationError("could not draw a fresh orthogonal direction")


def _task_bases(spec: StreamSpec) -> list[np.ndarray]:
    """Orthonormal (subspace_dim, input_dim) row bases, chained by overlap.

    Task t starts with the last `shared` rows of task t-1's basis and fills
    the rest with directions orthogonal to everything drawn before, so
    overlap 0 yields mutually orthogonal task subspaces.
    """
    rng = np.random.default_rng([spec.seed, 101])
    shared = int(round(spec.overlap * spec.subspace_dim))
    fresh_total = spec.subspace_dim + (spec.num_tasks - 1) * (spec.subspace_dim - shared)
    if fresh_total > spec.input_dim:
        raise ConfigError(
            f"stream needs {fresh_total} independent directions but input_dim is "
            f"{spec.input_dim}; lower num_tasks/subspace_dim or raise input_dim"
        )
    all_dirs: list[np.ndarray] = []
    bases: list[np.ndarray] = []
    for t in range(spec.num_tasks):
        rows = [] if t == 0 else [row for row in bases[t - 1][spec.subspace_dim - shared:]]
        while len(rows) < spec.subspace_dim:
            direction = _fresh_direction(rng, all_dirs, spec.input_dim)
            rows.append(direction)
            all_dirs.append(direction)
        bases.append(np.stack(rows))
    return bases


def _task_centers(spec: StreamSpec, bases: list[np.ndarray]) -> np.ndarray:
    """One offset per task, drawn inside that task's own subspace.

    Keeping the center in-span means shared basis rows still leak
    cross-task structure into overlapping tasks instead of the offsets
    becoming a free task label.
    """
    centers = []
    for t in range(spec.num_tasks):
        rng = np.random.default_rng([spec.seed, 104, t])
        direction = _fresh_direction(rng, [], spec.subspace_dim)
        centers.append(_TASK_CENTER_SPREAD * direction @ bases[t])
    return np.stack(centers)


def _class_means(spec: StreamSpec, bases: list[np.ndarray]) -> np.ndarray:
    """Center-plus-unit in-subspace means, pairwise separated by 4 * sigma."""
    rng = np.random.default_rng([spec.seed, 102])
    centers = _task_centers(spec, bases)
    min_sep = _MEAN_SEPARATION_FACTOR * spec.noise_sigma
    means: list[np.ndarray] = []
    for t in range(spec.num_tasks):
        for _ in range(spec.classes_per_task):
            for attempt in range(_MAX_MEAN_ATTEMPTS + 1):
                if attempt == _MAX_MEAN_ATTEMPTS:
                    raise GenerationError(
                        "could not place class means with separation "
                        f"{min_sep:.3g} after {_MAX_MEAN_ATTEMPTS} attempts; "
                        "lower classes_per_task or noise_sigma"
                    )
                coeff = rng.standard_normal(spec.subspace_dim)
                norm = np.linalg.norm(coeff)
                if norm < 1e-12:
                    continue
                mean = centers[t] + (coeff / norm) @ bases[t]
                if all(np.linalg.norm(mean - other) >= min_sep for other in means):
                    means.append(mean)
                    break
    return np.stack(means)


def gen_stream(spec: StreamSpec) -> list[tuple[LabeledSet, LabeledSet]]:
    """Per-task (train, test) splits; labels are contiguous and disjoint."""
    bases = _task_bases(spec)
    means = _class_means(spec, bases)
    stream = []
    per_class = spec.train_per_class + spec.test_per_class
    for t in range(spec.num_tasks):
        offset = t * spec.classes_per_task
        feats = {"train": [], "test": []}
        labels = {"train": [], "test": []}
        for c in range(spec.classes_per_task):
            label = offset + c
            rng = np.random.default_rng([spec.seed, 103, t, c])
            noise = rng.normal(0.0, spec.noise_sigma, size=(per_class, spec.input_dim))
            samples = means[label] + noise
            feats["train"].append(samples[: spec.train_per_class])
            feats["test"].append(samples[spec.train_per_class :])
            labels["train"].append(np.full(spec.train_per_class, label, dtype=np.int64))
            labels["test"].append(np.full(spec.test_per_class, label, dtype=np.int64))
        sets = {}
        for split in ("train", "test"):
            sets[split] = LabeledSet(
                features=np.concatenate(feats[split]),
                labels=np.concatenate(labels[split]),
                task_id=t,
                class_offset=offset,
                num_classes=spec.classes_per_task,
            )
        stream.append((sets["train"], sets["test"]))
    return stream


def write_feature_file(path, samples: list[LabeledSample]) -> None:
    """Serialize samples in the fixed little-endian f32 layout."""
    if samples:
        dim = int(np.asarray(samples[0].features).size)
    else:
        dim = 0
    blob = bytearray()
    blob += FEATURE_MAGIC
    blob += struct.pack("<II", len(samples), dim)
    for i, sample in enumerate(samples):
        feats = np.asarray(sample.features, dtype=np.float32).ravel()
        if feats.size != dim:
            raise DataError(f"sample {i} has dimension {feats.size}, expected {dim}")
        blob += struct.pack("<II", int(sample.label), int(sample.task_id))
        blob += feats.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_feature_file(path) -> list[LabeledSample]:
    """Parse a feature file; format errors carry the byte offset."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(FEATURE_MAGIC) or data[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FormatError(f"bad magic at byte offset 0 in {path}")
    offset = len(FEATURE_MAGIC)
    if len(data) < offset + 8:
        raise FormatError(f"truncated header at byte offset {len(data)} in {path}")
    count, dim = struct.unpack_from("<II", data, offset)
    offset += 8
    record = 8 + 4 * dim
    samples = []
    for i in range(count):
        if len(data) < offset + record:
            raise FormatError(
                f"truncated sample {i} at byte offset {len(data)} in {path} "
                f"(expected {offset + record} bytes)"
            )
        label, task_id = struct.unpack_from("<II", data, offset)
        feats = np.frombuffer(data, dtype="<f4", count=dim, offset=offset + 8).copy()
        samples.append(LabeledSample(features=feats, label=int(label), task_id=int(task_id)))
        offset += record
    if len(data) != offset:
        raise FormatError(f"{len(data) - offset} trailing bytes at offset {offset} in {path}")
    return samples


def samples_to_stream(
    train: list[LabeledSample], test: list[LabeledSample]
) -> list[tuple[LabeledSet, LabeledSet]]:
    """Group flat sample lists into per-task splits with validated labels.

    Tasks must have contiguous, disjoint, ascending class ranges; both
    splits must agree on the task set and feature dimension.
    """
    if not train or not test:
        raise DataError("train and test sample lists must both be non-empty")
    dim = train[0].features.size
    for name, samples in (("train", train), ("test", test)):
        for s in samples:
            if s.features.size != dim:
                raise DataError(f"{name} sample dimension {s.features.size} != {dim}")
    task_ids = sorted({s.task_id for s in train})
    if task_ids != sorted({s.task_id for s in test}):
        raise DataError("train and test cover different task sets")
    if task_ids != list(range(len(task_ids))):
        raise DataError(f"task ids must be 0..T-1, got {task_ids}")

    stream = []
    next_offset = 0
    for t in task_ids:
        split_sets = []
        labels_here = sorted(
            {s.label for s in train if s.task_id == t} | {s.label for s in test if s.task_id == t}
        )
        lo, hi = labels_here[0], labels_here[-1]
        if labels_here != list(range(lo, hi + 1)) or lo != next_offset:
            raise DataError(
                f"task {t} labels {labels_here} are not contiguous from {next_offset}"
            )
        next_offset = hi + 1
        for samples in (train, test):
            rows = [s for s in samples if s.task_id == t]
            split_sets.append(
                LabeledSet(
                    features=np.stack([s.features for s in rows]).astype(np.float64),
                    labels=np.array([s.label for s in rows], dtype=np.int64),
                    task_id=t,
                    class_offset=lo,
                    num_classes=hi - lo + 1,
                )
            )
        stream.append((split_sets[0], split_sets[1]))
    return stream
