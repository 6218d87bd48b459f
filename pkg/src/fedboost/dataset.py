"""LIBSVM parsing, train/test splitting, and multi-party partitioning.

Instances carry global IDs assigned in file order at parse time; the IDs
survive splitting and partitioning unchanged, so cross-party references
(hash tables, similarity matrices) can always be resolved back to a row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse


class LibsvmParseError(ValueError):
    """Malformed LIBSVM input; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Instance:
    global_id: int
    features: dict[int, float]  # 0-based feature index -> value, zeros omitted
    label: int  # 0 or 1


@dataclass
class Dataset:
    name: str
    instances: list[Instance]
    dimension: int

    def __post_init__(self):
        if self.instances:
            max_idx = max((max(i.features) for i in self.instances if i.features), default=-1)
            if self.dimension < max_idx + 1:
                raise ValueError(f"dimension {self.dimension} < max feature index {max_idx} + 1")

    def __len__(self) -> int:
        return len(self.instances)

    def to_arrays(self) -> tuple[sparse.csr_matrix, np.ndarray, np.ndarray]:
        """Return (X csr float64, y int8, global_ids int64) in instance order."""
        return instances_to_arrays(self.instances, self.dimension)


class PartitionMode(Enum):
    BALANCED = "balanced"
    UNBALANCED = "unbalanced"


@dataclass(frozen=True)
class PartitionSpec:
    mode: PartitionMode
    num_parties: int
    theta: float = 0.5  # only used by UNBALANCED
    seed: int = 0

    def __post_init__(self):
        if self.num_parties < 1:
            raise ValueError("num_parties must be >= 1")
        if self.mode is PartitionMode.UNBALANCED and not (0.0 < self.theta < 1.0):
            raise ValueError("theta must lie in (0, 1)")


@dataclass
class PartyDataset:
    party_id: int
    instances: list[Instance]
    dimension: int

    def __len__(self) -> int:
        return len(self.instances)

    def to_arrays(self) -> tuple[sparse.csr_matrix, np.ndarray, np.ndarray]:
        return instances_to_arrays(self.instances, self.dimension)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_LABEL_MAP = {"-1": 0, "-1.0": 0, "0": 0, "0.0": 0, "+1": 1, "1": 1, "1.0": 1, "+1.0": 1}


def parse_libsvm(source, name: str = "", dimension: int | None = None) -> Dataset:
    """Parse LIBSVM text (`label idx:val ...` per line) into a Dataset.

    Accepts a path or an iterable of lines. Labels may be {-1,+1} or {0,1}
    and are normalised to {0,1}. Index base is auto-detected the way the
    wider libsvm tooling does it: if any index 0 occurs the file is taken as
    0-based, otherwise the conventional 1-based indices are shifted down, so
    the canonical a9a file (indices 1..123) yields dimension 123. Indices
    must be non-negative and strictly increasing within a line.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        lines: Iterable[str] = path.open("r", encoding="utf-8")
        if not name:
            name = path.name
    else:
        lines = source

    raw_instances: list[tuple[int, dict[int, float]]] = []
    max_index = -1
    min_index: int | None = None
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split()
        label = _LABEL_MAP.get(tokens[0])
        if label is None:
            raise LibsvmParseError(line_no, f"unsupported label {tokens[0]!r}")
        feats: dict[int, float] = {}
        prev = -1
        for tok in tokens[1:]:
            idx_s, _, val_s = tok.partition(":")
            try:
                raw_idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise LibsvmParseError(line_no, f"bad feature token {tok!r}") from None
            if raw_idx < 0:
                raise LibsvmParseError(line_no, f"feature index {raw_idx} < 0")
            if raw_idx <= prev:
                raise LibsvmParseError(line_no, f"indices not strictly increasing at {tok!r}")
            prev = raw_idx
            if val != 0.0:
                feats[raw_idx] = val
            max_index = max(max_index, raw_idx)
            min_index = raw_idx if min_index is None else min(min_index, raw_idx)
        raw_instances.append((label, feats))

    offset = 1 if (min_index is None or min_index >= 1) else 0
    instances = [
        Instance(
            global_id=i,
            features={idx - offset: val for idx, val in feats.items()},
            label=label,
        )
        for i, (label, feats) in enumerate(raw_instances)
    ]

    needed = max_index + 1 - offset
    dim = needed if dimension is None else dimension
    if dim < needed:
        raise LibsvmParseError(0, f"dimension override {dim} < required {needed}")
    return Dataset(name=name or "dataset", instances=instances, dimension=max(dim, 1))


def instances_to_arrays(
    instances: Sequence[Instance], dimension: int
) -> tuple[sparse.csr_matrix, np.ndarray, np.ndarray]:
    indptr = np.zeros(len(instances) + 1, dtype=np.int64)
    nnz = sum(len(i.features) for i in instances)
    indices = np.empty(nnz, dtype=np.int32)
    data = np.empty(nnz, dtype=np.float64)
    pos = 0
    for r, inst in enumerate(instances):
        for idx in sorted(inst.features):
            indices[pos] = idx
            data[pos] = inst.features[idx]
            pos += 1
        indptr[r + 1] = pos
    X = sparse.csr_matrix((data, indices, indptr), shape=(len(instances), dimension))
    y = np.fromiter((i.label for i in instances), dtype=np.int8, count=len(instances))
    gids = np.fromiter((i.global_id for i in instances), dtype=np.int64, count=len(instances))
    return X, y, gids


# ---------------------------------------------------------------------------
# splitting and partitioning
# ---------------------------------------------------------------------------


def train_test_split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Unstratified split into (train, test) of sizes (ceil(f*N), rest)."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must lie in (0, 1)")
    n = len(dataset)
    n_train = math.ceil(fraction * n)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    train = Dataset(f"{dataset.name}[train]", [dataset.instances[i] for i in train_idx], dataset.dimension)
    test = Dataset(f"{dataset.name}[test]", [dataset.instances[i] for i in test_idx], dataset.dimension)
    return train, test


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _chunk_evenly(indices: np.ndarray, parts: int) -> list[np.ndarray]:
    """Split an index array into `parts` contiguous chunks, sizes differing by <= 1."""
    base, extra = divmod(len(indices), parts)
    out, start = [], 0
    for p in range(parts):
        size = base + (1 if p < extra else 0)
        out.append(indices[start : start + size])
        start += size
    return out


def partition(dataset: Dataset, spec: PartitionSpec) -> list[PartyDataset]:
    """Distribute training instances across `num_parties` simulated parties.

    Balanced: a seeded permutation cut into near-equal chunks. Unbalanced with
    two groups: group A receives round(theta * |class0|) class-0 instances plus
    round((1-theta) * |class1|) class-1 instances, group B the remainder; for
    M > 2 each group is further divided equally and randomly, the A-half across
    the first ceil(M/2) parties and the B-half across the rest.
    """
    n = len(dataset)
    m = spec.num_parties
    if m > n:
        raise ValueError(f"cannot split {n} instances across {m} parties")
    rng = np.random.default_rng(spec.seed)

    if spec.mode is PartitionMode.BALANCED:
        perm = rng.permutation(n)
        chunks = _chunk_evenly(perm, m)
    else:
        labels = np.fromiter((i.label for i in dataset.instances), dtype=np.int8, count=n)
        class0 = np.flatnonzero(labels == 0)
        class1 = np.flatnonzero(labels == 1)
        if len(class0) == 0 or len(class1) == 0:
            raise ValueError("unbalanced partition requires both classes present")
        class0 = rng.permutation(class0)
        class1 = rng.permutation(class1)
        n_a0 = _round_half_up(spec.theta * len(class0))
        n_a1 = _round_half_up((1.0 - spec.theta) * len(class1))
        half_a = np.concatenate([class0[:n_a0], class1[:n_a1]])
        half_b = np.concatenate([class0[n_a0:], class1[n_a1:]])
        if m == 1:
            chunks = [np.concatenate([half_a, half_b])]
        else:
            parts_a = (m + 1) // 2
            half_a = rng.permutation(half_a)
            half_b = rng.permutation(half_b)
            chunks = _chunk_evenly(half_a, parts_a) + _chunk_evenly(half_b, m - parts_a)

    parties = []
    for pid, chunk in enumerate(chunks):
        if len(chunk) == 0:
            raise ValueError(f"party {pid} would be empty; reduce num_parties")
        insts = [dataset.instances[i] for i in chunk]
        parties.append(PartyDataset(party_id=pid, instances=insts, dimension=dataset.dimension))
    return parties
