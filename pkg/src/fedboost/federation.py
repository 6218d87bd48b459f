"""Multi-party training protocols and the byte-exact communication ledger.

Parties are simulated in-process. Every simulated transfer is recorded as an
event whose byte count is measured from the actual payload (array lengths,
packed tree buffers), so the ledger can be audited against the closed-form
totals instead of merely restating them.

Accounting conventions (4 bytes per real on the wire):
- preprocessing: each party receives the full merged hash tables once,
  8 bytes per stored hash value, i.e. 8*N*L per party;
- per round, every party contributes its local aggregated gradient pairs,
  2 reals per local instance (the trainer's own contribution is recorded as a
  loopback), so gradient bytes per round total exactly 8*N;
- each broadcast tree is a fixed packed buffer of 2^D - 1 internal-node slots
  of (feature id, split value), 8 bytes each, sent to the M-1 other parties.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dataset import PartyDataset
from .gbdt import (
    GbdtModel,
    GbdtParams,
    TrainMatrix,
    Tree,
    logistic_gradient_arrays,
    train_tree_matrix,
)
from .lsh import LshConfig, SimilarityMatrix, build_global_tables, compute_similarity, hash_matrix, sample_functions


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEvent:
    phase: str  # "preprocessing" | "training"
    round: int  # -1 during preprocessing
    kind: str  # "allreduce" | "gradients" | "broadcast"
    sender: int  # -1 for the merged/collective source
    receiver: int
    nbytes: int


@dataclass
class CommLedger:
    events: list[LedgerEvent] = field(default_factory=list)

    def record_preprocessing(self, receiver: int, nbytes: int) -> None:
        self.events.append(LedgerEvent("preprocessing", -1, "allreduce", -1, receiver, int(nbytes)))

    def record_gradients(self, round_: int, sender: int, receiver: int, nbytes: int) -> None:
        self.events.append(LedgerEvent("training", round_, "gradients", sender, receiver, int(nbytes)))

    def record_broadcast(self, round_: int, sender: int, receiver: int, nbytes: int) -> None:
        self.events.append(LedgerEvent("training", round_, "broadcast", sender, receiver, int(nbytes)))

    @property
    def preprocessing_bytes(self) -> int:
        return sum(e.nbytes for e in self.events if e.phase == "preprocessing")

    def _per_round(self, kind: str) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.events:
            if e.phase == "training" and e.kind == kind:
                out[e.round] = out.get(e.round, 0) + e.nbytes
        return out

    def gradient_bytes_per_tree(self, num_rounds: int) -> list[int]:
        per = self._per_round("gradients")
        return [per.get(t, 0) for t in range(num_rounds)]

    def broadcast_bytes_per_tree(self, num_rounds: int) -> list[int]:
        per = self._per_round("broadcast")
        return [per.get(t, 0) for t in range(num_rounds)]

    @property
    def training_bytes(self) -> int:
        return sum(e.nbytes for e in self.events if e.phase == "training")

    @property
    def total_bytes(self) -> int:
        return self.preprocessing_bytes + self.training_bytes

    def summary(self, num_rounds: int) -> dict:
        return {
            "preprocessing_bytes": self.preprocessing_bytes,
            "gradient_bytes_per_tree": self.gradient_bytes_per_tree(num_rounds),
            "broadcast_bytes_per_tree": self.broadcast_bytes_per_tree(num_rounds),
            "training_bytes": self.training_bytes,
            "total_bytes": self.total_bytes,
        }


def tree_wire_payload(tree: Tree, max_depth: int) -> np.ndarray:
    """Pack a tree into the fixed broadcast buffer: one (feature id, split
    value) slot per internal position of a full depth-D tree, heap order.
    Unused slots carry feature -1. The buffer size is the accounted wire cost.
    """
    n_slots = (1 << max_depth) - 1
    buf = np.zeros(n_slots, dtype=[("feature", "<i4"), ("value", "<f4")])
    buf["feature"] = -1
    if n_slots == 0:
        return buf
    stack = [(0, 0)]  # (node id, heap slot)
    while stack:
        nid, slot = stack.pop()
        if tree.feature[nid] < 0 or slot >= n_slots:
            continue
        buf["feature"][slot] = tree.feature[nid]
        buf["value"][slot] = tree.threshold[nid]
        stack.append((int(tree.left[nid]), 2 * slot + 1))
        stack.append((int(tree.right[nid]), 2 * slot + 2))
    return buf


# ---------------------------------------------------------------------------
# parties and schedule
# ---------------------------------------------------------------------------


class Party:
    """A simulated participant: local rows, the per-party training index,
    the raw-score accumulator, and (after preprocessing) a similarity matrix."""

    def __init__(self, party_id: int, X, y, gids):
        self.party_id = party_id
        self.X = X.tocsr()
        self.y = np.asarray(y, dtype=np.float64)
        self.gids = np.asarray(gids, dtype=np.int64)
        self.tm = TrainMatrix(self.X)
        self.raw = np.zeros(len(self.y), dtype=np.float64)
        self.similarity: Optional[SimilarityMatrix] = None
        order = np.argsort(self.gids)
        self._sorted_gids = self.gids[order]
        self._sorted_pos = order

    @classmethod
    def from_dataset(cls, pd: PartyDataset) -> "Party":
        X, y, gids = pd.to_arrays()
        return cls(pd.party_id, X, y, gids)

    def __len__(self) -> int:
        return len(self.y)

    def local_positions(self, gid_array: np.ndarray) -> np.ndarray:
        """Map global IDs (all of which must be local) to row positions."""
        idx = np.searchsorted(self._sorted_gids, gid_array)
        if np.any(idx >= len(self._sorted_gids)) or np.any(self._sorted_gids[np.minimum(idx, len(self._sorted_gids) - 1)] != gid_array):
            raise KeyError("similarity entry references an instance not held by this party")
        return self._sorted_pos[idx]


@dataclass(frozen=True)
class TrainingSchedule:
    assignment: tuple[int, ...]  # tree index -> training party

    @staticmethod
    def round_robin(num_trees: int, num_parties: int) -> "TrainingSchedule":
        return TrainingSchedule(tuple(t % num_parties for t in range(num_trees)))

    @staticmethod
    def contiguous(num_trees: int, num_parties: int) -> "TrainingSchedule":
        base, extra = divmod(num_trees, num_parties)
        blocks = []
        for p in range(num_parties):
            blocks.extend([p] * (base + (1 if p < extra else 0)))
        return TrainingSchedule(tuple(blocks))

    @staticmethod
    def make(kind: str, num_trees: int, num_parties: int) -> "TrainingSchedule":
        if kind == "round_robin":
            return TrainingSchedule.round_robin(num_trees, num_parties)
        if kind == "contiguous":
            return TrainingSchedule.contiguous(num_trees, num_parties)
        raise ValueError(f"unknown schedule kind {kind!r}")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def preprocess(
    parties: list[Party],
    config: LshConfig,
    tie_seed: int,
    ledger: Optional[CommLedger] = None,
):
    """Hash all parties, merge the global tables (ledgered), and attach a
    similarity matrix to every party."""
    d = parties[0].X.shape[1]
    funcs = sample_functions(config, d)
    party_hashes = {p.party_id: (p.gids, hash_matrix(funcs, p.X)) for p in parties}
    tables = build_global_tables(party_hashes, ledger)
    for p in parties:
        p.similarity = compute_similarity(p.party_id, party_hashes, tie_seed)
    return funcs, tables


def _position_maps(parties: list[Party]) -> dict[tuple[int, int], np.ndarray]:
    """pos[(i, m)][q] = row position in party m of the match of party i's row q."""
    by_id = {p.party_id: p for p in parties}
    pos: dict[tuple[int, int], np.ndarray] = {}
    for i in parties:
        if i.similarity is None:
            raise ValueError("preprocess() must run before training")
        for m in parties:
            if m.party_id == i.party_id:
                pos[(i.party_id, m.party_id)] = np.arange(len(i), dtype=np.int64)
            else:
                gid_col = i.similarity.entries[:, m.party_id]
                pos[(i.party_id, m.party_id)] = by_id[m.party_id].local_positions(gid_col)
    return pos


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def aggregate_foreign_gradients(
    g: np.ndarray, h: np.ndarray, positions: np.ndarray, target_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Fold one party's (g, h) onto the target party's rows through its
    similarity column. Instances mapping nowhere leave zeros behind."""
    G = np.bincount(positions, weights=g, minlength=target_size)
    H = np.bincount(positions, weights=h, minlength=target_size)
    return G, H


@dataclass
class RoundContext:
    """Everything an observer may want to inspect after one protocol round."""

    round_index: int
    trainer: int
    tree: Tree
    parties: list[Party]
    gradients: dict[int, tuple[np.ndarray, np.ndarray]]  # plain per-party (g, h)
    outputs: dict[int, np.ndarray]  # unshrunk f_t per party's rows
    weighted_G: np.ndarray
    weighted_H: np.ndarray
    position_maps: dict[tuple[int, int], np.ndarray]


RoundObserver = Callable[[RoundContext], None]


# ---------------------------------------------------------------------------
# training protocols
# ---------------------------------------------------------------------------


def _reset_raw(parties: list[Party], base_score: float) -> None:
    for p in parties:
        p.raw = np.full(len(p), base_score, dtype=np.float64)


def train_simfl(
    parties: list[Party],
    params: GbdtParams,
    schedule: TrainingSchedule,
    ledger: Optional[CommLedger] = None,
    observer: Optional[RoundObserver] = None,
) -> GbdtModel:
    """The similarity-weighted protocol: per round, all parties push their
    aggregated gradient pairs to the trainer, the trainer grows one tree on
    its local rows under the summed (G, H), and the tree is broadcast."""
    if ledger is None:
        ledger = CommLedger()
    pos = _position_maps(parties)
    by_id = {p.party_id: p for p in parties}
    model = GbdtModel(learning_rate=params.learning_rate, base_score=params.base_score)
    _reset_raw(parties, params.base_score)

    for t, m_id in enumerate(schedule.assignment):
        m = by_id[m_id]
        grads = {}
        for p in parties:
            grads[p.party_id] = logistic_gradient_arrays(p.raw, p.y)

        G = np.zeros(len(m), dtype=np.float64)
        H = np.zeros(len(m), dtype=np.float64)
        for pid in sorted(by_id):
            g_i, h_i = grads[pid]
            Gi, Hi = aggregate_foreign_gradients(g_i, h_i, pos[(pid, m_id)], len(m))
            G += Gi
            H += Hi
            ledger.record_gradients(t, pid, m_id, nbytes=2 * 4 * len(g_i))

        tree = train_tree_matrix(m.tm, G, H, params)
        payload = tree_wire_payload(tree, params.max_depth)
        outputs = {}
        for p in parties:
            outputs[p.party_id] = tree.predict_rows(p.tm)
            if p.party_id != m_id:
                ledger.record_broadcast(t, m_id, p.party_id, payload.nbytes)
        for p in parties:
            p.raw += params.learning_rate * outputs[p.party_id]
        model.trees.append(tree)

        if observer is not None:
            observer(
                RoundContext(
                    round_index=t,
                    trainer=m_id,
                    tree=tree,
                    parties=parties,
                    gradients=grads,
                    outputs=outputs,
                    weighted_G=G,
                    weighted_H=H,
                    position_maps=pos,
                )
            )
    return model


def train_tfl(
    parties: list[Party],
    params: GbdtParams,
    schedule: TrainingSchedule,
    ledger: Optional[CommLedger] = None,
) -> GbdtModel:
    """Schedule- and broadcast-compatible baseline without gradient exchange:
    each tree is boosted on the trainer's plain local gradients. Isolates the
    contribution of the weighted aggregation."""
    if ledger is None:
        ledger = CommLedger()
    by_id = {p.party_id: p for p in parties}
    model = GbdtModel(learning_rate=params.learning_rate, base_score=params.base_score)
    _reset_raw(parties, params.base_score)

    for t, m_id in enumerate(schedule.assignment):
        m = by_id[m_id]
        g, h = logistic_gradient_arrays(m.raw, m.y)
        tree = train_tree_matrix(m.tm, g, h, params)
        payload = tree_wire_payload(tree, params.max_depth)
        for p in parties:
            if p.party_id != m_id:
                ledger.record_broadcast(t, m_id, p.party_id, payload.nbytes)
            p.raw += params.learning_rate * tree.predict_rows(p.tm)
        model.trees.append(tree)
    return model


def train_solo(party: Party, params: GbdtParams) -> GbdtModel:
    """Vanilla boosting on one party's local rows; no communication."""
    from .gbdt import boost

    return boost(party.tm, party.y, params)


def train_allin(tm: TrainMatrix, y: np.ndarray, params: GbdtParams) -> GbdtModel:
    """Vanilla boosting on the joint data; no communication."""
    from .gbdt import boost

    return boost(tm, y, params)
