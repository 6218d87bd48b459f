"""p-stable locality-sensitive hashing and cross-party similarity matrices.

Each of the L hash functions is F(x) = floor((a . x + b) / r) with a drawn
from the 2-stable (standard normal) distribution and b uniform on [0, r].
Feature values are hashed raw (no normalisation), so r is interpreted on the
dataset's native scale.

The preprocessing protocol: every party hashes its instances under the shared
functions, the per-bucket ID lists are merged into global hash tables that
every party receives (a logical AllReduce, accounted in the ledger), and each
party then selects, per local instance and per foreign party, the foreign
instance with the highest number of identical hash values.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


@dataclass(frozen=True)
class LshConfig:
    r: float
    num_tables: int  # L
    seed: int = 0

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("window size r must be positive")
        if self.num_tables < 1:
            raise ValueError("num_tables must be >= 1")


@dataclass(frozen=True)
class HashFunction:
    a: np.ndarray  # (d,) float64, i.i.d. standard normal
    b: float  # uniform on [0, r]
    r: float


@dataclass
class HashFunctions:
    """The L shared functions in matrix form: A is (L, d), b is (L,)."""

    A: np.ndarray
    b: np.ndarray
    r: float

    def __len__(self) -> int:
        return self.A.shape[0]

    def __getitem__(self, k: int) -> HashFunction:
        return HashFunction(a=self.A[k], b=float(self.b[k]), r=self.r)


def sample_functions(config: LshConfig, d: int) -> HashFunctions:
    if d < 1:
        raise ValueError("dimension must be >= 1")
    rng = np.random.default_rng(config.seed)
    A = rng.standard_normal((config.num_tables, d))
    b = rng.uniform(0.0, config.r, size=config.num_tables)
    return HashFunctions(A=A, b=b, r=config.r)


def hash_value(f: HashFunction, features: dict[int, float]) -> int:
    """F(x) = floor((a . x + b) / r) for a single sparse instance."""
    dot = sum(f.a[i] * v for i, v in features.items())
    return int(np.floor((dot + f.b) / f.r))


def hash_matrix(funcs: HashFunctions, X: sparse.csr_matrix) -> np.ndarray:
    """Hash every row of X under all L functions; returns (n, L) int64."""
    proj = X @ funcs.A.T  # scipy's own kernel: deterministic accumulation order
    return np.floor((proj + funcs.b[None, :]) / funcs.r).astype(np.int64)


# ---------------------------------------------------------------------------
# global hash tables (the AllReduce artifact)
# ---------------------------------------------------------------------------


@dataclass
class GlobalHashTables:
    """Per function k: hash value -> sorted list of global instance IDs.

    Also keeps the merged (gids, values) matrix the tables were built from,
    which is what the similarity search consumes.
    """

    tables: list[dict[int, list[int]]]
    merged_gids: np.ndarray  # (N,) int64
    merged_values: np.ndarray  # (N, L) int64

    @property
    def num_tables(self) -> int:
        return len(self.tables)

    def total_entries(self) -> int:
        return sum(len(ids) for table in self.tables for ids in table.values())


def build_global_tables(
    party_hashes: dict[int, tuple[np.ndarray, np.ndarray]],
    ledger=None,
) -> GlobalHashTables:
    """Merge per-party (gids, hash value matrix) pairs into global tables.

    Every party ends up holding the same merged tables; the ledger records one
    inbound transfer of the full table set (8 bytes per stored hash value) per
    party, measured from the actual table contents.
    """
    all_gids, all_vals = [], []
    for pid in sorted(party_hashes):
        gids, vals = party_hashes[pid]
        if len(gids) != vals.shape[0]:
            raise ValueError("gids/values length mismatch")
        all_gids.append(np.asarray(gids, dtype=np.int64))
        all_vals.append(vals)
    merged_gids = np.concatenate(all_gids)
    merged_values = np.vstack(all_vals)
    uniq, counts = np.unique(merged_gids, return_counts=True)
    if np.any(counts > 1):
        raise ValueError(f"duplicate global IDs across parties: {uniq[counts > 1][:5]}")

    num_tables = merged_values.shape[1]
    tables: list[dict[int, list[int]]] = []
    for k in range(num_tables):
        col = merged_values[:, k]
        order = np.lexsort((merged_gids, col))
        table: dict[int, list[int]] = {}
        sorted_vals = col[order]
        sorted_gids = merged_gids[order]
        boundaries = np.flatnonzero(np.diff(sorted_vals)) + 1
        for chunk_vals, chunk_gids in zip(
            np.split(sorted_vals, boundaries), np.split(sorted_gids, boundaries)
        ):
            table[int(chunk_vals[0])] = chunk_gids.tolist()
        tables.append(table)

    out = GlobalHashTables(tables=tables, merged_gids=merged_gids, merged_values=merged_values)
    if ledger is not None:
        per_party_bytes = 8 * out.total_entries()
        for pid in sorted(party_hashes):
            ledger.record_preprocessing(receiver=pid, nbytes=per_party_bytes)
    return out


# ---------------------------------------------------------------------------
# similarity matrices
# ---------------------------------------------------------------------------


@dataclass
class SimilarityMatrix:
    owner: int
    gids: np.ndarray  # (N_m,) owner's instance IDs, local order
    entries: np.ndarray  # (N_m, M) int64 global IDs; own column is identity


def tie_break_choice(tie_seed: int, owner_gid: int, foreign_party: int, n_ties: int) -> int:
    """Index into the (position-ordered) tied candidates for one matrix cell.

    Stateless: keyed by (seed, instance, party) so the result is independent
    of traversal or execution order.
    """
    rng = random.Random(f"{tie_seed}:{owner_gid}:{foreign_party}")
    return rng.randrange(n_ties)


def compute_similarity(
    owner: int,
    party_hashes: dict[int, tuple[np.ndarray, np.ndarray]],
    tie_seed: int,
    chunk_rows: int = 256,
) -> SimilarityMatrix:
    """Select, per local instance and foreign party, the most-collision-frequent
    foreign instance (ties, including the all-zero-count case, broken uniformly
    by the dedicated tie stream). The own-party column is the identity.
    """
    own_gids, own_vals = party_hashes[owner]
    own_gids = np.asarray(own_gids, dtype=np.int64)
    n_local = len(own_gids)
    num_parties = len(party_hashes)
    num_tables = own_vals.shape[1]
    count_dtype = np.int16 if num_tables > 127 else np.int8

    entries = np.empty((n_local, num_parties), dtype=np.int64)
    entries[:, owner] = own_gids

    for pid in sorted(party_hashes):
        if pid == owner:
            continue
        f_gids, f_vals = party_hashes[pid]
        f_gids = np.asarray(f_gids, dtype=np.int64)
        if len(f_gids) == 0:
            raise ValueError(f"party {pid} is empty")
        for start in range(0, n_local, chunk_rows):
            stop = min(start + chunk_rows, n_local)
            counts = np.zeros((stop - start, len(f_gids)), dtype=count_dtype)
            for k in range(num_tables):
                counts += own_vals[start:stop, k, None] == f_vals[None, :, k]
            best = counts.max(axis=1)
            is_best = counts == best[:, None]
            n_best = is_best.sum(axis=1)
            picks = np.argmax(is_best, axis=1)  # first maximum, position order
            for row in np.flatnonzero(n_best > 1):
                cand = np.flatnonzero(is_best[row])
                choice = tie_break_choice(tie_seed, int(own_gids[start + row]), pid, len(cand))
                picks[row] = cand[choice]
            entries[start:stop, pid] = f_gids[picks]

    return SimilarityMatrix(owner=owner, gids=own_gids, entries=entries)
