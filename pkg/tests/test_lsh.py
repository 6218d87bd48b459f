import numpy as np
import pytest
from scipy import sparse

from fedboost.federation import CommLedger
from fedboost.lsh import (
    HashFunction,
    LshConfig,
    build_global_tables,
    compute_similarity,
    hash_matrix,
    hash_value,
    sample_functions,
    tie_break_choice,
)
from oracles import similarity_oracle


# ---------------------------------------------------------------------------
# hash function behaviour
# ---------------------------------------------------------------------------


def test_hash_value_known_cases():
    f = HashFunction(a=np.array([2.0, 0.0]), b=1.0, r=4.0)
    assert hash_value(f, {0: 3.0}) == 1  # floor(7/4)
    assert hash_value(f, {0: -3.0}) == -2  # floor(-5/4), true floor not truncation
    assert hash_value(f, {}) == 0  # floor(1/4)
    assert hash_value(f, {1: 100.0}) == 0  # zero projection weight


def test_hash_value_floor_of_negative_half():
    f = HashFunction(a=np.array([1.0]), b=0.0, r=2.0)
    assert hash_value(f, {0: -1.0}) == -1


def test_sample_functions_shapes_and_ranges():
    cfg = LshConfig(r=4.0, num_tables=40, seed=0)
    funcs = sample_functions(cfg, 123)
    assert funcs.A.shape == (40, 123)
    assert funcs.b.shape == (40,)
    assert np.all(funcs.b >= 0.0) and np.all(funcs.b < 4.0)
    assert len(funcs) == 40
    single = funcs[3]
    assert np.array_equal(single.a, funcs.A[3]) and single.r == 4.0


def test_sample_functions_deterministic_and_seed_sensitive():
    cfg = LshConfig(r=4.0, num_tables=8, seed=5)
    f1 = sample_functions(cfg, 20)
    f2 = sample_functions(cfg, 20)
    assert np.array_equal(f1.A, f2.A) and np.array_equal(f1.b, f2.b)
    f3 = sample_functions(LshConfig(r=4.0, num_tables=8, seed=6), 20)
    assert not np.array_equal(f1.A, f3.A)


def test_sampled_projections_are_centred():
    funcs = sample_functions(LshConfig(r=4.0, num_tables=200, seed=1), 200)
    assert abs(float(funcs.A.mean())) < 0.02
    assert abs(float(funcs.A.std()) - 1.0) < 0.02


def test_hash_matrix_matches_scalar_route():
    rng = np.random.default_rng(2)
    X = sparse.csr_matrix(rng.normal(size=(30, 7)) * (rng.uniform(size=(30, 7)) > 0.4))
    funcs = sample_functions(LshConfig(r=4.0, num_tables=11, seed=3), 7)
    vals = hash_matrix(funcs, X)
    assert vals.shape == (30, 11) and vals.dtype == np.int64
    for i in range(X.shape[0]):
        row = X.getrow(i)
        feats = {int(j): float(v) for j, v in zip(row.indices, row.data)}
        for k in range(len(funcs)):
            assert vals[i, k] == hash_value(funcs[k], feats)


def test_config_validation():
    with pytest.raises(ValueError):
        LshConfig(r=0.0, num_tables=4)
    with pytest.raises(ValueError):
        LshConfig(r=4.0, num_tables=0)
    with pytest.raises(ValueError):
        sample_functions(LshConfig(r=4.0, num_tables=4), 0)


# ---------------------------------------------------------------------------
# global tables
# ---------------------------------------------------------------------------


def _two_party_hashes(seed=0, n0=25, n1=35, d=6, L=7):
    rng = np.random.default_rng(seed)
    funcs = sample_functions(LshConfig(r=4.0, num_tables=L, seed=seed + 100), d)
    X0 = sparse.csr_matrix(rng.normal(size=(n0, d)))
    X1 = sparse.csr_matrix(rng.normal(size=(n1, d)))
    return {
        0: (np.arange(n0, dtype=np.int64), hash_matrix(funcs, X0)),
        1: (np.arange(n0, n0 + n1, dtype=np.int64), hash_matrix(funcs, X1)),
    }


def test_global_tables_bucket_completeness():
    hashes = _two_party_hashes()
    tables = build_global_tables(hashes)
    n_total = sum(len(g) for g, _ in hashes.values())
    L = hashes[0][1].shape[1]
    assert tables.num_tables == L
    assert tables.total_entries() == n_total * L
    merged_lookup = {int(g): tables.merged_values[i] for i, g in enumerate(tables.merged_gids)}
    all_gids = sorted(int(g) for gs, _ in hashes.values() for g in gs)
    for k, table in enumerate(tables.tables):
        seen = []
        for value, gids in table.items():
            seen.extend(gids)
            for gid in gids:
                assert merged_lookup[gid][k] == value
        assert sorted(seen) == all_gids


def test_global_tables_reject_duplicate_gids():
    hashes = _two_party_hashes()
    gids1, vals1 = hashes[1]
    clash = gids1.copy()
    clash[0] = hashes[0][0][0]
    hashes[1] = (clash, vals1)
    with pytest.raises(ValueError):
        build_global_tables(hashes)


def test_global_tables_ledger_bytes():
    hashes = _two_party_hashes(n0=30, n1=20, L=5)
    ledger = CommLedger()
    build_global_tables(hashes, ledger)
    # every party receives the full merged tables once: 8 bytes per entry
    assert ledger.preprocessing_bytes == 2 * 8 * 50 * 5
    receivers = sorted(e.receiver for e in ledger.events)
    assert receivers == [0, 1]


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def _party_hashes(seed, sizes, d=8, L=9, r=4.0, density=0.6):
    rng = np.random.default_rng(seed)
    funcs = sample_functions(LshConfig(r=r, num_tables=L, seed=seed + 1), d)
    out = {}
    gid = 0
    for pid, n in enumerate(sizes):
        X = sparse.csr_matrix(rng.normal(size=(n, d)) * (rng.uniform(size=(n, d)) < density))
        out[pid] = (np.arange(gid, gid + n, dtype=np.int64), hash_matrix(funcs, X))
        gid += n
    return out


@pytest.mark.parametrize("sizes", [(12, 17), (40, 25, 18), (3, 3, 3, 3)])
def test_similarity_matches_bruteforce_oracle(sizes):
    hashes = _party_hashes(seed=sum(sizes), sizes=sizes)
    for owner in range(len(sizes)):
        sim = compute_similarity(owner, hashes, tie_seed=13)
        expect = similarity_oracle(owner, hashes, tie_seed=13)
        assert np.array_equal(sim.entries, expect)
        assert np.array_equal(sim.gids, hashes[owner][0])
        assert sim.owner == owner


def test_similarity_oracle_equivalence_at_two_hundred_instances():
    hashes = _party_hashes(seed=77, sizes=(120, 80), d=10, L=12)
    sim = compute_similarity(0, hashes, tie_seed=3)
    expect = similarity_oracle(0, hashes, tie_seed=3)
    assert np.array_equal(sim.entries, expect)


def test_similarity_single_party_identity_column():
    hashes = _party_hashes(seed=5, sizes=(14,))
    sim = compute_similarity(0, hashes, tie_seed=0)
    assert sim.entries.shape == (14, 1)
    assert np.array_equal(sim.entries[:, 0], hashes[0][0])


def test_similarity_own_column_is_identity():
    hashes = _party_hashes(seed=6, sizes=(10, 11))
    for owner in (0, 1):
        sim = compute_similarity(owner, hashes, tie_seed=2)
        assert np.array_equal(sim.entries[:, owner], hashes[owner][0])


def test_similarity_prefers_exact_duplicate():
    # plant byte-identical hash rows: the duplicate matches on all L tables
    hashes = _party_hashes(seed=9, sizes=(6, 30), L=10)
    gids0, vals0 = hashes[0]
    gids1, vals1 = hashes[1]
    vals1 = vals1.copy()
    vals1[17] = vals0[2]
    hashes[1] = (gids1, vals1)
    sim = compute_similarity(0, hashes, tie_seed=1)
    chosen = sim.entries[2, 1]
    chosen_pos = int(np.flatnonzero(gids1 == chosen)[0])
    assert np.array_equal(vals1[chosen_pos], vals0[2])


def test_similarity_empty_foreign_party_errors():
    hashes = _party_hashes(seed=4, sizes=(5, 5))
    gids1, vals1 = hashes[1]
    hashes[1] = (gids1[:0], vals1[:0])
    with pytest.raises(ValueError):
        compute_similarity(0, hashes, tie_seed=0)


def test_tie_break_choice_is_stateless_and_keyed():
    assert tie_break_choice(7, 100, 1, 5) == tie_break_choice(7, 100, 1, 5)
    picks = {tie_break_choice(7, gid, 1, 1000) for gid in range(50)}
    assert len(picks) > 10  # different instances draw independently
    assert all(0 <= tie_break_choice(s, 1, 2, 3) < 3 for s in range(20))


def test_similarity_tie_uses_shared_stream():
    # two foreign instances with identical hash rows force a two-way tie
    L = 6
    own = {0: (np.array([42], dtype=np.int64), np.zeros((1, L), dtype=np.int64))}
    f_vals = np.vstack([np.zeros((2, L), dtype=np.int64), np.ones((3, L), dtype=np.int64)])
    own[1] = (np.arange(100, 105, dtype=np.int64), f_vals)
    sim = compute_similarity(0, own, tie_seed=21)
    tied_gids = [100, 101]  # positions 0 and 1 both match on every table
    expected = tied_gids[tie_break_choice(21, 42, 1, 2)]
    assert sim.entries[0, 1] == expected


def test_collision_rate_decreases_with_distance():
    # p-stable property: closer pairs collide at least as often, up to noise
    d = 12
    rng = np.random.default_rng(3)
    base = rng.normal(size=d)
    near = base + 0.1 * rng.normal(size=d)
    far = base + 5.0 * rng.normal(size=d)
    X = sparse.csr_matrix(np.vstack([base, near, far]))
    funcs = sample_functions(LshConfig(r=4.0, num_tables=4000, seed=8), d)
    vals = hash_matrix(funcs, X)
    rate_near = float(np.mean(vals[0] == vals[1]))
    rate_far = float(np.mean(vals[0] == vals[2]))
    assert rate_near >= rate_far - 0.02
    assert rate_near > 0.5  # a 0.1-sigma neighbour collides most of the time
