import json

import numpy as np
import pytest
from scipy import sparse

from fedboost.federation import (
    CommLedger,
    Party,
    TrainingSchedule,
    _position_maps,
    aggregate_foreign_gradients,
    train_allin,
    train_simfl,
    train_solo,
    train_tfl,
    tree_wire_payload,
)
from fedboost.gbdt import GbdtParams, TrainMatrix, boost, logistic_gradient_arrays
from helpers import make_parties
from oracles import aggregate_oracle


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_round_robin_schedule():
    s = TrainingSchedule.round_robin(7, 3)
    assert s.assignment == (0, 1, 2, 0, 1, 2, 0)


def test_contiguous_schedule():
    s = TrainingSchedule.contiguous(7, 3)
    assert s.assignment == (0, 0, 0, 1, 1, 2, 2)
    assert len(s.assignment) == 7


def test_schedule_make_dispatch():
    assert TrainingSchedule.make("round_robin", 4, 2).assignment == (0, 1, 0, 1)
    assert TrainingSchedule.make("contiguous", 4, 2).assignment == (0, 0, 1, 1)
    with pytest.raises(ValueError):
        TrainingSchedule.make("fancy", 4, 2)


def test_round_robin_covers_all_parties():
    s = TrainingSchedule.round_robin(10, 4)
    assert set(s.assignment) == {0, 1, 2, 3}
    counts = [s.assignment.count(p) for p in range(4)]
    assert max(counts) - min(counts) <= 1


# ---------------------------------------------------------------------------
# parties and position maps
# ---------------------------------------------------------------------------


def test_party_local_positions():
    X = sparse.csr_matrix(np.eye(3))
    p = Party(0, X, np.zeros(3), np.array([30, 10, 20]))
    pos = p.local_positions(np.array([10, 30, 20, 10]))
    assert pos.tolist() == [1, 0, 2, 1]
    with pytest.raises(KeyError):
        p.local_positions(np.array([99]))


def test_position_maps_identity_and_validity():
    parties, _ = make_parties(0, (9, 12))
    pos = _position_maps(parties)
    assert np.array_equal(pos[(0, 0)], np.arange(9))
    assert np.array_equal(pos[(1, 1)], np.arange(12))
    # cross maps land inside the target party's row range
    assert pos[(0, 1)].shape == (9,) and pos[(0, 1)].max() < 12
    assert pos[(1, 0)].shape == (12,) and pos[(1, 0)].max() < 9


def test_position_maps_require_preprocessing():
    parties, _ = make_parties(1, (5, 5), preprocessed=False)
    with pytest.raises(ValueError):
        _position_maps(parties)


def test_preprocess_attaches_similarity_and_ledgers_bytes():
    parties, ledger = make_parties(2, (20, 30), L=6)
    for p in parties:
        assert p.similarity is not None
        assert p.similarity.entries.shape == (len(p), 2)
    assert ledger.preprocessing_bytes == 8 * 2 * 50 * 6


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def test_aggregate_explicit_example():
    g = np.array([1.0, 2.0, 3.0])
    h = np.array([0.1, 0.2, 0.3])
    positions = np.array([1, 1, 0])
    G, H = aggregate_foreign_gradients(g, h, positions, target_size=4)
    assert G.tolist() == [3.0, 3.0, 0.0, 0.0]
    assert np.allclose(H, [0.3, 0.3, 0.0, 0.0])


def test_aggregate_matches_bruteforce_oracle():
    parties, _ = make_parties(3, (11, 7, 9))
    pos = _position_maps(parties)
    trainer = 1
    m = parties[trainer]
    rng = np.random.default_rng(8)
    foreign_entries = {}
    G = np.zeros(len(m))
    H = np.zeros(len(m))
    for p in parties:
        g = rng.normal(size=len(p))
        h = rng.uniform(0.01, 0.25, size=len(p))
        Gi, Hi = aggregate_foreign_gradients(g, h, pos[(p.party_id, trainer)], len(m))
        G += Gi
        H += Hi
        matched_gids = m.gids[pos[(p.party_id, trainer)]]
        foreign_entries[p.party_id] = (matched_gids, g, h)
    G_ref, H_ref = aggregate_oracle(m.gids, foreign_entries)
    assert np.allclose(G, G_ref, rtol=1e-12, atol=1e-12)
    assert np.allclose(H, H_ref, rtol=1e-12, atol=1e-12)


def test_gradient_conservation():
    parties, _ = make_parties(4, (40, 25, 35))
    pos = _position_maps(parties)
    rng = np.random.default_rng(9)
    for trainer in range(3):
        m = parties[trainer]
        G = np.zeros(len(m))
        H = np.zeros(len(m))
        total_g = 0.0
        total_h = 0.0
        for p in parties:
            g = rng.normal(size=len(p))
            h = rng.uniform(0.01, 0.25, size=len(p))
            Gi, Hi = aggregate_foreign_gradients(g, h, pos[(p.party_id, trainer)], len(m))
            G += Gi
            H += Hi
            total_g += g.sum()
            total_h += h.sum()
        assert abs(G.sum() - total_g) <= 1e-9 * max(1.0, abs(total_g))
        assert abs(H.sum() - total_h) <= 1e-9 * max(1.0, abs(total_h))


# ---------------------------------------------------------------------------
# wire payload
# ---------------------------------------------------------------------------


def test_tree_wire_payload_layout():
    parties, _ = make_parties(5, (30,), preprocessed=False)
    p = parties[0]
    g, h = logistic_gradient_arrays(p.raw, p.y)
    from fedboost.gbdt import train_tree_matrix

    tree = train_tree_matrix(p.tm, g, h, GbdtParams(max_depth=2))
    buf = tree_wire_payload(tree, max_depth=4)
    assert buf.shape == ((1 << 4) - 1,)
    assert buf.nbytes == 8 * 15
    assert buf["feature"][0] == tree.feature[0]
    assert buf["value"][0] == np.float32(tree.threshold[0])
    # children of heap slot s live at 2s+1 / 2s+2; a depth-2 tree leaves the
    # deeper slots unused
    assert np.all(buf["feature"][7:] == -1)


def test_tree_wire_payload_depth_zero():
    parties, _ = make_parties(6, (10,), preprocessed=False)
    p = parties[0]
    g, h = logistic_gradient_arrays(p.raw, p.y)
    from fedboost.gbdt import train_tree_matrix

    tree = train_tree_matrix(p.tm, g, h, GbdtParams(max_depth=0))
    buf = tree_wire_payload(tree, max_depth=0)
    assert buf.shape == (0,) and buf.nbytes == 0


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


def test_simfl_ledger_equalities():
    sizes = (26, 14)
    L, D, T = 7, 4, 6
    parties, ledger = make_parties(7, sizes, L=L)
    params = GbdtParams(num_trees=T, max_depth=D)
    train_simfl(parties, params, TrainingSchedule.round_robin(T, 2), ledger)
    n_total = sum(sizes)
    assert ledger.preprocessing_bytes == 8 * 2 * n_total * L
    assert ledger.gradient_bytes_per_tree(T) == [8 * n_total] * T
    assert ledger.broadcast_bytes_per_tree(T) == [8 * ((1 << D) - 1) * 1] * T
    per_tree = 8 * (n_total + ((1 << D) - 1) * 1)
    assert ledger.training_bytes == T * per_tree
    assert ledger.total_bytes == ledger.preprocessing_bytes + T * per_tree


def test_simfl_ledger_criterion_fixture():
    # N=1000, M=2, L=40 -> preprocessing exactly 640,000 bytes
    parties, ledger = make_parties(11, (500, 500), d=50, L=40)
    params = GbdtParams(num_trees=2, max_depth=8)
    train_simfl(parties, params, TrainingSchedule.round_robin(2, 2), ledger)
    assert ledger.preprocessing_bytes == 640_000
    assert ledger.gradient_bytes_per_tree(2) == [8 * 1000] * 2
    assert ledger.broadcast_bytes_per_tree(2) == [8 * 255] * 2


def test_simfl_single_party_equals_plain_boosting():
    parties, _ = make_parties(8, (40,))
    params = GbdtParams(num_trees=8, max_depth=3)
    fed = train_simfl(parties, params, TrainingSchedule.round_robin(8, 1))
    p = parties[0]
    plain = boost(TrainMatrix(p.X), p.y, params)
    assert json.dumps(fed.to_dict(), sort_keys=True) == json.dumps(plain.to_dict(), sort_keys=True)


def test_simfl_single_party_ledger_loopback_only():
    parties, ledger = make_parties(9, (25,), L=5)
    params = GbdtParams(num_trees=3, max_depth=2)
    train_simfl(parties, params, TrainingSchedule.round_robin(3, 1), ledger)
    assert ledger.preprocessing_bytes == 8 * 1 * 25 * 5
    assert ledger.gradient_bytes_per_tree(3) == [8 * 25] * 3
    assert ledger.broadcast_bytes_per_tree(3) == [0, 0, 0]  # no other party


def test_simfl_raw_scores_match_model_predictions():
    parties, _ = make_parties(10, (22, 18))
    params = GbdtParams(num_trees=6, max_depth=3, learning_rate=0.1)
    model = train_simfl(parties, params, TrainingSchedule.round_robin(6, 2))
    for p in parties:
        assert np.allclose(p.raw, model.predict_raw(p.X), rtol=1e-12, atol=1e-12)


def test_simfl_differs_from_local_training_with_two_parties():
    parties, _ = make_parties(12, (30, 30))
    params = GbdtParams(num_trees=4, max_depth=3)
    fed = train_simfl(parties, params, TrainingSchedule.round_robin(4, 2))
    solo = train_solo(parties[0], params)
    assert json.dumps(fed.to_dict()) != json.dumps(solo.to_dict())
    assert len(fed.trees) == 4


def test_simfl_observer_sees_every_round():
    parties, _ = make_parties(13, (15, 15))
    params = GbdtParams(num_trees=5, max_depth=2)
    seen = []

    def observer(ctx):
        seen.append((ctx.round_index, ctx.trainer, ctx.tree.num_nodes))
        assert set(ctx.outputs) == {0, 1}
        assert ctx.weighted_G.shape == (len(parties[ctx.trainer]),)

    train_simfl(parties, params, TrainingSchedule.round_robin(5, 2), observer=observer)
    assert [r for r, _, _ in seen] == [0, 1, 2, 3, 4]
    assert [m for _, m, _ in seen] == [0, 1, 0, 1, 0]


def test_tfl_ledger_broadcast_only():
    parties, _ = make_parties(14, (20, 20), preprocessed=False)
    ledger = CommLedger()
    params = GbdtParams(num_trees=4, max_depth=3)
    train_tfl(parties, params, TrainingSchedule.round_robin(4, 2), ledger)
    assert ledger.preprocessing_bytes == 0
    assert ledger.gradient_bytes_per_tree(4) == [0] * 4
    assert ledger.broadcast_bytes_per_tree(4) == [8 * 7 * 1] * 4


def test_tfl_shares_raw_scores_across_parties():
    parties, _ = make_parties(15, (18, 18), preprocessed=False)
    params = GbdtParams(num_trees=4, max_depth=3)
    model = train_tfl(parties, params, TrainingSchedule.round_robin(4, 2))
    for p in parties:
        assert np.allclose(p.raw, model.predict_raw(p.X), rtol=1e-12, atol=1e-12)


def test_tfl_needs_no_similarity():
    parties, _ = make_parties(16, (12, 12), preprocessed=False)
    params = GbdtParams(num_trees=2, max_depth=2)
    model = train_tfl(parties, params, TrainingSchedule.round_robin(2, 2))
    assert len(model.trees) == 2


def test_allin_equals_boost_on_union():
    parties, _ = make_parties(17, (20, 25), preprocessed=False)
    X_all = sparse.vstack([p.X for p in parties], format="csr")
    y_all = np.concatenate([p.y for p in parties])
    params = GbdtParams(num_trees=5, max_depth=3)
    m1 = train_allin(TrainMatrix(X_all), y_all, params)
    m2 = boost(TrainMatrix(X_all), y_all, params)
    assert json.dumps(m1.to_dict()) == json.dumps(m2.to_dict())


def test_protocol_determinism():
    a, _ = make_parties(18, (25, 20))
    b, _ = make_parties(18, (25, 20))
    params = GbdtParams(num_trees=5, max_depth=3)
    m1 = train_simfl(a, params, TrainingSchedule.round_robin(5, 2))
    m2 = train_simfl(b, params, TrainingSchedule.round_robin(5, 2))
    assert json.dumps(m1.to_dict(), sort_keys=True) == json.dumps(m2.to_dict(), sort_keys=True)
