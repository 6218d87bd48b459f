"""Second-order gradient boosting core.

Trees are grown level-wise to a fixed maximum depth with an exact greedy
split search. Sparse data uses implicit-zero semantics: an instance absent on
a feature is routed through the split's default child, and split candidates
are enumerated from the present values only.

Candidate thresholds per (node, feature): the midpoints between consecutive
distinct present values, plus the minimum present value itself when the node
has absent instances on that feature. The latter realises the
{absent} vs {present} partition (routing is `x < t`, absents follow
default_child), which is the only admissible split on one-hot columns. Both
default directions are scored for every candidate; equal-gain ties prefer
Left, and ties across candidates resolve to the lowest (feature, threshold).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .dataset import Instance, instances_to_arrays

_NEG_INF = -np.inf


@dataclass(frozen=True)
class GradientPair:
    g: float
    h: float


@dataclass(frozen=True)
class GbdtParams:
    num_trees: int = 500
    max_depth: int = 8
    lam: float = 1.0
    gamma: float = 0.0
    learning_rate: float = 0.1
    min_child_instances: int = 1
    base_score: float = 0.0

    def __post_init__(self):
        if self.num_trees < 0 or self.max_depth < 0:
            raise ValueError("num_trees and max_depth must be non-negative")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be non-negative")
        if not (0.0 < self.learning_rate <= 1.0):
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.min_child_instances < 1:
            raise ValueError("min_child_instances must be >= 1")


# ---------------------------------------------------------------------------
# gradients and gain
# ---------------------------------------------------------------------------


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def logistic_gradients(raw_score: float, label: int) -> GradientPair:
    p = float(sigmoid(np.float64(raw_score)))
    return GradientPair(g=p - label, h=p * (1.0 - p))


def logistic_gradient_arrays(raw: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = sigmoid(raw)
    return p - y, p * (1.0 - p)


def split_gain(GL: float, HL: float, GR: float, HR: float, lam: float, gamma: float) -> float:
    if HL + lam <= 0 or HR + lam <= 0 or HL + HR + lam <= 0:
        raise ValueError("denominators must be positive; need lam > 0 or positive hessians")
    return 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - (GL + GR) ** 2 / (HL + HR + lam)) - gamma


# ---------------------------------------------------------------------------
# training-set index
# ---------------------------------------------------------------------------


class TrainMatrix:
    """Per-training-set index built once and reused across boosting rounds.

    Holds the CSR matrix plus a flat entry list (row, feature, value) sorted
    by (feature, value, row) so per-level split scans are single stable sorts
    on small integer keys instead of repeated float sorts.
    """

    def __init__(self, X: sparse.csr_matrix):
        X = X.tocsr().copy()
        X.eliminate_zeros()  # explicit zeros must behave like absent entries
        X.sort_indices()
        self.X = X
        self.n, self.d = X.shape
        coo = X.tocoo()
        order = np.lexsort((coo.row, coo.data, coo.col))
        self.ent_row = coo.row[order].astype(np.int32)
        self.ent_feat = coo.col[order].astype(np.int32)
        self.ent_val = coo.data[order].astype(np.float64)
        csc = X.tocsc()
        self._csc = (csc.indptr, csc.indices.astype(np.int64), csc.data)

    def column(self, f: int) -> tuple[np.ndarray, np.ndarray]:
        """(sorted present row ids, values) of feature f."""
        indptr, indices, data = self._csc
        lo, hi = indptr[f], indptr[f + 1]
        return indices[lo:hi], data[lo:hi]


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------


@dataclass
class Tree:
    feature: np.ndarray  # int32, -1 for leaves
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32 child ids, -1 for leaves
    right: np.ndarray
    default_left: np.ndarray  # bool, absent-feature routing
    weight: np.ndarray  # float64 leaf outputs (0.0 on internals)

    @property
    def num_nodes(self) -> int:
        return len(self.feature)

    def max_abs_leaf(self) -> float:
        leaves = self.feature < 0
        return float(np.max(np.abs(self.weight[leaves]))) if leaves.any() else 0.0

    def depth(self) -> int:
        depths = np.zeros(self.num_nodes, dtype=np.int32)
        for nid in range(self.num_nodes):
            if self.feature[nid] >= 0:
                depths[self.left[nid]] = depths[nid] + 1
                depths[self.right[nid]] = depths[nid] + 1
        return int(depths.max()) if self.num_nodes else 0

    def predict_rows(self, tm: TrainMatrix) -> np.ndarray:
        """Unshrunk leaf outputs for every row of an indexed matrix."""
        out = np.empty(tm.n, dtype=np.float64)
        if self.feature[0] < 0:
            out.fill(self.weight[0])
            return out
        frontier = [(0, np.arange(tm.n, dtype=np.int64))]
        while frontier:
            nid, rows = frontier.pop()
            f = int(self.feature[nid])
            col_rows, col_vals = tm.column(f)
            went_left = np.full(len(rows), bool(self.default_left[nid]))
            if len(col_rows):
                pos = np.minimum(np.searchsorted(col_rows, rows), len(col_rows) - 1)
                hit = col_rows[pos] == rows
                went_left[hit] = col_vals[pos[hit]] < self.threshold[nid]
            for child, sub in ((int(self.left[nid]), rows[went_left]), (int(self.right[nid]), rows[~went_left])):
                if len(sub) == 0:
                    continue
                if self.feature[child] >= 0:
                    frontier.append((child, sub))
                else:
                    out[sub] = self.weight[child]
        return out

    def predict_one(self, features: dict[int, float]) -> float:
        nid = 0
        while self.feature[nid] >= 0:
            f = int(self.feature[nid])
            if f in features:
                go_left = features[f] < self.threshold[nid]
            else:
                go_left = bool(self.default_left[nid])
            nid = int(self.left[nid] if go_left else self.right[nid])
        return float(self.weight[nid])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "default_left": [bool(v) for v in self.default_left],
            "weight": self.weight.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Tree":
        return Tree(
            feature=np.asarray(d["feature"], dtype=np.int32),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            default_left=np.asarray(d["default_left"], dtype=bool),
            weight=np.asarray(d["weight"], dtype=np.float64),
        )


@dataclass
class BestSplit:
    feature: int
    threshold: float
    gain: float
    default_left: bool


# ---------------------------------------------------------------------------
# split search (vectorised, level-wise)
# ---------------------------------------------------------------------------


def _search_level(
    tm: TrainMatrix,
    g: np.ndarray,
    h: np.ndarray,
    crow: np.ndarray,
    num_active: int,
    params: GbdtParams,
):
    """Best split per active node, or feature -1 where no admissible split.

    `crow` maps each row to a compact node index in [0, num_active) or -1.
    Returns (feature, threshold, default_left, gain, G_node, H_node) arrays
    indexed by compact node.
    """
    lam, gamma, mc = params.lam, params.gamma, params.min_child_instances
    d = tm.d

    act_rows = crow >= 0
    cnt_node = np.bincount(crow[act_rows], minlength=num_active).astype(np.int64)
    G_node = np.bincount(crow[act_rows], weights=g[act_rows], minlength=num_active)
    H_node = np.bincount(crow[act_rows], weights=h[act_rows], minlength=num_active)

    out_feat = np.full(num_active, -1, dtype=np.int32)
    out_thr = np.zeros(num_active, dtype=np.float64)
    out_defl = np.ones(num_active, dtype=bool)
    out_gain = np.zeros(num_active, dtype=np.float64)

    ent_c = crow[tm.ent_row]
    keep = ent_c >= 0
    if not keep.any():
        return out_feat, out_thr, out_defl, out_gain, G_node, H_node
    er = tm.ent_row[keep]
    ef = tm.ent_feat[keep]
    ev = tm.ent_val[keep]
    ec = ent_c[keep]

    key = ec.astype(np.int64) * d + ef
    order = np.argsort(key, kind="stable")  # stable keeps (value, row) order inside groups
    k_s = key[order]
    ev_s = ev[order]
    g_s = g[er[order]]
    h_s = h[er[order]]

    boundaries = np.flatnonzero(np.diff(k_s)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(k_s)]])
    n_groups = len(starts)
    grp_node = (k_s[starts] // d).astype(np.int64)
    grp_feat = (k_s[starts] % d).astype(np.int32)
    grp_of_entry = np.repeat(np.arange(n_groups, dtype=np.int64), ends - starts)

    cg = np.cumsum(g_s)
    chs = np.cumsum(h_s)
    before_g = np.where(starts > 0, cg[starts - 1], 0.0)
    before_h = np.where(starts > 0, chs[starts - 1], 0.0)
    grp_g = cg[ends - 1] - before_g
    grp_h = chs[ends - 1] - before_h
    grp_cnt = (ends - starts).astype(np.int64)

    miss_g = G_node[grp_node] - grp_g
    miss_h = H_node[grp_node] - grp_h
    miss_cnt = cnt_node[grp_node] - grp_cnt

    def both_direction_gain(pg, ph, pc, gi):
        """Effective gain over valid default directions for candidates whose
        present-left prefix is (pg, ph, pc) within group index array gi."""
        Gn = G_node[grp_node[gi]]
        Hn = H_node[grp_node[gi]]
        parent = Gn * Gn / (Hn + lam)
        res_gain = np.full(len(gi), _NEG_INF)
        res_defl = np.ones(len(gi), dtype=bool)
        for default_left in (True, False):
            GL = pg + miss_g[gi] if default_left else pg
            HL = ph + miss_h[gi] if default_left else ph
            nL = pc + miss_cnt[gi] if default_left else pc
            GR = Gn - GL
            HR = Hn - HL
            nR = cnt_node[grp_node[gi]] - nL
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent) - gamma
            valid = (nL >= mc) & (nR >= mc)
            gain = np.where(valid, gain, _NEG_INF)
            # Left evaluated first; strict > means equal-gain ties keep Left.
            better = gain > res_gain if not default_left else np.full(len(gi), True)
            res_gain = np.where(better, gain, res_gain)
            res_defl = np.where(better, default_left, res_defl)
        return res_gain, res_defl

    # interior candidates: boundary after position p, within the same group
    same_next = np.zeros(len(k_s), dtype=bool)
    if len(k_s) > 1:
        same_next[:-1] = k_s[1:] == k_s[:-1]
    interior = same_next.copy()
    if len(k_s) > 1:
        interior[:-1] &= ev_s[1:] != ev_s[:-1]
    ipos = np.flatnonzero(interior)
    igrp = grp_of_entry[ipos]
    i_thr = 0.5 * (ev_s[ipos] + ev_s[ipos + 1])
    i_pg = cg[ipos] - before_g[igrp]
    i_ph = chs[ipos] - before_h[igrp]
    i_pc = ipos - starts[igrp] + 1
    i_gain, i_defl = both_direction_gain(i_pg, i_ph, i_pc, igrp)

    # one "absent vs present" candidate per group at the minimum present value
    v_grp = np.arange(n_groups, dtype=np.int64)
    v_thr = ev_s[starts]
    v_gain, v_defl = both_direction_gain(
        np.zeros(n_groups), np.zeros(n_groups), np.zeros(n_groups, dtype=np.int64), v_grp
    )

    # per-group best, the min-value candidate first (it has the lowest threshold)
    if len(ipos):
        i_best = np.full(n_groups, _NEG_INF)
        np.maximum.at(i_best, igrp, i_gain)
    else:
        i_best = np.full(n_groups, _NEG_INF)
    grp_best = np.maximum(v_gain, i_best)
    use_vmin = v_gain >= i_best

    # first interior candidate attaining the group max, in (value asc) order
    grp_best_thr = np.where(use_vmin, v_thr, 0.0)
    grp_best_defl = np.where(use_vmin, v_defl, True)
    need = np.flatnonzero(~use_vmin)
    if len(need):
        need_set = np.zeros(n_groups, dtype=bool)
        need_set[need] = True
        cand_mask = need_set[igrp] & (i_gain == grp_best[igrp])
        BIG = np.iinfo(np.int64).max
        pos_masked = np.where(cand_mask, np.arange(len(igrp), dtype=np.int64), BIG)
        first_by_grp = np.full(n_groups, BIG, dtype=np.int64)
        np.minimum.at(first_by_grp, igrp, pos_masked)
        sel = first_by_grp[need]
        grp_best_thr[need] = i_thr[sel]
        grp_best_defl[need] = i_defl[sel]

    # per-node best over groups; groups are (node, feature asc) contiguous,
    # first max in group order realises the lowest-(feature, threshold) tie-break
    valid_grp = grp_best > 0.0
    node_best = np.full(num_active, 0.0)
    np.maximum.at(node_best, grp_node[valid_grp], grp_best[valid_grp])
    has_split = node_best > 0.0
    if has_split.any():
        BIG = np.iinfo(np.int64).max
        grp_ids = np.arange(n_groups, dtype=np.int64)
        winner = valid_grp & (grp_best == node_best[grp_node])
        pos_masked = np.where(winner, grp_ids, BIG)
        first_grp = np.full(num_active, BIG, dtype=np.int64)
        np.minimum.at(first_grp, grp_node[winner], pos_masked[winner])
        for cn in np.flatnonzero(has_split):
            gi = first_grp[cn]
            out_feat[cn] = grp_feat[gi]
            out_thr[cn] = grp_best_thr[gi]
            out_defl[cn] = grp_best_defl[gi]
            out_gain[cn] = grp_best[gi]
    return out_feat, out_thr, out_defl, out_gain, G_node, H_node


def train_tree_matrix(tm: TrainMatrix, g: np.ndarray, h: np.ndarray, params: GbdtParams) -> Tree:
    n = tm.n
    node_of = np.zeros(n, dtype=np.int32)
    feature = [np.int32(-1)]
    threshold = [0.0]
    left = [np.int32(-1)]
    right = [np.int32(-1)]
    default_left = [True]
    frontier = [0]  # node ids whose fate is undecided

    for depth in range(params.max_depth):
        if not frontier:
            break
        nid_to_compact = np.full(len(feature), -1, dtype=np.int64)
        for c, nid in enumerate(frontier):
            nid_to_compact[nid] = c
        crow = nid_to_compact[node_of]
        feats, thrs, defls, gains, _, _ = _search_level(tm, g, h, crow, len(frontier), params)

        split_compact = np.flatnonzero(feats >= 0)
        if len(split_compact) == 0:
            break
        chosen_feat = feats  # indexed by compact id, -1 for new leaves
        new_frontier = []
        left_id = np.full(len(frontier), -1, dtype=np.int32)
        right_id = np.full(len(frontier), -1, dtype=np.int32)
        for c in split_compact:
            nid = frontier[c]
            feature[nid] = np.int32(feats[c])
            threshold[nid] = float(thrs[c])
            default_left[nid] = bool(defls[c])
            lid = len(feature)
            feature.extend([np.int32(-1), np.int32(-1)])
            threshold.extend([0.0, 0.0])
            left.extend([np.int32(-1), np.int32(-1)])
            right.extend([np.int32(-1), np.int32(-1)])
            default_left.extend([True, True])
            left[nid] = np.int32(lid)
            right[nid] = np.int32(lid + 1)
            left_id[c] = lid
            right_id[c] = lid + 1
            new_frontier.extend([lid, lid + 1])

        # route rows of split nodes: absent -> default, present -> value < thr
        in_split = (crow >= 0) & (chosen_feat[np.maximum(crow, 0)] >= 0)
        went_left = np.zeros(n, dtype=bool)
        went_left[in_split] = defls[crow[in_split]]
        ent_c = crow[tm.ent_row]
        e_idx = np.flatnonzero(ent_c >= 0)
        e_idx = e_idx[chosen_feat[ent_c[e_idx]] == tm.ent_feat[e_idx]]
        went_left[tm.ent_row[e_idx]] = tm.ent_val[e_idx] < thrs[ent_c[e_idx]]
        node_of[in_split] = np.where(went_left[in_split], left_id[crow[in_split]], right_id[crow[in_split]])
        frontier = new_frontier

    tree = Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        default_left=np.asarray(default_left, dtype=bool),
        weight=np.zeros(len(feature), dtype=np.float64),
    )
    # leaf weights: -G/(H+lam) over each leaf's surviving row set
    G_fin = np.bincount(node_of, weights=g, minlength=tree.num_nodes)
    H_fin = np.bincount(node_of, weights=h, minlength=tree.num_nodes)
    leaves = tree.feature < 0
    tree.weight[leaves] = -G_fin[leaves] / (H_fin[leaves] + params.lam)
    return tree


def train_tree(
    instances: Sequence[Instance],
    gradient_pairs: Sequence[GradientPair],
    params: GbdtParams,
    dimension: int | None = None,
) -> Tree:
    if len(instances) == 0:
        raise ValueError("cannot train on an empty instance set")
    dim = dimension
    if dim is None:
        dim = 1 + max((max(i.features) for i in instances if i.features), default=0)
    X, _, _ = instances_to_arrays(instances, dim)
    tm = TrainMatrix(X)
    g = np.asarray([p.g for p in gradient_pairs], dtype=np.float64)
    h = np.asarray([p.h for p in gradient_pairs], dtype=np.float64)
    return train_tree_matrix(tm, g, h, params)


def find_best_split(
    instances: Sequence[Instance],
    gradient_pairs: Sequence[GradientPair],
    params: GbdtParams,
    dimension: int | None = None,
) -> Optional[BestSplit]:
    if len(instances) < 2:
        raise ValueError("need at least two instances")
    dim = dimension
    if dim is None:
        dim = 1 + max((max(i.features) for i in instances if i.features), default=0)
    X, _, _ = instances_to_arrays(instances, dim)
    tm = TrainMatrix(X)
    g = np.asarray([p.g for p in gradient_pairs], dtype=np.float64)
    h = np.asarray([p.h for p in gradient_pairs], dtype=np.float64)
    crow = np.zeros(tm.n, dtype=np.int64)
    feats, thrs, defls, gains, _, _ = _search_level(tm, g, h, crow, 1, params)
    if feats[0] < 0:
        return None
    return BestSplit(
        feature=int(feats[0]),
        threshold=float(thrs[0]),
        gain=float(gains[0]),
        default_left=bool(defls[0]),
    )


# ---------------------------------------------------------------------------
# random-split mode (bound verification only; not used by the greedy trainer)
# ---------------------------------------------------------------------------


def random_split_tree(
    tm: TrainMatrix, g: np.ndarray, h: np.ndarray, params: GbdtParams, rng: np.random.Generator
) -> Tree:
    """Grow a tree whose split feature is uniform over all features and whose
    threshold is uniform over the node's observed values above the minimum
    (so both children are non-empty); leaf weights use the usual closed form.
    """
    feature = [np.int32(-1)]
    threshold = [0.0]
    left = [np.int32(-1)]
    right = [np.int32(-1)]
    default_left = [True]
    node_rows = {0: np.arange(tm.n, dtype=np.int64)}
    frontier = [(0, 0)]  # (node id, depth)

    while frontier:
        nid, depth = frontier.pop(0)
        rows = node_rows[nid]
        if depth >= params.max_depth or len(rows) < 2:
            continue
        f = int(rng.integers(tm.d))
        col_rows, col_vals = tm.column(f)
        pos = np.searchsorted(col_rows, rows)
        pos = np.minimum(pos, max(len(col_rows) - 1, 0))
        hit = col_rows[pos] == rows if len(col_rows) else np.zeros(len(rows), dtype=bool)
        vals = np.zeros(len(rows))
        vals[hit] = col_vals[pos[hit]]
        distinct = np.unique(vals)
        if len(distinct) < 2:
            continue
        thr = float(distinct[int(rng.integers(1, len(distinct)))])
        went_left = vals < thr
        lid = len(feature)
        feature[nid] = np.int32(f)
        threshold[nid] = thr
        feature.extend([np.int32(-1), np.int32(-1)])
        threshold.extend([0.0, 0.0])
        left.extend([np.int32(-1), np.int32(-1)])
        right.extend([np.int32(-1), np.int32(-1)])
        default_left.extend([True, True])
        left[nid] = np.int32(lid)
        right[nid] = np.int32(lid + 1)
        node_rows[lid] = rows[went_left]
        node_rows[lid + 1] = rows[~went_left]
        del node_rows[nid]
        frontier.extend([(lid, depth + 1), (lid + 1, depth + 1)])

    tree = Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        default_left=np.asarray(default_left, dtype=bool),
        weight=np.zeros(len(feature), dtype=np.float64),
    )
    for nid, rows in node_rows.items():
        G = float(np.sum(g[rows]))
        H = float(np.sum(h[rows]))
        tree.weight[nid] = -G / (H + params.lam)
    return tree


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


@dataclass
class GbdtModel:
    trees: list[Tree] = field(default_factory=list)
    learning_rate: float = 0.1
    base_score: float = 0.0

    def predict_raw_matrix(self, tm: TrainMatrix) -> np.ndarray:
        raw = np.full(tm.n, self.base_score, dtype=np.float64)
        for tree in self.trees:
            raw += self.learning_rate * tree.predict_rows(tm)
        return raw

    def predict_raw(self, X: sparse.csr_matrix) -> np.ndarray:
        return self.predict_raw_matrix(TrainMatrix(X))

    def predict_class(self, X: sparse.csr_matrix) -> np.ndarray:
        return (self.predict_raw(X) >= 0.0).astype(np.int8)  # sigma(raw) >= 0.5

    def predict_one_raw(self, features: dict[int, float]) -> float:
        return self.base_score + self.learning_rate * sum(t.predict_one(features) for t in self.trees)

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "trees": [t.to_dict() for t in self.trees],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @staticmethod
    def from_dict(d: dict) -> "GbdtModel":
        model = GbdtModel(learning_rate=d["learning_rate"], base_score=d["base_score"])
        model.trees = [Tree.from_dict(t) for t in d["trees"]]
        return model

    @staticmethod
    def load(path) -> "GbdtModel":
        with open(path, "r", encoding="utf-8") as fh:
            return GbdtModel.from_dict(json.load(fh))


def boost(
    tm: TrainMatrix,
    y: np.ndarray,
    params: GbdtParams,
    observer=None,
) -> GbdtModel:
    """Plain (single-party) gradient boosting loop."""
    model = GbdtModel(learning_rate=params.learning_rate, base_score=params.base_score)
    raw = np.full(tm.n, params.base_score, dtype=np.float64)
    for t in range(params.num_trees):
        g, h = logistic_gradient_arrays(raw, y)
        tree = train_tree_matrix(tm, g, h, params)
        outs = tree.predict_rows(tm)
        raw += params.learning_rate * outs
        model.trees.append(tree)
        if observer is not None:
            observer(t, tree, outs)
    return model
