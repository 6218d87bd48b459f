"""Privacy gate, approximation-error measurement, and the error upper bound.

The per-round approximation error of the weighted protocol is measured two
independent ways: as the absolute signed sum of per-foreign-instance terms

    xi_r = g_r * (f_t(match(x_r)) - f_t(x_r)) + h_r/2 * (f_t(match)^2 - f_t(x_r)^2)

and as the absolute difference between the weighted training objective
(evaluated on the trainer's rows under the summed gradients) and the exact
joint objective (evaluated on everyone's rows under plain gradients). The
regularisation term is identical on both sides and cancels. Both paths must
agree; tests pin the tolerance.

All f_t values here are unshrunk tree outputs (leaf weights before the
learning rate), which is also what the bound's f' refers to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import sparse

from .federation import Party, RoundContext
from .gbdt import Tree


class PrivacyStatus(Enum):
    ADMISSIBLE = "admissible"
    INADMISSIBLE = "inadmissible"


def privacy_check(num_tables: int, dimension: int) -> PrivacyStatus:
    """Hash-count gate: publishing L projections of a d-dimensional instance
    leaves the preimage underdetermined only while L < d."""
    if num_tables < 1 or dimension < 1:
        raise ValueError("num_tables and dimension must be >= 1")
    return PrivacyStatus.ADMISSIBLE if num_tables < dimension else PrivacyStatus.INADMISSIBLE


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def exact_l1_diameter(X: sparse.csr_matrix, chunk: int = 256) -> float:
    """Max pairwise L1 distance, O(n^2 d); intended for modest n."""
    dense = np.asarray(X.todense(), dtype=np.float64)
    n = dense.shape[0]
    best = 0.0
    for start in range(0, n, chunk):
        block = dense[start : start + chunk]
        dist = np.abs(block[:, None, :] - dense[None, :, :]).sum(axis=2)
        best = max(best, float(dist.max()))
    return best


def box_l1_diameter(X: sparse.csr_matrix) -> float:
    """Sum of per-feature value ranges; an upper bound on the L1 diameter.

    Implicit zeros participate: a column that is absent somewhere has its
    range extended to include 0.
    """
    X = X.tocsc()
    n, d = X.shape
    hi = np.zeros(d)
    lo = np.zeros(d)
    nnz = np.diff(X.indptr)
    if X.nnz:
        col_max = X.max(axis=0).toarray().ravel()
        col_min = X.min(axis=0).toarray().ravel()
        # scipy's sparse min/max already account for implicit zeros when a
        # column is not fully dense, but a fully dense column must not clamp
        full = nnz == n
        hi = np.where(full, col_max, np.maximum(col_max, 0.0))
        lo = np.where(full, col_min, np.minimum(col_min, 0.0))
    return float(np.sum(hi - lo))


def _row_l1(A: sparse.csr_matrix) -> np.ndarray:
    diff = A.tocsr()
    out = np.zeros(diff.shape[0])
    nnz = np.diff(diff.indptr)
    nonempty = nnz > 0
    if diff.nnz:
        out[nonempty] = np.add.reduceat(np.abs(diff.data), diff.indptr[:-1][nonempty])
    return out


def matched_l1_max(parties: list[Party], trainer: int, position_maps) -> float:
    """Max L1 distance between any foreign instance and its match inside the
    trainer party. Zero when there are no foreign parties."""
    by_id = {p.party_id: p for p in parties}
    m = by_id[trainer]
    best = 0.0
    for p in parties:
        if p.party_id == trainer:
            continue
        pos = position_maps[(p.party_id, trainer)]
        diff = p.X - m.X[pos]
        if diff.nnz:
            best = max(best, float(_row_l1(diff).max()))
    return best


# ---------------------------------------------------------------------------
# the bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorBoundInputs:
    d_t: float  # max L1 distance across matched cross-party pairs
    d_m: float  # L1 diameter of the full training set (or an upper bound)
    depth: int
    n_total: int
    n_local: int
    g_prime: float
    h_prime: float
    f_prime: float
    delta: float

    def __post_init__(self):
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        if self.d_t < 0 or self.d_m < 0:
            raise ValueError("distances must be non-negative")
        if self.d_m == 0.0 and self.d_t > 0.0:
            raise ValueError("d_m = 0 with d_t > 0 is inconsistent")
        if self.d_t > self.d_m:
            raise ValueError("d_t cannot exceed the diameter d_m")
        if self.n_local > self.n_total:
            raise ValueError("n_local cannot exceed n_total")


def xi_cap(g_prime: float, h_prime: float, f_prime: float) -> float:
    """Largest possible magnitude of a single xi term."""
    return 2.0 * g_prime * f_prime + 0.5 * h_prime * f_prime**2


def closed_form_bound(inputs: ErrorBoundInputs) -> float:
    """High-probability upper bound on the per-round approximation error:
    ([1-(1-d_t/d_m)^D](N-N_m) + sqrt((N-N_m) ln(1/delta)/2)) * xi_cap."""
    nf = inputs.n_total - inputs.n_local
    ratio = 0.0 if inputs.d_t == 0.0 else inputs.d_t / inputs.d_m
    mismatch = 1.0 - (1.0 - ratio) ** inputs.depth
    hoeffding = math.sqrt(nf * math.log(1.0 / inputs.delta) / 2.0)
    return (mismatch * nf + hoeffding) * xi_cap(inputs.g_prime, inputs.h_prime, inputs.f_prime)


# ---------------------------------------------------------------------------
# epsilon measurement (dual path)
# ---------------------------------------------------------------------------


def xi_terms(ctx: RoundContext) -> np.ndarray:
    """Signed xi terms for all foreign instances, party-ascending order."""
    chunks = []
    m_out = ctx.outputs[ctx.trainer]
    for p in ctx.parties:
        pid = p.party_id
        if pid == ctx.trainer:
            continue
        g, h = ctx.gradients[pid]
        f_own = ctx.outputs[pid]
        f_match = m_out[ctx.position_maps[(pid, ctx.trainer)]]
        chunks.append(g * (f_match - f_own) + 0.5 * h * (f_match**2 - f_own**2))
    if not chunks:
        return np.zeros(0)
    return np.concatenate(chunks)


def epsilon_from_terms(ctx: RoundContext) -> float:
    terms = xi_terms(ctx)
    return abs(float(np.sum(terms))) if len(terms) else 0.0


def weighted_objective(ctx: RoundContext) -> float:
    """Linearised training objective the trainer actually minimised,
    regulariser omitted (it cancels in the comparison)."""
    f = ctx.outputs[ctx.trainer]
    return float(np.sum(ctx.weighted_G * f + 0.5 * ctx.weighted_H * f**2))


def exact_objective(ctx: RoundContext) -> float:
    """The joint-data objective for the same tree, same round gradients."""
    total = 0.0
    for p in ctx.parties:
        g, h = ctx.gradients[p.party_id]
        f = ctx.outputs[p.party_id]
        total += float(np.sum(g * f + 0.5 * h * f**2))
    return total


def epsilon_from_objectives(ctx: RoundContext) -> float:
    return abs(weighted_objective(ctx) - exact_objective(ctx))


def measure_epsilon(
    tree: Tree,
    trainer: int,
    parties: list[Party],
    gradients: dict[int, tuple[np.ndarray, np.ndarray]],
    position_maps,
) -> float:
    """Standalone epsilon for a given tree and round gradients (term path)."""
    outputs = {p.party_id: tree.predict_rows(p.tm) for p in parties}
    by_id = {p.party_id: p for p in parties}
    m = by_id[trainer]
    G = np.zeros(len(m))
    H = np.zeros(len(m))
    for pid in sorted(by_id):
        g, h = gradients[pid]
        pos = position_maps[(pid, trainer)]
        G += np.bincount(pos, weights=g, minlength=len(m))
        H += np.bincount(pos, weights=h, minlength=len(m))
    ctx = RoundContext(
        round_index=-1,
        trainer=trainer,
        tree=tree,
        parties=parties,
        gradients=gradients,
        outputs=outputs,
        weighted_G=G,
        weighted_H=H,
        position_maps=position_maps,
    )
    return epsilon_from_terms(ctx)


# ---------------------------------------------------------------------------
# per-round reports
# ---------------------------------------------------------------------------


@dataclass
class RoundErrorReport:
    round_index: int
    trainer: int
    epsilon: float
    epsilon_objective: float
    bound: float
    xi_abs_max: float
    xi_cap: float
    g_prime: float
    h_prime: float
    f_prime: float

    @property
    def within_bound(self) -> bool:
        return self.epsilon <= self.bound

    def row(self) -> dict:
        return {
            "round": self.round_index,
            "trainer": self.trainer,
            "epsilon": self.epsilon,
            "epsilon_objective": self.epsilon_objective,
            "bound": self.bound,
            "pass": self.within_bound,
            "xi_abs_max": self.xi_abs_max,
            "xi_cap": self.xi_cap,
            "g_prime": self.g_prime,
            "h_prime": self.h_prime,
            "f_prime": self.f_prime,
        }


class RoundErrorTracker:
    """Round observer: measures epsilon both ways and evaluates the bound.

    d_t is exact per trainer (fixed once the similarity matrices are);
    d_m is exact up to `exact_diameter_limit` total rows, otherwise the
    per-feature range upper bound is used and flagged in `d_m_method`.
    """

    def __init__(self, parties: list[Party], position_maps, delta: float = 0.05,
                 exact_diameter_limit: int = 2048):
        self.parties = parties
        self.position_maps = position_maps
        self.delta = delta
        self.reports: list[RoundErrorReport] = []
        X_all = sparse.vstack([p.X for p in parties], format="csr")
        if X_all.shape[0] <= exact_diameter_limit:
            self.d_m = exact_l1_diameter(X_all)
            self.d_m_method = "exact"
        else:
            self.d_m = box_l1_diameter(X_all)
            self.d_m_method = "feature_range_box"
        self.d_t = {
            p.party_id: min(matched_l1_max(parties, p.party_id, position_maps), self.d_m)
            for p in parties
        }

    def __call__(self, ctx: RoundContext) -> None:
        terms = xi_terms(ctx)
        eps = abs(float(np.sum(terms))) if len(terms) else 0.0
        eps_obj = epsilon_from_objectives(ctx)
        g_prime = max(float(np.max(np.abs(g))) for g, _ in ctx.gradients.values())
        h_prime = max(float(np.max(h)) for _, h in ctx.gradients.values())
        f_prime = ctx.tree.max_abs_leaf()
        n_total = sum(len(p) for p in ctx.parties)
        n_local = len([p for p in ctx.parties if p.party_id == ctx.trainer][0])
        inputs = ErrorBoundInputs(
            d_t=self.d_t[ctx.trainer],
            d_m=self.d_m,
            depth=ctx.tree.depth(),
            n_total=n_total,
            n_local=n_local,
            g_prime=g_prime,
            h_prime=h_prime,
            f_prime=f_prime,
            delta=self.delta,
        )
        self.reports.append(
            RoundErrorReport(
                round_index=ctx.round_index,
                trainer=ctx.trainer,
                epsilon=eps,
                epsilon_objective=eps_obj,
                bound=closed_form_bound(inputs),
                xi_abs_max=float(np.max(np.abs(terms))) if len(terms) else 0.0,
                xi_cap=xi_cap(g_prime, h_prime, f_prime),
                g_prime=g_prime,
                h_prime=h_prime,
                f_prime=f_prime,
            )
        )


# ---------------------------------------------------------------------------
# synthetic bound verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticBoundConfig:
    num_parties: int = 2
    rows_per_party: int = 40
    dimension: int = 6
    depth: int = 3
    lsh_r: float = 4.0
    lam: float = 1.0
    delta: float = 0.05


@dataclass
class BoundVerification:
    trials: int
    passes: int
    xi_terms_total: int
    xi_cap_violations: int
    reports: list[RoundErrorReport]

    @property
    def pass_fraction(self) -> float:
        return self.passes / self.trials if self.trials else 1.0


def verify_bound_empirically(
    config: SyntheticBoundConfig, trials: int = 200, seed: int = 0
) -> BoundVerification:
    """Monte-Carlo check of the bound under its own premises: i.i.d. uniform
    features and randomly-chosen splits. Each trial runs the real
    preprocessing, one weighted aggregation round from zero scores, grows a
    random-split tree on the trainer, and compares epsilon to the bound with
    that round's realised g', h', f'."""
    from .federation import preprocess, _position_maps, aggregate_foreign_gradients
    from .gbdt import GbdtParams, logistic_gradient_arrays, random_split_tree
    from .lsh import LshConfig

    cfg = config
    num_tables = max(1, min(40, cfg.dimension - 1))
    passes = 0
    xi_total = 0
    xi_violations = 0
    reports: list[RoundErrorReport] = []

    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence((seed, trial)))
        parties = []
        next_gid = 0
        for pid in range(cfg.num_parties):
            X = sparse.csr_matrix(rng.uniform(0.0, 1.0, size=(cfg.rows_per_party, cfg.dimension)))
            y = rng.integers(0, 2, size=cfg.rows_per_party)
            gids = np.arange(next_gid, next_gid + cfg.rows_per_party)
            next_gid += cfg.rows_per_party
            parties.append(Party(pid, X, y, gids))
        lsh_cfg = LshConfig(r=cfg.lsh_r, num_tables=num_tables, seed=int(rng.integers(2**63)))
        preprocess(parties, lsh_cfg, tie_seed=int(rng.integers(2**63)))
        pos = _position_maps(parties)

        trainer = trial % cfg.num_parties
        m = parties[trainer]
        grads = {p.party_id: logistic_gradient_arrays(p.raw, p.y) for p in parties}
        G = np.zeros(len(m))
        H = np.zeros(len(m))
        for pid in sorted(grads):
            Gi, Hi = aggregate_foreign_gradients(*grads[pid], pos[(pid, trainer)], len(m))
            G += Gi
            H += Hi

        params = GbdtParams(num_trees=1, max_depth=cfg.depth, lam=cfg.lam)
        tree = random_split_tree(m.tm, G, H, params, rng)
        outputs = {p.party_id: tree.predict_rows(p.tm) for p in parties}
        ctx = RoundContext(
            round_index=trial,
            trainer=trainer,
            tree=tree,
            parties=parties,
            gradients=grads,
            outputs=outputs,
            weighted_G=G,
            weighted_H=H,
            position_maps=pos,
        )
        tracker = RoundErrorTracker(parties, pos, delta=cfg.delta)
        tracker(ctx)
        report = tracker.reports[0]
        reports.append(report)
        if report.within_bound:
            passes += 1
        terms = xi_terms(ctx)
        xi_total += len(terms)
        xi_violations += int(np.sum(np.abs(terms) > report.xi_cap + 1e-12))

    return BoundVerification(
        trials=trials,
        passes=passes,
        xi_terms_total=xi_total,
        xi_cap_violations=xi_violations,
        reports=reports,
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_error(model, X: sparse.csr_matrix, y: np.ndarray) -> float:
    """Misclassification fraction."""
    pred = model.predict_class(X)
    return float(np.mean(pred != np.asarray(y, dtype=np.int8)))
