"""Shared fixture builders for the federation/analysis test modules."""

from __future__ import annotations

import numpy as np
from scipy import sparse

from fedboost.federation import CommLedger, Party, preprocess
from fedboost.lsh import LshConfig


def make_parties(seed, sizes, d=8, density=0.6, preprocessed=True, r=4.0, L=7, tie_seed=5):
    """Random sparse parties with contiguous global IDs; optionally already
    run through preprocessing (hash tables + similarity), with the ledger
    returned alongside."""
    rng = np.random.default_rng(seed)
    parties = []
    gid = 0
    for pid, n in enumerate(sizes):
        X = sparse.csr_matrix(rng.normal(size=(n, d)) * (rng.uniform(size=(n, d)) < density))
        y = rng.integers(0, 2, size=n)
        parties.append(Party(pid, X, y, np.arange(gid, gid + n)))
        gid += n
    ledger = CommLedger()
    if preprocessed:
        preprocess(parties, LshConfig(r=r, num_tables=L, seed=seed + 1), tie_seed, ledger)
    return parties, ledger
