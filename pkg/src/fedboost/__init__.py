"""Single-process simulator of similarity-weighted federated gradient boosting.

The package splits into the data plane (dataset, lsh), the model plane (gbdt),
the protocol plane (federation) and the measurement plane (analysis, report).
Everything is deterministic given the four seeds (split, partition, lsh, tie).
"""

__version__ = "0.1.0"
