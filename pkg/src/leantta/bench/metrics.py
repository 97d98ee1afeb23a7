"""Classification metrics over per-sample records."""

from collections import Counter

from leantta.errors import ConfigError


def _pairs(records):
    pairs = [(r.label, r.pred) if hasattr(r, "label") else (int(r[0]), int(r[1])) for r in records]
    if not pairs:
        raise ConfigError("metrics need at least one record")
    return pairs


def accuracy(records):
    pairs = _pairs(records)
    return sum(1 for y, p in pairs if y == p) / len(pairs)


def weighted_f1(records):
    """Per-class F1 averaged with weights equal to each class's true support."""
    pairs = _pairs(records)
    support = Counter(y for y, _ in pairs)
    predicted = Counter(p for _, p in pairs)
    hits = Counter(y for y, p in pairs if y == p)
    total = 0.0
    for c, n_true in support.items():
        tp = hits[c]
        if tp == 0:
            continue
        precision = tp / predicted[c]
        recall = tp / n_true
        total += n_true * (2 * precision * recall / (precision + recall))
    return total / len(pairs)
