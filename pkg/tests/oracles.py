"""Independent reference implementations used to check the library.

Everything here is written as plain loops against the documented behavior,
deliberately sharing no code with the package internals.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter


def cosine_oracle(u, v) -> float:
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    # the similarity contract clips rounding spill past the [-1, 1] range
    return max(-1.0, min(1.0, dot / (nu * nv)))


def knn_oracle(query, references, k: int, m: int = 3):
    """Exhaustive-scan kNN with the documented tie-break chains.

    references: list of (vector, label). Returns (label, top_m_labels).
    Neighbor selection: similarity desc, then reference index asc.
    Vote: count desc, then summed similarity desc, then earliest neighbor.
    """
    sims = [cosine_oracle(query, vec) for vec, _ in references]
    order = sorted(range(len(references)), key=lambda i: (-sims[i], i))
    top = order[:k]
    stats = {}
    for rank, idx in enumerate(top):
        label = references[idx][1]
        if label not in stats:
            stats[label] = [0, 0.0, rank]
        stats[label][0] += 1
        stats[label][1] += sims[idx]
    ranked = sorted(stats.items(), key=lambda kv: (-kv[1][0], -kv[1][1], kv[1][2]))
    return ranked[0][0], [label for label, _ in ranked[:m]]


def mutual_information(a, b) -> float:
    n = len(a)
    ca, cb = Counter(a), Counter(b)
    cab = Counter(zip(a, b))
    return sum(
        (nij / n) * math.log(n * nij / (ca[x] * cb[y])) for (x, y), nij in cab.items()
    )


def entropy(a) -> float:
    n = len(a)
    return -sum((c / n) * math.log(c / n) for c in Counter(a).values())


def ami_by_enumeration(a, b) -> float:
    """AMI with E[MI] taken literally: the average mutual information over
    every permutation of one labeling. Only feasible for tiny inputs."""
    perms = list(itertools.permutations(b))
    emi = sum(mutual_information(a, p) for p in perms) / len(perms)
    denom = (entropy(a) + entropy(b)) / 2 - emi
    return (mutual_information(a, b) - emi) / denom


def ari_by_pairs(a, b) -> float:
    """ARI from explicit pair counting."""
    n = len(a)
    pairs = list(itertools.combinations(range(n), 2))
    same_a = {p for p in pairs if a[p[0]] == a[p[1]]}
    same_b = {p for p in pairs if b[p[0]] == b[p[1]]}
    n11 = len(same_a & same_b)
    expected = len(same_a) * len(same_b) / len(pairs)
    maximum = (len(same_a) + len(same_b)) / 2
    return (n11 - expected) / (maximum - expected)


def std_two_pass(values) -> float:
    n = len(values)
    mean = sum(values) / n
    return math.sqrt(sum((x - mean) ** 2 for x in values) / (n - 1))
