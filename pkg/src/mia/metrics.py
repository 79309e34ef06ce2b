from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

ZERO_PRECISION_EPS = 1e-9


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(references: Sequence[Sequence[str]], hypothesis: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU with clipped n-gram precision and brevity penalty.

    Uniform weights over orders 1..max_n. A zero precision is replaced by
    ``1e-9`` instead of collapsing the geometric mean to exactly 0. The
    reference length used by the brevity penalty is the one closest to the
    hypothesis length (shorter wins ties).
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    hyp = list(hypothesis)
    if not hyp or not references:
        return 0.0
    refs = [list(r) for r in references]

    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = _ngrams(hyp, n)
        total = sum(counts.values())
        max_ref: Counter = Counter()
        for r in refs:
            for gram, c in _ngrams(r, n).items():
                if c > max_ref[gram]:
                    max_ref[gram] = c
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        p = clipped / total if total else 0.0
        log_p += math.log(p if p > 0 else ZERO_PRECISION_EPS)

    c = len(hyp)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return min(1.0, bp * math.exp(log_p / max_n))
