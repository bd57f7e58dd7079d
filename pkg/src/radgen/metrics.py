"""Corpus NLG metrics: BLEU-1..4, ROUGE-L, exact-match METEOR.

All metrics are pure functions of token sequences (one reference per
candidate). Conventions, pinned so scores are reproducible:

* BLEU: corpus-level modified n-gram precision with clipping, uniform
  geometric mean over orders 1..n, brevity penalty exp(1 - r/c) when
  c < r, smoothing OFF (a zero higher-order overlap zeroes that score).
* ROUGE-L: per-pair LCS F-measure (beta = 1 by default), averaged.
* METEOR: exact unigram matching only (no stemming or synonymy), with
  the alignment chosen to maximize matches and then minimize chunks;
  F_mean = 10PR/(R+9P), penalty = 0.5*(chunks/m)^3. Absolute METEOR
  values are variant-sensitive; this variant is deliberately
  dependency-free and deterministic.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict

METRIC_NAMES = ("BL-1", "BL-2", "BL-3", "BL-4", "MTR", "RG-L")


def _validate(candidates, references):
    if len(candidates) != len(references):
        raise ValueError(
            f"candidate/reference count mismatch: {len(candidates)} vs {len(references)}"
        )
    if not candidates:
        raise ValueError("empty corpus")


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, n: int = 4) -> float:
    """Corpus-level BLEU-n over token sequences, in [0, 1]."""
    _validate(candidates, references)
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    clipped = [0] * n
    totals = [0] * n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for k in range(1, n + 1):
            counts = _ngram_counts(cand, k)
            ref_counts = _ngram_counts(ref, k)
            totals[k - 1] += max(0, len(cand) - k + 1)
            clipped[k - 1] += sum(
                min(c, ref_counts[g]) for g, c in counts.items()
            )
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for k in range(n):
        if totals[k] == 0 or clipped[k] == 0:
            return 0.0
        log_sum += math.log(clipped[k] / totals[k])
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum / n)


def lcs_length(a, b) -> int:
    """Longest common subsequence length, linear-space DP."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0]
        for j, y in enumerate(b, start=1):
            curr.append(prev[j - 1] + 1 if x == y else max(prev[j], curr[j - 1]))
        prev = curr
    return prev[-1]


def rouge_l(candidates, references, beta: float = 1.0) -> float:
    """Mean per-pair LCS F-measure, in [0, 1]."""
    _validate(candidates, references)
    total = 0.0
    for cand, ref in zip(candidates, references):
        lcs = lcs_length(cand, ref) if cand and ref else 0
        if lcs == 0:
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        total += (1 + beta**2) * p * r / (r + beta**2 * p)
    return total / len(candidates)


# METEOR --------------------------------------------------------------------

_CHUNK_NODE_BUDGET = 500_000


def _greedy_alignment_chunks(cand, ref, quota):
    """Deterministic fallback: match every in-quota occurrence eagerly,
    preferring the adjacency-extending reference slot. Still a maximum
    matching; the chunk count is an upper bound on the minimum."""
    rem = dict(quota)
    avail = defaultdict(list)
    for j, w in enumerate(ref):
        if w in rem:
            avail[w].append(j)
    used = set()
    chunks = 0
    prev_j = -2
    for w in cand:
        if rem.get(w, 0) > 0:
            free = [j for j in avail[w] if j not in used]
            j = prev_j + 1 if (prev_j + 1) in free else free[0]
            used.add(j)
            rem[w] -= 1
            if j != prev_j + 1:
                chunks += 1
            prev_j = j
        else:
            prev_j = -2
    return chunks


def match_and_chunks(cand, ref) -> tuple[int, int]:
    """Maximum unigram matches m and the minimal chunk count over all
    maximum matchings (exact matching only).

    Exact memoized search; a deterministic node budget guards against
    adversarial inputs, falling back to a greedy (still maximum)
    matching whose chunk count is an upper bound.
    """
    cand_counts, ref_counts = Counter(cand), Counter(ref)
    quota = {
        w: min(c, ref_counts[w])
        for w, c in cand_counts.items()
        if ref_counts.get(w, 0) > 0
    }
    m = sum(quota.values())
    if m == 0:
        return 0, 0

    ref_pos = defaultdict(list)
    for j, w in enumerate(ref):
        if w in quota:
            ref_pos[w].append(j)
    n = len(cand)
    # suffix[i][w]: occurrences of w in cand[i:]
    suffix = [None] * (n + 1)
    running = Counter()
    suffix[n] = Counter()
    for i in range(n - 1, -1, -1):
        running = running.copy()
        running[cand[i]] += 1
        suffix[i] = running

    INF = m + 10
    memo = {}
    nodes = [0]

    def matched_count(mask, w):
        c = 0
        for j in ref_pos[w]:
            c += (mask >> j) & 1
        return c

    def dfs(i, prev_j, mask):
        if mask.bit_count() == m:
            return 0
        if i == n:
            return INF
        nodes[0] += 1
        if nodes[0] > _CHUNK_NODE_BUDGET:
            raise _BudgetExceeded
        key = (i, prev_j, mask)
        hit = memo.get(key)
        if hit is not None:
            return hit
        w = cand[i]
        best = INF
        rem_w = quota.get(w, 0)
        if rem_w:
            rem_w -= matched_count(mask, w)
        if rem_w > 0:
            for j in ref_pos[w]:
                if (mask >> j) & 1:
                    continue
                cost = 0 if j == prev_j + 1 else 1
                sub = dfs(i + 1, j, mask | (1 << j))
                if cost + sub < best:
                    best = cost + sub
            if suffix[i][w] - 1 >= rem_w:  # skipping keeps the matching maximal
                best = min(best, dfs(i + 1, -2, mask))
        else:
            best = dfs(i + 1, -2, mask)
        memo[key] = best
        return best

    try:
        chunks = dfs(0, -2, 0)
    except _BudgetExceeded:
        chunks = _greedy_alignment_chunks(cand, ref, quota)
    return m, chunks


class _BudgetExceeded(Exception):
    pass


def meteor(candidates, references) -> float:
    """Mean per-pair exact-match METEOR, in [0, 1]."""
    _validate(candidates, references)
    total = 0.0
    for cand, ref in zip(candidates, references):
        if not cand or not ref:
            continue
        m, chunks = match_and_chunks(cand, ref)
        if m == 0:
            continue
        p = m / len(cand)
        r = m / len(ref)
        f_mean = 10 * p * r / (r + 9 * p)
        penalty = 0.5 * (chunks / m) ** 3
        total += f_mean * (1.0 - penalty)
    return total / len(candidates)


# reporting ------------------------------------------------------------------


def evaluate_suite(candidates, references) -> dict[str, float]:
    """All six scores, keyed and ordered as published comparison tables."""
    _validate(candidates, references)
    report = {f"BL-{k}": bleu(candidates, references, n=k) for k in range(1, 5)}
    report["MTR"] = meteor(candidates, references)
    report["RG-L"] = rouge_l(candidates, references)
    return report


def metrics_json(report: dict[str, float]) -> str:
    return json.dumps({k: report[k] for k in METRIC_NAMES})


def format_metrics_table(rows: dict[str, dict[str, float]]) -> str:
    """Aligned table; ``rows`` maps a row label to a metric report."""
    width = max(12, max((len(r) for r in rows), default=0) + 2)
    header = f"{'Model':<{width}}" + "".join(f"{m:>8}" for m in METRIC_NAMES)
    lines = [header]
    for label, report in rows.items():
        cells = "".join(f"{report[m]:>8.3f}" for m in METRIC_NAMES)
        lines.append(f"{label:<{width}}{cells}")
    return "\n".join(lines)
