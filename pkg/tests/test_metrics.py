"""Metric oracles: hand-counted examples frozen first, plus brute-force
reference implementations for LCS and the METEOR chunk alignment."""

import math
from collections import Counter
from itertools import combinations, permutations, product

import numpy as np
import pytest

from radgen.metrics import (
    METRIC_NAMES,
    bleu,
    evaluate_suite,
    format_metrics_table,
    lcs_length,
    match_and_chunks,
    meteor,
    metrics_json,
    rouge_l,
)


def lcs_oracle(a, b):
    """Full-table quadratic DP, coded independently of the library."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def chunks_oracle(cand, ref):
    """Enumerate every maximum matching, return (m, min chunks)."""
    cc, rc = Counter(cand), Counter(ref)
    words = sorted(w for w in cc if w in rc)
    quota = {w: min(cc[w], rc[w]) for w in words}
    m = sum(quota.values())
    if m == 0:
        return 0, 0
    cand_pos = {w: [i for i, t in enumerate(cand) if t == w] for w in words}
    ref_pos = {w: [j for j, t in enumerate(ref) if t == w] for w in words}
    per_word = []
    for w in words:
        opts = []
        for csub in combinations(cand_pos[w], quota[w]):
            for rsub in permutations(ref_pos[w], quota[w]):
                opts.append(tuple(zip(csub, rsub)))
        per_word.append(opts)
    best = m + 1
    for combo in product(*per_word):
        pairs = sorted(p for opt in combo for p in opt)
        chunks = 0
        prev = (-5, -5)
        for i, j in pairs:
            if not (i == prev[0] + 1 and j == prev[1] + 1):
                chunks += 1
            prev = (i, j)
        best = min(best, chunks)
    return m, best


class TestBleu:
    def test_identical_corpus_is_one(self):
        refs = [["no", "acute", "disease"], ["the", "heart", "is", "enlarged"]]
        for n in range(1, 5):
            assert bleu(refs, refs, n=n) == pytest.approx(1.0)

    def test_zero_overlap_is_zero(self):
        assert bleu([["a", "b"]], [["c", "d"]], n=1) == 0.0

    def test_clipping_hand_count(self):
        # candidate "the the the the" vs "the cat sat down": clipped
        # unigram precision 1/4, c == r == 4 so no brevity penalty
        score = bleu([["the"] * 4], [["the", "cat", "sat", "down"]], n=1)
        assert score == pytest.approx(0.25)

    def test_brevity_penalty_formula(self):
        # perfect precision, c=2 < r=3 -> exp(1 - 3/2)
        score = bleu([["a", "b"]], [["a", "b", "c"]], n=1)
        assert score == pytest.approx(math.exp(1 - 3 / 2))

    def test_monotone_non_increasing_in_n(self):
        cands = [["the", "heart", "is", "normal", "today"]]
        refs = [["the", "heart", "is", "enlarged"]]
        scores = [bleu(cands, refs, n=k) for k in range(1, 5)]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            bleu([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            bleu([["a"]], [])


class TestRougeL:
    def test_identical_is_one(self):
        refs = [["a", "b", "c"]]
        assert rouge_l(refs, refs) == pytest.approx(1.0)

    def test_hand_case(self):
        # LCS("a c d", "a b c d") = 3; P=1, R=3/4, F1 = 6/7
        assert rouge_l([["a", "c", "d"]], [["a", "b", "c", "d"]]) == pytest.approx(6 / 7)

    def test_disjoint_is_zero(self):
        assert rouge_l([["x", "y"]], [["p", "q"]]) == 0.0

    def test_lcs_matches_oracle_on_random_pairs(self):
        rng = np.random.default_rng(101)
        vocab = ["a", "b", "c", "d"]
        for _ in range(200):
            a = [vocab[i] for i in rng.integers(0, 4, size=rng.integers(0, 31))]
            b = [vocab[i] for i in rng.integers(0, 4, size=rng.integers(0, 31))]
            assert lcs_length(a, b) == lcs_oracle(a, b)


class TestMeteor:
    def test_disjoint_is_zero(self):
        assert meteor([["x"]], [["y"]]) == 0.0

    def test_identical_two_token_pair(self):
        # m=2, chunks=1: F=1, penalty = 0.5 * (1/2)^3
        assert meteor([["no", "change"]], [["no", "change"]]) == pytest.approx(0.9375)

    def test_identical_general_closed_form(self):
        for m in (1, 2, 3, 5, 8):
            toks = [f"w{i}" for i in range(m)]
            assert meteor([toks], [toks]) == pytest.approx(1 - 0.5 / m**3)

    def test_swapped_pair_two_chunks(self):
        # "b a" vs "a b": m=2 but two chunks -> penalty 0.5, F_mean 1
        assert meteor([["b", "a"]], [["a", "b"]]) == pytest.approx(0.5)

    def test_chunk_solver_matches_brute_force(self):
        rng = np.random.default_rng(103)
        vocab = ["a", "b", "c"]
        for _ in range(300):
            cand = [vocab[i] for i in rng.integers(0, 3, size=rng.integers(1, 7))]
            ref = [vocab[i] for i in rng.integers(0, 3, size=rng.integers(1, 7))]
            assert match_and_chunks(cand, ref) == chunks_oracle(cand, ref)

    def test_partial_match_formula(self):
        # cand "the heart" vs ref "the heart is enlarged":
        # m=2, chunks=1, P=1, R=1/2, F=10*0.5/(0.5+9)=10/19
        got = meteor([["the", "heart"]], [["the", "heart", "is", "enlarged"]])
        f_mean = 10 * 1.0 * 0.5 / (0.5 + 9 * 1.0)
        assert got == pytest.approx(f_mean * (1 - 0.5 * (1 / 2) ** 3))


class TestSuite:
    def test_six_named_fields_in_order(self):
        refs = [["all", "clear"]]
        report = evaluate_suite(refs, refs)
        assert tuple(report) == METRIC_NAMES

    def test_self_evaluation(self):
        refs = [["the", "heart", "is", "normal"], ["no", "effusion"]]
        report = evaluate_suite(refs, refs)
        for k in range(1, 5):
            assert report[f"BL-{k}"] == pytest.approx(1.0)
        assert report["RG-L"] == pytest.approx(1.0)
        expected_mtr = ((1 - 0.5 / 4**3) + (1 - 0.5 / 2**3)) / 2
        assert report["MTR"] == pytest.approx(expected_mtr, abs=1e-9)

    def test_published_row_parses_through_schema(self):
        # comparison-table fixture only, not a reproduction target
        row = dict(zip(METRIC_NAMES, (0.492, 0.318, 0.230, 0.175, 0.199, 0.381)))
        line = metrics_json(row)
        assert line.index('"BL-1"') < line.index('"MTR"') < line.index('"RG-L"')
        table = format_metrics_table({"Ours": row})
        assert "0.492" in table and "0.381" in table

    def test_pure_function_of_tokens(self):
        cands = [["a", "b", "c"]]
        refs = [["a", "c"]]
        assert evaluate_suite(cands, refs) == evaluate_suite(cands, refs)
