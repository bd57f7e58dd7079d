"""Encoder/decoder contracts and decoding-strategy oracles (exhaustive
enumeration for beam search, rigged models for greedy)."""

import numpy as np
import pytest

from radgen import tensor as T
from radgen.config import desk
from radgen.corpus import BOS_ID, EOS_ID
from radgen.generator import (
    Decoder,
    Encoder,
    Hypothesis,
    beam_search,
    greedy_decode,
    greedy_decode_batch,
    log_softmax_np,
)
from radgen.layers import normal_param
from radgen.tensor import Tensor, check_gradients


def make_codec(v=12, d=8, heads=2, layers=1, seed=0, max_len=10):
    cfg = desk().updated(
        model__dim=d,
        model__heads=heads,
        model__enc_layers=layers,
        model__dec_layers=layers,
        decode__max_len=max_len,
    )
    rng = np.random.default_rng(seed)
    embed = normal_param(rng, (v, d))
    return Encoder(cfg, rng), Decoder(cfg, v, embed, rng), embed


class TestEncoder:
    def test_shape_preserved(self):
        enc, _, _ = make_codec()
        x = Tensor(np.random.default_rng(1).normal(size=(3, 5, 8)))
        assert enc(x).shape == (3, 5, 8)

    def test_zero_layers_identity(self):
        cfg = desk().updated(model__dim=8, model__heads=2, model__enc_layers=0)
        enc = Encoder(cfg, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(2).normal(size=(2, 4, 8)))
        assert enc(x) is x

    def test_permutation_equivariance_without_positions(self):
        enc, _, _ = make_codec(layers=2, seed=3)
        x = np.random.default_rng(4).normal(size=(1, 3, 8))
        perm = [2, 0, 1]
        out = enc(Tensor(x)).data
        out_perm = enc(Tensor(x[:, perm])).data
        np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-10)


class TestDecoder:
    def test_causal_masking_forward(self):
        _, dec, _ = make_codec(seed=5)
        z = Tensor(np.random.default_rng(6).normal(size=(1, 4, 8)))
        ids = np.array([[BOS_ID, 5, 6, 7]])
        logits = dec(z, ids).data
        ids2 = ids.copy()
        ids2[0, 3] = 9  # change token at position 3
        logits2 = dec(z, ids2).data
        np.testing.assert_allclose(logits2[0, :3], logits[0, :3], atol=1e-12)
        assert not np.allclose(logits2[0, 3], logits[0, 3])

    def test_step_matches_teacher_forced_last_position(self):
        _, dec, _ = make_codec(seed=7)
        z = Tensor(np.random.default_rng(8).normal(size=(1, 4, 8)))
        prefix = [BOS_ID, 3, 4]
        np.testing.assert_allclose(
            dec.step(z, prefix),
            dec(z, np.array([prefix])).data[0, -1],
            atol=1e-12,
        )

    def test_step_softmax_sums_to_one(self):
        _, dec, _ = make_codec(seed=9)
        z = Tensor(np.random.default_rng(10).normal(size=(1, 4, 8)))
        lps = log_softmax_np(dec.step(z, [BOS_ID]))
        assert np.exp(lps).sum() == pytest.approx(1.0, abs=1e-9)

    def test_prefix_over_max_len_rejected(self):
        _, dec, _ = make_codec(max_len=3)
        z = Tensor(np.zeros((1, 2, 8)))
        with pytest.raises(ValueError, match="max_len"):
            dec.step(z, [BOS_ID, 4, 4, 4, 4])

    def test_chain_rule_factorization(self):
        # teacher-forced sequence log-prob equals the sum of stepwise
        # log-softmax picks, within 1e-9
        _, dec, _ = make_codec(seed=11)
        z = Tensor(np.random.default_rng(12).normal(size=(1, 3, 8)))
        seq = [BOS_ID, 4, 7, 5, EOS_ID]
        logits = dec(z, np.array([seq[:-1]])).data[0]
        total = 0.0
        for t, target in enumerate(seq[1:]):
            total += log_softmax_np(logits[t])[target]
        stepwise = 0.0
        for t in range(1, len(seq)):
            stepwise += log_softmax_np(dec.step(z, seq[:t]))[seq[t]]
        assert total == pytest.approx(stepwise, abs=1e-9)

    def test_causal_gradient_blocking(self):
        # gradient of a step-t loss w.r.t. embeddings of tokens after t
        # is identically zero; distinct ids map positions to rows
        _, dec, embed = make_codec(seed=13)
        z = Tensor(np.random.default_rng(14).normal(size=(1, 3, 8)))
        ids = np.array([[1, 4, 5, 6, 7]])
        logits = dec(z, ids)
        t = 2
        picked = logits * _onehot_at(logits.shape, b=0, t=t, v=3)
        T.zero_grads([embed])
        picked.sum().backward()
        np.testing.assert_array_equal(embed.grad[6], 0.0)  # position 3 token
        np.testing.assert_array_equal(embed.grad[7], 0.0)  # position 4 token
        assert np.abs(embed.grad[4]).max() > 0

    def test_tied_output_uses_embedding(self):
        cfg = desk().updated(
            model__dim=8, model__heads=2, model__dec_layers=1, model__tie_output=True
        )
        rng = np.random.default_rng(15)
        embed = normal_param(rng, (9, 8))
        dec = Decoder(cfg, 9, embed, rng)
        z = Tensor(rng.normal(size=(1, 2, 8)))
        assert dec(z, np.array([[BOS_ID, 4]])).shape == (1, 2, 9)
        assert dec.out is None

    def test_grad_check_end_to_end(self):
        enc, dec, embed = make_codec(v=7, d=4, heads=2, layers=1, seed=17)
        h = np.random.default_rng(18).normal(size=(2, 3, 4))
        ids = np.array([[BOS_ID, 4, 5], [BOS_ID, 6, EOS_ID]])
        probe = np.random.default_rng(19).normal(size=(2, 3, 7))
        params = {"embed": embed}
        params.update(("enc." + n, p) for n, p in enc.named_parameters())
        params.update(("dec." + n, p) for n, p in dec.named_parameters())
        report = check_gradients(
            lambda: (dec(enc(Tensor(h)), ids) * probe).sum(),
            params,
            sample_size=4,
            dense_limit=8,
        )
        assert report.passed, str(report)


def _onehot_at(shape, b, t, v):
    m = np.zeros(shape)
    m[b, t, v] = 1.0
    return m


class RiggedLM:
    """Deterministic logits from a seeded table keyed by prefix length
    and last token; vocabulary ids 0..v-1 with a designated EOS."""

    def __init__(self, v, seed, constant=False):
        self.v = v
        rng = np.random.default_rng(seed)
        self.table = rng.normal(size=(40, v, v)) * 2.0
        self.constant = constant
        self.const_logits = rng.normal(size=v) * 2.0

    def __call__(self, prefix):
        if self.constant:
            return self.const_logits
        return self.table[len(prefix) % 40, prefix[-1] % self.v]


def enumerate_oracle(step_fn, bos, eos, v, max_len):
    """Exhaustive search over every complete sequence (EOS-terminated or
    truncated at max_len); returns the argmax by (logprob, tokens)."""
    best = None

    def walk(tokens, logprob):
        nonlocal best
        if tokens[-1] == eos or len(tokens) - 1 == max_len:
            key = (-logprob, tuple(tokens))
            if best is None or key < best[0]:
                best = (key, list(tokens), logprob)
            return
        lps = log_softmax_np(np.asarray(step_fn(tokens), dtype=np.float64))
        for tok in range(v):
            walk(tokens + [tok], logprob + float(lps[tok]))

    walk([bos], 0.0)
    return best[1], best[2]


class TestGreedy:
    def test_stops_at_eos(self):
        v = 5

        def favor_eos(prefix):
            logits = np.zeros(v)
            logits[EOS_ID] = 10.0
            return logits

        hyp = greedy_decode(favor_eos, BOS_ID, EOS_ID, max_len=9)
        assert hyp.tokens == [BOS_ID, EOS_ID]

    def test_constant_logits_repeat_argmax(self):
        lm = RiggedLM(6, seed=21, constant=True)
        lm.const_logits[EOS_ID] = -50.0  # EOS never wins
        hyp = greedy_decode(lm, BOS_ID, EOS_ID, max_len=4)
        top = int(np.argmax(lm.const_logits))
        assert hyp.generated == [top] * 4

    def test_tie_breaks_to_lowest_id(self):
        def tied(prefix):
            return np.zeros(7)

        hyp = greedy_decode(tied, BOS_ID, EOS_ID, max_len=3)
        assert hyp.generated[0] == 0

    def test_equals_beam_one(self):
        for seed in range(10):
            lm = RiggedLM(5, seed=seed)
            g = greedy_decode(lm, BOS_ID, EOS_ID, max_len=6)
            b = beam_search(lm, BOS_ID, EOS_ID, beam=1, max_len=6)[0]
            assert g.tokens == b.tokens


class TestBeamSearch:
    def test_exhaustive_oracle_small(self):
        v, max_len = 4, 3
        for seed in (1, 2, 3):
            lm = RiggedLM(v, seed=seed)
            oracle_tokens, oracle_lp = enumerate_oracle(lm, BOS_ID, EOS_ID, v, max_len)
            hyps = beam_search(lm, BOS_ID, EOS_ID, beam=v**max_len, max_len=max_len)
            assert hyps[0].tokens == oracle_tokens
            assert hyps[0].logprob == pytest.approx(oracle_lp, abs=1e-12)

    def test_pruning_monotone(self):
        lm = RiggedLM(6, seed=31)
        trace = []
        beam_search(lm, BOS_ID, EOS_ID, beam=3, max_len=5, trace=trace)
        for entry in trace:
            if entry["pruned"] and entry["kept"]:
                assert min(entry["kept"]) >= max(entry["pruned"]) - 1e-12

    def test_scores_are_length_normalized(self):
        h = Hypothesis([BOS_ID, 4, 5, EOS_ID], -3.0, alpha=0.5)
        assert h.score == pytest.approx(-3.0 / 3**0.5)
        h0 = Hypothesis([BOS_ID, 4, 5, EOS_ID], -3.0, alpha=0.0)
        assert h0.score == -3.0

    def test_step_logprobs_sum_to_total(self):
        lm = RiggedLM(5, seed=33)
        hyp = beam_search(lm, BOS_ID, EOS_ID, beam=3, max_len=5)[0]
        assert sum(hyp.step_logprobs) == pytest.approx(hyp.logprob, abs=1e-12)

    def test_beam_must_be_positive(self):
        with pytest.raises(ValueError):
            beam_search(lambda p: np.zeros(3), BOS_ID, EOS_ID, beam=0, max_len=2)


class TestBatchedGreedy:
    def test_matches_single_sample_greedy(self):
        _, dec, _ = make_codec(v=9, seed=35, max_len=8)
        z = Tensor(np.random.default_rng(36).normal(size=(3, 4, 8)))
        batch = greedy_decode_batch(dec, z, BOS_ID, EOS_ID, max_len=8)
        for i in range(3):
            zi = Tensor(z.data[i : i + 1])
            single = greedy_decode(
                lambda p: dec.step(zi, p), BOS_ID, EOS_ID, max_len=8
            )
            expect = [t for t in single.generated if t != EOS_ID]
            assert batch[i] == expect
