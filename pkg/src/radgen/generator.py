"""Transformer encoder-decoder and decoding strategies.

The encoder maps hyper-visual features to memory states; the decoder is
autoregressive with causal self-attention, cross-attention to the
memory, and a vocabulary head (optionally tied to the input embedding).
Greedy and beam decoding operate through a per-sample ``step_fn`` so
they are testable against rigged models and exhaustive enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from radgen import tensor as T
from radgen.alignment import MASK_VALUE, AttentionBlock, multi_head_attention
from radgen.layers import FeedForward, LayerNorm, Linear, prefixed, sinusoid_table
from radgen.tensor import Tensor


class EncoderLayer:
    def __init__(self, d, heads, rng, ratio, tag):
        self.attn = AttentionBlock(d, heads, rng, tag=f"{tag}.self")
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(d, rng, ratio)
        self.norm2 = LayerNorm(d)

    def __call__(self, x):
        x = self.norm1(x + multi_head_attention(x, x, x, self.attn))
        return self.norm2(x + self.ffn(x))

    def named_parameters(self):
        yield from prefixed("attn", self.attn)
        yield from prefixed("norm1", self.norm1)
        yield from prefixed("ffn", self.ffn)
        yield from prefixed("norm2", self.norm2)


class Encoder:
    def __init__(self, cfg, rng):
        d, h, ratio = cfg["model.dim"], cfg["model.heads"], cfg["model.ffn_ratio"]
        self.layers = [
            EncoderLayer(d, h, rng, ratio, tag=f"encoder{i}")
            for i in range(cfg["model.enc_layers"])
        ]

    def __call__(self, h: Tensor) -> Tensor:
        for layer in self.layers:
            h = layer(h)
        return h

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            yield from prefixed(f"layer{i}", layer)


class DecoderLayer:
    def __init__(self, d, heads, rng, ratio, tag):
        self.self_attn = AttentionBlock(d, heads, rng, tag=f"{tag}.self")
        self.norm1 = LayerNorm(d)
        self.cross_attn = AttentionBlock(d, heads, rng, tag=f"{tag}.cross")
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, rng, ratio)
        self.norm3 = LayerNorm(d)

    def __call__(self, x, z, causal_mask):
        x = self.norm1(x + multi_head_attention(x, x, x, self.self_attn, causal_mask))
        x = self.norm2(x + multi_head_attention(x, z, z, self.cross_attn))
        return self.norm3(x + self.ffn(x))

    def named_parameters(self):
        yield from prefixed("self_attn", self.self_attn)
        yield from prefixed("norm1", self.norm1)
        yield from prefixed("cross_attn", self.cross_attn)
        yield from prefixed("norm2", self.norm2)
        yield from prefixed("ffn", self.ffn)
        yield from prefixed("norm3", self.norm3)


def causal_mask(t: int) -> np.ndarray:
    """Additive [1, 1, t, t] mask: position i attends to positions <= i."""
    mask = np.triu(np.full((t, t), MASK_VALUE), k=1)
    return mask[None, None]


class Decoder:
    """Token embedding + sinusoidal positions + layer stack + vocab head."""

    def __init__(self, cfg, vocab_size: int, embed_table: Tensor, rng):
        d, h, ratio = cfg["model.dim"], cfg["model.heads"], cfg["model.ffn_ratio"]
        self.embed = embed_table  # owned by the model, shared with the dictionary
        self.tied = cfg["model.tie_output"]
        self.max_len = cfg["decode.max_len"]
        self.layers = [
            DecoderLayer(d, h, rng, ratio, tag=f"decoder{i}")
            for i in range(cfg["model.dec_layers"])
        ]
        self.out = None if self.tied else Linear(d, vocab_size, rng)

    def __call__(self, z: Tensor, prefix_ids: np.ndarray) -> Tensor:
        """Teacher-forced forward: [B, T] prefix ids -> [B, T, V] logits."""
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        B, t = prefix_ids.shape
        x = T.embedding_lookup(self.embed, prefix_ids) + sinusoid_table(
            t, self.embed.shape[1]
        )
        mask = causal_mask(t)
        for layer in self.layers:
            x = layer(x, z, mask)
        if self.tied:
            return x @ T.transpose(self.embed, (1, 0))
        return self.out(x)

    def step(self, z: Tensor, prefix_ids) -> np.ndarray:
        """Logits over the vocabulary for the next token after ``prefix_ids``
        (one sample; z is [1, S, d]). Raises once the prefix hits max_len."""
        if len(prefix_ids) == 0:
            raise ValueError("decode prefix must start at BOS")
        if len(prefix_ids) > self.max_len + 1:
            raise ValueError(
                f"prefix length {len(prefix_ids)} exceeds max_len {self.max_len}"
            )
        with T.no_grad():
            logits = self(z, np.asarray(prefix_ids, dtype=np.int64)[None, :])
        return logits.data[0, -1]

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            yield from prefixed(f"layer{i}", layer)
        if self.out is not None:
            yield from prefixed("out", self.out)


# decoding strategies --------------------------------------------------------


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass
class Hypothesis:
    """A (possibly finished) decode: BOS-prefixed ids plus per-step
    log-probabilities; score is the length-normalized cumulative
    log-probability ``logprob / len**alpha``."""

    tokens: list[int]
    logprob: float
    alpha: float = 0.0
    step_logprobs: list[float] = field(default_factory=list)

    @property
    def generated(self) -> list[int]:
        return self.tokens[1:]

    @property
    def score(self) -> float:
        n = max(1, len(self.tokens) - 1)
        return self.logprob / (n**self.alpha) if self.alpha else self.logprob


def greedy_decode(step_fn, bos_id: int, eos_id: int, max_len: int) -> Hypothesis:
    """Argmax decoding; ties resolve to the lowest token id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    tokens = [bos_id]
    logprob = 0.0
    steps = []
    for _ in range(max_len):
        lps = log_softmax_np(np.asarray(step_fn(tokens), dtype=np.float64))
        nxt = int(np.argmax(lps))
        tokens.append(nxt)
        logprob += float(lps[nxt])
        steps.append(float(lps[nxt]))
        if nxt == eos_id:
            break
    return Hypothesis(tokens, logprob, 0.0, steps)


def beam_search(
    step_fn,
    bos_id: int,
    eos_id: int,
    beam: int,
    max_len: int,
    alpha: float = 0.0,
    trace: list | None = None,
) -> list[Hypothesis]:
    """Deterministic beam search over cumulative log-probabilities.

    Each step expands every live hypothesis by the full vocabulary and
    keeps the top ``beam`` candidates by cumulative log-probability
    (ties: token id, then hypothesis order). Candidates that emit EOS
    retire to the finished pool. The returned list is every finished or
    max-length hypothesis ranked by length-normalized score.

    ``trace``, when given, receives per-step dicts with the kept and
    pruned cumulative log-probs (instrumentation for monotonicity
    checks).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live = [Hypothesis([bos_id], 0.0, alpha)]
    finished: list[Hypothesis] = []
    for step in range(max_len):
        if not live:
            break
        candidates = []
        for parent_idx, hyp in enumerate(live):
            lps = log_softmax_np(np.asarray(step_fn(hyp.tokens), dtype=np.float64))
            for token, lp in enumerate(lps):
                candidates.append((hyp.logprob + float(lp), token, parent_idx))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        kept, pruned = candidates[:beam], candidates[beam:]
        if trace is not None:
            trace.append(
                {
                    "step": step,
                    "kept": [c[0] for c in kept],
                    "pruned": [c[0] for c in pruned],
                }
            )
        live_next = []
        for logprob, token, parent_idx in kept:
            parent = live[parent_idx]
            hyp = Hypothesis(
                parent.tokens + [token],
                logprob,
                alpha,
                parent.step_logprobs + [logprob - parent.logprob],
            )
            if token == eos_id:
                finished.append(hyp)
            else:
                live_next.append(hyp)
        live = live_next
    finished.extend(live)  # truncated at max_len without EOS
    finished.sort(key=lambda h: (-h.score, tuple(h.tokens)))
    return finished


def greedy_decode_batch(decoder: Decoder, z: Tensor, bos_id: int, eos_id: int,
                        max_len: int) -> list[list[int]]:
    """Vectorized greedy over a batch; returns generated ids without
    BOS/EOS. Used for per-epoch validation decoding."""
    B = z.shape[0]
    ids = np.full((B, 1), bos_id, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    with T.no_grad():
        for _ in range(max_len):
            logits = decoder(z, ids).data[:, -1, :]
            nxt = logits.argmax(axis=1)
            nxt[done] = eos_id
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            done |= nxt == eos_id
            if done.all():
                break
    out = []
    for row in ids:
        toks = []
        for t in row[1:]:
            if t == eos_id:
                break
            toks.append(int(t))
        out.append(toks)
    return out
