"""Anatomical attention alignment.

Entity strings from the dictionary are tokenized and embedded into the
report-vocabulary space, then patch features query those entity token
rows through multi-head cross-attention:

    Q = patches, K = V = semantic rows
    Q   <- LayerNorm(Q + MHA(Q, K, V))
    sem <- LayerNorm(Q + FeedForward(Q))

and the result is fused back into the patch branch (elementwise add by
default, concat+project as a config mode) to give the hyper-visual
features consumed by the encoder. The multi-head attention here is the
single attention implementation for the whole model; encoder and
decoder layers reuse it.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from radgen import tensor as T
from radgen.config import ConfigError
from radgen.corpus import tokenize
from radgen.dictionary import AnatomicalDictionary
from radgen.layers import FeedForward, LayerNorm, Linear, normal_param, prefixed
from radgen.tensor import ShapeError, Tensor

_ATTENTION_TRACE: list | None = None

# additive mask value; exp(x - max) underflows to exactly 0.0 for
# disallowed slots while every row keeps at least one finite logit
MASK_VALUE = -1e9


@contextmanager
def record_attention():
    """Collect (tag, weights) for every attention call in the block.

    Weights arrive as [B, heads, Sq, Sk] arrays; used by diagnostics and
    the normalization acceptance check.
    """
    global _ATTENTION_TRACE
    prev = _ATTENTION_TRACE
    _ATTENTION_TRACE = []
    try:
        yield _ATTENTION_TRACE
    finally:
        _ATTENTION_TRACE = prev


class AttentionBlock:
    """Projection weights for one multi-head attention site.

    Per-head Q/K/V projections are stored as single [d, d] matrices
    whose column blocks are the heads; no biases, matching the scaled
    dot-product formulation exactly.
    """

    def __init__(self, d: int, heads: int, rng, tag: str = "attn"):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by head count {heads}")
        self.d, self.heads, self.dk = d, heads, d // heads
        self.tag = tag
        self.wq = normal_param(rng, (d, d))
        self.wk = normal_param(rng, (d, d))
        self.wv = normal_param(rng, (d, d))
        self.wo = normal_param(rng, (d, d))

    def named_parameters(self):
        yield "wq", self.wq
        yield "wk", self.wk
        yield "wv", self.wv
        yield "wo", self.wo


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, block: AttentionBlock, mask=None
) -> Tensor:
    """Scaled dot-product attention with head split/concat.

    q: [B, Sq, d]; k, v: [B', Sk, d] with B' == B or 1 (broadcast);
    mask: optional additive constant broadcastable to [B, h, Sq, Sk].
    """
    if q.shape[-1] != block.d or k.shape[-1] != block.d or v.shape[-1] != block.d:
        raise ShapeError(
            f"attention dim mismatch: q{q.shape} k{k.shape} v{v.shape} vs d={block.d}"
        )
    if k.shape[-2] != v.shape[-2] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value shapes disagree: {k.shape} vs {v.shape}")
    h, dk = block.heads, block.dk

    def heads_of(x, w):
        b, s, _ = x.shape
        proj = x @ w
        return T.transpose(T.reshape(proj, (b, s, h, dk)), (0, 2, 1, 3))

    qh = heads_of(q, block.wq)  # [B, h, Sq, dk]
    kh = heads_of(k, block.wk)  # [B', h, Sk, dk]
    vh = heads_of(v, block.wv)
    scores = (qh @ T.transpose_last_two(kh)) * (1.0 / np.sqrt(dk))
    if mask is not None:
        scores = scores + mask
    weights = T.softmax_rows(scores)  # [B, h, Sq, Sk]
    if _ATTENTION_TRACE is not None:
        _ATTENTION_TRACE.append((block.tag, weights.data))
    ctx = weights @ vh
    B, _, Sq, _ = ctx.shape
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Sq, block.d))
    return merged @ block.wo


class DictionaryEncoder:
    """Entity strings -> semantic feature rows in the model space.

    Tokens are embedded with the shared report-vocabulary table (or a
    separate one when configured) and linearly projected; rows keep
    dictionary order, then token order. A missing vocabulary entry is a
    configuration error: dictionary entries are never mapped to UNK.
    """

    def __init__(self, dictionary, vocab, embed_table: Tensor, rng, separate: bool):
        self.entity_tokens = [
            tok for entity in dictionary.entities for tok in tokenize(entity)
        ]
        missing = sorted({t for t in self.entity_tokens if t not in vocab})
        if missing:
            raise ConfigError(
                f"dictionary tokens missing from vocabulary: {', '.join(missing)}"
            )
        self.ids = np.array([vocab.id_of(t) for t in self.entity_tokens])
        d = embed_table.shape[1]
        self.separate = separate
        self.table = normal_param(rng, embed_table.shape) if separate else embed_table
        self.proj = Linear(d, d, rng)

    @property
    def n_rows(self) -> int:
        return len(self.ids)

    def semantic_features(self) -> Tensor:
        """[1, N, d]; broadcast across the batch inside attention."""
        rows = T.embedding_lookup(self.table, self.ids.reshape(1, -1))
        return self.proj(rows)

    def named_parameters(self):
        if self.separate:
            yield "table", self.table
        yield from prefixed("proj", self.proj)


class AlignmentBlock:
    """One cross-attention update: MHA + add&norm, FFN + add&norm."""

    def __init__(self, d: int, heads: int, rng, ratio: int = 4, tag: str = "alignment"):
        self.attn = AttentionBlock(d, heads, rng, tag=tag)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(d, rng, ratio)
        self.norm2 = LayerNorm(d)

    def __call__(self, patches: Tensor, sem: Tensor) -> Tensor:
        q = self.norm1(patches + multi_head_attention(patches, sem, sem, self.attn))
        return self.norm2(q + self.ffn(q))

    def named_parameters(self):
        yield from prefixed("attn", self.attn)
        yield from prefixed("norm1", self.norm1)
        yield from prefixed("ffn", self.ffn)
        yield from prefixed("norm2", self.norm2)


def fuse(patches: Tensor, sem_out: Tensor, mode: str, proj: Linear | None = None) -> Tensor:
    """Combine the patch and semantic branches into hyper-visual features."""
    if mode == "add":
        if patches.shape != sem_out.shape:
            raise ShapeError(
                f"additive fusion needs equal shapes, got {patches.shape} "
                f"and {sem_out.shape}"
            )
        return patches + sem_out
    if mode == "concat":
        return proj(T.concat_last_axis([patches, sem_out]))
    raise ValueError(f"unknown fusion mode {mode!r}")


class AnatomicalAlignment:
    """Dictionary embedding + alignment block stack + fusion, with the
    ablation branch baked in at construction:

    * full: fuse(patches, aligned)
    * no_sem: patches pass through untouched (no alignment parameters)
    * no_visual: aligned output only (patch queries kept, raw patch
      branch dropped at fusion)
    """

    def __init__(self, cfg, vocab, dictionary: AnatomicalDictionary, embed_table, rng):
        self.branch = cfg["model.branch"]
        self.mode = cfg["model.fusion"]
        d = cfg["model.dim"]
        self.encoder = None
        self.blocks = []
        self.fusion_proj = None
        if self.branch != "no_sem":
            self.encoder = DictionaryEncoder(
                dictionary, vocab, embed_table, rng,
                separate=cfg["model.separate_dict_table"],
            )
            self.blocks = [
                AlignmentBlock(
                    d, cfg["model.heads"], rng, cfg["model.ffn_ratio"],
                    tag=f"alignment{i}",
                )
                for i in range(cfg["model.align_blocks"])
            ]
            if self.branch == "full" and self.mode == "concat":
                self.fusion_proj = Linear(2 * d, d, rng)

    def hyper_visual(self, patches: Tensor) -> Tensor:
        if self.branch == "no_sem":
            return patches
        sem = self.encoder.semantic_features()
        aligned = patches
        for block in self.blocks:
            aligned = block(aligned, sem)
        if self.branch == "no_visual":
            return aligned
        return fuse(patches, aligned, self.mode, self.fusion_proj)

    def named_parameters(self):
        if self.encoder is not None:
            yield from prefixed("dict", self.encoder)
        for i, block in enumerate(self.blocks):
            yield from prefixed(f"block{i}", block)
        if self.fusion_proj is not None:
            yield from prefixed("fusion", self.fusion_proj)
