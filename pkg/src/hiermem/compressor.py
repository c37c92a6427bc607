"""Hierarchical context compression.

A chunk of n tokens is compressed level by level: each pass appends one
memory token per length-k segment under a segmented attention mask, and the
hidden states at the memory positions become the next, coarser level. The
strict block structure of the mask makes retrieval attribution purely
structural: memory j summarizes exactly segment j and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import AttentionMask, TransformerModel


@dataclass
class SegmentedMaskSpec:
    content_len: int
    factor: int

    @property
    def mem_count(self) -> int:
        return -(-self.content_len // self.factor)

    def segment_bounds(self, j: int) -> tuple[int, int]:
        """Half-open content range summarized by memory token j."""
        return self.factor * j, min(self.factor * (j + 1), self.content_len)


def hierarchy_depth(n: int, k: int) -> int:
    """Number of compression levels above the raw level for an n-token chunk."""
    if n < 1:
        raise ValueError("chunk length must be >= 1")
    depth, m = 0, n
    while m > 1:  # iterated ceil-division; equals ceil(log_k n) without float hazards
        m = -(-m // k)
        depth += 1
    return depth


def build_segment_mask(n: int, k: int) -> AttentionMask:
    """Mask over [x_1..x_n, m_1..m_ceil(n/k)].

    Attention is confined to segments on both row groups: content rows are
    causal within their own segment, and memory row j sees exactly its
    content segment plus itself, never other memory tokens or segments. The
    confinement of content rows is what keeps "memory j depends on segment j
    only" exact for models of any depth: a causal content row would leak
    earlier segments into later memories transitively through deeper layers.
    """
    if k < 2:
        raise ValueError(f"compression factor must be >= 2, got {k}")
    if n < 1:
        raise ValueError(f"content length must be >= 1, got {n}")
    spec = SegmentedMaskSpec(n, k)
    m = spec.mem_count

    def builder() -> np.ndarray:
        allow = np.zeros((n + m, n + m), dtype=bool)
        for j in range(m):
            lo, hi = spec.segment_bounds(j)
            allow[lo:hi, lo:hi] = np.tril(np.ones((hi - lo, hi - lo), dtype=bool))
            allow[n + j, lo:hi] = True
            allow[n + j, n + j] = True
        return allow

    return AttentionMask(builder=builder, size=n + m)


@dataclass
class MemoryLevel:
    embeddings: Tensor   # len x d
    source_len: int

    def __len__(self) -> int:
        return self.embeddings.data.shape[0]


@dataclass
class MemoryHierarchy:
    """Coarse-to-fine memory for one chunk: levels[0] is the raw embedding
    sequence, levels[-1] a single embedding summarizing the whole chunk."""
    levels: list[Tensor]
    factor: int
    tokens: list[int] = field(default_factory=list)

    @property
    def depth(self) -> int:
        """Number of compression levels above level 0."""
        return len(self.levels) - 1

    def level_len(self, level: int) -> int:
        return self.levels[level].data.shape[0]


def _mem_positions(m_len: int, k: int) -> list[int]:
    """Memory token j is positioned at the last token of its segment."""
    spec = SegmentedMaskSpec(m_len, k)
    return [spec.segment_bounds(j)[1] - 1 for j in range(spec.mem_count)]


def _pooling_matrix(n: int, k: int) -> np.ndarray:
    """n_mem x n matrix averaging each length-k segment of the input level."""
    spec = SegmentedMaskSpec(n, k)
    pool = np.zeros((spec.mem_count, n))
    for j in range(spec.mem_count):
        lo, hi = spec.segment_bounds(j)
        pool[j, lo:hi] = 1.0 / (hi - lo)
    return pool


def _mem_hidden(level: Tensor, k: int, model: TransformerModel) -> Tensor:
    """MEM hidden states of one compression forward (no pooling anchor)."""
    m_len = level.data.shape[0]
    if m_len < 1:
        raise ValueError("cannot compress an empty level")
    mask = build_segment_mask(m_len, k)
    n_mem = SegmentedMaskSpec(m_len, k).mem_count
    items: list = [level] + [model.config.mem_id] * n_mem
    positions = list(range(m_len)) + _mem_positions(m_len, k)
    out = model.forward(items, mask, positions)
    return ag.slice_rows(out.hidden, m_len, m_len + n_mem)


def compress_level(level: Tensor, k: int, model: TransformerModel) -> MemoryLevel:
    """One compression pass: append MEM tokens, forward under the segmented
    mask, and anchor each MEM hidden state with the mean of its segment.

    The pooled-mean shortcut keeps memory embeddings content-dominant from
    the very first update: without it every MEM hidden state is the same
    structure (MEM token + layer norm) plus a small learned residue, so
    candidates at retrieval time are nearly indistinguishable and the
    retrieval attention has no signal to train against. Pooling preserves
    segment locality exactly: mean j reads segment j and nothing else.
    """
    m_len = level.data.shape[0]
    mem_hidden = _mem_hidden(level, k, model)
    pooled = ag.matmul(Tensor(_pooling_matrix(m_len, k)), level)
    return MemoryLevel(embeddings=ag.add(mem_hidden, pooled), source_len=m_len)


def build_hierarchy(chunk: Sequence[int], k: int, model: TransformerModel,
                    checkpoint: bool = False) -> MemoryHierarchy:
    """Compress a token chunk into its full coarse-to-fine hierarchy.

    Performs exactly ceil(log_k n) model forwards. With ``checkpoint`` set,
    each compression pass runs under gradient checkpointing: only level
    boundaries are retained and internals are recomputed on backward.
    """
    tokens = list(chunk)
    if not tokens:
        raise ValueError("cannot build a hierarchy from an empty chunk")
    levels = [model.embed_tokens(tokens)]
    while levels[-1].data.shape[0] > 1:
        cur = levels[-1]
        if checkpoint:
            # The pooling anchor stays outside the checkpointed segment so
            # the plain and checkpointed graphs share it edge-for-edge and
            # gradients stay bit-identical.
            hidden = ag.checkpoint_segment(
                lambda lv: _mem_hidden(lv, k, model), [cur])
            pooled = ag.matmul(Tensor(_pooling_matrix(cur.data.shape[0], k)), cur)
            nxt = ag.add(hidden, pooled)
        else:
            nxt = compress_level(cur, k, model).embeddings
        levels.append(nxt)
    return MemoryHierarchy(levels=levels, factor=k, tokens=tokens)
