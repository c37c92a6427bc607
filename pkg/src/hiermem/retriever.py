"""Top-down sparse retrieval over the hierarchical memory database.

A retrieval embedding is produced by appending RET tokens to the current
context. It then descends the database: at each level it self-attends over
the candidate memory embeddings, absorbs them into an updated retrieval
embedding, and hard-selects the top-C candidates whose children form the
next level's candidates. Aggregation is soft (differentiable); selection is
hard.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .memstore import HierDatabase, NodeRef
from .model import AttentionMask, TransformerModel, causal_mask


class EmptyDatabaseError(RuntimeError):
    """Retrieval asked against an empty database; caller should skip retrieval."""


@dataclass
class RetrievalConfig:
    num_ret_tokens: int = 1
    top_c: int = 1
    early_stop_threshold: float | None = None
    max_depth: int | None = None

    def __post_init__(self):
        if self.top_c < 1:
            raise ValueError(f"top_c must be >= 1, got {self.top_c}")
        if self.num_ret_tokens < 1:
            raise ValueError(f"num_ret_tokens must be >= 1, got {self.num_ret_tokens}")


@dataclass
class LevelTrace:
    level: int
    candidates: list[NodeRef]
    attention: np.ndarray
    selected: list[NodeRef]


@dataclass
class RetrievalState:
    embedding: Tensor                 # 1 x d
    level: int | None = None          # current level; None until attached to a db
    trace: list[LevelTrace] = field(default_factory=list)


def encode_retrieval(context: Sequence[int], num_ret: int,
                     model: TransformerModel) -> list[RetrievalState]:
    """Append RET tokens to the context and read off their hidden states."""
    context = list(context)
    if not context:
        raise ValueError("retrieval encoding needs a non-empty context")
    n = len(context)
    items: list = context + [model.config.ret_id] * num_ret
    out = model.forward(items, causal_mask(n + num_ret))
    # Anchor each retrieval embedding with the mean context embedding, the
    # query-side mirror of the compressor's pooled-mean anchor: both sides of
    # the retrieval match then share the token-embedding basis from the first
    # update instead of having to discover it.
    anchor = ag.scale(ag.matmul(Tensor(np.ones((1, n)) / n),
                                model.embed_tokens(context)), 1.0)
    return [RetrievalState(embedding=ag.add(
                ag.slice_rows(out.hidden, n + i, n + i + 1), anchor))
            for i in range(num_ret)]


def _step_mask(m: int) -> AttentionMask:
    """Candidates see only themselves; the retrieval row sees everything.

    Isolating the candidates (rather than letting them attend causally)
    keeps the aggregation permutation-equivariant: memory order in the
    database carries no information, so no circuit should depend on it.
    """
    allow = np.eye(m + 1, dtype=bool)
    allow[m, :] = True
    return AttentionMask(allow)


def retrieve_step(candidates: Tensor, state: RetrievalState,
                  model: TransformerModel) -> tuple[np.ndarray, RetrievalState]:
    """One aggregation pass: self-attend [candidates, r] and update r.

    Returns the retrieval row of the head-averaged last-layer attention,
    renormalized over the candidate positions (self-attention mass dropped).
    """
    m = candidates.data.shape[0]
    if m < 1:
        raise ValueError("retrieve_step needs at least one candidate")
    # Every row sits at position 0: candidates are a set, not a sequence,
    # so neither position embeddings nor the local mixing stage should
    # distinguish or blend them.
    items: list = [candidates, state.embedding]
    out = model.forward(items, _step_mask(m), positions=[0] * (m + 1))
    row = out.last_layer_attention[m, :m]
    total = row.sum()
    attn = row / total if total > 0 else np.full(m, 1.0 / m)
    new_state = RetrievalState(
        embedding=ag.slice_rows(out.hidden, m, m + 1),
        level=None if state.level is None else state.level - 1,
        trace=state.trace,
    )
    return attn, new_state


def top_c(attention: np.ndarray, candidates: Sequence[NodeRef], c: int) -> list[NodeRef]:
    """The C highest-attention refs, ties to the lowest index, returned in
    original index order."""
    if len(attention) != len(candidates):
        raise ValueError(f"{len(attention)} scores for {len(candidates)} candidates")
    order = sorted(range(len(candidates)), key=lambda i: (-attention[i], i))
    keep = sorted(order[:c])
    return [candidates[i] for i in keep]


def early_stop(attention: np.ndarray, cfg: RetrievalConfig, next_level: int) -> bool:
    if cfg.early_stop_threshold is not None and attention.max() < cfg.early_stop_threshold:
        return True
    if cfg.max_depth is not None and next_level < cfg.max_depth:
        return True
    return False


def _gather(db: HierDatabase, refs: Sequence[NodeRef]) -> Tensor:
    return ag.concat_rows([db.node_embedding(r) for r in refs])


def _expand(db: HierDatabase, refs: Sequence[NodeRef]) -> list[NodeRef]:
    """Children of each ref in order; level-0 refs carry over unchanged."""
    out: list[NodeRef] = []
    for r in refs:
        out.extend(db.children_refs(r) if r.level >= 1 else [r])
    return out


def sparse_retrieve(db: HierDatabase, state: RetrievalState, cfg: RetrievalConfig,
                    model: TransformerModel) -> RetrievalState:
    """Descend the hierarchy from every chunk's top embedding down to level 0,
    pruning to the top-C selections at each level."""
    if len(db) == 0:
        raise EmptyDatabaseError("database is empty; skip retrieval")
    refs = [db.top_ref(cid) for cid in db.chunk_ids()]
    while True:
        step_level = max(r.level for r in refs)
        state.level = step_level
        attn, state = retrieve_step(_gather(db, refs), state, model)
        selected = top_c(attn, refs, cfg.top_c)
        state.trace.append(LevelTrace(level=step_level, candidates=list(refs),
                                      attention=attn, selected=selected))
        if step_level == 0 or early_stop(attn, cfg, step_level - 1):
            return state
        refs = _expand(db, selected)


def dense_retrieve(db: HierDatabase, state: RetrievalState,
                   model: TransformerModel) -> RetrievalState:
    """Full descent without pruning: every node at every level. Oracle for
    sparse_retrieve when C covers the widest level."""
    if len(db) == 0:
        raise EmptyDatabaseError("database is empty; skip retrieval")
    refs = [db.top_ref(cid) for cid in db.chunk_ids()]
    while True:
        step_level = max(r.level for r in refs)
        state.level = step_level
        attn, state = retrieve_step(_gather(db, refs), state, model)
        state.trace.append(LevelTrace(level=step_level, candidates=list(refs),
                                      attention=attn, selected=list(refs)))
        if step_level == 0:
            return state
        refs = _expand(db, refs)


def soft_prefix(states: Sequence[RetrievalState]) -> Tensor:
    """Concatenate final retrieval embeddings into a soft-prefix matrix."""
    return ag.concat_rows([s.embedding for s in states])


def format_trace(state: RetrievalState) -> str:
    """Human-readable descent trace, one record per level."""
    lines = []
    for rec in state.trace:
        cands = " ".join(f"({r.chunk_id},{r.level},{r.index})" for r in rec.candidates)
        attn = " ".join(f"{a:.6f}" for a in rec.attention)
        sel = " ".join(f"({r.chunk_id},{r.level},{r.index})" for r in rec.selected)
        lines.append(f"level {rec.level}\n  candidates: {cands}\n"
                     f"  attention:  {attn}\n  selected:   {sel}")
    return "\n".join(lines)
