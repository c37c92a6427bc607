"""Interactive-session runtime: window management and async retrieval.

The session loop owns all mutable state. When the live context is about to
exceed the window, the oldest half is evicted, compressed into a hierarchy,
and added to the database. Retrieval runs either before every generation
turn or only when a CALL_RETRIEVAL token appears in the input (the trigger
is scripted at this scale). In async mode the retrieval job runs on a
scheduler and its soft prefix is merged only at a token boundary, so the
generated stream is a valid interleaving of the synchronous semantics.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import autograd as ag
from .autograd import Tensor
from .compressor import build_hierarchy
from .memstore import HierDatabase
from .model import TransformerModel, causal_mask
from .retriever import (RetrievalConfig, encode_retrieval, soft_prefix,
                        sparse_retrieve)
import numpy as np


class RetrievalJob:
    """Handle for one background retrieval; result lands at a single handoff
    point polled at token boundaries."""

    def __init__(self):
        self._done = threading.Event()
        self.result: Tensor | None = None

    def finish(self, result: Tensor | None) -> None:
        self.result = result
        self._done.set()

    def poll(self) -> bool:
        return self._done.is_set()


class InlineScheduler:
    """Zero-latency deterministic scheduler: jobs complete at submission."""

    def submit(self, fn: Callable[[], Tensor | None]) -> RetrievalJob:
        job = RetrievalJob()
        job.finish(fn())
        return job

    def shutdown(self) -> None:
        pass


class ThreadScheduler:
    """Runs each retrieval job on its own thread."""

    def __init__(self):
        self._threads: list[threading.Thread] = []

    def submit(self, fn: Callable[[], Tensor | None]) -> RetrievalJob:
        job = RetrievalJob()

        def run():
            job.finish(fn())

        t = threading.Thread(target=run, daemon=True)
        t.start()
        self._threads.append(t)
        return job

    def shutdown(self) -> None:
        for t in self._threads:
            t.join()


@dataclass
class SessionConfig:
    window_size: int = 64
    max_new_tokens: int = 4
    trigger_mode: str = "always"        # "always" or "token"
    async_mode: bool = False
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)

    def __post_init__(self):
        if self.trigger_mode not in ("always", "token"):
            raise ValueError(f"unknown trigger_mode {self.trigger_mode!r}")


@dataclass
class SessionState:
    context: list[int] = field(default_factory=list)
    prefix: Tensor | None = None
    pending: RetrievalJob | None = None
    events: list[dict] = field(default_factory=list)


def run_session(model: TransformerModel, db: HierDatabase,
                turns: Sequence[Sequence[int]], cfg: SessionConfig,
                scheduler=None) -> list[dict]:
    """Process scripted turns; returns the transcript as a list of events.

    Each turn's tokens are appended to the live context (CALL_RETRIEVAL
    tokens act as scripted triggers and are not kept in the context), the
    window is managed, retrieval fires per the trigger mode, and the model
    generates greedily.
    """
    scheduler = scheduler or (ThreadScheduler() if cfg.async_mode else InlineScheduler())
    st = SessionState()
    call_id = model.config.call_retrieval_id
    k = db.factor

    def prefix_rows() -> int:
        return 0 if st.prefix is None else st.prefix.data.shape[0]

    def evict_if_needed(incoming: int) -> None:
        # budget: prefix slots + live context + incoming + generation room
        while st.context and (prefix_rows() + len(st.context) + incoming
                              + cfg.max_new_tokens > cfg.window_size):
            n_evict = max(1, len(st.context) // 2)
            chunk = st.context[:n_evict]
            st.context = st.context[n_evict:]
            with ag.no_grad():
                cid = db.put_chunk(build_hierarchy(chunk, k, model))
            st.events.append({"type": "evict", "chunk_id": cid, "tokens": chunk})

    def start_retrieval() -> None:
        if st.pending is not None or len(db) == 0 or not st.context:
            return  # coalesce: at most one job in flight
        query = list(st.context)

        def job() -> Tensor | None:
            with ag.no_grad():
                states = encode_retrieval(query, cfg.retrieval.num_ret_tokens, model)
                finals = [sparse_retrieve(db, s, cfg.retrieval, model) for s in states]
                return soft_prefix(finals)

        st.pending = scheduler.submit(job)
        st.events.append({"type": "retrieval_started", "query_len": len(query)})

    def merge_if_ready(block: bool = False) -> bool:
        if st.pending is None:
            return False
        if block:
            st.pending._done.wait()
        if st.pending.poll():
            st.prefix = st.pending.result
            st.pending = None
            st.events.append({"type": "retrieval_merged",
                              "prefix_len": prefix_rows()})
            return True
        return False

    for turn in turns:
        tokens = list(turn)
        triggered = call_id in tokens
        tokens = [t for t in tokens if t != call_id]
        if len(tokens) + cfg.max_new_tokens > cfg.window_size:
            raise ValueError(f"turn of {len(tokens)} tokens cannot fit window "
                             f"{cfg.window_size} with generation budget {cfg.max_new_tokens}")
        evict_if_needed(len(tokens))
        st.context.extend(tokens)
        st.events.append({"type": "input", "tokens": tokens})

        if cfg.trigger_mode == "always" or triggered:
            start_retrieval()
        if not cfg.async_mode:
            merge_if_ready(block=True)  # synchronous mode blocks on the job

        generated: list[int] = []
        for _ in range(cfg.max_new_tokens):
            if cfg.async_mode:
                merge_if_ready()  # token boundary: sole merge point
            evict_if_needed(1)
            with ag.no_grad():
                items: list = ([st.prefix] if st.prefix is not None else []) + st.context
                n = prefix_rows() + len(st.context)
                out = model.forward(items, causal_mask(n))
                logits = ag.matmul(ag.slice_rows(out.hidden, n - 1, n),
                                   ag.transpose(model.params["tok_emb"]))
            nxt = int(np.argmax(logits.data[0]))
            generated.append(nxt)
            st.context.append(nxt)
            if nxt == model.config.eos_id:
                break
        st.events.append({"type": "output", "tokens": generated})
        assert prefix_rows() + len(st.context) <= cfg.window_size

    scheduler.shutdown()
    if st.pending is not None:
        merge_if_ready()
    return st.events


def transcript_tokens(events: Sequence[dict]) -> list[int]:
    """Flat generated-token stream of a transcript."""
    out: list[int] = []
    for e in events:
        if e["type"] == "output":
            out.extend(e["tokens"])
    return out
