"""Persistent hierarchical memory database.

Holds one MemoryHierarchy per past context chunk and answers structural
child lookups for top-down retrieval. Single-file container, little-endian
throughout, bit-exact across save/load round trips.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .compressor import MemoryHierarchy, SegmentedMaskSpec

MAGIC = b"HMDB"
VERSION = 1


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class NodeRef:
    chunk_id: int
    level: int
    index: int


@dataclass
class HierDatabase:
    factor: int
    d_model: int
    fingerprint: bytes = b"\x00" * 32
    chunks: dict[int, MemoryHierarchy] = field(default_factory=dict)
    next_id: int = 0

    def __len__(self) -> int:
        return len(self.chunks)

    def chunk_ids(self) -> list[int]:
        return sorted(self.chunks)

    def put_chunk(self, hierarchy: MemoryHierarchy) -> int:
        if hierarchy.factor != self.factor:
            raise StoreError(f"hierarchy factor {hierarchy.factor} != database factor {self.factor}")
        d = hierarchy.levels[0].data.shape[1]
        if d != self.d_model:
            raise StoreError(f"hierarchy width {d} != database width {self.d_model}")
        cid = self.next_id
        self.next_id += 1
        self.chunks[cid] = hierarchy
        return cid

    def delete_chunk(self, chunk_id: int) -> None:
        if chunk_id not in self.chunks:
            raise StoreError(f"unknown chunk id {chunk_id}")
        del self.chunks[chunk_id]

    def top_ref(self, chunk_id: int) -> NodeRef:
        h = self.chunks[chunk_id]
        return NodeRef(chunk_id, h.depth, 0)

    def node_embedding(self, ref: NodeRef) -> Tensor:
        h = self.chunks[ref.chunk_id]
        if not (0 <= ref.index < h.level_len(ref.level)):
            raise StoreError(f"index {ref.index} out of range at level {ref.level}")
        return ag.slice_rows(h.levels[ref.level], ref.index, ref.index + 1)

    def children_refs(self, ref: NodeRef) -> list[NodeRef]:
        if ref.level < 1:
            raise StoreError("level-0 nodes have no children")
        h = self.chunks[ref.chunk_id]
        if not (0 <= ref.index < h.level_len(ref.level)):
            raise StoreError(f"index {ref.index} out of range at level {ref.level}")
        lo, hi = SegmentedMaskSpec(h.level_len(ref.level - 1), h.factor).segment_bounds(ref.index)
        return [NodeRef(ref.chunk_id, ref.level - 1, i) for i in range(lo, hi)]

    def children_of(self, ref: NodeRef) -> Tensor:
        """Level-(l-1) embeddings summarized by ``ref``, in index order."""
        refs = self.children_refs(ref)
        h = self.chunks[ref.chunk_id]
        return ag.slice_rows(h.levels[ref.level - 1], refs[0].index, refs[-1].index + 1)


def chunk_context(tokens, chunk_len: int) -> list[list[int]]:
    """Sequential split into chunks of ``chunk_len``; last chunk may be short."""
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    tokens = list(tokens)
    return [tokens[i:i + chunk_len] for i in range(0, len(tokens), chunk_len)]


def save(db: HierDatabase, path: str) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<II", db.factor, db.d_model))
        if len(db.fingerprint) != 32:
            raise StoreError("fingerprint must be 32 bytes")
        f.write(db.fingerprint)
        f.write(struct.pack("<Q", db.next_id))
        f.write(struct.pack("<Q", len(db.chunks)))
        for cid in sorted(db.chunks):
            h = db.chunks[cid]
            f.write(struct.pack("<Q", cid))
            f.write(struct.pack("<Q", len(h.tokens)))
            f.write(np.asarray(h.tokens, dtype="<u4").tobytes())
            f.write(struct.pack("<I", len(h.levels)))
            for lv in h.levels:
                f.write(struct.pack("<Q", lv.data.shape[0]))
                f.write(lv.data.astype("<f8").tobytes())


def load(path: str) -> HierDatabase:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        off = 0

        def take(n: int) -> bytes:
            nonlocal off
            if off + n > len(raw):
                raise StoreError("truncated database file")
            b = raw[off:off + n]
            off += n
            return b

        if take(4) != MAGIC:
            raise StoreError("bad database magic")
        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise StoreError(f"unsupported database version {version}")
        factor, d_model = struct.unpack("<II", take(8))
        fingerprint = take(32)
        (next_id,) = struct.unpack("<Q", take(8))
        (n_chunks,) = struct.unpack("<Q", take(8))
        db = HierDatabase(factor=factor, d_model=d_model, fingerprint=fingerprint,
                          next_id=next_id)
        for _ in range(n_chunks):
            (cid,) = struct.unpack("<Q", take(8))
            (n_tok,) = struct.unpack("<Q", take(8))
            tokens = np.frombuffer(take(4 * n_tok), dtype="<u4").astype(int).tolist()
            (n_levels,) = struct.unpack("<I", take(4))
            levels = []
            for _ in range(n_levels):
                (ln,) = struct.unpack("<Q", take(8))
                data = np.frombuffer(take(8 * ln * d_model), dtype="<f8")
                levels.append(Tensor(data.reshape(ln, d_model).copy()))
            db.chunks[cid] = MemoryHierarchy(levels=levels, factor=factor, tokens=tokens)
        if off != len(raw):
            raise StoreError("trailing bytes in database file")
        return db
    except struct.error as e:
        raise StoreError(f"malformed database file: {e}") from e
