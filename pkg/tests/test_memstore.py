import numpy as np
import pytest

from hiermem import memstore
from hiermem.compressor import build_hierarchy, build_segment_mask
from hiermem.memstore import HierDatabase, NodeRef, StoreError, chunk_context


def make_db(model, chunks, k=2):
    db = HierDatabase(factor=k, d_model=model.config.d_model)
    for c in chunks:
        db.put_chunk(build_hierarchy(c, k, model))
    return db


def test_chunk_context():
    assert [len(c) for c in chunk_context(range(10), 4)] == [4, 4, 2]
    assert len(chunk_context(range(4), 4)) == 1
    assert chunk_context([], 4) == []
    flat = [t for c in chunk_context(range(10), 3) for t in c]
    assert flat == list(range(10))


def test_chunk_len_validation():
    with pytest.raises(ValueError):
        chunk_context([1, 2], 0)


def test_put_chunk_ids(small_model):
    db = HierDatabase(factor=2, d_model=16)
    assert db.put_chunk(build_hierarchy([6, 7], 2, small_model)) == 0
    assert db.put_chunk(build_hierarchy([8, 9], 2, small_model)) == 1


def test_put_chunk_factor_mismatch(small_model):
    db = HierDatabase(factor=4, d_model=16)
    with pytest.raises(StoreError, match="2.*4|4.*2"):
        db.put_chunk(build_hierarchy([6, 7], 2, small_model))


def test_children_index_arithmetic(small_model):
    db = make_db(small_model, [list(range(6, 14))], k=4)
    refs = db.children_refs(NodeRef(0, 1, 1))
    assert [r.index for r in refs] == [4, 5, 6, 7]
    emb = db.children_of(NodeRef(0, 1, 1))
    assert np.array_equal(emb.data, db.chunks[0].levels[0].data[4:8])


def test_children_ragged(small_model):
    db = make_db(small_model, [list(range(6, 11))], k=2)  # level-0 len 5
    refs = db.children_refs(NodeRef(0, 1, 2))
    assert [r.index for r in refs] == [4]


def test_children_of_level0_errors(small_model):
    db = make_db(small_model, [[6, 7]], k=2)
    with pytest.raises(StoreError):
        db.children_of(NodeRef(0, 0, 0))


def test_children_match_compression_mask(small_model):
    """children_of equals exactly the content positions the mem token
    attended during compression."""
    n, k = 7, 3
    db = make_db(small_model, [list(range(6, 6 + n))], k=k)
    allow = build_segment_mask(n, k).allow
    for j in range(-(-n // k)):
        attended = set(np.flatnonzero(allow[n + j][:n]))
        children = {r.index for r in db.children_refs(NodeRef(0, 1, j))}
        assert children == attended


def test_delete_chunk(small_model):
    db = make_db(small_model, [[6, 7], [8, 9]])
    before = db.chunks[1].levels[0].data.copy()
    db.delete_chunk(0)
    assert db.chunk_ids() == [1]
    assert np.array_equal(db.chunks[1].levels[0].data, before)
    with pytest.raises(StoreError):
        db.delete_chunk(0)


def test_delete_only_chunk(small_model):
    db = make_db(small_model, [[6, 7]])
    db.delete_chunk(0)
    assert len(db) == 0


def test_ids_stable_after_delete(small_model):
    db = make_db(small_model, [[6, 7], [8, 9]])
    db.delete_chunk(0)
    assert db.put_chunk(build_hierarchy([10, 11], 2, small_model)) == 2


def test_save_load_roundtrip(small_model, tmp_path):
    db = make_db(small_model, [[6, 7, 8, 9], [10, 11, 12], [13]], k=2)
    p1 = str(tmp_path / "a.hmdb")
    p2 = str(tmp_path / "b.hmdb")
    memstore.save(db, p1)
    loaded = memstore.load(p1)
    assert loaded.chunk_ids() == db.chunk_ids()
    assert loaded.next_id == db.next_id
    for cid in db.chunk_ids():
        a, b = db.chunks[cid], loaded.chunks[cid]
        assert a.tokens == b.tokens
        assert len(a.levels) == len(b.levels)
        for la, lb in zip(a.levels, b.levels):
            assert np.array_equal(la.data, lb.data)
    memstore.save(loaded, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_save_load_empty(tmp_path):
    db = HierDatabase(factor=2, d_model=16)
    path = str(tmp_path / "e.hmdb")
    memstore.save(db, path)
    loaded = memstore.load(path)
    assert len(loaded) == 0
    assert loaded.factor == 2 and loaded.d_model == 16


def test_corrupted_magic(tmp_path):
    path = str(tmp_path / "c.hmdb")
    with open(path, "wb") as f:
        f.write(b"XXXX" + b"\x00" * 40)
    with pytest.raises(StoreError, match="magic"):
        memstore.load(path)


def test_truncated_file(small_model, tmp_path):
    db = make_db(small_model, [[6, 7, 8]])
    path = str(tmp_path / "t.hmdb")
    memstore.save(db, path)
    raw = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(raw[:len(raw) // 2])
    with pytest.raises(StoreError, match="truncated"):
        memstore.load(path)
