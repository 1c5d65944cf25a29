import io
import json
import math
import random

import numpy as np
import pytest

from fbl.embed import EmbeddingMatrix
from fbl.index import build_index
from fbl.retrieve import (
    RankedResult,
    RankMode,
    aggregate_to_changeset,
    maxsim,
    rank_exact,
    rank_two_stage,
    write_jsonl,
    write_trec,
)


def _unit_rows(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return arr / norms


def _q(arr):
    return EmbeddingMatrix(rows=np.asarray(arr, dtype=np.float32), is_query=True)


def _d(arr):
    return EmbeddingMatrix(rows=np.asarray(arr, dtype=np.float32))


E = np.eye(4, dtype=np.float32)


def test_maxsim_self_similarity():
    v = _unit_rows(np.array([[0.3, 0.4, 0.5, 0.1]]))
    assert maxsim(_q(v), _d(v)) == pytest.approx(1.0, abs=1e-6)


def test_maxsim_orthonormal_pair():
    # q = {e1, e2}, d = {e1} -> 1.0 + 0.0 = 1.0
    assert maxsim(_q(E[:2]), _d(E[:1])) == pytest.approx(1.0, abs=1e-7)


def test_maxsim_hand_mixture():
    # q = {e1}, d = {0.6 e1 + 0.8 e2, e2} -> max(0.6, 0.0) = 0.6
    d = np.stack([0.6 * E[0] + 0.8 * E[1], E[1]])
    assert maxsim(_q(E[:1]), _d(d)) == pytest.approx(0.6, abs=1e-7)


def test_maxsim_empty_document_is_minus_inf():
    assert maxsim(_q(E[:1]), _d(np.zeros((0, 4)))) == -math.inf
    assert maxsim(_q(E[:1]), _d(np.zeros((3, 4)))) == -math.inf


def test_maxsim_zero_doc_rows_excluded_from_maxima():
    # one real doc row anti-aligned with q; a zero row must not lift max to 0
    d = np.stack([-E[0], np.zeros(4, dtype=np.float32)])
    assert maxsim(_q(E[:1]), _d(d)) == pytest.approx(-1.0, abs=1e-7)


def test_maxsim_bounds_and_permutation_duplication_invariance():
    rng = np.random.default_rng(0)
    for _ in range(30):
        q = _unit_rows(rng.standard_normal((rng.integers(1, 6), 4)))
        d = _unit_rows(rng.standard_normal((rng.integers(1, 6), 4)))
        s = maxsim(_q(q), _d(d))
        assert -q.shape[0] - 1e-6 <= s <= q.shape[0] + 1e-6
        perm = d[rng.permutation(d.shape[0])]
        assert maxsim(_q(q), _d(perm)) == pytest.approx(s, abs=1e-6)
        dup = np.vstack([d, d[:1]])
        assert maxsim(_q(q), _d(dup)) == pytest.approx(s, abs=1e-6)


def test_maxsim_monotone_in_document_rows():
    rng = np.random.default_rng(1)
    for _ in range(30):
        q = _unit_rows(rng.standard_normal((3, 4)))
        d = _unit_rows(rng.standard_normal((3, 4)))
        extra = _unit_rows(rng.standard_normal((2, 4)))
        s1 = maxsim(_q(q), _d(d))
        s2 = maxsim(_q(q), _d(np.vstack([d, extra])))
        assert s2 >= s1 - 1e-6


def test_maxsim_equals_row_count_iff_exact_duplicates():
    q = E[:2]
    assert maxsim(_q(q), _d(E[:2])) == pytest.approx(2.0, abs=1e-7)
    d = np.stack([E[0], _unit_rows(np.array([[0.9, 0.1, 0, 0]]))[0]])
    assert maxsim(_q(q), _d(d)) < 2.0 - 1e-4


def test_rank_exact_single_doc():
    res = rank_exact(_q(E[:1]), {"only:0:0": _d(E[:1])})
    assert len(res.entries) == 1
    assert res.entries[0][0] == "only:0:0"
    assert res.mode is RankMode.EXACT


def test_rank_exact_tie_breaks_by_doc_id():
    docs = {"bbb:0:0": _d(E[:1]), "aaa:0:0": _d(E[:1].copy())}
    res = rank_exact(_q(E[:1]), docs)
    assert [e[0] for e in res.entries] == ["aaa:0:0", "bbb:0:0"]


def test_rank_exact_five_doc_hand_fixture():
    # hand-computed scores for q = {e1, e2}:
    #   d1 = {e1, e2}      -> 1 + 1 = 2
    #   d2 = {e1}          -> 1 + 0 = 1
    #   d3 = {0.6e1+0.8e2} -> 0.6 + 0.8 = 1.4
    #   d4 = {-e1}         -> -1 + 0 = -1   (single row, both maxima against it)
    #   d5 = {e3}          -> 0 + 0 = 0
    docs = {
        "d1": _d(E[:2]),
        "d2": _d(E[:1]),
        "d3": _d(np.stack([0.6 * E[0] + 0.8 * E[1]])),
        "d4": _d(np.stack([-E[0]])),
        "d5": _d(E[2:3]),
    }
    res = rank_exact(_q(E[:2]), docs)
    assert [e[0] for e in res.entries] == ["d1", "d3", "d2", "d5", "d4"]
    scores = dict(res.entries)
    assert scores["d1"] == pytest.approx(2.0, abs=1e-6)
    assert scores["d3"] == pytest.approx(1.4, abs=1e-6)
    assert scores["d2"] == pytest.approx(1.0, abs=1e-6)
    assert scores["d5"] == pytest.approx(0.0, abs=1e-6)
    assert scores["d4"] == pytest.approx(-1.0, abs=1e-6)


def test_rank_exact_excludes_empty_documents():
    docs = {"real": _d(E[:1]), "empty": _d(np.zeros((2, 4)))}
    res = rank_exact(_q(E[:1]), docs)
    assert [e[0] for e in res.entries] == ["real"]


def _clustered_corpus(rng, n_docs=60, dim=16):
    centers = _unit_rows(rng.standard_normal((8, dim)))
    docs = {}
    for i in range(n_docs):
        rows = centers[rng.integers(8, size=5)] + 0.2 * rng.standard_normal((5, dim))
        docs[f"cs{i:03d}:0:0"] = _d(_unit_rows(rows))
    return docs


def test_two_stage_exhaustive_equals_exact():
    rng = np.random.default_rng(3)
    docs = _clustered_corpus(rng)
    idx = build_index(docs, n_partitions=8, n_subspaces=4, n_codewords=32, seed=1)
    for trial in range(5):
        q = _q(_unit_rows(rng.standard_normal((4, 16))))
        exact = rank_exact(q, docs)
        two = rank_two_stage(q, idx, docs, n_prime=None, nprobe=8, k=len(docs))
        assert two.entries == exact.entries
        assert two.mode is RankMode.TWO_STAGE


def test_two_stage_k_truncates():
    rng = np.random.default_rng(4)
    docs = _clustered_corpus(rng, n_docs=30)
    idx = build_index(docs, n_partitions=4, n_subspaces=4, n_codewords=16, seed=2)
    q = _q(_unit_rows(rng.standard_normal((3, 16))))
    exact = rank_exact(q, docs)
    two = rank_two_stage(q, idx, docs, n_prime=None, nprobe=4, k=7)
    assert two.entries == exact.entries[:7]


def test_two_stage_k_beyond_candidates_returns_all():
    rng = np.random.default_rng(5)
    docs = _clustered_corpus(rng, n_docs=10)
    idx = build_index(docs, n_partitions=2, n_subspaces=4, n_codewords=8, seed=2)
    q = _q(_unit_rows(rng.standard_normal((2, 16))))
    two = rank_two_stage(q, idx, docs, n_prime=None, nprobe=2, k=10_000)
    assert len(two.entries) == 10


def test_aggregate_max_rule():
    res = RankedResult(
        bug_id="b",
        entries=[("cs1:0:1", 0.9), ("cs1:0:2", 0.4), ("cs1:0:0", 0.2)],
        mode=RankMode.EXACT,
    )
    agg = aggregate_to_changeset(res)
    assert agg.entries == [("cs1", 0.9)]


def test_aggregate_disjoint_preserves_order():
    res = RankedResult(
        bug_id="b",
        entries=[("a:0:0", 0.9), ("b:0:0", 0.5), ("c:0:0", 0.1)],
        mode=RankMode.EXACT,
    )
    agg = aggregate_to_changeset(res)
    assert agg.entries == [("a", 0.9), ("b", 0.5), ("c", 0.1)]


def test_aggregate_interleaved_hand_fixture():
    # interleaved hunks of two changesets; max per changeset: x=0.8, y=0.7
    res = RankedResult(
        bug_id="b",
        entries=[("x:0:0", 0.8), ("y:0:0", 0.7), ("x:0:1", 0.6), ("y:1:0", 0.2)],
        mode=RankMode.EXACT,
    )
    agg = aggregate_to_changeset(res)
    assert agg.entries == [("x", 0.8), ("y", 0.7)]
    summed = aggregate_to_changeset(res, how="sum")
    assert summed.entries == [("x", pytest.approx(1.4)), ("y", pytest.approx(0.9))]


def test_emission_formats():
    res = RankedResult(bug_id="bug7", entries=[("cs9:0:3", 1.25)], mode=RankMode.EXACT)
    buf = io.StringIO()
    write_jsonl(res, buf)
    row = json.loads(buf.getvalue())
    assert row == {
        "bug_id": "bug7",
        "rank": 1,
        "doc_id": "cs9:0:3",
        "changeset_id": "cs9",
        "score": 1.25,
    }
    buf = io.StringIO()
    write_trec(res, buf, tag="run1")
    assert buf.getvalue() == "bug7 Q0 cs9:0:3 1 1.250000 run1\n"
