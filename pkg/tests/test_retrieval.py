import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import unit_rows
from vprdistill.errors import EvaluationError, FormatError, ProvenanceError, QueryError
from vprdistill.evalcli import (
    LatencyReport,
    RecallClampWarning,
    RecallReport,
    RetrievalIndex,
    bench_latency,
    build_index,
    latency_stats,
    load_descriptors,
    recall_at_n,
    retrieve,
    save_descriptors,
)
from vprdistill.inputs import extract_descriptors
from vprdistill.model import BackboneConfig, DescriptorNet


def _index(n=10, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    return RetrievalIndex([f"d{i:03d}" for i in range(n)], unit_rows(rng, n, dim), "abc")


def test_index_validates():
    with pytest.raises(QueryError):
        RetrievalIndex(["a"], np.ones((2, 2)) / np.sqrt(2))
    with pytest.raises(QueryError):
        RetrievalIndex(["a", "b"], np.ones((2, 2)))
    with pytest.raises(QueryError):
        RetrievalIndex(["a", "a"], np.eye(2))


def test_retrieve_examples():
    idx = _index()
    assert retrieve(idx, idx.matrix[3], 1) == ["d003"]
    assert sorted(retrieve(idx, idx.matrix[0], len(idx))) == idx.ids
    with pytest.raises(QueryError):
        retrieve(idx, np.ones(3), 1)
    with pytest.raises(QueryError):
        retrieve(idx, idx.matrix[0], len(idx) + 1)


def test_retrieve_matches_brute_force():
    idx = _index(50, 16, seed=2)
    rng = np.random.default_rng(3)
    for q in unit_rows(rng, 100, 16):
        d = [(float(np.sqrt(((q - row) ** 2).sum())), rid) for rid, row in zip(idx.ids, idx.matrix)]
        assert retrieve(idx, q, 10) == [rid for _, rid in sorted(d)[:10]]


def test_insertion_order_does_not_matter():
    idx = _index(20, 4, seed=5)
    mat = idx.matrix.copy()
    mat[7] = mat[2]  # exact tie
    a = RetrievalIndex(idx.ids, mat)
    perm = np.random.default_rng(0).permutation(20)
    b = RetrievalIndex([idx.ids[i] for i in perm], mat[perm])
    for q in mat:
        assert retrieve(a, q, 20) == retrieve(b, q, 20)


def test_recall_hand_count():
    idx = RetrievalIndex(["n1", "n2", "n3", "p"], np.eye(4))
    # query close to n1, then p: ranked list [n1, p, ...]
    q1 = np.array([0.9, 0.0, 0.0, 0.4])
    q2 = np.array([0.0, 0.0, 0.0, 1.0])
    qs = np.stack([q1 / np.linalg.norm(q1), q2])
    gt = {"a": {"p"}, "b": {"p"}}
    rep = recall_at_n(idx, ["a"], qs[:1], gt, (1, 4))
    assert rep.recalls == {1: 0.0, 4: 1.0}
    rep = recall_at_n(idx, ["a", "b"], qs, gt, (1, 4))
    assert rep.recalls == {1: 0.5, 4: 1.0}


def test_recall_excludes_empty_and_clamps():
    idx = _index(5)
    gt = {"a": {"d000"}, "b": set()}
    with pytest.warns(RecallClampWarning):
        rep = recall_at_n(idx, ["a", "b"], idx.matrix[[1, 2]], gt, (1, 10))
    assert rep.n_queries == 1 and rep.n_excluded == 1
    assert rep.recalls[10] == 1.0
    with pytest.raises(EvaluationError):
        recall_at_n(idx, ["zz"], idx.matrix[:1], gt)


def test_full_database_recall_is_one():
    idx = _index(12)
    rng = np.random.default_rng(1)
    gt = {f"q{i}": {idx.ids[i]} for i in range(12)}
    rep = recall_at_n(idx, list(gt), unit_rows(rng, 12, 8), gt, (1, 5, 12))
    assert rep.recalls[12] == 1.0


def test_report_rejects_non_monotone():
    with pytest.raises(EvaluationError):
        RecallReport({1: 0.5, 5: 0.4}, 10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_monotone(seed):
    rng = np.random.default_rng(seed)
    idx = _index(15, 6, seed=seed)
    gt = {f"q{i}": set(rng.choice(idx.ids, size=rng.integers(1, 3), replace=False)) for i in range(8)}
    rep = recall_at_n(idx, list(gt), unit_rows(rng, 8, 6), gt, (1, 2, 5, 10, 15))
    vals = [rep.recalls[n] for n in sorted(rep.recalls)]
    assert vals == sorted(vals)


def test_descriptor_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mat = unit_rows(rng, 1000, 32).astype(np.float32).astype(np.float64)
    idx = RetrievalIndex([f"r{i:04d}" for i in range(1000)], mat, "digest1")
    path = tmp_path / "d.bin"
    save_descriptors(idx, path)
    back = load_descriptors(path, expected_digest="digest1")
    assert back.ids == idx.ids and back.model_digest == "digest1"
    assert np.array_equal(back.matrix, idx.matrix)
    q = unit_rows(rng, 50, 32)
    gt = {f"q{i}": {idx.ids[i]} for i in range(50)}
    assert recall_at_n(back, list(gt), q, gt).recalls == recall_at_n(idx, list(gt), q, gt).recalls
    with pytest.raises(ProvenanceError):
        load_descriptors(path, expected_digest="other")


def test_descriptor_file_corruption(tmp_path):
    idx = _index()
    path = tmp_path / "d.bin"
    save_descriptors(idx, path)
    data = path.read_bytes()
    (tmp_path / "a").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "b").write_bytes(data[:12] + b"{" * 20 + data[32:])
    (tmp_path / "c").write_bytes(data[:-4])
    for name in "abc":
        with pytest.raises(FormatError):
            load_descriptors(tmp_path / name)


def test_latency_stats():
    assert latency_stats([2.0]) == (2.0, 2.0, 2.0)
    mean, p50, p95 = latency_stats([1.0, 2.0, 3.0, 10.0])
    assert p95 >= p50
    with pytest.raises(EvaluationError):
        LatencyReport(-1.0, 0, 0, 0, 1, "")


def test_bench_latency(tiny_data):
    net = DescriptorNet(BackboneConfig.rgb_like())
    rep = bench_latency(net, tiny_data["test"], warmup=1, reps=1)
    assert rep.mean_ms == rep.p50_ms == rep.p95_ms > 0
    rep = bench_latency(net, tiny_data["test"], warmup=0, reps=5)
    assert rep.p95_ms >= rep.p50_ms and rep.match_s_per_query >= 0
    with pytest.raises(EvaluationError):
        bench_latency(net, tiny_data["test"], reps=0)


def test_index_batching_equivalence(tiny_data):
    torch.manual_seed(0)
    net = DescriptorNet(BackboneConfig.rgb_like())
    data = tiny_data["train"]
    idx = build_index(net, data, batch_size=4)
    assert idx.matrix.shape == (len(data.db_ids), 448)
    single = np.concatenate([extract_descriptors(net, data, [i], 1) for i in data.db_ids])
    assert np.allclose(idx.matrix, single, atol=1e-6)
    assert np.array_equal(build_index(net, data).matrix, build_index(net, data).matrix)


def test_kd_models_never_read_segmentation(tiny_synth):
    from vprdistill.evalcli import evaluate
    from vprdistill.inputs import VPRData

    _, records, _ = tiny_synth
    data = VPRData(records["test"], (32, 32))
    net = DescriptorNet(BackboneConfig.rgb_like(), transform_dim=480)
    evaluate(net, data)
    assert data.store.reads["seg"] == 0
    assert data.store.reads["rgb"] == len(data.ids)
