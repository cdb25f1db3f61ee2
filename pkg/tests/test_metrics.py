import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tagret.metrics import RetrievalMetrics, rank_metrics


def brute_force(sim, q_ids, g_ids, ks=(1, 5, 10)):
    """Loop-per-query oracle: sort gallery by (-score, index), walk the ranking."""
    hits_at = {k: 0 for k in ks}
    aps = []
    for qi in range(len(q_ids)):
        ranking = sorted(range(len(g_ids)), key=lambda j: (-sim[qi][j], j))
        correct = [g_ids[j] == q_ids[qi] for j in ranking]
        if not any(correct):
            continue
        for k in ks:
            hits_at[k] += any(correct[:k])
        found, precisions = 0, []
        for rank, c in enumerate(correct, start=1):
            if c:
                found += 1
                precisions.append(found / rank)
        aps.append(sum(precisions) / len(precisions))
    n = len(aps)
    out = {f"R{k}": 100.0 * hits_at[k] / n for k in ks}
    out["mAP"] = 100.0 * sum(aps) / n
    return out


def test_single_query_examples():
    good = rank_metrics(np.array([[0.9, 0.1]]), np.array([7]), np.array([7, 3]))
    assert good["R1"] == 100.0 and good["mAP"] == 100.0
    bad = rank_metrics(np.array([[0.1, 0.9]]), np.array([7]), np.array([7, 3]))
    assert bad["R1"] == 0.0 and bad["mAP"] == 50.0


def test_ties_keep_gallery_order():
    # equal scores: the lower gallery index ranks first
    assert rank_metrics(np.array([[0.5, 0.5]]), np.array([1]), np.array([1, 2]))["R1"] == 100.0
    assert rank_metrics(np.array([[0.5, 0.5]]), np.array([1]), np.array([2, 1]))["R1"] == 0.0


def test_queries_without_positives_are_skipped():
    sim = np.array([[0.9, 0.1], [0.2, 0.8]])
    out = rank_metrics(sim, np.array([1, 99]), np.array([1, 2]))
    assert out["n_queries"] == 1 and out["R1"] == 100.0


def test_shape_and_empty_errors():
    with pytest.raises(ValueError):
        rank_metrics(np.zeros((2, 3)), np.array([1]), np.array([1, 2, 3]))
    with pytest.raises(ValueError):
        rank_metrics(np.zeros((0, 0)), np.array([]), np.array([]))
    with pytest.raises(ValueError):
        rank_metrics(np.zeros((1, 2)), np.array([5]), np.array([1, 2]))


def test_twenty_by_fifty_matches_oracle():
    rng = np.random.default_rng(0)
    sim = rng.normal(size=(20, 50))
    q, g = rng.integers(0, 10, 20), rng.integers(0, 10, 50)
    got, want = rank_metrics(sim, q, g), brute_force(sim, q, g)
    for k in want:
        assert got[k] == pytest.approx(want[k], abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 60), st.integers(1, 8), st.booleans())
def test_matches_oracle_property(seed, nq, ng, n_ids, coarse):
    rng = np.random.default_rng(seed)
    # coarse scores produce many ties
    sim = rng.integers(0, 4, size=(nq, ng)).astype(float) if coarse else rng.normal(size=(nq, ng))
    q, g = rng.integers(0, n_ids, nq), rng.integers(0, n_ids, ng)
    if not np.isin(q, g).any():
        g[0] = q[0]
    got, want = rank_metrics(sim, q, g), brute_force(sim, q, g)
    for k in want:
        assert got[k] == pytest.approx(want[k], abs=1e-9)
    assert got["R1"] <= got["R5"] <= got["R10"]
    assert 0 < got["mAP"] <= 100


def test_row_selects_headline_numbers():
    m = RetrievalMetrics(R1=1.0, R5=2.0, R10=3.0, mAP=4.0, n_queries=5, n_gallery=6)
    assert m.row() == {"R1": 1.0, "R5": 2.0, "R10": 3.0, "mAP": 4.0}
