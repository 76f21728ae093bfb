"""Hard-negative mining rounds: purity, provenance, persistence."""

import numpy as np
import pytest

from qreform.ance import (
    AnceData,
    HardNegativeRecord,
    build_rerank_batches,
    load_hard_negatives,
    mine_hard_negatives,
    negatives_by_anchor,
    run_ance_loop,
    save_hard_negatives,
)
from qreform.encoders import BiEncoderModel, params_checksum
from qreform.training import OBJECTIVE_RETRIEVAL, RetrievalExample, TrainConfig


def model(seed=0):
    return BiEncoderModel.initialize(1 << 10, 8, seed=seed)


CANDIDATES = {
    "red mask": "red mask",
    "red masks": "red masks",
    "crimson mask": "crimson mask",
    "blue towel": "blue towel",
    "red towel": "red towel",
}


def canon(a, b):
    return (a, b) if a <= b else (b, a)


def test_mining_excludes_self_and_copurchased():
    copurchased = frozenset({canon("red mask", "crimson mask")})
    records = mine_hard_negatives(
        model(), ["red mask"], CANDIDATES, copurchased, top_k=5
    )
    (record,) = records
    assert "red mask" not in record.negatives
    assert "crimson mask" not in record.negatives
    assert "red masks" in record.negatives


def test_mining_excludes_normalization_duplicates():
    normalized = {q: q.rstrip("s") for q in CANDIDATES}
    normalized["anchor"] = "red mask"
    records = mine_hard_negatives(
        model(),
        ["anchor"],
        CANDIDATES,
        frozenset(),
        top_k=5,
        normalized=normalized,
    )
    (record,) = records
    assert "red mask" not in record.negatives
    assert "red masks" not in record.negatives


def test_mining_purity_fuzz():
    rng = np.random.default_rng(0)
    queries = [f"item {i} {rng.integers(100)}" for i in range(30)]
    candidates = {q: q for q in queries}
    copurchased = set()
    for _ in range(60):
        a, b = rng.choice(30, size=2, replace=False)
        copurchased.add(canon(queries[a], queries[b]))
    records = mine_hard_negatives(
        model(1), queries[:10], candidates, frozenset(copurchased), top_k=10
    )
    for record in records:
        for negative in record.negatives:
            assert canon(record.anchor, negative) not in copurchased
            assert negative != record.anchor


def test_mining_records_provenance_checksum():
    m = model(2)
    records = mine_hard_negatives(m, ["red mask"], CANDIDATES, frozenset(), top_k=3)
    assert records[0].source_checkpoint == params_checksum(m)


def test_mining_orders_anchors_and_ranks():
    records = mine_hard_negatives(
        model(), ["blue towel", "red mask"], CANDIDATES, frozenset(), top_k=5
    )
    assert [r.anchor for r in records] == ["blue towel", "red mask"]


def test_record_rejects_anchor_in_negatives():
    with pytest.raises(ValueError):
        HardNegativeRecord("a", ("a", "b"), 1, "c0ffee")


def ance_data():
    examples = [
        RetrievalExample("red mask", "red masks", 1.0),
        RetrievalExample("blue towel", "red towel", 0.8),
    ]
    return AnceData(
        candidates=CANDIDATES,
        copurchased=frozenset({canon("red mask", "red masks")}),
        retrieval_train=examples,
        retrieval_val=[],
        top_k=4,
    )


def test_run_ance_loop_zero_rounds_is_identity():
    m = model(3)
    before = params_checksum(m)
    outcome = run_ance_loop(
        m, None, ance_data(), 0, TrainConfig(objective=OBJECTIVE_RETRIEVAL)
    )
    assert outcome.rounds == []
    assert params_checksum(m) == before


def test_run_ance_loop_rejects_negative_rounds():
    with pytest.raises(ValueError):
        run_ance_loop(
            model(), None, ance_data(), -1, TrainConfig(objective=OBJECTIVE_RETRIEVAL)
        )


def test_run_ance_loop_trains_and_mines_per_round():
    m = model(4)
    before = params_checksum(m)
    calls = []
    outcome = run_ance_loop(
        m,
        None,
        ance_data(),
        2,
        TrainConfig(objective=OBJECTIVE_RETRIEVAL, epochs=1, learning_rate=1e-3),
        on_round=lambda r, records, mm: calls.append((r, len(records))),
    )
    assert params_checksum(m) != before
    assert [r.round_index for r in outcome.rounds] == [1, 2]
    assert [c[0] for c in calls] == [1, 2]
    # Round 2 was mined with the round-1 model, not the initial one.
    assert (
        outcome.rounds[0].records[0].source_checkpoint
        != outcome.rounds[1].records[0].source_checkpoint
    )


def test_negatives_file_round_trip(tmp_path):
    records = mine_hard_negatives(
        model(5), ["red mask", "blue towel"], CANDIDATES, frozenset(), top_k=3
    )
    path = tmp_path / "negs.tsv"
    save_hard_negatives(path, records)
    loaded = load_hard_negatives(path)
    assert loaded == records


def test_negatives_file_rejects_mixed_rounds(tmp_path):
    a = HardNegativeRecord("a", ("x",), 1, "c0ffee")
    b = HardNegativeRecord("b", ("y",), 2, "c0ffee")
    with pytest.raises(ValueError):
        save_hard_negatives(tmp_path / "negs.tsv", [a, b])


def test_negatives_by_anchor():
    a = HardNegativeRecord("a", ("x", "y"), 1, "c0ffee")
    b = HardNegativeRecord("b", (), 1, "c0ffee")
    assert negatives_by_anchor([a, b]) == {"a": ("x", "y"), "b": ()}


def test_build_rerank_batches_caps_and_skips():
    positives = {
        "a": (("p1", 0.9), ("p2", 0.5)),
        "b": (),
        "c": (("p3", 0.7),),
    }
    records = [
        HardNegativeRecord("a", tuple(f"n{i}" for i in range(12)), 1, "c0ffee"),
        HardNegativeRecord("c", (), 1, "c0ffee"),
    ]
    batches = build_rerank_batches(positives, records, hard_negative_cap=8)
    by_anchor = {b.anchor: b for b in batches}
    assert set(by_anchor) == {"a", "c"}  # "b" skipped: no positives
    assert len(by_anchor["a"].hard_negatives) == 8
    assert by_anchor["c"].hard_negatives == ()
