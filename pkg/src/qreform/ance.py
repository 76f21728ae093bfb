"""Iterative hard-negative mining and fine-tuning.

Each round retrieves every anchor's nearest candidates with the current
bi-encoder and keeps those that share no co-purchase with the anchor (and
are not the anchor or one of its normalization duplicates): textually
close, behaviorally unrelated queries.  The retriever fine-tunes on its
own mined negatives (self-learning); after the final round the
cross-encoder fine-tunes once on the same sets (learn-from-teacher).  The
cross-encoder never retrieves; every record carries the bi-encoder
checkpoint checksum it was mined with.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .encoders import params_checksum
from .files import read_tsv, write_tsv
from .knn import build_index
from .training import (
    OBJECTIVE_CIRCLE,
    OBJECTIVE_RETRIEVAL,
    RerankBatch,
    RetrievalExample,
    TrainConfig,
    TrainResult,
    train,
)


@dataclass(frozen=True)
class HardNegativeRecord:
    """One anchor's mined negatives for one round, with model provenance."""

    anchor: str
    negatives: tuple[str, ...]
    round_index: int
    source_checkpoint: str

    def __post_init__(self) -> None:
        if self.anchor in self.negatives:
            raise ValueError(f"anchor {self.anchor!r} listed as its own negative")


def _canonical(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def mine_hard_negatives(
    model,
    anchors: Sequence[str],
    candidates: Mapping[str, str],
    copurchased: frozenset[tuple[str, str]],
    top_k: int = 100,
    normalized: Mapping[str, str] | None = None,
    round_index: int = 1,
) -> list[HardNegativeRecord]:
    """Retrieve top_k per anchor, subtract co-purchase partners and twins.

    ``candidates`` maps candidate query_id to raw text (the rich pool);
    ``copurchased`` holds canonically ordered co-purchased id pairs;
    ``normalized`` (id to normalized form) enables duplicate exclusion.
    Negatives keep retrieval rank order.  Records with empty negative
    lists are kept; training simply skips them.
    """
    if not candidates:
        raise ValueError("hard-negative mining needs a non-empty candidate set")
    index = build_index(model, candidates)
    checksum = params_checksum(model)
    anchor_list = sorted(anchors)
    probes = model.embed_many(anchor_list)
    ranked = index.knn_many(probes, top_k)
    records = []
    for anchor, hits in zip(anchor_list, ranked):
        anchor_norm = normalized.get(anchor) if normalized is not None else None
        kept = []
        for candidate, _ in hits:
            if candidate == anchor:
                continue
            if _canonical(anchor, candidate) in copurchased:
                continue
            if (
                anchor_norm is not None
                and normalized.get(candidate) == anchor_norm
            ):
                continue
            kept.append(candidate)
        records.append(
            HardNegativeRecord(anchor, tuple(kept), round_index, checksum)
        )
    return records


def negatives_by_anchor(
    records: Sequence[HardNegativeRecord],
) -> dict[str, tuple[str, ...]]:
    return {record.anchor: record.negatives for record in records}


@dataclass
class AnceData:
    """Everything the loop needs beyond the two models.

    ``candidates`` is the rich-query pool (id to raw text).  Retrieval
    examples are reused across rounds; ``rerank_positives`` maps each
    anchor to its (positive text, directed target) set for the teacher
    step.
    """

    candidates: Mapping[str, str]
    copurchased: frozenset[tuple[str, str]]
    retrieval_train: Sequence[RetrievalExample]
    retrieval_val: Sequence[RetrievalExample]
    rerank_positives: Mapping[str, tuple[tuple[str, float], ...]] = field(
        default_factory=dict
    )
    normalized: Mapping[str, str] | None = None
    top_k: int = 100

    def anchor_texts(self) -> list[str]:
        return sorted({example.anchor for example in self.retrieval_train})


@dataclass
class AnceRound:
    round_index: int
    records: list[HardNegativeRecord]
    retriever_trace: TrainResult | None = None


@dataclass
class AnceOutcome:
    rounds: list[AnceRound]
    reranker_trace: TrainResult | None = None

    def final_records(self) -> list[HardNegativeRecord]:
        return self.rounds[-1].records if self.rounds else []


def run_ance_loop(
    bi_encoder,
    cross_encoder,
    data: AnceData,
    rounds: int,
    retriever_config: TrainConfig,
    reranker_config: TrainConfig | None = None,
    on_round=None,
) -> AnceOutcome:
    """Self-learning rounds for the retriever, one teacher step for the
    re-ranker.

    Round r mines with the round-(r-1) bi-encoder, then fine-tunes it with
    the contrastive objective whose in-batch pool is augmented by each
    anchor's mined negatives.  With rounds=0 both models are returned
    untouched.  If ``cross_encoder`` is None the teacher step is skipped
    (the pipeline runs it in a later stage from the persisted sets).
    ``on_round(round_index, records, bi_encoder)`` fires after each
    round's fine-tuning, e.g. to persist per-round checkpoints.
    """
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    outcome = AnceOutcome(rounds=[])
    if rounds == 0:
        return outcome

    anchors = data.anchor_texts()
    for round_index in range(1, rounds + 1):
        records = mine_hard_negatives(
            bi_encoder,
            anchors,
            data.candidates,
            data.copurchased,
            data.top_k,
            data.normalized,
            round_index,
        )
        round_config = replace(
            retriever_config,
            objective=OBJECTIVE_RETRIEVAL,
            seed=retriever_config.seed + round_index,
        )
        trace = train(
            bi_encoder,
            data.retrieval_train,
            data.retrieval_val,
            round_config,
            excluded_pairs=data.copurchased,
            hard_negatives=negatives_by_anchor(records),
        )
        outcome.rounds.append(AnceRound(round_index, records, trace))
        if on_round is not None:
            on_round(round_index, records, bi_encoder)

    if cross_encoder is not None and data.rerank_positives:
        batches = build_rerank_batches(
            data.rerank_positives,
            outcome.final_records(),
            reranker_config.hard_negative_cap if reranker_config else 8,
        )
        config = reranker_config or TrainConfig(objective=OBJECTIVE_CIRCLE)
        config = replace(config, objective=OBJECTIVE_CIRCLE)
        outcome.reranker_trace = train(cross_encoder, batches, [], config)
    return outcome


def build_rerank_batches(
    rerank_positives: Mapping[str, tuple[tuple[str, float], ...]],
    records: Sequence[HardNegativeRecord],
    hard_negative_cap: int = 8,
) -> list[RerankBatch]:
    """Pair each anchor's positive set with its mined negatives (capped)."""
    by_anchor = negatives_by_anchor(records)
    batches = []
    for anchor in sorted(rerank_positives):
        positives = rerank_positives[anchor]
        if not positives:
            continue
        negatives = by_anchor.get(anchor, ())[:hard_negative_cap]
        batches.append(RerankBatch(anchor, tuple(positives), tuple(negatives)))
    return batches


NEGATIVES_KIND = "hard-negatives"


def save_hard_negatives(path, records: Sequence[HardNegativeRecord]) -> None:
    checksums = {record.source_checkpoint for record in records}
    rounds = {record.round_index for record in records}
    if len(checksums) > 1 or len(rounds) > 1:
        raise ValueError("one negatives file holds exactly one mining round")
    attrs = {}
    if records:
        attrs = {
            "round": records[0].round_index,
            "source_checkpoint": records[0].source_checkpoint,
        }
    rows = (
        (record.anchor, record.round_index, ",".join(record.negatives))
        for record in records
    )
    write_tsv(
        path, NEGATIVES_KIND, rows, columns=("anchor", "round", "negatives"), **attrs
    )


def load_hard_negatives(path) -> list[HardNegativeRecord]:
    attrs, rows = read_tsv(path, NEGATIVES_KIND, has_columns=True)
    checksum = attrs.get("source_checkpoint", "")
    records = []
    for row in rows:
        anchor, round_index = row[0], int(row[1])
        negatives = tuple(row[2].split(",")) if len(row) > 2 and row[2] else ()
        records.append(HardNegativeRecord(anchor, negatives, round_index, checksum))
    return records
