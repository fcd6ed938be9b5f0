"""Mention ranking over test queries and AR / ARR / H@N aggregation.

Each test triple yields a tail-direction query from (head, relation)
and a head-direction query from (tail, reversed relation).  The answer
set of a query is the gold cluster of its answer entity, and its
mention rank is the best (lowest) rank among those answers.  Ranks are
pessimistic under ties: an answer sorts below every equal-scored
non-answer.  The filtered protocol removes other known-true answers
(from all splits) before ranking; the raw protocol removes nothing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .kg_data import DatasetBundle, Triple, extract_shot_slices
from .scorer import new_session

HIT_LEVELS = (1, 10, 50, 100)


@dataclass
class QueryResult:
    entity: int
    relation: int
    direction: str  # tail | head
    mention_rank: int
    answer_cluster: int


@dataclass
class MetricsReport:
    """Aggregated metrics over one test slice; ARR and H@N are x100."""

    slice_name: str
    protocol: str
    n_queries: int
    ar: float | None
    arr: float | None
    hits: dict[int, float] | None
    ranks: list[int] = field(default_factory=list)

    def to_dict(self, ranks_path: str | None = None) -> dict:
        doc = {
            "slice": self.slice_name,
            "protocol": self.protocol,
            "n_queries": self.n_queries,
            "AR": self.ar,
            "ARR": self.arr,
            "H": None if self.hits is None else {str(k): v for k, v in self.hits.items()},
        }
        if ranks_path is not None:
            doc["per_query_ranks_path"] = ranks_path
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        hits = doc.get("H")
        return cls(
            slice_name=doc["slice"], protocol=doc["protocol"],
            n_queries=doc["n_queries"], ar=doc["AR"], arr=doc["ARR"],
            hits=None if hits is None else {int(k): v for k, v in hits.items()},
        )


def mention_rank(scores: np.ndarray, answers: set[int],
                 filter_set: set[int] | None = None) -> int:
    """Minimum 1-based rank over the answer entities.

    Entities in filter_set minus the answers are removed before ranking.
    An answer's own rank counts every non-answer candidate scoring >= it
    (pessimistic ties); answers never compete with each other.
    """
    if not answers:
        raise ValueError("mention_rank: empty answer set")
    scores = np.asarray(scores)
    competitor = np.ones(scores.shape[0], dtype=bool)
    if filter_set:
        competitor[list(filter_set - answers)] = False
    ans = sorted(answers)
    competitor[ans] = False
    comp_scores = scores[competitor]
    best = None
    for a in ans:
        rank = 1 + int((comp_scores >= scores[a]).sum())
        if best is None or rank < best:
            best = rank
    return best


def aggregate(ranks: list[int], slice_name: str, protocol: str) -> MetricsReport:
    if not ranks:
        return MetricsReport(slice_name=slice_name, protocol=protocol,
                             n_queries=0, ar=None, arr=None, hits=None)
    arr_np = np.asarray(ranks, dtype=np.float64)
    return MetricsReport(
        slice_name=slice_name, protocol=protocol, n_queries=len(ranks),
        ar=float(arr_np.mean()),
        arr=float(100.0 * (1.0 / arr_np).mean()),
        hits={n: float(100.0 * (arr_np <= n).mean()) for n in HIT_LEVELS},
        ranks=list(ranks),
    )


def _known_answers(bundle: DatasetBundle) -> dict[tuple[int, int], set[int]]:
    """All-split answer sets keyed by (entity, full relation id)."""
    known: dict[tuple[int, int], set[int]] = {}
    vocab = bundle.vocab
    for split in (bundle.train, bundle.valid, bundle.test):
        for tr in split:
            known.setdefault((tr.head, tr.rel), set()).add(tr.tail)
            known.setdefault((tr.tail, vocab.reverse_of(tr.rel)), set()).add(tr.head)
    return known


def entity_logits(store: dict[str, np.ndarray], cfg: ModelConfig,
                  bundle: DatasetBundle, e: int, r: int) -> np.ndarray:
    """Forward-only scores of (e, r) against every entity."""
    session = new_session(store, cfg, bundle.vocab)
    return session.all_entity_scores(e, r).value.copy()


def evaluate(bundle: DatasetBundle, store: dict[str, np.ndarray],
             cfg: ModelConfig, triples: list[Triple] | None = None,
             protocol: str = "raw", slice_name: str = "full") -> MetricsReport:
    """Rank both directions of each test triple and aggregate.

    Head-direction queries score (tail, reversed relation) against all
    entities; answers are the gold cluster members of the true entity.
    """
    if protocol not in ("raw", "filtered"):
        raise ValueError(f"protocol must be raw or filtered, got {protocol!r}")
    if triples is None:
        triples = bundle.test
    vocab = bundle.vocab
    n_ent = vocab.n_entities
    if store["ent_emb"].shape[0] != n_ent:
        raise ValueError("checkpoint entity table does not match the vocabulary")
    for tr in triples:
        if tr.head >= n_ent or tr.tail >= n_ent or tr.rel >= vocab.n_base_relations:
            raise ValueError(f"test triple {tr} outside the vocabulary")
    known = _known_answers(bundle) if protocol == "filtered" else {}

    ranks = []
    for tr in triples:
        for e, r, gold in ((tr.head, tr.rel, tr.tail),
                           (tr.tail, vocab.reverse_of(tr.rel), tr.head)):
            scores = entity_logits(store, cfg, bundle, e, r)
            answers = set(bundle.clusters.members_of(gold))
            filt = known.get((e, r)) if protocol == "filtered" else None
            ranks.append(mention_rank(scores, answers, filt))
    return aggregate(ranks, slice_name, protocol)


def evaluate_shot_slices(bundle: DatasetBundle, store: dict[str, np.ndarray],
                         cfg: ModelConfig, protocol: str = "raw"
                         ) -> dict[str, MetricsReport]:
    """One report per few-/zero-shot entity/relation test slice."""
    shots = extract_shot_slices(bundle)
    slices = {
        "few_shot_entity": shots.few_shot_entity_tests(),
        "few_shot_relation": shots.few_shot_relation_tests(),
        "zero_shot_entity": shots.entity_tests[0],
        "zero_shot_relation": shots.relation_tests[0],
    }
    return {name: evaluate(bundle, store, cfg, triples=triples,
                           protocol=protocol, slice_name=name)
            for name, triples in slices.items()}


def write_report(report: MetricsReport, path, ranks_path=None) -> None:
    doc = report.to_dict(str(ranks_path) if ranks_path else None)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if ranks_path:
        with open(ranks_path, "w", encoding="utf-8") as fh:
            fh.write("rank\n")
            for r in report.ranks:
                fh.write(f"{r}\n")
