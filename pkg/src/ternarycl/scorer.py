"""Joint head-relation representation and triple similarity.

The head vector is the entity table row plus its textual encoding; the
relation is represented by its textual encoding alone (a learned
relation table exists as a parameter but is not added in -- summing it
with the textual embedding hurts performance).  Both vectors are
reshaped to 2-d, stacked, convolved, projected back to the embedding
width, and the triple score is the dot product with the tail's table
row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .encoder import encode_sequence, gru_param_names, init_encoder_params
from .kg_data import Triple, Vocabulary
from .tensor_math import BoundParams, Node, Tape

SCORER_ONLY_PARAMS = ("ent_emb", "rel_emb", "conv_w", "conv_b", "lin_w", "lin_b")


def param_names() -> list[str]:
    return ["word_emb"] + gru_param_names() + list(SCORER_ONLY_PARAMS)


def init_params(cfg: ModelConfig, n_entities: int, n_relations: int,
                word_count: int, rng: np.random.Generator,
                dtype=np.float32,
                word_table: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """All model parameters: encoder, tables and the conv/linear stack.

    Entity/relation tables are uniform(-0.05, 0.05); conv and linear
    weights are fan-in-scaled uniform with zero biases.  A pretrained
    word table, when given, replaces the random one.
    """
    params = init_encoder_params(cfg, word_count, rng, dtype=dtype)
    if word_table is not None:
        if word_table.shape != (word_count, cfg.word_dim):
            raise ValueError(f"word table shape {word_table.shape} != "
                             f"({word_count}, {cfg.word_dim})")
        params["word_emb"] = np.asarray(word_table, dtype=dtype)
    k = cfg.conv_kernel
    params["ent_emb"] = rng.uniform(-0.05, 0.05, size=(n_entities, cfg.dim))
    params["rel_emb"] = rng.uniform(-0.05, 0.05, size=(n_relations, cfg.dim))
    params["conv_w"] = rng.uniform(-1, 1, size=(cfg.conv_filters, k, k)) / k
    params["conv_b"] = np.zeros(cfg.conv_filters)
    params["lin_w"] = rng.uniform(-1, 1, size=(cfg.dim, cfg.flat_conv)) / np.sqrt(cfg.flat_conv)
    params["lin_b"] = np.zeros(cfg.dim)
    return {k_: np.asarray(v, dtype=dtype) for k_, v in params.items()}


@dataclass
class TripleScore:
    value: float
    phi_node: Node
    score_node: Node


def reverse(triple: Triple, vocab: Vocabulary) -> Triple:
    """(h, r, t) -> (t, r_rev, h); only base relations can be reversed."""
    if triple.rel >= vocab.n_base_relations:
        raise ValueError(f"relation {triple.rel} is not a base relation")
    return Triple(triple.tail, vocab.reverse_of(triple.rel), triple.head)


def phi_from_vectors(tape: Tape, params: BoundParams, cfg: ModelConfig,
                     head_vec: Node, rel_vec: Node) -> Node:
    """relu(Linear(relu(Conv2d([reshape(head); reshape(rel)]))))."""
    d1, d2 = cfg.reshape_rows, cfg.reshape_cols
    stacked = tape.concat([tape.reshape(head_vec, (d1, d2)),
                           tape.reshape(rel_vec, (d1, d2))])
    feat = tape.relu(tape.conv2d(stacked, params["conv_w"], params["conv_b"]))
    flat = tape.reshape(feat, (cfg.flat_conv,))
    proj = tape.add(tape.matvec(params["lin_w"], flat), params["lin_b"])
    return tape.relu(proj)


class ScoringSession:
    """Caches per-tape text encodings, phi nodes and table rows.

    One session per tape; repeated triples in a batch share nodes so
    gradients accumulate through a single computation.
    """

    def __init__(self, tape: Tape, params: BoundParams, cfg: ModelConfig,
                 vocab: Vocabulary):
        self.tape = tape
        self.params = params
        self.cfg = cfg
        self.vocab = vocab
        self._text: dict[tuple[str, int], Node] = {}
        self._phi: dict[tuple[int, int], Node] = {}
        self._row: dict[int, Node] = {}

    def entity_text(self, e: int) -> Node:
        key = ("e", e)
        if key not in self._text:
            self._text[key] = encode_sequence(
                self.tape, self.params, self.cfg, self.vocab.entity_surfaces[e])
        return self._text[key]

    def relation_text(self, r: int) -> Node:
        key = ("r", r)
        if key not in self._text:
            self._text[key] = encode_sequence(
                self.tape, self.params, self.cfg, self.vocab.relation_surfaces[r])
        return self._text[key]

    def entity_row(self, e: int) -> Node:
        if e not in self._row:
            looked = self.tape.embedding_lookup(self.params["ent_emb"], [e])
            self._row[e] = self.tape.reshape(looked, (self.cfg.dim,))
        return self._row[e]

    def head_vector(self, e: int) -> Node:
        return self.tape.add(self.entity_row(e), self.entity_text(e))

    def phi(self, h: int, r: int) -> Node:
        if (h, r) not in self._phi:
            self._phi[(h, r)] = phi_from_vectors(
                self.tape, self.params, self.cfg,
                self.head_vector(h), self.relation_text(r))
        return self._phi[(h, r)]

    def beta(self, triple: Triple) -> TripleScore:
        """Similarity phi(h, r) . tail-table-row, as in scoring."""
        p = self.phi(triple.head, triple.rel)
        s = self.tape.dot(p, self.entity_row(triple.tail))
        return TripleScore(value=float(s.value), phi_node=p, score_node=s)

    def all_entity_scores(self, h: int, r: int) -> Node:
        """phi(h, r) against every entity table row: the logits vector."""
        return self.tape.matvec(self.params["ent_emb"], self.phi(h, r))


def new_session(store: dict[str, np.ndarray], cfg: ModelConfig,
                vocab: Vocabulary, dtype=np.float32) -> ScoringSession:
    tape = Tape(dtype=dtype)
    return ScoringSession(tape, BoundParams(tape, store), cfg, vocab)
