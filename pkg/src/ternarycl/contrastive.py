"""Positive patterns, negative sampling and the contrastive losses.

A pattern anchors one training instance: ordinary patterns group every
train tail sharing the anchor's (head, relation) and every train
relation sharing its (head, tail); self patterns pair an entity's
composed representation with its own table row under a reserved
relation; synonym patterns link surface variants under another reserved
relation.  Negative entities and relations are drawn uniformly without
replacement from the complements of the true-answer sets.

The analytic gradient oracles evaluate the closed forms of the
single-positive losses directly from forward values (plus, where a
Jacobian of the head-relation map is required, from finite differences
of the forward), so they stay independent of the gradient tape they
are used to check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, TrainConfig
from .kg_data import DatasetBundle, SynonymTable, Triple
from .scorer import ScoringSession, phi_from_vectors, reverse
from .tensor_math import BoundParams, Node, Tape


# -- patterns ------------------------------------------------------------------


@dataclass
class Pattern:
    kind: str  # ordinary | self | synonym
    anchor: Triple
    positives_e: list[Triple]  # share the anchor's (head, rel)
    positives_r: list[Triple]  # share the anchor's (head, tail)
    ent_answers: set[int]      # excluded from negative-entity candidates
    rel_answers: set[int]      # excluded from negative-relation candidates
    want_ent_negs: bool = True
    want_rel_negs: bool = True


@dataclass
class ContrastiveBatch:
    """One positive pattern with its sampled negative sets."""

    anchor: Triple
    positives_e: list[Triple]
    positives_r: list[Triple]
    neg_entities: list[int]
    neg_relations: list[int]
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    def positives(self) -> list[Triple]:
        """p_e union p_r, first occurrence kept."""
        return list(dict.fromkeys(self.positives_e + self.positives_r))


def augmented_triples(bundle: DatasetBundle) -> list[Triple]:
    """Train triples plus their reversed counterparts."""
    out = list(bundle.train)
    out += [reverse(t, bundle.vocab) for t in bundle.train]
    return out


def make_ordinary_patterns(bundle: DatasetBundle, use_ce: bool = True,
                           use_cr: bool = True) -> list[Pattern]:
    vocab = bundle.vocab
    reserved = {vocab.r_self, vocab.r_syn}
    patterns = []
    for anchor in augmented_triples(bundle):
        tails = sorted(bundle.true_tails(anchor.head, anchor.rel))
        rels = sorted(bundle.true_relations(anchor.head, anchor.tail))
        patterns.append(Pattern(
            kind="ordinary", anchor=anchor,
            positives_e=[Triple(anchor.head, anchor.rel, t) for t in tails] if use_ce else [],
            positives_r=[Triple(anchor.head, r, anchor.tail) for r in rels] if use_cr else [],
            ent_answers=set(tails),
            rel_answers=set(rels) | reserved,
            want_ent_negs=use_ce,
            want_rel_negs=use_cr,
        ))
    return patterns


def make_self_patterns(bundle: DatasetBundle) -> list[Pattern]:
    """One pattern per entity: (h, self-relation, h).

    The head side runs through the composed representation while the
    tail side is the bare table row, so even a disconnected entity gets
    a contrastive signal of its own.  Negative entities come from all
    entities but h; negative relations from all relations but the self
    relation itself.
    """
    vocab = bundle.vocab
    patterns = []
    for h in range(vocab.n_entities):
        anchor = Triple(h, vocab.r_self, h)
        patterns.append(Pattern(
            kind="self", anchor=anchor,
            positives_e=[anchor], positives_r=[],
            ent_answers={h}, rel_answers={vocab.r_self},
        ))
    return patterns


def make_synonym_patterns(bundle: DatasetBundle, syn_table: SynonymTable) -> list[Pattern]:
    """One pattern per ordered synonym pair: (a, syn-relation, b)."""
    vocab = bundle.vocab
    patterns = []
    for a, b in syn_table.pairs():
        anchor = Triple(a, vocab.r_syn, b)
        patterns.append(Pattern(
            kind="synonym", anchor=anchor,
            positives_e=[anchor], positives_r=[],
            ent_answers=set(syn_table.syn_of[a]) | {a},
            rel_answers=bundle.true_relations(a, b) | {vocab.r_syn},
        ))
    return patterns


def build_patterns(bundle: DatasetBundle, syn_table: SynonymTable | None,
                   cfg: TrainConfig) -> list[Pattern]:
    patterns: list[Pattern] = []
    if cfg.enabled("CE") or cfg.enabled("CR"):
        patterns += make_ordinary_patterns(bundle, cfg.enabled("CE"), cfg.enabled("CR"))
    if cfg.enabled("CSF"):
        patterns += make_self_patterns(bundle)
    if cfg.enabled("CSY") and syn_table is not None:
        patterns += make_synonym_patterns(bundle, syn_table)
    return patterns


# -- negative sampling ---------------------------------------------------------


@dataclass
class NegativeSample:
    entities: list[int]
    relations: list[int]
    entity_shortfall: int = 0
    relation_shortfall: int = 0


def _sample_complement(n_total: int, excluded: set[int], k: int,
                       rng: np.random.Generator) -> tuple[list[int], int]:
    """k uniform draws without replacement from range(n_total) - excluded."""
    if k <= 0:
        return [], 0
    n_cand = n_total - len(excluded)
    if n_cand <= 0:
        raise ValueError("candidate list is empty but negatives were requested")
    if n_cand <= k:
        return [i for i in range(n_total) if i not in excluded], k - n_cand
    chosen: list[int] = []
    seen = set(excluded)
    while len(chosen) < k:
        for d in rng.integers(0, n_total, size=2 * (k - len(chosen)) + 8):
            d = int(d)
            if d in seen:
                continue
            seen.add(d)
            chosen.append(d)
            if len(chosen) == k:
                break
    return chosen, 0


def sample_negatives(bundle: DatasetBundle, pattern: Pattern, n_ent: int,
                     n_rel: int, rng: np.random.Generator) -> NegativeSample:
    """Draw the negative entity and relation sets for one pattern.

    When a candidate pool is smaller than requested, the full pool is
    returned and the shortfall recorded.
    """
    vocab = bundle.vocab
    ents, ent_short = _sample_complement(
        vocab.n_entities, pattern.ent_answers,
        n_ent if pattern.want_ent_negs else 0, rng)
    rels, rel_short = _sample_complement(
        vocab.n_relations, pattern.rel_answers,
        n_rel if pattern.want_rel_negs else 0, rng)
    return NegativeSample(ents, rels, ent_short, rel_short)


def make_batch(bundle: DatasetBundle, pattern: Pattern, n_ent: int, n_rel: int,
               tau: float, rng: np.random.Generator) -> ContrastiveBatch:
    neg = sample_negatives(bundle, pattern, n_ent, n_rel, rng)
    batch = ContrastiveBatch(
        anchor=pattern.anchor,
        positives_e=list(pattern.positives_e),
        positives_r=list(pattern.positives_r),
        neg_entities=neg.entities,
        neg_relations=neg.relations,
        tau=tau,
    )
    validate_batch(batch, pattern)
    return batch


def validate_batch(batch: ContrastiveBatch, pattern: Pattern) -> None:
    bad_e = set(batch.neg_entities) & pattern.ent_answers
    if bad_e:
        raise AssertionError(f"negative entities overlap true answers: {sorted(bad_e)}")
    bad_r = set(batch.neg_relations) & pattern.rel_answers
    if bad_r:
        raise AssertionError(f"negative relations overlap true relations: {sorted(bad_r)}")


# -- losses --------------------------------------------------------------------


def _contrast(tape: Tape, scores: Node, tau: float) -> Node:
    """-log softmax probability of entry 0 among all entries of `scores`."""
    logits = tape.reshape(tape.scale(scores, 1.0 / tau), (1, scores.shape[0]))
    return tape.sum(tape.softmax_cross_rows(logits, [0]))


def loss_entity(session: ScoringSession, batch: ContrastiveBatch) -> Node:
    """Single-positive contrast of the true tail against negative tails."""
    if len(batch.positives_e) != 1:
        raise ValueError("loss_entity needs exactly one entity positive")
    (pos,) = batch.positives_e
    tape = session.tape
    phi = session.phi(pos.head, pos.rel)
    emb = tape.embedding_lookup(session.params["ent_emb"],
                                [pos.tail] + list(batch.neg_entities))
    return _contrast(tape, tape.matvec(emb, phi), batch.tau)


def loss_relation(session: ScoringSession, batch: ContrastiveBatch) -> Node:
    """Single-positive contrast of the true relation against negatives."""
    if len(batch.positives_r) != 1:
        raise ValueError("loss_relation needs exactly one relation positive")
    (pos,) = batch.positives_r
    tape = session.tape
    t_row = session.entity_row(pos.tail)
    scores = [tape.dot(session.phi(pos.head, r), t_row)
              for r in [pos.rel] + list(batch.neg_relations)]
    return _contrast(tape, tape.concat(scores), batch.tau)


def _batch_scores(session: ScoringSession, batch: ContrastiveBatch):
    """Score nodes for the deduplicated positives and merged negatives."""
    tape = session.tape
    pos_nodes = [session.beta(tr).score_node for tr in batch.positives()]
    neg_nodes: list[Node] = []
    if batch.neg_entities:
        phi = session.phi(batch.anchor.head, batch.anchor.rel)
        emb = tape.embedding_lookup(session.params["ent_emb"], batch.neg_entities)
        neg_nodes.append(tape.matvec(emb, phi))
    if batch.neg_relations:
        t_row = session.entity_row(batch.anchor.tail)
        neg_nodes += [tape.dot(session.phi(batch.anchor.head, r), t_row)
                      for r in batch.neg_relations]
    neg_vec = tape.concat(neg_nodes) if neg_nodes else None
    return pos_nodes, neg_vec


def loss_fusion(session: ScoringSession, batch: ContrastiveBatch,
                variant: str) -> Node:
    """1-to-N contrast of all positives against the merged negative pool.

    Variant A normalizes the summed positive mass against everything in
    one softmax; variant B contrasts each positive separately against
    the shared negatives and accumulates the scores.
    """
    if variant not in ("A", "B"):
        raise ValueError(f"fusion variant must be A or B, got {variant!r}")
    pos_nodes, neg_vec = _batch_scores(session, batch)
    if not pos_nodes:
        raise ValueError("fusion batch has no positives")
    tape = session.tape
    inv_tau = 1.0 / batch.tau

    if variant == "A":
        pos_vec = tape.scale(tape.concat(pos_nodes), inv_tau)
        full = pos_vec if neg_vec is None else \
            tape.concat([pos_vec, tape.scale(neg_vec, inv_tau)])
        return tape.add(tape.affine(tape.logsumexp(pos_vec), mul=-1.0),
                        tape.logsumexp(full))

    if neg_vec is None:
        rows = [tape.reshape(tape.scale(p, inv_tau), (1, 1)) for p in pos_nodes]
    else:
        neg_logits = tape.scale(neg_vec, inv_tau)
        rows = [tape.reshape(tape.concat([tape.scale(p, inv_tau), neg_logits]),
                             (1, 1 + len(batch.neg_entities) + len(batch.neg_relations)))
                for p in pos_nodes]
    stacked = rows[0] if len(rows) == 1 else tape.concat(rows)
    return tape.sum(tape.softmax_cross_rows(stacked, [0] * len(rows)))


# -- analytic gradient oracles ---------------------------------------------------


@dataclass
class GradOracleResult:
    """Closed-form gradients of a single-positive contrastive score."""

    normalizer: float
    d_pos: np.ndarray                      # wrt t+ (entity) or t (relation)
    d_neg: list[np.ndarray] = field(default_factory=list)
    d_head: np.ndarray | None = None       # wrt the head input vector of phi
    d_rel_pos: np.ndarray | None = None    # wrt the positive relation vector
    d_rel_neg: list[np.ndarray] | None = None


def _exp_weights(betas: np.ndarray, tau: float):
    """exp(beta/tau) with a stability shift; returns (weights, normalizer)."""
    z = betas / tau
    m = z.max()
    w = np.exp(z - m)
    return w, float(w.sum() * math.exp(m)) if m < 700 else float("inf"), w / w.sum()


def entity_gradient_oracle(phi_value: np.ndarray, t_pos: np.ndarray,
                           t_negs: list[np.ndarray], tau: float,
                           head_jacobian: np.ndarray | None = None) -> GradOracleResult:
    """Gradients of the entity contrast wrt t+, each t-, and optionally
    the head input (via a supplied Jacobian of phi wrt that input)."""
    betas = np.array([phi_value @ t_pos] + [phi_value @ t for t in t_negs])
    _, a_norm, ratios = _exp_weights(betas, tau)
    neg_ratio_sum = ratios[1:].sum()
    d_pos = -(phi_value / tau) * neg_ratio_sum
    d_negs = [(phi_value / tau) * ratios[1 + j] for j in range(len(t_negs))]
    d_head = None
    if head_jacobian is not None:
        d_phi = -(1.0 / tau) * (neg_ratio_sum * t_pos
                                - sum(ratios[1 + j] * t for j, t in enumerate(t_negs)))
        d_head = head_jacobian.T @ d_phi
    return GradOracleResult(normalizer=a_norm, d_pos=d_pos, d_neg=d_negs, d_head=d_head)


def relation_gradient_oracle(phi_pos: np.ndarray, phi_negs: list[np.ndarray],
                             t_vec: np.ndarray, tau: float,
                             rel_pos_jacobian: np.ndarray | None = None,
                             rel_neg_jacobians: list[np.ndarray] | None = None
                             ) -> GradOracleResult:
    """Gradients of the relation contrast wrt the tail, and optionally the
    positive/negative relation input vectors (via supplied Jacobians)."""
    betas = np.array([phi_pos @ t_vec] + [p @ t_vec for p in phi_negs])
    _, b_norm, ratios = _exp_weights(betas, tau)
    neg_ratio_sum = ratios[1:].sum()
    d_tail = -(1.0 / tau) * (neg_ratio_sum * phi_pos
                             - sum(ratios[1 + j] * p for j, p in enumerate(phi_negs)))
    d_rel_pos = None
    if rel_pos_jacobian is not None:
        d_rel_pos = -(rel_pos_jacobian.T @ t_vec) * neg_ratio_sum / tau
    d_rel_neg = None
    if rel_neg_jacobians is not None:
        d_rel_neg = [(j_mat.T @ t_vec) * ratios[1 + j] / tau
                     for j, j_mat in enumerate(rel_neg_jacobians)]
    return GradOracleResult(normalizer=b_norm, d_pos=d_tail,
                            d_rel_pos=d_rel_pos, d_rel_neg=d_rel_neg)


def analytic_gradients(store: dict[str, np.ndarray], cfg: ModelConfig, vocab,
                       batch: ContrastiveBatch, with_jacobians: bool = True
                       ) -> GradOracleResult:
    """Evaluate the closed-form gradients for a single-positive batch.

    Entity batches (one entry in positives_e) yield gradients wrt the
    positive and negative tail rows plus, when with_jacobians, the head
    input vector; relation batches (one entry in positives_r) yield the
    tail-row gradient plus the positive/negative relation-vector terms.
    All ingredients come from forward evaluations only.
    """
    from .scorer import new_session  # local import to avoid a cycle

    session = new_session(store, cfg, vocab, dtype=np.float64)
    if len(batch.positives_e) == 1 and not batch.positives_r:
        (pos,) = batch.positives_e
        phi_val = session.phi(pos.head, pos.rel).value
        t_pos = store["ent_emb"][pos.tail].astype(np.float64)
        t_negs = [store["ent_emb"][j].astype(np.float64) for j in batch.neg_entities]
        jac = None
        if with_jacobians:
            jac = phi_jacobian_fd(store, cfg,
                                  session.head_vector(pos.head).value,
                                  session.relation_text(pos.rel).value, "head")
        return entity_gradient_oracle(phi_val, t_pos, t_negs, batch.tau,
                                      head_jacobian=jac)
    if len(batch.positives_r) == 1 and not batch.positives_e:
        (pos,) = batch.positives_r
        head_val = session.head_vector(pos.head).value
        phi_pos = session.phi(pos.head, pos.rel).value
        phi_negs = [session.phi(pos.head, r).value for r in batch.neg_relations]
        t_vec = store["ent_emb"][pos.tail].astype(np.float64)
        jac_pos = jac_negs = None
        if with_jacobians:
            jac_pos = phi_jacobian_fd(store, cfg, head_val,
                                      session.relation_text(pos.rel).value, "rel")
            jac_negs = [phi_jacobian_fd(store, cfg, head_val,
                                        session.relation_text(r).value, "rel")
                        for r in batch.neg_relations]
        return relation_gradient_oracle(phi_pos, phi_negs, t_vec, batch.tau,
                                        rel_pos_jacobian=jac_pos,
                                        rel_neg_jacobians=jac_negs)
    raise ValueError("analytic_gradients needs a single-positive entity or "
                     "relation batch")


def phi_jacobian_fd(store: dict[str, np.ndarray], cfg: ModelConfig,
                    head_vec: np.ndarray, rel_vec: np.ndarray, wrt: str,
                    eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the head-relation map wrt one input.

    Uses forward evaluations only, so oracle checks built on it do not
    depend on the tape's reverse pass.
    """
    base = head_vec if wrt == "head" else rel_vec

    def forward(vec):
        tape = Tape(dtype=np.float64)
        params = BoundParams(tape, store)
        h = tape.constant(head_vec if wrt != "head" else vec)
        r = tape.constant(rel_vec if wrt != "rel" else vec)
        return phi_from_vectors(tape, params, cfg, h, r).value

    dim_out = cfg.dim
    jac = np.zeros((dim_out, base.size))
    for i in range(base.size):
        bump = np.zeros_like(base)
        bump[i] = eps
        jac[:, i] = (forward(base + bump) - forward(base - bump)) / (2 * eps)
    return jac
