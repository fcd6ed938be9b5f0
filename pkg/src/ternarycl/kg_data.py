"""Open-KG triple ingestion, vocabularies, sparsity and shot slices, synonyms.

Triple files are UTF-8, one "head<TAB>relation<TAB>tail" line each;
cluster files are one cluster per line, tab-separated entity surfaces.
Gzip-compressed variants are accepted by a .gz extension.  Bundles are
built once and treated as immutable afterwards.
"""
from __future__ import annotations

import gzip
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EntityId = int
RelationId = int
WordId = int
ClusterId = int

REV_TOKEN = "<rev>"
SELF_TOKEN = "<self>"
SYN_TOKEN = "<syn>"


class ParseError(ValueError):
    pass


def tokenize(surface: str) -> list[str]:
    """Lowercase, map non-alphanumeric characters to spaces, split."""
    cleaned = "".join(c if c.isalnum() else " " for c in surface.lower())
    return cleaned.split()


@dataclass(frozen=True)
class Triple:
    head: EntityId
    rel: RelationId
    tail: EntityId


@dataclass
class Vocabulary:
    """Id spaces for entities, relations and words.

    Base relations occupy ids [0, n_base); their reverses occupy
    [n_base, 2*n_base) with reverse_of pairing them 1:1; the reserved
    self and synonym relations come last.  Every surface is a non-empty
    word-id sequence; reverse surfaces are the base surface prefixed
    with a reserved token.
    """

    entities: list[str]
    entity_to_id: dict[str, EntityId]
    base_relations: list[str]
    relation_to_id: dict[str, RelationId]
    words: list[str]
    word_to_id: dict[str, WordId]
    entity_surfaces: list[list[WordId]]
    relation_surfaces: list[list[WordId]]  # indexed by full relation id
    r_self: RelationId
    r_syn: RelationId

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_base_relations(self) -> int:
        return len(self.base_relations)

    @property
    def n_relations(self) -> int:
        """Total relation ids: base + reverse + the two reserved ones."""
        return 2 * self.n_base_relations + 2

    @property
    def word_count(self) -> int:
        return len(self.words)

    def is_reverse(self, r: RelationId) -> bool:
        return self.n_base_relations <= r < 2 * self.n_base_relations

    def reverse_of(self, r: RelationId) -> RelationId:
        b = self.n_base_relations
        if r < b:
            return r + b
        if r < 2 * b:
            return r - b
        raise ValueError(f"relation {r} is reserved and has no reverse")

    def relation_name(self, r: RelationId) -> str:
        b = self.n_base_relations
        if r < b:
            return self.base_relations[r]
        if r < 2 * b:
            return REV_TOKEN + " " + self.base_relations[r - b]
        return SELF_TOKEN if r == self.r_self else SYN_TOKEN


@dataclass
class ClusterTable:
    """Gold entity clusters: a partition with singletons allowed."""

    cluster_of: list[ClusterId]
    members: list[list[EntityId]]

    @property
    def n_clusters(self) -> int:
        return len(self.members)

    def members_of(self, e: EntityId) -> list[EntityId]:
        return self.members[self.cluster_of[e]]


@dataclass
class LoadStats:
    duplicates: dict[str, int] = field(default_factory=dict)


@dataclass
class DatasetBundle:
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    vocab: Vocabulary
    clusters: ClusterTable
    answer_index: dict[tuple[EntityId, RelationId], set[EntityId]]
    head_index: dict[tuple[EntityId, RelationId], set[EntityId]]
    rel_index: dict[tuple[EntityId, EntityId], set[RelationId]]
    stats: LoadStats = field(default_factory=LoadStats)

    def true_tails(self, e: EntityId, r: RelationId) -> set[EntityId]:
        """Train answers for (e, r); reverse relation ids look up heads."""
        if self.vocab.is_reverse(r):
            return self.head_index.get((e, self.vocab.reverse_of(r)), set())
        return self.answer_index.get((e, r), set())

    def true_relations(self, h: EntityId, t: EntityId) -> set[RelationId]:
        """Relations linking h to t in the reverse-augmented train graph."""
        out = set(self.rel_index.get((h, t), ()))
        for r in self.rel_index.get((t, h), ()):
            out.add(self.vocab.reverse_of(r))
        return out


def _open_text(path: Path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def _read_triple_lines(path: Path) -> list[tuple[str, str, str]]:
    rows = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or any(not p.strip() for p in parts):
                raise ParseError(
                    f"{path}:{lineno}: expected three tab-separated non-empty "
                    f"fields, got {line!r}"
                )
            rows.append((parts[0].strip(), parts[1].strip(), parts[2].strip()))
    return rows


def _build_indexes(train: list[Triple]):
    answer_index: dict[tuple[int, int], set[int]] = {}
    head_index: dict[tuple[int, int], set[int]] = {}
    rel_index: dict[tuple[int, int], set[int]] = {}
    for tr in train:
        answer_index.setdefault((tr.head, tr.rel), set()).add(tr.tail)
        head_index.setdefault((tr.tail, tr.rel), set()).add(tr.head)
        rel_index.setdefault((tr.head, tr.tail), set()).add(tr.rel)
    return answer_index, head_index, rel_index


def load_dataset(train_path, valid_path, test_path, cluster_path) -> DatasetBundle:
    """Build an immutable bundle from the four input files.

    Vocabulary order is first appearance over train, then valid, then
    test; a reverse relation id is allocated for every base relation,
    followed by the reserved self and synonym relations.
    """
    paths = {name: Path(p) for name, p in
             [("train", train_path), ("valid", valid_path), ("test", test_path)]}
    raw = {name: _read_triple_lines(p) for name, p in paths.items()}

    words: list[str] = []
    word_to_id: dict[str, int] = {}

    def word_ids(tokens: list[str]) -> list[int]:
        out = []
        for tok in tokens:
            if tok not in word_to_id:
                word_to_id[tok] = len(words)
                words.append(tok)
            out.append(word_to_id[tok])
        return out

    rev_w, self_w, syn_w = word_ids([REV_TOKEN, SELF_TOKEN, SYN_TOKEN])

    entities: list[str] = []
    entity_to_id: dict[str, int] = {}
    entity_surfaces: list[list[int]] = []
    base_relations: list[str] = []
    relation_to_id: dict[str, int] = {}
    base_surfaces: list[list[int]] = []

    def intern_entity(surface: str) -> int:
        if surface not in entity_to_id:
            toks = tokenize(surface)
            if not toks:
                raise ParseError(f"entity surface {surface!r} has no tokens")
            entity_to_id[surface] = len(entities)
            entities.append(surface)
            entity_surfaces.append(word_ids(toks))
        return entity_to_id[surface]

    def intern_relation(surface: str) -> int:
        if surface not in relation_to_id:
            toks = tokenize(surface)
            if not toks:
                raise ParseError(f"relation surface {surface!r} has no tokens")
            relation_to_id[surface] = len(base_relations)
            base_relations.append(surface)
            base_surfaces.append(word_ids(toks))
        return relation_to_id[surface]

    splits: dict[str, list[Triple]] = {}
    stats = LoadStats(duplicates={})
    for name in ("train", "valid", "test"):
        seen: set[tuple[int, int, int]] = set()
        triples = []
        dups = 0
        for h, r, t in raw[name]:
            key = (intern_entity(h), intern_relation(r), intern_entity(t))
            if key in seen:
                dups += 1
                continue
            seen.add(key)
            triples.append(Triple(*key))
        if dups:
            log.warning("%s: dropped %d duplicate triples", name, dups)
        stats.duplicates[name] = dups
        splits[name] = triples

    train_set = {(tr.head, tr.rel, tr.tail) for tr in splits["train"]}
    for name in ("valid", "test"):
        for tr in splits[name]:
            if (tr.head, tr.rel, tr.tail) in train_set:
                raise ParseError(f"{name} triple {tr} also appears in train")

    n_base = len(base_relations)
    relation_surfaces = list(base_surfaces)
    relation_surfaces += [[rev_w] + s for s in base_surfaces]  # reverses
    relation_surfaces.append([self_w])
    relation_surfaces.append([syn_w])
    vocab = Vocabulary(
        entities=entities, entity_to_id=entity_to_id,
        base_relations=base_relations, relation_to_id=relation_to_id,
        words=words, word_to_id=word_to_id,
        entity_surfaces=entity_surfaces, relation_surfaces=relation_surfaces,
        r_self=2 * n_base, r_syn=2 * n_base + 1,
    )

    clusters = _load_clusters(Path(cluster_path), vocab)
    answer_index, head_index, rel_index = _build_indexes(splits["train"])
    return DatasetBundle(
        train=splits["train"], valid=splits["valid"], test=splits["test"],
        vocab=vocab, clusters=clusters,
        answer_index=answer_index, head_index=head_index, rel_index=rel_index,
        stats=stats,
    )


def _load_clusters(path: Path, vocab: Vocabulary) -> ClusterTable:
    cluster_of = [-1] * vocab.n_entities
    members: list[list[int]] = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            ids = []
            for surface in line.split("\t"):
                surface = surface.strip()
                if not surface:
                    raise ParseError(f"{path}:{lineno}: empty entity surface in cluster")
                if surface not in vocab.entity_to_id:
                    raise ParseError(f"{path}:{lineno}: unknown entity {surface!r}")
                ids.append(vocab.entity_to_id[surface])
            cid = len(members)
            for e in ids:
                if cluster_of[e] != -1:
                    raise ParseError(f"{path}:{lineno}: entity {vocab.entities[e]!r} "
                                     f"listed in two clusters")
                cluster_of[e] = cid
            members.append(ids)
    for e in range(vocab.n_entities):  # uncovered entities become singletons
        if cluster_of[e] == -1:
            cluster_of[e] = len(members)
            members.append([e])
    return ClusterTable(cluster_of=cluster_of, members=members)


def slice_sparsity(bundle: DatasetBundle, keep_fraction: float, seed: int) -> DatasetBundle:
    """Keep a uniform random subset of round(keep_fraction * |train|) triples.

    Validation, test, vocabulary and clusters are shared with the source
    bundle; the answer indexes are rebuilt for the kept subset.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n = len(bundle.train)
    k = int(math.floor(keep_fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    train = [bundle.train[i] for i in idx]
    answer_index, head_index, rel_index = _build_indexes(train)
    return DatasetBundle(
        train=train, valid=bundle.valid, test=bundle.test,
        vocab=bundle.vocab, clusters=bundle.clusters,
        answer_index=answer_index, head_index=head_index, rel_index=rel_index,
        stats=bundle.stats,
    )


@dataclass
class ShotSlices:
    """Per-k entity/relation sets (k = 0..3 train links) and their test triples."""

    entity_shots: dict[int, set[EntityId]]
    relation_shots: dict[int, set[RelationId]]
    entity_tests: dict[int, list[Triple]]
    relation_tests: dict[int, list[Triple]]

    def few_shot_entities(self) -> set[EntityId]:
        return self.entity_shots[1] | self.entity_shots[2] | self.entity_shots[3]

    def few_shot_relations(self) -> set[RelationId]:
        return self.relation_shots[1] | self.relation_shots[2] | self.relation_shots[3]

    def few_shot_entity_tests(self) -> list[Triple]:
        return _dedup(self.entity_tests[1] + self.entity_tests[2] + self.entity_tests[3])

    def few_shot_relation_tests(self) -> list[Triple]:
        return _dedup(self.relation_tests[1] + self.relation_tests[2] + self.relation_tests[3])


def _dedup(triples: list[Triple]) -> list[Triple]:
    return list(dict.fromkeys(triples))


def extract_shot_slices(bundle: DatasetBundle) -> ShotSlices:
    """Classify entities/relations by their train-link count.

    Degree is computed on base train triples only (reverse triples are an
    augmentation, not extra links), counting head and tail occurrences.
    The test slice for class k holds the original test triples containing
    at least one class-k entity (relation).
    """
    ent_deg: Counter = Counter()
    rel_deg: Counter = Counter()
    for tr in bundle.train:
        ent_deg[tr.head] += 1
        ent_deg[tr.tail] += 1
        rel_deg[tr.rel] += 1

    entity_shots = {k: set() for k in range(4)}
    for e in range(bundle.vocab.n_entities):
        d = ent_deg.get(e, 0)
        if d <= 3:
            entity_shots[d].add(e)
    relation_shots = {k: set() for k in range(4)}
    for r in range(bundle.vocab.n_base_relations):
        d = rel_deg.get(r, 0)
        if d <= 3:
            relation_shots[d].add(r)

    entity_tests = {
        k: [t for t in bundle.test if t.head in s or t.tail in s]
        for k, s in entity_shots.items()
    }
    relation_tests = {
        k: [t for t in bundle.test if t.rel in s]
        for k, s in relation_shots.items()
    }
    return ShotSlices(entity_shots, relation_shots, entity_tests, relation_tests)


@dataclass
class SynonymTable:
    """Symmetric, irreflexive entity synonym sets."""

    syn_of: dict[EntityId, set[EntityId]]

    def validate(self) -> None:
        for a, peers in self.syn_of.items():
            if a in peers:
                raise ValueError(f"synonym table is reflexive at entity {a}")
            for b in peers:
                if a not in self.syn_of.get(b, ()):
                    raise ValueError(f"synonym table not symmetric for ({a}, {b})")

    def pairs(self):
        """All ordered (a, b) pairs, a-sorted then b-sorted."""
        for a in sorted(self.syn_of):
            for b in sorted(self.syn_of[a]):
                yield a, b

    def n_pairs(self) -> int:
        return sum(len(v) for v in self.syn_of.values())


def idf_token_overlap(tokens_a: set[int], tokens_b: set[int],
                      weight: dict[int, float]) -> float:
    shared = tokens_a & tokens_b
    if not shared:
        return 0.0
    num = sum(weight[w] for w in shared)
    den = max(sum(weight[w] for w in tokens_a), sum(weight[w] for w in tokens_b))
    return num / den


def mine_synonyms(bundle: DatasetBundle, embeddings: np.ndarray | None = None,
                  idf_threshold: float = 0.8,
                  sem_threshold: float | None = None) -> SynonymTable:
    """Mine synonym pairs by IDF-weighted token overlap and, optionally,
    cosine similarity of textual entity embeddings.

    A pair (a, b) is included when its overlap score reaches
    idf_threshold, or when embeddings are supplied and their cosine
    reaches sem_threshold.  Token weights are 1/log(1 + df(w)) with df
    the number of entity surfaces containing w, and scores are
    normalized by the heavier of the two surfaces.
    """
    if not 0.0 < idf_threshold <= 1.0:
        raise ValueError(f"idf_threshold must be in (0, 1], got {idf_threshold}")
    if sem_threshold is not None and embeddings is None:
        raise ValueError("sem_threshold given without embeddings")

    vocab = bundle.vocab
    token_sets = [set(s) for s in vocab.entity_surfaces]
    df: Counter = Counter()
    for toks in token_sets:
        df.update(toks)
    weight = {w: 1.0 / math.log(1.0 + n) for w, n in df.items()}

    postings: dict[int, list[int]] = {}
    for e, toks in enumerate(token_sets):
        for w in toks:
            postings.setdefault(w, []).append(e)

    syn_of: dict[int, set[int]] = {}

    def link(a: int, b: int) -> None:
        syn_of.setdefault(a, set()).add(b)
        syn_of.setdefault(b, set()).add(a)

    for a in range(vocab.n_entities):
        candidates: set[int] = set()
        for w in token_sets[a]:
            candidates.update(e for e in postings[w] if e > a)
        for b in candidates:
            if idf_token_overlap(token_sets[a], token_sets[b], weight) >= idf_threshold:
                link(a, b)

    if sem_threshold is not None:
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.shape[0] != vocab.n_entities:
            raise ValueError(
                f"embeddings rows ({emb.shape[0]}) != entity count ({vocab.n_entities})"
            )
        norms = np.linalg.norm(emb, axis=1)
        norms[norms == 0] = 1.0
        unit = emb / norms[:, None]
        chunk = 1024
        for lo in range(0, vocab.n_entities, chunk):
            sims = unit[lo:lo + chunk] @ unit.T
            rows, cols = np.nonzero(sims >= sem_threshold)
            for i, b in zip(rows, cols):
                a = lo + int(i)
                if a < b:
                    link(a, int(b))

    table = SynonymTable(syn_of=syn_of)
    table.validate()
    return table


# -- serialization ------------------------------------------------------------


def save_bundle(bundle: DatasetBundle, out_dir, manifest_extra: dict | None = None) -> None:
    """Write the bundle back out as triple/cluster files plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = bundle.vocab
    for name, triples in (("train", bundle.train), ("valid", bundle.valid),
                          ("test", bundle.test)):
        with open(out / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for tr in triples:
                fh.write(f"{vocab.entities[tr.head]}\t"
                         f"{vocab.base_relations[tr.rel]}\t"
                         f"{vocab.entities[tr.tail]}\n")
    with open(out / "clusters.tsv", "w", encoding="utf-8") as fh:
        for group in bundle.clusters.members:
            if len(group) > 1:
                fh.write("\t".join(vocab.entities[e] for e in group) + "\n")
    manifest = {
        "counts": {
            "entities": vocab.n_entities,
            "base_relations": vocab.n_base_relations,
            "clusters": bundle.clusters.n_clusters,
            "train": len(bundle.train),
            "valid": len(bundle.valid),
            "test": len(bundle.test),
        },
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_bundle_dir(data_dir) -> DatasetBundle:
    d = Path(data_dir)
    return load_dataset(d / "train.tsv", d / "valid.tsv", d / "test.tsv",
                        d / "clusters.tsv")


def save_synonyms(table: SynonymTable, vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in table.pairs():
            if a < b:
                fh.write(f"{vocab.entities[a]}\t{vocab.entities[b]}\n")


def load_synonyms(path, vocab: Vocabulary) -> SynonymTable:
    syn_of: dict[int, set[int]] = {}
    with _open_text(Path(path)) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected two fields")
            try:
                a, b = (vocab.entity_to_id[p] for p in parts)
            except KeyError as exc:
                raise ParseError(f"{path}:{lineno}: unknown entity {exc}") from exc
            syn_of.setdefault(a, set()).add(b)
            syn_of.setdefault(b, set()).add(a)
    table = SynonymTable(syn_of=syn_of)
    table.validate()
    return table
