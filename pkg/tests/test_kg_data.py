import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ternarycl import kg_data
from ternarycl.kg_data import (
    ParseError,
    SynonymTable,
    Triple,
    extract_shot_slices,
    idf_token_overlap,
    load_dataset,
    mine_synonyms,
    slice_sparsity,
    tokenize,
)

from conftest import fixture_paths


def write_kg(tmp_path, train, valid="", test="", clusters=""):
    files = {}
    for name, content in (("train", train), ("valid", valid), ("test", test),
                          ("clusters", clusters)):
        p = tmp_path / f"{name}.tsv"
        p.write_text(content, encoding="utf-8")
        files[name] = p
    return files["train"], files["valid"], files["test"], files["clusters"]


# -- loading -------------------------------------------------------------------


def test_minimal_single_triple(tmp_path):
    b = load_dataset(*write_kg(tmp_path, "a\tlikes\tb\n"))
    assert b.vocab.n_entities == 2
    assert b.vocab.n_base_relations == 1
    assert b.vocab.n_relations == 4  # base + reverse + self + syn
    assert b.train == [Triple(0, 0, 1)]


def test_duplicate_train_line_deduped_with_counter(tmp_path):
    b = load_dataset(*write_kg(tmp_path, "a\tlikes\tb\na\tlikes\tb\n"))
    assert len(b.train) == 1
    assert b.stats.duplicates["train"] == 1


def test_malformed_line_reports_line_number(tmp_path):
    with pytest.raises(ParseError, match=r"train\.tsv:2"):
        load_dataset(*write_kg(tmp_path, "a\tlikes\tb\nbroken line\n"))


def test_empty_field_rejected(tmp_path):
    with pytest.raises(ParseError, match="three tab-separated non-empty"):
        load_dataset(*write_kg(tmp_path, "a\t\tb\n"))


def test_surface_without_tokens_rejected(tmp_path):
    with pytest.raises(ParseError, match="no tokens"):
        load_dataset(*write_kg(tmp_path, "%%%\tlikes\tb\n"))


def test_cluster_with_unknown_entity_rejected(tmp_path):
    with pytest.raises(ParseError, match="unknown entity"):
        load_dataset(*write_kg(tmp_path, "a\tlikes\tb\n", clusters="a\tmystery\n"))


def test_valid_triple_duplicated_in_train_rejected(tmp_path):
    with pytest.raises(ParseError, match="also appears in train"):
        load_dataset(*write_kg(tmp_path, "a\tlikes\tb\n", valid="a\tlikes\tb\n"))


def test_gzip_accepted_by_extension(tmp_path):
    train = tmp_path / "train.tsv.gz"
    with gzip.open(train, "wt", encoding="utf-8") as fh:
        fh.write("a\tlikes\tb\n")
    for name in ("valid", "test", "clusters"):
        (tmp_path / f"{name}.tsv").write_text("")
    b = load_dataset(train, tmp_path / "valid.tsv", tmp_path / "test.tsv",
                     tmp_path / "clusters.tsv")
    assert len(b.train) == 1


def test_tokenize_lowercases_and_strips_punctuation():
    assert tokenize("NBC-TV") == ["nbc", "tv"]
    assert tokenize("  New   York. ") == ["new", "york"]
    assert tokenize("c++") == ["c"]


def test_reverse_relation_layout(tiny_bundle):
    v = tiny_bundle.vocab
    b = v.n_base_relations
    for r in range(b):
        assert v.reverse_of(r) == r + b
        assert v.reverse_of(r + b) == r
        assert v.is_reverse(r + b) and not v.is_reverse(r)
    assert v.r_self == 2 * b and v.r_syn == 2 * b + 1
    with pytest.raises(ValueError):
        v.reverse_of(v.r_self)


def test_reverse_surface_carries_reserved_prefix(tiny_bundle):
    v = tiny_bundle.vocab
    rev_surface = v.relation_surfaces[v.reverse_of(0)]
    assert v.words[rev_surface[0]] == kg_data.REV_TOKEN
    assert rev_surface[1:] == v.relation_surfaces[0]
    assert all(v.relation_surfaces[r] for r in range(v.n_relations))


def test_answer_index_reflects_train_exactly(tiny_bundle):
    rebuilt = {}
    for tr in tiny_bundle.train:
        rebuilt.setdefault((tr.head, tr.rel), set()).add(tr.tail)
    assert rebuilt == tiny_bundle.answer_index


def test_true_tails_handles_reverse_direction(tiny_bundle):
    v = tiny_bundle.vocab
    tr = tiny_bundle.train[0]
    assert tr.tail in tiny_bundle.true_tails(tr.head, tr.rel)
    assert tr.head in tiny_bundle.true_tails(tr.tail, v.reverse_of(tr.rel))


def test_true_relations_augmented(tiny_bundle):
    v = tiny_bundle.vocab
    tr = tiny_bundle.train[0]
    assert tr.rel in tiny_bundle.true_relations(tr.head, tr.tail)
    assert v.reverse_of(tr.rel) in tiny_bundle.true_relations(tr.tail, tr.head)


def test_clusters_partition(tiny_bundle):
    c = tiny_bundle.clusters
    seen = set()
    for group in c.members:
        for e in group:
            assert e not in seen
            seen.add(e)
    assert seen == set(range(tiny_bundle.vocab.n_entities))
    nbc = tiny_bundle.vocab.entity_to_id["nbc"]
    assert len(c.members_of(nbc)) == 3


def test_save_reload_preserves_id_assignments(tiny_bundle, tmp_path):
    kg_data.save_bundle(tiny_bundle, tmp_path)
    again = kg_data.load_bundle_dir(tmp_path)
    assert again.vocab.entities == tiny_bundle.vocab.entities
    assert again.vocab.base_relations == tiny_bundle.vocab.base_relations
    assert again.vocab.words == tiny_bundle.vocab.words
    assert again.train == tiny_bundle.train
    assert again.valid == tiny_bundle.valid and again.test == tiny_bundle.test
    old_parts = {frozenset(g) for g in tiny_bundle.clusters.members}
    new_parts = {frozenset(g) for g in again.clusters.members}
    assert old_parts == new_parts


# -- sparsity slices -----------------------------------------------------------


def test_slice_identity_at_full_keep(tiny_bundle):
    s = slice_sparsity(tiny_bundle, 1.0, seed=0)
    assert s.train == tiny_bundle.train
    assert s.answer_index == tiny_bundle.answer_index


def test_slice_exact_size_and_subset(tiny_bundle):
    for keep in (0.8, 0.6, 0.4, 0.2):
        s = slice_sparsity(tiny_bundle, keep, seed=3)
        assert len(s.train) == int(keep * len(tiny_bundle.train) + 0.5)
        assert set(s.train) <= set(tiny_bundle.train)
        assert s.valid == tiny_bundle.valid and s.test == tiny_bundle.test


def test_slice_deterministic_under_seed(tiny_bundle):
    a = slice_sparsity(tiny_bundle, 0.4, seed=11)
    b = slice_sparsity(tiny_bundle, 0.4, seed=11)
    c = slice_sparsity(tiny_bundle, 0.4, seed=12)
    assert a.train == b.train
    assert a.train != c.train  # overwhelmingly likely for this fixture


def test_slice_rejects_bad_fraction(tiny_bundle):
    for bad in (0.0, -0.1, 1.2):
        with pytest.raises(ValueError):
            slice_sparsity(tiny_bundle, bad, seed=0)


# -- shot slices ----------------------------------------------------------------


def test_shot_slice_definitions(tmp_path):
    # e3 appears in 3 train triples (head or tail), zeta only in test
    train = "e3\tr\ta\nb\tr\te3\ne3\tr\tc\n"
    test = "zeta\tr\te3\n"
    b = load_dataset(*write_kg(tmp_path, train, test=test))
    shots = extract_shot_slices(b)
    e3 = b.vocab.entity_to_id["e3"]
    zeta = b.vocab.entity_to_id["zeta"]
    assert e3 in shots.entity_shots[3]
    assert zeta in shots.entity_shots[0]
    assert shots.entity_tests[0] == b.test
    assert shots.entity_tests[3] == b.test  # shares a triple with e3


def test_shot_partition_property(tiny_bundle):
    for keep in (1.0, 0.6, 0.2):
        sliced = slice_sparsity(tiny_bundle, keep, seed=5)
        shots = extract_shot_slices(sliced)
        total = sum(len(shots.entity_shots[k]) for k in range(4))
        higher = tiny_bundle.vocab.n_entities - total
        assert higher >= 0
        assert total + higher == tiny_bundle.vocab.n_entities
        sets = [shots.entity_shots[k] for k in range(4)]
        for i in range(4):
            for j in range(i + 1, 4):
                assert not (sets[i] & sets[j])


def test_zero_shot_entity_with_one_test_triple(tiny_bundle):
    shots = extract_shot_slices(tiny_bundle)
    ghost = tiny_bundle.vocab.entity_to_id["ghost station"]
    assert ghost in shots.entity_shots[0]
    related = [t for t in shots.entity_tests[0] if ghost in (t.head, t.tail)]
    assert len(related) == 1


# -- synonyms -------------------------------------------------------------------


def test_identical_surfaces_score_one():
    w = {0: 0.5, 1: 1.2}
    assert idf_token_overlap({0, 1}, {0, 1}, w) == 1.0


def test_disjoint_surfaces_score_zero():
    assert idf_token_overlap({0}, {1}, {0: 1.0, 1: 1.0}) == 0.0


def test_mine_synonyms_nbc_group(tiny_bundle):
    table = mine_synonyms(tiny_bundle, idf_threshold=0.3)
    ids = [tiny_bundle.vocab.entity_to_id[s]
           for s in ("nbc tv", "nbc", "nbc television")]
    for a in ids:
        for b in ids:
            if a != b:
                assert b in table.syn_of[a]


def test_mine_synonyms_disjoint_excluded(tiny_bundle):
    table = mine_synonyms(tiny_bundle, idf_threshold=0.3)
    us = tiny_bundle.vocab.entity_to_id["united states"]
    america = tiny_bundle.vocab.entity_to_id["america"]
    assert america not in table.syn_of.get(us, set())


def test_mine_synonyms_symmetric_irreflexive(tiny_bundle):
    table = mine_synonyms(tiny_bundle, idf_threshold=0.3)
    table.validate()  # raises on violation


def test_sem_threshold_requires_embeddings(tiny_bundle):
    with pytest.raises(ValueError, match="without embeddings"):
        mine_synonyms(tiny_bundle, sem_threshold=0.9)


def test_semantic_matching_by_cosine(tiny_bundle):
    n = tiny_bundle.vocab.n_entities
    emb = np.zeros((n, 4))
    emb[:, 0] = 1.0
    emb[5] = [0.0, 1.0, 0.0, 0.0]  # entity 5 points elsewhere
    table = mine_synonyms(tiny_bundle, embeddings=emb, idf_threshold=1.0,
                          sem_threshold=0.99)
    assert 5 not in table.syn_of or not (table.syn_of[5] - {5})
    assert 1 in table.syn_of[0]  # aligned vectors pass
    table.validate()


def test_synonym_save_load_roundtrip(tiny_bundle, tmp_path):
    table = mine_synonyms(tiny_bundle, idf_threshold=0.3)
    path = tmp_path / "syn.tsv"
    kg_data.save_synonyms(table, tiny_bundle.vocab, path)
    again = kg_data.load_synonyms(path, tiny_bundle.vocab)
    assert {k: set(v) for k, v in again.syn_of.items() if v} == \
           {k: set(v) for k, v in table.syn_of.items() if v}


@given(pairs=st.lists(
    st.tuples(st.integers(0, 9), st.integers(0, 9)).filter(lambda p: p[0] != p[1]),
    max_size=20))
@settings(deadline=None)
def test_synonym_table_symmetrization_property(pairs):
    syn_of = {}
    for a, b in pairs:
        syn_of.setdefault(a, set()).add(b)
        syn_of.setdefault(b, set()).add(a)
    SynonymTable(syn_of=syn_of).validate()


def test_fixture_counts(tiny_bundle):
    assert len(tiny_bundle.train) == 30
    assert len(tiny_bundle.valid) == 5
    assert len(tiny_bundle.test) == 6
