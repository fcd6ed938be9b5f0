#!/usr/bin/env python3
"""Generate a synthetic dataset shaped like the ReVerb20K benchmark.

The real benchmark is not redistributable with this repository, so the
sparsity harness is exercised against a statistical replica instead:
11.1K entities, 11.1K relations, 10.8K clusters, 15.5K/1.6K/2.4K
train/valid/test triples, with power-law degree profiles calibrated so
that a 20% train slice reproduces the published few-shot (~2.8K) and
zero-shot (~8.1K) entity counts.  Generation is deterministic for a
given seed.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

N_ENTITIES = 11_100
N_RELATIONS = 11_100
N_TRAIN = 15_500
N_VALID = 1_600
N_TEST = 2_400
N_PAIR_CLUSTERS = 300  # 300 pairs + singletons = 10.8K clusters

# power-law degree profiles; (gamma, dmax, linked count, total degree)
ENT_LAW = (1.86, 150, 8_220, 2 * N_TRAIN)
REL_LAW = (2.52, 40, 9_390, N_TRAIN)

# test-set composition: how many test triples carry a train-unseen
# entity/relation, and the popularity exponent for the drawn endpoints
ENT_D0_IN_TEST = 700
REL_D0_IN_TEST = 800
ENT_POP_ALPHA = 1.5
REL_POP_ALPHA = 2.5


def power_profile(gamma: float, dmax: int, n: int, total: int) -> np.ndarray:
    """Integer counts per degree 1..dmax summing to n items / total degree."""
    ds = np.arange(1, dmax + 1)
    w = ds.astype(float) ** (-gamma)
    w /= w.sum()
    counts = np.floor(w * n).astype(int)
    counts[0] += n - counts.sum()
    delta = total - int((counts * ds).sum())
    if not 0 <= delta <= counts[0]:
        raise ValueError("profile cannot absorb the degree correction")
    counts[0] -= delta
    counts[1] += delta
    assert counts.sum() == n and int((counts * ds).sum()) == total
    return counts


def degree_sequence(counts: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(1, len(counts) + 1), counts)


def _pair_slots(slots: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle slots and pair them up, reshuffling any self-loops away."""
    slots = slots.copy()
    rng.shuffle(slots)
    pairs = slots.reshape(-1, 2)
    for _ in range(100):
        bad = pairs[:, 0] == pairs[:, 1]
        if not bad.any():
            return pairs
        # re-shuffle the right-hand side of the bad pairs against random
        # partners from the good pool
        bad_idx = np.flatnonzero(bad)
        swap_with = rng.integers(0, len(pairs), size=len(bad_idx))
        for b, s in zip(bad_idx, swap_with):
            pairs[b, 1], pairs[s, 1] = pairs[s, 1], pairs[b, 1]
    raise RuntimeError("could not remove self-loops")


def _assign_relations(pairs: np.ndarray, rel_slots: np.ndarray,
                      rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Attach one relation slot per pair, keeping (h, r, t) unique."""
    rel_slots = rel_slots.copy()
    rng.shuffle(rel_slots)
    triples: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    for i, (h, t) in enumerate(pairs):
        placed = False
        for j in range(i, i + len(rel_slots)):
            k = j % len(rel_slots)
            cand = (int(h), int(rel_slots[k]), int(t))
            if cand not in seen:
                rel_slots[i], rel_slots[k] = rel_slots[k], rel_slots[i]
                seen.add(cand)
                triples.append(cand)
                placed = True
                break
        if not placed:
            raise RuntimeError("relation assignment exhausted")
    return triples


def _draw_weighted(ids: np.ndarray, weights: np.ndarray, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    p = weights / weights.sum()
    return rng.choice(ids, size=n, replace=True, p=p)


def _eval_split(n_triples: int, ent_d0: list[int], rel_d0: list[int],
                linked_ents: np.ndarray, ent_w: np.ndarray,
                linked_rels: np.ndarray, rel_w: np.ndarray,
                forbidden: set[tuple[int, int, int]],
                rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Build an eval split: the given d0 entities/relations each appear
    exactly once (distinct head/tail slots), every remaining slot is a
    popularity draw over the train-linked pool."""
    if len(ent_d0) > 2 * n_triples or len(rel_d0) > n_triples:
        raise ValueError("not enough eval slots for the unseen items")
    heads = _draw_weighted(linked_ents, ent_w, n_triples, rng)
    tails = _draw_weighted(linked_ents, ent_w, n_triples, rng)
    rels = _draw_weighted(linked_rels, rel_w, n_triples, rng)

    ent_slots = [(i, side) for i in range(n_triples) for side in ("h", "t")]
    rng.shuffle(ent_slots)
    has_d0 = [False] * n_triples
    for e, (pos, side) in zip(ent_d0, ent_slots):
        (heads if side == "h" else tails)[pos] = e
        has_d0[pos] = True
    rel_positions = rng.permutation(n_triples)
    for r, pos in zip(rel_d0, rel_positions):
        rels[pos] = r

    triples = []
    seen: set[tuple[int, int, int]] = set()
    for i, (h, r, t) in enumerate(zip(heads, rels, tails)):
        cand = (int(h), int(r), int(t))
        # only fully-drawn endpoints can collide or self-loop; re-draw them
        while cand in seen or cand in forbidden or cand[0] == cand[2]:
            assert not has_d0[i]
            cand = (int(_draw_weighted(linked_ents, ent_w, 1, rng)[0]), cand[1],
                    int(_draw_weighted(linked_ents, ent_w, 1, rng)[0]))
        seen.add(cand)
        triples.append(cand)
    return triples


def make_replica(out_dir, seed: int = 20) -> dict:
    """Write train/valid/test/cluster files; returns the generated counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    ent_counts = power_profile(*ENT_LAW)
    rel_counts = power_profile(*REL_LAW)
    n_linked_ent = int(ent_counts.sum())
    n_linked_rel = int(rel_counts.sum())

    ent_deg = degree_sequence(ent_counts)
    rng.shuffle(ent_deg)  # degree not correlated with entity id
    rel_deg = degree_sequence(rel_counts)
    rng.shuffle(rel_deg)

    ent_slots = np.repeat(np.arange(n_linked_ent), ent_deg)
    rel_slots = np.repeat(np.arange(n_linked_rel), rel_deg)
    pairs = _pair_slots(ent_slots, rng)
    train = _assign_relations(pairs, rel_slots, rng)
    assert len(train) == N_TRAIN

    d0_ents = list(range(n_linked_ent, N_ENTITIES))
    d0_rels = list(range(n_linked_rel, N_RELATIONS))
    rng.shuffle(d0_ents)
    rng.shuffle(d0_rels)

    linked_ents = np.arange(n_linked_ent)
    ent_w = ent_deg.astype(float) ** ENT_POP_ALPHA
    linked_rels = np.arange(n_linked_rel)
    rel_w = rel_deg.astype(float) ** REL_POP_ALPHA

    forbidden = set(train)
    test = _eval_split(N_TEST, d0_ents[:ENT_D0_IN_TEST], d0_rels[:REL_D0_IN_TEST],
                       linked_ents, ent_w, linked_rels, rel_w, forbidden, rng)
    forbidden |= set(test)
    valid = _eval_split(N_VALID, d0_ents[ENT_D0_IN_TEST:], d0_rels[REL_D0_IN_TEST:],
                        linked_ents, ent_w, linked_rels, rel_w, forbidden, rng)

    ent_name = [f"e{i:05d}" for i in range(N_ENTITIES)]
    rel_name = [f"rel{j:05d}" for j in range(N_RELATIONS)]

    def write_triples(name, triples):
        with open(out / name, "w", encoding="utf-8") as fh:
            for h, r, t in triples:
                fh.write(f"{ent_name[h]}\t{rel_name[r]}\t{ent_name[t]}\n")

    write_triples("train.tsv", train)
    write_triples("valid.tsv", valid)
    write_triples("test.tsv", test)

    clustered = rng.choice(N_ENTITIES, size=2 * N_PAIR_CLUSTERS, replace=False)
    with open(out / "clusters.tsv", "w", encoding="utf-8") as fh:
        for i in range(N_PAIR_CLUSTERS):
            a, b = clustered[2 * i], clustered[2 * i + 1]
            fh.write(f"{ent_name[a]}\t{ent_name[b]}\n")

    return {
        "entities": N_ENTITIES,
        "relations": N_RELATIONS,
        "clusters": N_ENTITIES - 2 * N_PAIR_CLUSTERS + N_PAIR_CLUSTERS,
        "train": len(train),
        "valid": len(valid),
        "test": len(test),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=20)
    args = ap.parse_args()
    counts = make_replica(args.out, args.seed)
    print(counts)


if __name__ == "__main__":
    main()
