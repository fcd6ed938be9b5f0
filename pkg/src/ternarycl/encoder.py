"""Textual embeddings from surface word sequences via a bidirectional GRU.

One GRU cell per direction (update/reset gates with sigmoid, tanh
candidate); the sequence representation is the concatenation of the last
forward and last backward hidden states, so each direction's hidden
width is half the embedding dimension.
"""
from __future__ import annotations

import logging

import numpy as np

from .config import ModelConfig
from .tensor_math import Node, Tape

log = logging.getLogger(__name__)

_GATES = ("z", "r", "c")  # update, reset, candidate


def gru_param_names() -> list[str]:
    names = []
    for d in ("f", "b"):
        for g in _GATES:
            names += [f"gru_{d}_w{g}", f"gru_{d}_u{g}", f"gru_{d}_b{g}"]
    return names


def init_encoder_params(cfg: ModelConfig, word_count: int, rng: np.random.Generator,
                        dtype=np.float32) -> dict[str, np.ndarray]:
    """Word table uniform(-0.05, 0.05); GRU weights fan-in uniform, biases zero."""
    h, dw = cfg.hidden, cfg.word_dim
    params = {"word_emb": rng.uniform(-0.05, 0.05, size=(word_count, dw))}
    for d in ("f", "b"):
        for g in _GATES:
            params[f"gru_{d}_w{g}"] = rng.uniform(-1, 1, size=(h, dw)) / np.sqrt(dw)
            params[f"gru_{d}_u{g}"] = rng.uniform(-1, 1, size=(h, h)) / np.sqrt(h)
            params[f"gru_{d}_b{g}"] = np.zeros(h)
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def _gru_step(tape: Tape, p: dict[str, Node], d: str, x: Node, h: Node) -> Node:
    def gate(g, hh):
        return tape.add(tape.add(tape.matvec(p[f"gru_{d}_w{g}"], x),
                                 tape.matvec(p[f"gru_{d}_u{g}"], hh)),
                        p[f"gru_{d}_b{g}"])

    z = tape.sigmoid(gate("z", h))
    r = tape.sigmoid(gate("r", h))
    cand = tape.tanh(tape.add(tape.add(tape.matvec(p[f"gru_{d}_wc"], x),
                                       tape.matvec(p[f"gru_{d}_uc"], tape.mul(r, h))),
                              p[f"gru_{d}_bc"]))
    one_minus_z = tape.affine(z, mul=-1.0, add=1.0)
    return tape.add(tape.mul(one_minus_z, cand), tape.mul(z, h))


def encode_sequence(tape: Tape, params: dict[str, Node], cfg: ModelConfig,
                    word_ids: list[int]) -> Node:
    """Encode a non-empty word-id sequence into a width-dim vector node."""
    if len(word_ids) == 0:
        raise ValueError("cannot encode an empty word sequence")
    dw = cfg.word_dim
    emb = tape.embedding_lookup(params["word_emb"], word_ids)
    xs = [tape.reshape(tape.embedding_lookup(emb, [i]), (dw,))
          for i in range(len(word_ids))]

    h0 = tape.constant(np.zeros(cfg.hidden))
    h_fwd = h0
    for x in xs:
        h_fwd = _gru_step(tape, params, "f", x, h_fwd)
    h_bwd = h0
    for x in reversed(xs):
        h_bwd = _gru_step(tape, params, "b", x, h_bwd)
    return tape.concat([h_fwd, h_bwd])


def load_pretrained_word_vectors(path, vocab, word_dim: int,
                                 rng: np.random.Generator,
                                 dtype=np.float32) -> tuple[np.ndarray, float]:
    """Initialize the word table from a whitespace-separated vector file.

    Rows for words found in the file are copied verbatim; the rest are
    drawn from uniform(-0.05, 0.05) with the given rng.  Returns the
    table and the vocabulary coverage ratio.
    """
    table = rng.uniform(-0.05, 0.05, size=(vocab.word_count, word_dim))
    found = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            if len(values) != word_dim:
                raise ValueError(
                    f"{path}:{lineno}: vector width {len(values)} != "
                    f"configured word width {word_dim}"
                )
            wid = vocab.word_to_id.get(word)
            if wid is not None:
                table[wid] = [float(v) for v in values]
                found += 1
    coverage = found / vocab.word_count if vocab.word_count else 0.0
    if coverage == 0.0:
        log.warning("pretrained vectors at %s cover no vocabulary words", path)
    else:
        log.info("pretrained vector coverage: %.1f%% (%d/%d words)",
                 100 * coverage, found, vocab.word_count)
    return np.asarray(table, dtype=dtype), coverage
