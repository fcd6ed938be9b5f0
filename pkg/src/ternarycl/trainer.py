"""Two-stage training: contrastive pretraining, then link-prediction
finetuning with binary cross-entropy against all entities, both under
Adam.  Single-threaded runs are bit-for-bit reproducible under a fixed
seed, and checkpoints carry everything needed to resume mid-run:
parameters, optimizer moments, the shuffle rng state, epoch and config.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scorer as scorer_mod
from .config import RunConfig
from .contrastive import build_patterns, loss_fusion, make_batch
from .kg_data import DatasetBundle, SynonymTable
from .scorer import new_session
from .tensor_math import read_tensors, write_tensors


class NonFiniteGradient(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    pass


def adam_step(store: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              m: dict[str, np.ndarray], v: dict[str, np.ndarray], t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; t is the 1-based step."""
    if t < 1:
        raise ValueError("adam step count must be >= 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for tensor {name!r}")
        p = store[name]
        g = g.astype(p.dtype, copy=False)
        m[name] = beta1 * m[name] + (1 - beta1) * g
        v[name] = beta2 * v[name] + (1 - beta2) * (g * g)
        m_hat = m[name] / (1 - beta1 ** t)
        v_hat = v[name] / (1 - beta2 ** t)
        p -= (p.dtype.type(lr) * m_hat / (np.sqrt(v_hat) + p.dtype.type(eps))).astype(p.dtype)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    epoch: int
    config: dict
    rng_state: dict
    stage: str = "pretrain"
    best_metric: float | None = None

    def clone(self) -> "Checkpoint":
        return Checkpoint(
            params={k: v.copy() for k, v in self.params.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step=self.step, epoch=self.epoch, config=json.loads(json.dumps(self.config)),
            rng_state=json.loads(json.dumps(self.rng_state)),
            stage=self.stage, best_metric=self.best_metric,
        )


def save_checkpoint(ckpt: Checkpoint, out_dir) -> None:
    """Write tensors.bin plus a deterministic manifest (no timestamps)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for prefix, group in (("param", ckpt.params), ("adam_m", ckpt.adam_m),
                          ("adam_v", ckpt.adam_v)):
        for name, arr in group.items():
            tensors[f"{prefix}/{name}"] = arr
    index = write_tensors(out / "tensors.bin", tensors)
    manifest = {
        "format": 1,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "best_metric": ckpt.best_metric,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "tensors": index,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(in_dir) -> Checkpoint:
    out = Path(in_dir)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    tensors = read_tensors(out / "tensors.bin", manifest["tensors"])
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for full, arr in tensors.items():
        prefix, name = full.split("/", 1)
        groups[prefix][name] = arr
    return Checkpoint(
        params=groups["param"], adam_m=groups["adam_m"], adam_v=groups["adam_v"],
        step=manifest["step"], epoch=manifest["epoch"], config=manifest["config"],
        rng_state=manifest["rng_state"], stage=manifest["stage"],
        best_metric=manifest.get("best_metric"),
    )


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _fresh_state(bundle: DatasetBundle, cfg: RunConfig, stage: str) -> Checkpoint:
    init_rng = _rng(cfg.train.seed, 0)
    params = scorer_mod.init_params(
        cfg.model, bundle.vocab.n_entities, bundle.vocab.n_relations,
        bundle.vocab.word_count, init_rng)
    shuffle_rng = _rng(cfg.train.seed, 1)
    return Checkpoint(
        params=params,
        adam_m={k: np.zeros_like(v) for k, v in params.items()},
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
        step=0, epoch=0, config=cfg.to_dict(),
        rng_state=shuffle_rng.bit_generator.state,
        stage=stage,
    )


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("TERNARYCL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class EpochLogger:
    path: Path | None = None
    records: list[dict] = field(default_factory=list)

    def log(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")


def _run_epoch(state: Checkpoint, losses_of_batch, n_items: int, cfg: RunConfig,
               shuffle_rng: np.random.Generator, workers: int) -> float:
    """Shuffle items, walk minibatches, apply one Adam step per minibatch.

    losses_of_batch(item_index) must return (loss_value, grads) for one
    item; gradients within a minibatch are averaged in item order so the
    reduction is deterministic for any worker count.
    """
    order = shuffle_rng.permutation(n_items)
    total = 0.0
    bs = cfg.train.batch_size
    for lo in range(0, n_items, bs):
        chunk = [int(i) for i in order[lo:lo + bs]]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(losses_of_batch, chunk))
        else:
            results = [losses_of_batch(i) for i in chunk]
        acc: dict[str, np.ndarray] = {}
        scale = np.float32(1.0 / len(chunk))
        batch_loss = 0.0
        for loss_val, grads in results:
            batch_loss += loss_val
            for name, g in grads.items():
                if name in acc:
                    acc[name] += g * scale
                else:
                    acc[name] = g * scale
        if not np.isfinite(batch_loss):
            raise TrainingAborted(f"non-finite loss in epoch {state.epoch + 1}")
        total += batch_loss
        state.step += 1
        adam_step(state.params, acc, state.adam_m, state.adam_v, state.step,
                  cfg.train.lr, cfg.train.adam_beta1, cfg.train.adam_beta2,
                  cfg.train.adam_eps)
    return total / n_items


def pretrain(bundle: DatasetBundle, syn_table: SynonymTable | None,
             cfg: RunConfig, ckpt_dir=None, log_path=None,
             resume: Checkpoint | None = None) -> Checkpoint:
    """Contrastive pretraining over fusion batches of all pattern kinds.

    Each epoch reshuffles patterns and resamples negatives (the sampling
    rng is keyed by epoch and pattern index, so worker threads cannot
    perturb it).  A checkpoint is written per epoch when ckpt_dir is
    given; a non-finite loss aborts after writing one.
    """
    tcfg = cfg.train
    if tcfg.stage != "pretrain":
        raise ValueError(f"config stage is {tcfg.stage!r}, expected pretrain")
    patterns = build_patterns(bundle, syn_table, tcfg)
    if not patterns:
        raise ValueError("no training patterns")

    state = resume.clone() if resume is not None else _fresh_state(bundle, cfg, "pretrain")
    state.config = cfg.to_dict()
    shuffle_rng = np.random.default_rng()
    shuffle_rng.bit_generator.state = state.rng_state
    logger = EpochLogger(Path(log_path) if log_path else None)
    workers = thread_count()

    def pattern_loss(idx: int):
        rng = _rng(tcfg.seed, 2, state.epoch, idx)
        batch = make_batch(bundle, patterns[idx], tcfg.n_neg_ent, tcfg.n_neg_rel,
                           tcfg.tau, rng)
        session = new_session(state.params, cfg.model, bundle.vocab)
        loss = loss_fusion(session, batch, tcfg.fusion_variant)
        return float(loss.value), session.tape.backward(loss)

    for _ in range(state.epoch, tcfg.epochs):
        t0 = time.monotonic()
        try:
            mean_loss = _run_epoch(state, pattern_loss, len(patterns), cfg,
                                   shuffle_rng, workers)
        except (TrainingAborted, NonFiniteGradient):
            state.rng_state = shuffle_rng.bit_generator.state
            if ckpt_dir is not None:
                save_checkpoint(state, Path(ckpt_dir) / "abort")
            raise
        state.epoch += 1
        state.rng_state = shuffle_rng.bit_generator.state
        logger.log({"epoch": state.epoch, "mean_loss": mean_loss, "lr": tcfg.lr,
                    "wall_ms": int(1000 * (time.monotonic() - t0)), "val_ARR": None})
        if ckpt_dir is not None and state.epoch % tcfg.checkpoint_every == 0:
            save_checkpoint(state, Path(ckpt_dir) / "last")
    if ckpt_dir is not None:
        save_checkpoint(state, Path(ckpt_dir) / "last")
    return state


def finetune(bundle: DatasetBundle, cfg: RunConfig,
             init: Checkpoint | None = None, ckpt_dir=None, log_path=None,
             resume: Checkpoint | None = None) -> Checkpoint:
    """Link-prediction finetuning with per-triple all-entity BCE.

    Every train triple and its reverse is an item; targets mark every
    known tail for the item's (head, relation).  Model selection is by
    validation ARR, evaluated every eval_every epochs with early
    stopping after `patience` evaluations without improvement.
    """
    from .evaluator import evaluate  # deferred: evaluator imports scorer

    tcfg = cfg.train
    if tcfg.stage != "finetune":
        raise ValueError(f"config stage is {tcfg.stage!r}, expected finetune")
    items = [(tr.head, tr.rel) for tr in bundle.train]
    items += [(tr.tail, bundle.vocab.reverse_of(tr.rel)) for tr in bundle.train]
    if not items:
        raise ValueError("no training patterns")

    if resume is not None:
        state = resume.clone()
        state.config = cfg.to_dict()
    elif init is not None:
        state = init.clone()
        state.stage = "finetune"
        state.epoch = 0
        state.step = 0
        state.config = cfg.to_dict()
        state.adam_m = {k: np.zeros_like(v) for k, v in state.params.items()}
        state.adam_v = {k: np.zeros_like(v) for k, v in state.params.items()}
        state.rng_state = _rng(tcfg.seed, 1).bit_generator.state
        state.best_metric = None
    else:
        state = _fresh_state(bundle, cfg, "finetune")
    shuffle_rng = np.random.default_rng()
    shuffle_rng.bit_generator.state = state.rng_state
    logger = EpochLogger(Path(log_path) if log_path else None)
    workers = thread_count()
    n_ent = bundle.vocab.n_entities
    smooth = tcfg.label_smoothing

    def item_loss(idx: int):
        h, r = items[idx]
        session = new_session(state.params, cfg.model, bundle.vocab)
        logits = session.all_entity_scores(h, r)
        targets = np.zeros(n_ent, dtype=np.float32)
        tails = bundle.true_tails(h, r)
        targets[sorted(tails)] = 1.0
        if smooth > 0:
            targets = targets * (1.0 - smooth) + smooth / n_ent
        loss = session.tape.bce_with_logits(logits, targets)
        return float(loss.value), session.tape.backward(loss)

    best = state.clone() if state.best_metric is not None else None
    stale = 0
    for _ in range(state.epoch, tcfg.epochs):
        t0 = time.monotonic()
        try:
            mean_loss = _run_epoch(state, item_loss, len(items), cfg,
                                   shuffle_rng, workers)
        except (TrainingAborted, NonFiniteGradient):
            state.rng_state = shuffle_rng.bit_generator.state
            if ckpt_dir is not None:
                save_checkpoint(state, Path(ckpt_dir) / "abort")
            raise
        state.epoch += 1
        state.rng_state = shuffle_rng.bit_generator.state
        val_arr = None
        if bundle.valid and tcfg.eval_every > 0 and state.epoch % tcfg.eval_every == 0:
            report = evaluate(bundle, state.params, cfg.model,
                              triples=bundle.valid, protocol="raw")
            val_arr = report.arr
            if state.best_metric is None or val_arr > state.best_metric:
                state.best_metric = val_arr
                best = state.clone()
                stale = 0
            else:
                stale += 1
        logger.log({"epoch": state.epoch, "mean_loss": mean_loss, "lr": tcfg.lr,
                    "wall_ms": int(1000 * (time.monotonic() - t0)),
                    "val_ARR": val_arr})
        if ckpt_dir is not None and state.epoch % tcfg.checkpoint_every == 0:
            save_checkpoint(state, Path(ckpt_dir) / "last")
            if best is not None:
                save_checkpoint(best, Path(ckpt_dir) / "best")
        if stale >= tcfg.patience:
            break
    final = best if best is not None else state
    if ckpt_dir is not None:
        save_checkpoint(state, Path(ckpt_dir) / "last")
        save_checkpoint(final, Path(ckpt_dir) / "best")
    return final
