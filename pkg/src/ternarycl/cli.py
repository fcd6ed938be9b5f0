"""Command-line pipeline: prepare, slice, mine-synonyms, pretrain,
finetune, eval, export-embeddings.

Every command works under a --workdir with the fixed layout data/,
slices/, checkpoints/, reports/, logs/, guarded by a lock file against
concurrent writers.  Each command's output directory gets exactly one
manifest recording the command, config snapshot, seed, input hashes and
timestamps.  Exit codes: 0 success, 1 validation error, 2 runtime
failure.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime
import hashlib
import json
import logging
import os
import subprocess
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluator as evaluator_mod
from . import kg_data, trainer
from .config import COMPONENTS, ModelConfig, RunConfig, load_config
from .scorer import new_session

log = logging.getLogger("ternarycl")


class ValidationFailure(Exception):
    """User-input problem: bad flags, missing files, missing checkpoints."""


class UsageFailure(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageFailure(message)


# -- workdir helpers -----------------------------------------------------------


@contextlib.contextmanager
def workdir_lock(workdir: Path):
    workdir.mkdir(parents=True, exist_ok=True)
    lock = workdir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"workdir {workdir} is locked by another run "
                           f"(remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def run_manifest_fields(command: str, cfg: RunConfig | None, seed: int | None,
                        inputs: list[Path], started: str) -> dict:
    return {
        "command": command,
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": seed,
        "dataset_hashes": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "git_describe": _git_describe(),
        "timestamps": {
            "started": started,
            "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        },
    }


def write_manifest(out_dir: Path, fields: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(fields, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationFailure(f"{what} not found: {path}")
    return path


# -- config plumbing -----------------------------------------------------------


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(_require(Path(args.config), "config file"))
    else:
        cfg = RunConfig()
    train = cfg.train
    overrides = {}
    for flag, attr in (("epochs", "epochs"), ("lr", "lr"),
                       ("batch_size", "batch_size"), ("tau", "tau"),
                       ("n_neg_ent", "n_neg_ent"), ("n_neg_rel", "n_neg_rel"),
                       ("seed", "seed"), ("fusion", "fusion_variant")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[attr] = val
    disable = getattr(args, "disable", None)
    if disable:
        parts: list[str] = []
        for item in disable:
            parts += [p.strip() for p in item.split(",") if p.strip()]
        bad = set(parts) - set(COMPONENTS)
        if bad:
            raise ValidationFailure(f"unknown components for --disable: {sorted(bad)}")
        overrides["disabled"] = tuple(parts)
    if overrides:
        train = replace(train, **overrides)
    return RunConfig(model=cfg.model, train=train)


def _data_dir(args) -> Path:
    work = Path(args.workdir)
    if getattr(args, "data", None):
        d = Path(args.data)
        if not d.is_absolute():
            d = work / d
    else:
        d = work / "data"
    return _require(d, "dataset directory")


def _bundle_inputs(data_dir: Path) -> list[Path]:
    return [data_dir / f"{n}.tsv" for n in ("train", "valid", "test", "clusters")]


def _load_bundle(data_dir: Path) -> kg_data.DatasetBundle:
    try:
        return kg_data.load_bundle_dir(data_dir)
    except (kg_data.ParseError, FileNotFoundError) as exc:
        raise ValidationFailure(str(exc)) from exc


def _load_checkpoint_arg(args, default: Path, what: str) -> trainer.Checkpoint:
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else default
    if not (path / "manifest.json").exists():
        raise ValidationFailure(f"{what} checkpoint not found: {path}")
    return trainer.load_checkpoint(path)


# -- commands ------------------------------------------------------------------


def cmd_prepare(args) -> int:
    started = _now()
    paths = [Path(args.train), Path(args.valid), Path(args.test), Path(args.clusters)]
    for p in paths:
        _require(p, "input file")
    try:
        bundle = kg_data.load_dataset(*paths)
    except kg_data.ParseError as exc:
        raise ValidationFailure(str(exc)) from exc
    out = Path(args.workdir) / "data"
    fields = run_manifest_fields("prepare", None, None, paths, started)
    kg_data.save_bundle(bundle, out, manifest_extra=fields)
    log.info("prepared %d entities, %d relations, %d train triples at %s",
             bundle.vocab.n_entities, bundle.vocab.n_base_relations,
             len(bundle.train), out)
    return 0


def cmd_slice(args) -> int:
    started = _now()
    data = _data_dir(args)
    bundle = _load_bundle(data)
    try:
        sliced = kg_data.slice_sparsity(bundle, args.keep, args.seed)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from exc
    out = Path(args.workdir) / "slices" / f"keep{args.keep:g}_seed{args.seed}"
    fields = run_manifest_fields("slice", None, args.seed, _bundle_inputs(data), started)
    fields.update({"source": str(data), "keep_fraction": args.keep, "seed": args.seed})
    kg_data.save_bundle(sliced, out, manifest_extra=fields)
    log.info("slice keep=%s seed=%d: %d train triples at %s",
             args.keep, args.seed, len(sliced.train), out)
    return 0


def cmd_mine_synonyms(args) -> int:
    started = _now()
    data = _data_dir(args)
    bundle = _load_bundle(data)
    embeddings = None
    if args.sem_threshold is not None:
        ckpt = _load_checkpoint_arg(
            args, Path(args.workdir) / "checkpoints" / "pretrain" / "last", "pretrain")
        cfg = RunConfig.from_dict(ckpt.config)
        embeddings = _textual_entity_embeddings(bundle, ckpt.params, cfg.model)
    try:
        table = kg_data.mine_synonyms(bundle, embeddings=embeddings,
                                      idf_threshold=args.idf_threshold,
                                      sem_threshold=args.sem_threshold)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from exc
    out_path = data / "synonyms.tsv"
    kg_data.save_synonyms(table, bundle.vocab, out_path)
    fields = run_manifest_fields("mine-synonyms", None, None, _bundle_inputs(data), started)
    fields["synonym_pairs"] = table.n_pairs()
    write_manifest(data / "synonyms_run", fields)
    log.info("mined %d synonym pairs -> %s", table.n_pairs(), out_path)
    return 0


def _maybe_synonyms(args, data: Path, bundle) -> kg_data.SynonymTable | None:
    path = Path(args.synonyms) if getattr(args, "synonyms", None) else data / "synonyms.tsv"
    if path.exists():
        return kg_data.load_synonyms(path, bundle.vocab)
    return None


def cmd_pretrain(args) -> int:
    started = _now()
    data = _data_dir(args)
    bundle = _load_bundle(data)
    cfg = _load_run_config(args)
    cfg.train.stage = "pretrain"
    syn = _maybe_synonyms(args, data, bundle)
    work = Path(args.workdir)
    ckpt_root = work / "checkpoints" / "pretrain"
    logs = work / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume = _load_checkpoint_arg(args, ckpt_root / "last", "pretrain")
    state = trainer.pretrain(bundle, syn, cfg, ckpt_dir=ckpt_root,
                             log_path=logs / "pretrain.jsonl", resume=resume)
    fields = run_manifest_fields("pretrain", cfg, cfg.train.seed,
                                 _bundle_inputs(data), started)
    fields["epochs_done"] = state.epoch
    write_manifest(ckpt_root, fields)
    log.info("pretrain finished at epoch %d", state.epoch)
    return 0


def cmd_finetune(args) -> int:
    started = _now()
    data = _data_dir(args)
    bundle = _load_bundle(data)
    cfg = _load_run_config(args)
    cfg.train.stage = "finetune"
    work = Path(args.workdir)
    init = None
    if not args.from_scratch:
        init = _load_checkpoint_arg(
            args, work / "checkpoints" / "pretrain" / "last", "pretrain")
        cfg = RunConfig(model=RunConfig.from_dict(init.config).model, train=cfg.train)
    ckpt_root = work / "checkpoints" / "finetune"
    logs = work / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    state = trainer.finetune(bundle, cfg, init=init, ckpt_dir=ckpt_root,
                             log_path=logs / "finetune.jsonl")
    fields = run_manifest_fields("finetune", cfg, cfg.train.seed,
                                 _bundle_inputs(data), started)
    fields["epochs_done"] = state.epoch
    fields["best_val_ARR"] = state.best_metric
    write_manifest(ckpt_root, fields)
    log.info("finetune finished at epoch %d (best val ARR %s)",
             state.epoch, state.best_metric)
    return 0


def cmd_eval(args) -> int:
    started = _now()
    data = _data_dir(args)
    bundle = _load_bundle(data)
    work = Path(args.workdir)
    ckpt = _load_checkpoint_arg(
        args, work / "checkpoints" / "finetune" / "best", "finetune")
    cfg = RunConfig.from_dict(ckpt.config)
    out = work / "reports" / f"{args.slice}_{args.protocol}"
    out.mkdir(parents=True, exist_ok=True)

    if args.slice == "fewshot":
        reports = evaluator_mod.evaluate_shot_slices(
            bundle, ckpt.params, cfg.model, protocol=args.protocol)
        for name, report in reports.items():
            evaluator_mod.write_report(report, out / f"{name}.json",
                                       ranks_path=out / f"{name}_ranks.tsv")
    else:
        slice_name = args.slice
        if args.slice == "sparsity":
            manifest_path = data / "manifest.json"
            keep = None
            if manifest_path.exists():
                keep = json.loads(manifest_path.read_text()).get("keep_fraction")
            slice_name = f"sparsity_keep{keep}" if keep is not None else "sparsity"
        report = evaluator_mod.evaluate(bundle, ckpt.params, cfg.model,
                                        protocol=args.protocol, slice_name=slice_name)
        evaluator_mod.write_report(report, out / "report.json",
                                   ranks_path=out / "ranks.tsv")
        if report.n_queries:
            log.info("%s: AR=%.2f ARR=%.2f H@10=%.2f over %d queries",
                     slice_name, report.ar, report.arr, report.hits[10],
                     report.n_queries)
    fields = run_manifest_fields("eval", cfg, cfg.train.seed,
                                 _bundle_inputs(data), started)
    fields.update({"slice": args.slice, "protocol": args.protocol})
    write_manifest(out, fields)
    return 0


def _textual_entity_embeddings(bundle, store, model_cfg: ModelConfig) -> np.ndarray:
    out = np.zeros((bundle.vocab.n_entities, model_cfg.dim), dtype=np.float32)
    for e in range(bundle.vocab.n_entities):
        session = new_session(store, model_cfg, bundle.vocab)
        out[e] = session.entity_text(e).value
    return out


def cmd_export_embeddings(args) -> int:
    started = _now()
    data = _data_dir(args)
    bundle = _load_bundle(data)
    work = Path(args.workdir)
    ckpt = _load_checkpoint_arg(
        args, work / "checkpoints" / "finetune" / "best", "finetune")
    cfg = RunConfig.from_dict(ckpt.config)
    if args.format != "tsv":
        raise ValidationFailure(f"unsupported export format {args.format!r}")
    out = work / "reports" / "embeddings"
    out.mkdir(parents=True, exist_ok=True)

    table = ckpt.params["ent_emb"]
    textual = _textual_entity_embeddings(bundle, ckpt.params, cfg.model)
    composed = table + textual
    for name, mat in (("entity_table.tsv", table), ("entity_composed.tsv", composed)):
        with open(out / name, "w", encoding="utf-8") as fh:
            for e in range(bundle.vocab.n_entities):
                vals = "\t".join(repr(float(x)) for x in mat[e])
                fh.write(f"{bundle.vocab.entities[e]}\t{vals}\n")
    fields = run_manifest_fields("export-embeddings", cfg, cfg.train.seed,
                                 _bundle_inputs(data), started)
    write_manifest(out, fields)
    log.info("exported %d x %d embeddings to %s",
             bundle.vocab.n_entities, cfg.model.dim, out)
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="ternarycl",
                    description="Contrastive open-KG embeddings and link prediction")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p, data=True, train_flags=False, checkpoint=False):
        p.add_argument("--workdir", required=True, help="pipeline working directory")
        if data:
            p.add_argument("--data", help="dataset dir (default: <workdir>/data; "
                                          "relative paths resolve inside the workdir)")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint directory override")
        if train_flags:
            p.add_argument("--config", help="JSON/TOML run config file")
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--tau", type=float)
            p.add_argument("--n-neg-ent", dest="n_neg_ent", type=int)
            p.add_argument("--n-neg-rel", dest="n_neg_rel", type=int)
            p.add_argument("--seed", type=int)
            p.add_argument("--fusion", choices=("A", "B"))
            p.add_argument("--disable", action="append", metavar="COMP",
                           help="disable a component: CE, CR, CSF or CSY "
                                "(repeat or comma-separate)")

    p = sub.add_parser("prepare", help="validate and normalize a dataset")
    common(p, data=False)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--clusters", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("slice", help="subsample the train split")
    common(p)
    p.add_argument("--keep", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("mine-synonyms", help="mine entity synonym pairs")
    common(p, checkpoint=True)
    p.add_argument("--idf-threshold", dest="idf_threshold", type=float, default=0.8)
    p.add_argument("--sem-threshold", dest="sem_threshold", type=float, default=None)
    p.set_defaults(func=cmd_mine_synonyms)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    common(p, train_flags=True, checkpoint=True)
    p.add_argument("--synonyms", help="synonym TSV (default: <data>/synonyms.tsv)")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="link-prediction finetuning")
    common(p, train_flags=True, checkpoint=True)
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true",
                   help="skip pretrained initialization")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="link-prediction evaluation")
    common(p, checkpoint=True)
    p.add_argument("--slice", choices=("full", "sparsity", "fewshot"), default="full")
    p.add_argument("--protocol", choices=("raw", "filtered"), default="raw")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="dump entity embeddings")
    common(p, checkpoint=True)
    p.add_argument("--format", choices=("tsv",), default="tsv")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        with workdir_lock(Path(args.workdir)):
            return args.func(args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
