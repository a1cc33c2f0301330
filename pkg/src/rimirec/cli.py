"""Command-line driver: one subcommand per stage, artifacts in a work directory.

Each stage writes its outputs plus ``manifests/<stage>.json`` recording the
content hashes of its inputs and outputs, the config sections it read and
its seed. A rerun whose inputs and config match the manifest does nothing.
"""
from __future__ import annotations

import argparse
import csv
import fcntl
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import torch

from . import data as D
from . import pipeline as P
from .config import ConfigError, PipelineConfig, dump_config, load_config
from .embeddings import load_embeddings, save_embeddings
from .evaluation import evaluate_pipeline, write_details
from .miner import MinerModel
from .retrieval import IndexSet, TwoTower
from .taxonomy import CategoryTree

log = logging.getLogger("rimirec")

WORKDIR_ENV = "RIMIREC_WORKDIR"
EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 1, 2

# artifact file -> (description, producing stage)
ARTIFACTS = {
    "train.jsonl": ("training sequences", "prepare-data"),
    "test.jsonl": ("test sequences", "prepare-data"),
    "item_embeddings.bin": ("item embeddings", "build-embeddings"),
    "tree.json": ("category tree", "build-taxonomy"),
    "miner.ckpt": ("interest miner", "train-miner"),
    "retrieval.ckpt": ("retrieval model", "train-retrieval"),
    "baseline.ckpt": ("baseline model", "train-retrieval"),
    "indexes.bin": ("sub-library indexes", "train-retrieval"),
    "baseline_index.bin": ("baseline index", "train-retrieval"),
}


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage:
    name: str
    sections: tuple[str, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]


STAGES = {
    s.name: s
    for s in [
        Stage("prepare-data", ("paths", "data", "synth"), (), ("train.jsonl", "test.jsonl")),
        Stage("build-embeddings", ("embeddings",), ("train.jsonl", "test.jsonl"), ("item_embeddings.bin",)),
        Stage("build-taxonomy", ("taxonomy",), ("item_embeddings.bin",), ("tree.json",)),
        Stage("train-miner", ("miner", "data"), ("train.jsonl", "tree.json"), ("miner.ckpt", "miner_loss.csv")),
        Stage(
            "train-retrieval",
            ("retrieval", "miner", "data"),
            ("train.jsonl", "tree.json", "miner.ckpt"),
            ("retrieval.ckpt", "baseline.ckpt", "indexes.bin", "baseline_index.bin", "retrieval_loss.csv", "baseline_loss.csv"),
        ),
        Stage(
            "evaluate",
            ("eval", "data"),
            ("test.jsonl", "tree.json", "miner.ckpt", "retrieval.ckpt", "baseline.ckpt", "indexes.bin", "baseline_index.bin"),
            ("metrics.csv", "metrics.txt", "timings.csv", "per_user.jsonl"),
        ),
    ]
}
ORDER = list(STAGES)


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workdir:
    def __init__(self, root: Path):
        self.root = root
        self.manifests = root / "manifests"

    def __truediv__(self, name: str) -> Path:
        return self.root / name

    def require(self, name: str) -> Path:
        path = self.root / name
        if not path.exists():
            what, stage = ARTIFACTS.get(name, (name, "?"))
            raise StageError(f"missing artifact: {what} (run {stage})")
        return path

    def manifest_path(self, stage: str) -> Path:
        return self.manifests / f"{stage}.json"

    def read_manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.exists() else None

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / ".lock", "w") as fh:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise StageError(f"work dir {self.root} is locked by another command") from None
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)


def _fingerprint(cfg: PipelineConfig, stage: Stage, wd: Workdir) -> dict:
    inputs = {name: sha256(wd.require(name)) for name in stage.inputs}
    if stage.name == "prepare-data" and cfg.data.source == "movielens":
        inputs["paths.data"] = sha256(Path(cfg.paths.data))
    return {"config": cfg.snapshot(*stage.sections, "run"), "seed": cfg.stage_seed(stage.name), "inputs": inputs}


def _up_to_date(wd: Workdir, stage: Stage, fp: dict) -> bool:
    old = wd.read_manifest(stage.name)
    if old is None or any(old.get(k) != v for k, v in fp.items()):
        return False
    outputs = old.get("outputs", {})
    return all((wd / n).exists() and sha256(wd / n) == outputs.get(n) for n in stage.outputs)


def _write_loss_csv(path: Path, trace: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(trace, start=1):
            w.writerow([epoch, repr(float(loss))])


# -- stage bodies ---------------------------------------------------------------


def _prepare_data(cfg, wd):
    prep = P.prepare_data(cfg)
    D.write_sequences(wd / "train.jsonl", prep.train)
    D.write_sequences(wd / "test.jsonl", prep.test)
    log.info("prepare-data: %d train / %d test users, %d items", len(prep.train), len(prep.test), len(prep.items))


def _build_embeddings(cfg, wd):
    train = D.read_sequences(wd / "train.jsonl")
    test = D.read_sequences(wd / "test.jsonl")
    items = sorted({i for s in train + test for i in s.items})
    emb = P.build_embeddings(cfg, train, items)
    save_embeddings(wd / "item_embeddings.bin", emb)
    log.info("build-embeddings: %d items, dim %d", len(emb.items), emb.vectors.shape[1])


def _build_taxonomy(cfg, wd):
    tree = P.build_taxonomy(cfg, load_embeddings(wd / "item_embeddings.bin"))
    tree.save(wd / "tree.json")
    flagged = sum(1 for leaf in tree.leaves if leaf.unsplittable)
    log.info("build-taxonomy: %d leaves, depth %d, %d unsplittable", len(tree.leaf_paths), tree.max_depth, flagged)


def _train_miner(cfg, wd):
    tree = CategoryTree.load(wd / "tree.json")
    miner, trace = P.fit_miner(cfg, D.read_sequences(wd / "train.jsonl"), tree)
    miner.save(wd / "miner.ckpt")
    _write_loss_csv(wd / "miner_loss.csv", trace)
    log.info("train-miner: loss %.4f -> %.4f", trace[0], trace[-1])


def _train_retrieval(cfg, wd):
    tree = CategoryTree.load(wd / "tree.json")
    art = P.fit_retrieval(cfg, D.read_sequences(wd / "train.jsonl"), tree, MinerModel.load(wd / "miner.ckpt"))
    art.model.save(wd / "retrieval.ckpt")
    art.baseline.save(wd / "baseline.ckpt")
    art.indexes.save(wd / "indexes.bin")
    art.baseline_index.save(wd / "baseline_index.bin")
    _write_loss_csv(wd / "retrieval_loss.csv", art.trace)
    _write_loss_csv(wd / "baseline_loss.csv", art.baseline_trace)
    log.info("train-retrieval: %d KKV users, %d skipped pairs", len(art.kkv), art.skipped)


def _evaluate(cfg, wd):
    res = evaluate_pipeline(
        D.read_sequences(wd / "test.jsonl"),
        CategoryTree.load(wd / "tree.json"),
        MinerModel.load(wd / "miner.ckpt"),
        TwoTower.load(wd / "retrieval.ckpt"),
        IndexSet.load(wd / "indexes.bin"),
        P.eval_config(cfg),
        baseline=TwoTower.load(wd / "baseline.ckpt"),
        baseline_index=IndexSet.load(wd / "baseline_index.bin").whole(),
    )
    (wd / "metrics.csv").write_text(res.report.to_csv())
    (wd / "metrics.txt").write_text(f"{res.report.note}\n\n{res.report.table()}\n")
    (wd / "timings.csv").write_text(res.report.timings_csv())
    write_details(wd / "per_user.jsonl", res.details)
    print(res.report.table())


BODIES = {
    "prepare-data": _prepare_data,
    "build-embeddings": _build_embeddings,
    "build-taxonomy": _build_taxonomy,
    "train-miner": _train_miner,
    "train-retrieval": _train_retrieval,
    "evaluate": _evaluate,
}


def run_stage(name: str, cfg: PipelineConfig, wd: Workdir, force: bool = False) -> bool:
    """Run one stage unless its manifest is current; returns True if it ran."""
    stage = STAGES[name]
    fp = _fingerprint(cfg, stage, wd)
    if not force and _up_to_date(wd, stage, fp):
        log.info("%s: up to date", name)
        return False
    t0 = time.perf_counter()
    BODIES[name](cfg, wd)
    manifest = {
        "stage": name,
        **fp,
        "outputs": {n: sha256(wd / n) for n in stage.outputs},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    wd.manifests.mkdir(parents=True, exist_ok=True)
    wd.manifest_path(name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return True


# -- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file (defaults apply when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--workdir", type=Path, help=f"artifact directory (default: ${WORKDIR_ENV} or paths.workdir)")
    common.add_argument("--force", action="store_true", help="rerun even if the stage manifest is current")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rimirec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ORDER:
        sub.add_parser(name, parents=[common], help="writes " + ", ".join(STAGES[name].outputs))
    sub.add_parser("run-all", parents=[common], help="every stage in order, skipping current ones")
    sub.add_parser("show-config", parents=[common], help="print the effective config")
    return parser


def resolve_workdir(args, cfg: PipelineConfig) -> Path:
    if args.workdir is not None:
        return args.workdir
    return Path(os.environ.get(WORKDIR_ENV) or cfg.paths.workdir)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        cfg.validate(check_paths=args.command in ("prepare-data", "run-all"))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "show-config":
        print(dump_config(cfg))
        return EXIT_OK

    torch.set_num_threads(1)
    wd = Workdir(resolve_workdir(args, cfg))
    stages = ORDER if args.command == "run-all" else [args.command]
    try:
        with wd.lock():
            for name in stages:
                run_stage(name, cfg, wd, force=args.force)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"error: stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
