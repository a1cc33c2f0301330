"""In-memory stage functions shared by the CLI, the scripts and the tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import data as D
from .config import PipelineConfig
from .embeddings import ItemEmbeddings, build_cooccurrence, factorize
from .evaluation import EvalConfig, EvalResult, evaluate_pipeline
from .miner import DecoderVocab, MinerHyper, MinerModel, beam_search, build_training_examples, train_miner, user_source
from .retrieval import IndexSet, RetrievalHyper, TwoTower, build_index, build_leaf_indexes, split_behaviors, train_baseline, train_retrieval
from .taxonomy import CategoryTree, build_tree

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    train: list[D.UserSequence]
    test: list[D.UserSequence]
    items: list[int]
    labels: dict[int, tuple[int, ...]] = field(default_factory=dict)


def prepare_data(cfg: PipelineConfig) -> PreparedData:
    seed = cfg.stage_seed("prepare-data")
    labels = {}
    if cfg.data.source == "movielens":
        raw = D.parse_movielens(cfg.paths.data)
        kept = D.filter_interactions(raw, cfg.data.min_item_count, cfg.data.min_seq_len)
        seqs = D.build_sequences(kept, cfg.data.min_seq_len)
    else:
        s = cfg.synth
        corpus = D.synth_corpus(
            s.levels, s.branching, s.items_per_leaf, s.users, s.interests_per_user, s.seq_len, s.noise_frac,
            seed=seed, dim=s.dim, taste_strength=s.taste_strength,
        )
        seqs = corpus.sequences
        labels = corpus.labels
    train, test = D.split_users(seqs, cfg.data.train_frac, seed)
    items = sorted({i for s in seqs for i in s.items})
    return PreparedData(train, test, items, labels)


def build_embeddings(cfg: PipelineConfig, train: list[D.UserSequence], items: list[int]) -> ItemEmbeddings:
    cooc = build_cooccurrence(train, cfg.embeddings.window, items)
    return factorize(cooc, cfg.embeddings.dim, cfg.embeddings.iters, cfg.stage_seed("build-embeddings"))


def build_taxonomy(cfg: PipelineConfig, emb: ItemEmbeddings) -> CategoryTree:
    t = cfg.taxonomy
    return build_tree(emb.items, emb.vectors, t.k, t.c, cfg.stage_seed("build-taxonomy"), t.kmeans_iters)


def miner_hyper(cfg: PipelineConfig) -> MinerHyper:
    m = cfg.miner
    return MinerHyper(m.d_model, m.heads, m.enc_layers, m.dec_layers, m.d_ff,
                      cfg.data.short_term + cfg.data.long_term, m.lr, m.batch, m.epochs)


def fit_miner(cfg: PipelineConfig, train: list[D.UserSequence], tree: CategoryTree) -> tuple[MinerModel, list[float]]:
    seed = cfg.stage_seed("train-miner")
    vocab = DecoderVocab(tree.k, tree.max_depth)
    examples = build_training_examples(
        train, tree, vocab, cfg.miner.prefix_aug, seed, cfg.miner.min_leaf_hits, cfg.data.short_term, cfg.data.long_term
    )
    log.info("miner: %d training examples", len(examples))
    return train_miner(examples, tree.items, vocab, miner_hyper(cfg), seed)


def retrieval_hyper(cfg: PipelineConfig, baseline: bool = False) -> RetrievalHyper:
    r = cfg.retrieval
    cap = r.baseline_max_positives if baseline else r.max_positives
    return RetrievalHyper(r.d_emb, r.negatives, r.epochs, r.lr, r.batch, cap, cfg.data.short_term + cfg.data.long_term)


@dataclass
class RetrievalArtifacts:
    model: TwoTower
    indexes: IndexSet
    baseline: TwoTower
    baseline_index: IndexSet
    trace: list[float]
    baseline_trace: list[float]
    kkv: dict
    skipped: int


def decode_interests(cfg: PipelineConfig, miner: MinerModel, tree: CategoryTree, users, beam_size: int, seed: int):
    out = {}
    for s in users:
        src = user_source(s.items, miner.item_index, seed, s.user_id, cfg.data.short_term, cfg.data.long_term)
        out[s.user_id] = beam_search(miner, src, tree, beam_size) if src else []
    return out


def fit_retrieval(cfg: PipelineConfig, train: list[D.UserSequence], tree: CategoryTree, miner: MinerModel) -> RetrievalArtifacts:
    seed = cfg.stage_seed("train-retrieval")
    interests = decode_interests(cfg, miner, tree, train, cfg.miner.kkv_beam_size, seed)
    kkv = {}
    for s in train:
        split = split_behaviors(s.items, interests[s.user_id], tree)
        if split:
            kkv[s.user_id] = split
    histories = {s.user_id: s.items for s in train}
    res = train_retrieval(kkv, tree, retrieval_hyper(cfg), seed, histories=histories, items=tree.items)
    base = train_baseline(histories, tree.items, retrieval_hyper(cfg, baseline=True), seed)
    indexes = IndexSet(build_leaf_indexes(tree, res.model))
    base_index = IndexSet({(): build_index(tree, (), base.model)})
    return RetrievalArtifacts(res.model, indexes, base.model, base_index, res.trace, base.trace, kkv, res.skipped)


def eval_config(cfg: PipelineConfig) -> EvalConfig:
    return EvalConfig(
        beam_sizes=tuple(cfg.eval.beam_sizes),
        m_list=tuple(cfg.eval.m_list),
        n_future=cfg.data.n_future,
        arms=tuple(cfg.eval.arms),
        seed=cfg.stage_seed("evaluate"),
        short_term=cfg.data.short_term,
        long_term=cfg.data.long_term,
    )


def evaluate(cfg: PipelineConfig, test, tree, miner, art: RetrievalArtifacts, interests=None) -> EvalResult:
    return evaluate_pipeline(
        test, tree, miner, art.model, art.indexes, eval_config(cfg),
        baseline=art.baseline, baseline_index=art.baseline_index.whole(), interests=interests,
    )


@dataclass
class PipelineRun:
    data: PreparedData
    embeddings: ItemEmbeddings
    tree: CategoryTree
    miner: MinerModel
    miner_trace: list[float]
    retrieval: RetrievalArtifacts
    result: EvalResult


def run_pipeline(cfg: PipelineConfig) -> PipelineRun:
    torch.set_num_threads(1)
    prep = prepare_data(cfg)
    emb = build_embeddings(cfg, prep.train, prep.items)
    tree = build_taxonomy(cfg, emb)
    log.info("taxonomy: %d leaves, depth %d", len(tree.leaf_paths), tree.max_depth)
    miner, trace = fit_miner(cfg, prep.train, tree)
    art = fit_retrieval(cfg, prep.train, tree, miner)
    result = evaluate(cfg, prep.test, tree, miner, art)
    return PipelineRun(prep, emb, tree, miner, trace, art, result)
