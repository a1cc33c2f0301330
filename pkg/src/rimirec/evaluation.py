"""Recall@M / HitRate@M over the next-N behaviours of held-out users.

Recall@M is |top-M ∩ future| / N with N = len(future); HitRate@M is the share
of users with at least one such hit. Both are averaged over users.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DataError, UserSequence, make_eval_split
from .miner import BeamResult, MinerModel, beam_search, user_source
from .retrieval import IndexSet, Retrieved, TwoTower, retrieve_unified, retrieve_user
from .taxonomy import CategoryTree

REPORT_NOTE = "recall@M = |top-M ∩ next-N| / N per user, averaged over users; hitrate@M = mean of [top-M ∩ next-N ≠ ∅]"

ARMS = ("full", "whole_library", "unified_sequence", "baseline")


def recall_at_m(retrieved: Sequence[int], future: Sequence[int], m: int) -> float:
    if len(future) == 0:
        raise ValueError("empty future")
    top = np.asarray(list(retrieved)[:m], dtype=np.int64)
    return int(np.isin(np.unique(np.asarray(future, dtype=np.int64)), top).sum()) / len(future)


def hitrate_at_m(retrieved: Sequence[int], future: Sequence[int], m: int) -> int:
    if len(future) == 0:
        raise ValueError("empty future")
    top = np.asarray(list(retrieved)[:m], dtype=np.int64)
    return int(np.isin(np.asarray(future, dtype=np.int64), top).any())


def mean(values: Iterable[float]) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


@dataclass
class MetricsRecord:
    config: str
    m: int
    recall: float
    hitrate: float
    users_evaluated: int
    seed: int
    wall_time: float = 0.0


@dataclass
class MetricsReport:
    records: list[MetricsRecord] = field(default_factory=list)
    note: str = REPORT_NOTE

    def get(self, config: str, m: int) -> MetricsRecord:
        for r in self.records:
            if r.config == config and r.m == m:
                return r
        raise KeyError((config, m))

    def to_csv(self) -> str:
        """Deterministic CSV; wall times live in :meth:`timings_csv`."""
        buf = io.StringIO()
        buf.write(f"# {self.note}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "M", "recall", "hitrate", "users_evaluated", "seed"])
        for r in self.records:
            w.writerow([r.config, r.m, repr(r.recall), repr(r.hitrate), r.users_evaluated, r.seed])
        return buf.getvalue()

    def timings_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "M", "wall_time_s"])
        for r in self.records:
            w.writerow([r.config, r.m, f"{r.wall_time:.3f}"])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'config':<28} {'M':>4} {'Recall':>8} {'HitRate':>8} {'users':>6}"]
        for r in self.records:
            lines.append(f"{r.config:<28} {r.m:>4} {100 * r.recall:8.3f} {100 * r.hitrate:8.3f} {r.users_evaluated:>6}")
        return "\n".join(lines)

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        out = cls()
        for rec in csv.DictReader(rows):
            out.records.append(
                MetricsRecord(rec["config"], int(rec["M"]), float(rec["recall"]), float(rec["hitrate"]), int(rec["users_evaluated"]), int(rec["seed"]))
            )
        return out


@dataclass
class EvalConfig:
    beam_sizes: tuple[int, ...] = (2,)
    m_list: tuple[int, ...] = (20, 50)
    n_future: int = 10
    arms: tuple[str, ...] = ARMS
    seed: int = 0
    short_term: int = 20
    long_term: int = 30
    check_frac: float = 0.01


def arm_name(arm: str, beam: int) -> str:
    return "baseline" if arm == "baseline" else f"{'rimirec' if arm == 'full' else arm}-{beam}beams"


@dataclass
class EvalResult:
    report: MetricsReport
    details: list[dict]
    interests: dict[int, dict[int, list[BeamResult]]]


def evaluate_pipeline(
    test_users: Sequence[UserSequence],
    tree: CategoryTree,
    miner: MinerModel | None,
    model: TwoTower | None,
    indexes: IndexSet | None,
    config: EvalConfig,
    baseline: TwoTower | None = None,
    baseline_index=None,
    interests: dict[int, dict[int, list[BeamResult]]] | None = None,
) -> EvalResult:
    """Run every configured arm on every evaluable test user.

    ``interests`` may carry precomputed beam results keyed by user then beam
    size; missing entries are decoded here.
    """
    splits = []
    for s in test_users:
        try:
            splits.append(make_eval_split(s, config.n_future))
        except DataError:
            continue
    if not splits:
        raise ValueError("no evaluable users")

    arms = [a for a in config.arms if a in ARMS]
    unknown = set(config.arms) - set(ARMS)
    if unknown:
        raise ValueError(f"unknown arms {sorted(unknown)}")
    interests = dict(interests or {})
    needs_beams = any(a != "baseline" for a in arms)
    if needs_beams:
        known = miner.item_index
        for sp in splits:
            per = interests.setdefault(sp.user_id, {})
            missing = [b for b in config.beam_sizes if b not in per]
            if missing:
                src = user_source(sp.history, known, config.seed, sp.user_id, config.short_term, config.long_term)
                for b in missing:
                    per[b] = beam_search(miner, src, tree, b) if src else []

    details: list[dict] = []
    report = MetricsReport()
    runs = []
    for arm in arms:
        if arm == "baseline" and baseline is None:
            raise ValueError("baseline arm requested without a baseline model")
        # ablations and the baseline run at the primary beam size only
        for beam in config.beam_sizes if arm == "full" else config.beam_sizes[:1]:
            runs.append((arm, beam))
    for arm, beam in runs:
        name = arm_name(arm, beam)
        for m in config.m_list:
            t0 = time.perf_counter()
            recalls, hits = [], []
            for sp in splits:
                if arm == "baseline":
                    out = retrieve_unified(sp.history, baseline, baseline_index, m)
                else:
                    out = retrieve_user(
                        sp.history, interests[sp.user_id][beam], model, indexes, tree, m,
                        whole_library=arm == "whole_library", unified_sequence=arm == "unified_sequence",
                    )
                r, h = recall_at_m(out.items, sp.future, m), hitrate_at_m(out.items, sp.future, m)
                recalls.append(r)
                hits.append(h)
                details.append(_detail(name, m, sp.user_id, out, sp.future))
            report.records.append(
                MetricsRecord(name, m, mean(recalls), mean(hits), len(splits), config.seed, time.perf_counter() - t0)
            )
    _self_check(report, details, config)
    return EvalResult(report, details, interests)


def _detail(config: str, m: int, user: int, out: Retrieved, future: Sequence[int]) -> dict:
    return {
        "config": config,
        "M": m,
        "user": user,
        "items": out.items,
        "scores": out.scores,
        "categories": out.categories,
        "fallback": out.fallback,
        "future": list(future),
    }


def _self_check(report: MetricsReport, details: list[dict], config: EvalConfig) -> None:
    """Brute-force recount of per-user metrics on a small deterministic sample."""
    rng = np.random.default_rng(config.seed)
    n = max(1, int(round(config.check_frac * len(details))))
    for j in rng.choice(len(details), size=min(n, len(details)), replace=False):
        d = details[j]
        hits = sum(1 for f in set(d["future"]) if f in d["items"][: d["M"]])
        if recall_at_m(d["items"], d["future"], d["M"]) != hits / len(d["future"]):
            raise AssertionError(f"recall mismatch for user {d['user']} in {d['config']}")
        if hitrate_at_m(d["items"], d["future"], d["M"]) != int(hits > 0):
            raise AssertionError(f"hitrate mismatch for user {d['user']} in {d['config']}")


# -- serialized outputs and an independent rescorer ---------------------------


def write_details(path: str | Path, details: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for d in details:
            fh.write(json.dumps(d) + "\n")


def read_details(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def rescore(details: Iterable[dict]) -> dict[tuple[str, int], tuple[float, float, int]]:
    """Recompute (recall, hitrate, users) per (config, M) from per-user records alone."""
    acc: dict[tuple[str, int], tuple[list[float], list[int]]] = {}
    for d in details:
        top = set()
        for item in d["items"]:
            if len(top) == d["M"]:
                break
            top.add(item)
        n_hit = 0
        for f in set(d["future"]):
            if f in top:
                n_hit += 1
        rec, hit = acc.setdefault((d["config"], d["M"]), ([], []))
        rec.append(n_hit / len(d["future"]))
        hit.append(1 if n_hit else 0)
    return {k: (math.fsum(r) / len(r), math.fsum(h) / len(h), len(r)) for k, (r, h) in acc.items()}
