#!/usr/bin/env python3
"""Planted-hierarchy experiment: every arm, beams 2/4/6, written to an output directory.

    python3 scripts/run_synthetic.py --out results/synthetic --set run.seed=1
"""
import argparse
import json
import logging
import time
from pathlib import Path

from sklearn.metrics import adjusted_rand_score

from rimirec.config import dump_config, load_config
from rimirec.evaluation import write_details
from rimirec.pipeline import run_pipeline
from rimirec.taxonomy import leaf_id

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "synthetic.ini")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--out", type=Path, default=ROOT / "results" / "synthetic")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    cfg = load_config(args.config, args.overrides)
    cfg.validate()
    t0 = time.perf_counter()
    run = run_pipeline(cfg)
    elapsed = time.perf_counter() - t0

    labels = run.data.labels
    items = [i for i in run.data.items if i in labels]
    ari = adjusted_rand_score([str(labels[i]) for i in items], [str(leaf_id(run.tree, i)) for i in items])
    rep = run.result.report

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.ini").write_text(dump_config(cfg))
    (args.out / "metrics.csv").write_text(rep.to_csv())
    (args.out / "timings.csv").write_text(rep.timings_csv())
    write_details(args.out / "per_user.jsonl", run.result.details)
    summary = {
        "leaves": len(run.tree.leaf_paths),
        "tree_vs_planted_ari": ari,
        "miner_loss": run.miner_trace,
        "retrieval_loss": run.retrieval.trace,
        "baseline_loss": run.retrieval.baseline_trace,
        "seconds": elapsed,
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(rep.table())
    print(f"\nleaves={summary['leaves']}  tree/planted ARI={ari:.3f}  {elapsed:.0f}s")


if __name__ == "__main__":
    main()
