"""Render a synthetic dataset, train on it and report retrieval on occluded queries."""

import argparse
import logging
import time

from fcformer.cli import build_config, format_config
from fcformer.data import generate_dataset
from fcformer.evaluate import evaluate_dataset, format_table
from fcformer.trainer import fit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ids", type=int, default=8)
    ap.add_argument("--imgs-per-id", type=int, default=64)
    ap.add_argument("--query-per-id", type=int, default=16)
    ap.add_argument("--run-dir", default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    # toy recipe: twice the default lr; --set wins
    cfg = build_config(None, ["base_lr=0.016", f"seed={args.seed}", *args.set])
    print(format_config(cfg), end="")
    ds = generate_dataset(args.seed, args.ids, imgs_per_id=args.imgs_per_id, query_per_id=args.query_per_id)
    t0 = time.perf_counter()
    res = fit(cfg, ds, run_dir=args.run_dir)
    print(f"trained {res.steps} steps in {time.perf_counter() - t0:.0f}s")
    print(format_table(evaluate_dataset(res.model, ds)))


if __name__ == "__main__":
    main()
