"""Finite-difference check of every parameter of the toy model, with timing."""

import argparse
import time

from fcformer.cli import build_config
from fcformer.trainer import model_grad_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--max-elements", type=int, default=64)
    ap.add_argument("--tol", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    args = ap.parse_args()
    cfg = build_config(None, args.set)
    t0 = time.perf_counter()
    report = model_grad_check(cfg, seed=args.seed, max_elements=args.max_elements, tol=args.tol)
    print(report.summary())
    for name, n in sorted(report.per_param.items()):
        print(f"  {name}: {n}")
    print(f"{time.perf_counter() - t0:.1f}s")
    raise SystemExit(0 if report.ok else 1)


if __name__ == "__main__":
    main()
