"""Full model against an ablation (no completion decoder, or no occlusion augmentation) over several seeds."""

import argparse
import time

import numpy as np

from fcformer.cli import build_config
from fcformer.data import generate_dataset
from fcformer.evaluate import completion_errors, evaluate_dataset
from fcformer.trainer import build_library, fit

SWITCH = {"fcd": "use_fcd", "oia": "oia"}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("what", choices=sorted(SWITCH))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--ids", type=int, default=8)
    ap.add_argument("--imgs-per-id", type=int, default=64)
    ap.add_argument("--query-per-id", type=int, default=16)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    args = ap.parse_args()

    print("seed  variant   Rank-1  mAP     completed<occluded  seconds")
    for seed in args.seeds:
        ds = generate_dataset(seed, args.ids, imgs_per_id=args.imgs_per_id, query_per_id=args.query_per_id)
        for on in (True, False):
            cfg = build_config(None, ["base_lr=0.016", f"seed={seed}", *args.set, f"{SWITCH[args.what]}={on}"])
            t0 = time.perf_counter()
            model = fit(cfg, ds).model
            elapsed = time.perf_counter() - t0
            rep = evaluate_dataset(model, ds)
            frac = "-"
            if model.cfg.use_fcd:
                lib = build_library(build_config(None, []))
                e_cp, e_ot = completion_errors(model, ds.gallery.images, ds.gallery.cams, lib,
                                               np.random.default_rng([seed, 7]))
                frac = f"{np.mean(e_cp < e_ot):.3f}"
            name = "full" if on else f"no-{args.what}"
            print(f"{seed:<5} {name:<9} {rep.rank(1):.4f}  {rep.mAP:.4f}  {frac:<18}  {elapsed:.0f}", flush=True)


if __name__ == "__main__":
    main()
