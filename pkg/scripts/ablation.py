"""Capacity and carrier ablations: marker rank, paths per block, and the
backbone's fixed texture.  Prints clean bit accuracy and PSNR per variant.

    python3 scripts/ablation.py --what rank --out runs/ablation [--steps 3000]
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from molm import metrics
from molm.evaluation import bit_accuracies, make_eval_set

from _common import experiment, setup, train_or_load


def variants(cfg, what: str):
    if what == "rank":
        return [(f"rank{r}", cfg.backbone, replace(cfg.markers, rank=r)) for r in (1, 2, 4, 8, 16)]
    if what == "paths":
        return [(f"P{p}", cfg.backbone, replace(cfg.markers, paths=p)) for p in (2, 4, 8)]
    if what == "texture":
        return [(f"texture{g:g}", replace(cfg.backbone, texture_gain=g), cfg.markers) for g in (0.0, 1.0, 2.0)]
    raise SystemExit(f"unknown ablation {what!r}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--what", choices=("rank", "paths", "texture"), default="rank")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--n", type=int, default=200)
    args = ap.parse_args()
    setup()
    cfg = experiment(args.config)
    tc = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    print(f"{'variant':12s} {'M':>3s} {'bit_acc':>8s} {'psnr':>7s}")
    for name, bb, mk in variants(cfg, args.what):
        system = train_or_load(Path(args.out) / f"{name}.ckpt", cfg, tc, markers=mk, backbone=bb)
        ev = make_eval_set(system, args.n, cfg.eval.seed)
        acc = float(bit_accuracies(system.extractor, ev.marked, ev.keys).mean())
        psnr = float(np.mean(metrics.psnr_per_image(ev.marked, ev.clean)))
        print(f"{name:12s} {system.M:3d} {acc:8.3f} {psnr:7.2f}")


if __name__ == "__main__":
    main()
