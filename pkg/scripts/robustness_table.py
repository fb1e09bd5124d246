"""Robustness of augmentation-trained vs plain-trained extractors.

Trains (or reuses) both checkpoints, runs the distortion battery, the
regeneration proxy and white-box PGD on each, writes one CSV per run and
prints the summary table.

    python3 scripts/robustness_table.py --out runs/robustness [--steps 3000]
"""

import argparse
from dataclasses import replace
from pathlib import Path

from molm import attacks as A
from molm.cli import format_summary, summarize
from molm.evaluation import make_eval_set

from _common import experiment, setup, train_or_load


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/robustness")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    setup(args.threads)
    cfg = experiment(args.config)
    tc = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    out = Path(args.out)
    ev_cfg = cfg.eval
    for name, augment in (("aug", True), ("noaug", False)):
        system = train_or_load(out / f"{name}.ckpt", cfg, replace(tc, augment=augment))
        ev = make_eval_set(system, ev_cfg.n_images, ev_cfg.seed)
        pgd_ev = make_eval_set(system, ev_cfg.pgd_images, ev_cfg.seed)
        rows = A.distortion_rows(system, ev, ev_cfg.distortions(), ev_cfg.seed, ev_cfg.target_fpr)
        rows += A.regeneration_rows(system, ev, ev_cfg.regen_levels, ev_cfg.seed, ev_cfg.target_fpr)
        rows += A.pgd_rows(system, pgd_ev, ev_cfg.pgd_epsilons, ev_cfg.pgd_steps, ev_cfg.seed, ev_cfg.target_fpr)
        A.write_rows(out / f"{name}.csv", rows)
        for r in rows:
            print(f"{name:6s} {r.attack:20s} {r.params:9s} acc={r.bit_acc:.3f} detect={r.detect_rate:.3f} "
                  f"psnr={r.psnr:.1f}")
    table = format_summary(summarize(out))
    (out / "table.md").write_text(table + "\n")
    print(table)


if __name__ == "__main__":
    main()
