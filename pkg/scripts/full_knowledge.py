"""Retrain an attacker's bank and extractor with other seeds on a class
subset, then cross-evaluate both extractors on both image sets.

    python3 scripts/full_knowledge.py --defender runs/robustness/aug.ckpt --out runs/attacker.ckpt
"""

import argparse
from dataclasses import replace

from molm import attacks as A
from molm.system import load_system

from _common import experiment, setup


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--defender", required=True)
    ap.add_argument("--out", default="runs/attacker.ckpt")
    ap.add_argument("--classes", default="8,9,10,11,12,13,14,15")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--n", type=int, default=400)
    args = ap.parse_args()
    setup()
    cfg = experiment(args.config)
    defender, _, _ = load_system(args.defender)
    tc = replace(cfg.train, seed=1, class_subset=tuple(int(c) for c in args.classes.split(",")))
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    _, rep = A.full_knowledge_attack(defender, tc, bank_seed=101, extractor_seed=102, n_eval=args.n,
                                     out_path=args.out)
    print(f"defender extractor on defender images  {rep.defender_on_defender:.3f}")
    print(f"attacker extractor on attacker images  {rep.attacker_on_attacker:.3f}")
    print(f"defender extractor on attacker images  {rep.defender_on_attacker:.3f}")
    print(f"attacker extractor on defender images  {rep.attacker_on_defender:.3f}")


if __name__ == "__main__":
    main()
