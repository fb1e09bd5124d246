"""Averaging removal and forgery over the k schedule, grey and black access.

    python3 scripts/averaging_curve.py --ckpt runs/robustness/aug.ckpt --out runs/averaging.csv
"""

import argparse

import numpy as np

from molm import attacks as A
from molm.keycodec import sample_key
from molm.system import load_system

from _common import setup


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--out", default="runs/averaging.csv")
    ap.add_argument("--ks", default=",".join(str(k) for k in A.DESK_K_SCHEDULE))
    ap.add_argument("--targets", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--different-messages", action="store_true", help="fresh key per pool image")
    args = ap.parse_args()
    setup()
    system, _, _ = load_system(args.ckpt)
    ks = [int(k) for k in args.ks.split(",")]
    key = sample_key(system.M, np.random.default_rng(args.seed))
    rows = []
    for mode in ("removal", "forgery"):
        for access in ("grey", "black"):
            rows += A.averaging_experiment(system, key, ks, mode, access, not args.different_messages,
                                           args.targets, args.seed)
    A.write_rows(args.out, rows)
    for r in rows:
        print(f"{r.attack:32s} {r.params:7s} acc={r.bit_acc:.3f} detect={r.detect_rate:.3f}")


if __name__ == "__main__":
    main()
