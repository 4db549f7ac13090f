"""Shared attention + focal loss against TMDA + DAFL/HLS, 3 seeds, held-out noisy scenes."""

import argparse
from dataclasses import replace

from vecmap.experiments import ABLATION_BASE, ABLATION_SEEDS, ARMS, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--steps", type=int, default=ABLATION_BASE.steps)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(ABLATION_SEEDS))
    args = ap.parse_args()
    res = run_ablation(replace(ABLATION_BASE, steps=args.steps), args.seeds, out_dir=args.out,
                       log=lambda line: print(line, flush=True))
    for arm in ARMS:
        print(f"{arm:<8} mean easy mAP {res.mean(arm):.4f}  per seed {[round(v, 4) for v in res.per_seed[arm]]}")
    print(f"direction check {'holds' if res.passed else 'fails'}; {res.seconds / 60:.1f} min")


if __name__ == "__main__":
    main()
