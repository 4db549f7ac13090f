"""Train on 8 seed-0 scenes for 2000 steps and report easy/hard mAP on those scenes."""

import argparse
import json
from dataclasses import replace

from vecmap.experiments import OVERFIT_CONFIG, OVERFIT_SCENES, run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--steps", type=int, default=OVERFIT_CONFIG.steps)
    ap.add_argument("--scenes", type=int, default=OVERFIT_SCENES)
    args = ap.parse_args()
    cfg = replace(OVERFIT_CONFIG, steps=args.steps)
    res = run_overfit(cfg, args.scenes, out_dir=args.out,
                      progress=lambda r: print(f"step {r['step']:>5}  loss {r['total']:8.3f}", flush=True))
    print(json.dumps({"map_easy": res.map_easy, "map_hard": res.map_hard, "seconds": round(res.seconds, 1)}))


if __name__ == "__main__":
    main()
