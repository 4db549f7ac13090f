"""Overfit and ablation protocols shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import GeneratorParams, SceneDataset, atomic_write_text, generate_scenes
from .evaluation import EvalReport, detections_from_scenes, map_report
from .train import TrainConfig, predict_dataset, train


def evaluate(model, data: SceneDataset) -> EvalReport:
    preds = [p.to_scene() for p in predict_dataset(model, data)]
    dets = detections_from_scenes([s for s, _ in preds], [sc for _, sc in preds])
    return map_report(dets, data.scenes)


# ------------------------------------------------------------------ overfit
# the default 3e-4 is too slow to fit 8 scenes in 2000 steps; without clipping a
# larger lr diverges once Hungarian assignments start flipping
OVERFIT_CONFIG = TrainConfig(seed=0, steps=2000, lr=2e-3, grad_clip=10.0, log_every=50)
OVERFIT_SCENES = 8


@dataclass
class OverfitResult:
    map_easy: float
    map_hard: float
    seconds: float
    first_loss: float
    last_loss: float
    report: dict = field(repr=False, default_factory=dict)


def run_overfit(cfg: TrainConfig = OVERFIT_CONFIG, n_scenes: int = OVERFIT_SCENES, out_dir=None, progress=None):
    data = generate_scenes(cfg.seed, n_scenes)
    start = time.perf_counter()
    res = train(cfg, data, out_dir=out_dir, progress=progress)
    seconds = time.perf_counter() - start
    rep = evaluate(res.model, data)
    out = OverfitResult(rep.map_easy, rep.map_hard, seconds, res.rows[0]["total"], res.rows[-1]["total"],
                        json.loads(rep.to_json()))
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "overfit_report.json", json.dumps(asdict(out), indent=2))
    return out


# ----------------------------------------------------------------- ablation
ABLATION_NOISE = 0.2
# about one pass over the training scenes, so held-out mAP measures learning rather than recall of memorized scenes
ABLATION_TRAIN = dict(seed=1000, n_scenes=2000)
ABLATION_HELDOUT = dict(seed=2000, n_scenes=20)
ABLATION_SEEDS = (0, 1, 2)
ABLATION_BASE = replace(OVERFIT_CONFIG, steps=2500, log_every=100)
ARMS = {
    # shared deformable attention supervised by focal loss on every layer
    "baseline": dict(attention_mode="shared", layers_fl=6),
    # task-modulated attention with focal loss on the first layer and DAFL after it
    "full": dict(attention_mode="tmda", layers_fl=1),
}


@dataclass
class AblationResult:
    per_seed: dict[str, list[float]]  # arm -> easy mAP per seed
    hard: dict[str, list[float]]
    seconds: float

    def mean(self, arm: str) -> float:
        v = self.per_seed[arm]
        return math.fsum(v) / len(v)

    @property
    def passed(self) -> bool:
        return self.mean("full") >= self.mean("baseline")


def ablation_data(noise_sigma: float = ABLATION_NOISE):
    params = GeneratorParams(noise_sigma=noise_sigma)
    tr = generate_scenes(ABLATION_TRAIN["seed"], ABLATION_TRAIN["n_scenes"], params)
    ho = generate_scenes(ABLATION_HELDOUT["seed"], ABLATION_HELDOUT["n_scenes"], params)
    return tr, ho


def run_ablation(base: TrainConfig = ABLATION_BASE, seeds=ABLATION_SEEDS, out_dir=None, log=print):
    train_set, heldout = ablation_data()
    easy: dict[str, list[float]] = {a: [] for a in ARMS}
    hard: dict[str, list[float]] = {a: [] for a in ARMS}
    start = time.perf_counter()
    for seed in seeds:
        for arm, change in ARMS.items():
            cfg = replace(base, seed=seed, **change)
            run_dir = None if out_dir is None else Path(out_dir) / f"{arm}_seed{seed}"
            res = train(cfg, train_set, out_dir=run_dir)
            rep = evaluate(res.model, heldout)
            easy[arm].append(rep.map_easy)
            hard[arm].append(rep.map_hard)
            if log:
                log(f"{arm:<8} seed {seed}  easy {rep.map_easy:.4f}  hard {rep.map_hard:.4f}  ({res.seconds:.0f}s)")
    out = AblationResult(easy, hard, time.perf_counter() - start)
    if out_dir is not None:
        summary = {"easy": easy, "hard": hard, "mean_easy": {a: out.mean(a) for a in ARMS},
                   "seconds": out.seconds, "noise_sigma": ABLATION_NOISE, "steps": base.steps}
        atomic_write_text(Path(out_dir) / "ablation_summary.json", json.dumps(summary, indent=2))
    return out
