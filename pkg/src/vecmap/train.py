"""Training loop: target assignment per layer and query group, Adam with cosine
decay, per-step metrics, checkpoints and inference."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import SceneDataset, atomic_write_text
from .geometry import MapScene, PolylineInstance
from .losses import LossBreakdown, LossConfig, build_group_targets, total_loss
from .matching import MatchConfig, assign, cost_matrix, replicate_gt
from .model import DecoderConfig, DecoderOutput, MapDecoder, write_checkpoint


class TrainingError(RuntimeError):
    pass


class NonFiniteLoss(TrainingError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    """Flat run configuration; every field maps one-to-one to a JSON key."""

    seed: int = 0
    steps: int = 2000
    batch_size: int = 1
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None  # global L2 norm cap; None disables clipping
    log_every: int = 1
    # loss
    gamma: float = 2.0
    lambda_: float = 1.0
    layers_fl: int = 1
    layers_dafl: int | None = None
    # matching (w_cls / w_pts weight both the matching cost and the loss)
    w_cls: float = 2.0
    w_pts: float = 5.0
    k_one2many: int = 6
    # decoder
    num_layers: int = 6
    channels: int = 32
    heads: int = 4
    sample_points: int = 4
    n_instances: int = 12
    n_points: int = 20
    n_classes: int = 3
    attention_mode: str = "tmda"
    bev_h: int = 64
    bev_w: int = 32
    ffn_mult: int = 2
    detach_refs: bool = True
    dtype: str = "float32"
    offset_init: str = "zero"

    def __post_init__(self):
        if self.steps < 1:
            raise TrainingError("steps must be >= 1")
        if not self.lr > 0:
            raise TrainingError("lr must be > 0")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise TrainingError("need 0 <= beta < 1 and eps > 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise TrainingError("grad_clip must be positive or null")
        # surface sub-config validation errors at construction
        self.decoder_config()
        self.loss_config()
        self.match_config()

    def decoder_config(self) -> DecoderConfig:
        names = {f.name for f in fields(DecoderConfig)} - {"in_channels"}
        return DecoderConfig(**{n: getattr(self, n) for n in names})

    def loss_config(self) -> LossConfig:
        return LossConfig(
            gamma=self.gamma,
            lambda_=self.lambda_,
            num_layers=self.num_layers,
            layers_fl=self.layers_fl,
            layers_dafl=self.layers_dafl,
            w_cls=self.w_cls,
            w_pts=self.w_pts,
        )

    def match_config(self) -> MatchConfig:
        return MatchConfig(w_cls=self.w_cls, w_pts=self.w_pts, k_one2many=self.k_one2many)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise TrainingError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> TrainConfig:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TrainingError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise TrainingError("config must be a JSON object")
        return cls.from_dict(d)


class Adam:
    """Adam with bias correction; the learning rate is supplied per step."""

    def __init__(self, params: list, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        # moments in float64 whatever the parameter precision
        self.m = [np.zeros(p.data.shape) for p in params]
        self.v = [np.zeros(p.data.shape) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype, copy=False)


def clip_grad_norm(params: list, max_norm: float | None) -> float:
    """Global L2 norm of the gradients; rescales them in place when it exceeds ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def cosine_lr(base: float, step: int, total: int) -> float:
    """Learning rate for 0-based ``step``: cosine from ``base`` to 0 at ``total``, no warmup."""
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


# ----------------------------------------------------------------- targets
def layer_targets(out: DecoderOutput, layer: int, gts: list[PolylineInstance], cfg: TrainConfig):
    """Matches and loss targets of one layer for each query group.

    The one-to-many cost is computed on the unique GTs and tiled ``k`` times,
    which equals the cost against the replicated list column for column.
    """
    lcfg, mcfg = cfg.loss_config(), cfg.match_config()
    entries = []
    for group in ("one2one", "one2many")[: 1 + (out.n_groups > 1)]:
        scores, points = out.group_tensors(layer, group)
        cost, perms = cost_matrix(scores.data, points.data, gts, mcfg)
        group_gts = gts
        if group == "one2many":
            k = cfg.k_one2many
            cost, perms = np.tile(cost, (1, k)), np.tile(perms, (1, k, 1))
            group_gts = replicate_gt(gts, k)
        match = assign(cost, perms)
        entries.append((scores, points, build_group_targets(scores.data, points.data, group_gts, match, lcfg)))
    return entries


def scene_loss(model: MapDecoder, raster: np.ndarray, scene: MapScene, cfg: TrainConfig) -> LossBreakdown:
    out = model.forward(raster, mode="train")
    gts = list(scene.instances)
    per_layer = [layer_targets(out, l, gts, cfg) for l in range(cfg.num_layers)]
    groups = [[per_layer[l][g] for l in range(cfg.num_layers)] for g in range(len(per_layer[0]))]
    return total_loss(groups, cfg.loss_config())


# -------------------------------------------------------------------- loop
@dataclass
class TrainResult:
    model: MapDecoder
    rows: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def metric_columns(num_layers: int) -> list[str]:
    return (
        ["step", "lr", "total"]
        + [f"cls_{l}" for l in range(num_layers)]
        + [f"pts_{l}" for l in range(num_layers)]
        + ["pts", "mean_p_dist", "grad_norm"]
    )


def rows_to_csv(rows: list[dict], num_layers: int) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=metric_columns(num_layers), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _dump_non_finite(out_dir: Path | None, step: int, batch: list[int], data: SceneDataset, bd: LossBreakdown):
    payload = {
        "step": step,
        "scene_indices": batch,
        "scenes": [data.scenes[i].to_dict() for i in batch],
        "per_layer_cls": bd.per_layer_cls,
        "per_layer_pts": bd.per_layer_pts,
        "total": repr(bd.total),
    }
    if out_dir is None:
        return None
    path = Path(out_dir) / "nonfinite_dump.json"
    atomic_write_text(path, json.dumps(payload, indent=2))
    return path


def batch_schedule(n_scenes: int, steps: int, batch_size: int, seed: int) -> list[list[int]]:
    """Scene indices per step: a fresh seeded permutation each epoch."""
    rng = np.random.default_rng([int(seed), 0x0BA7C4])
    order: list[int] = []
    while len(order) < steps * batch_size:
        order.extend(rng.permutation(n_scenes).tolist())
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(steps)]


def train(cfg: TrainConfig, data: SceneDataset, out_dir=None, progress=None) -> TrainResult:
    """Train a decoder on ``data``; with ``out_dir`` also write the checkpoint,
    ``metrics.csv`` and ``run_meta.json`` there.

    Raises :class:`NonFiniteLoss` (after writing a dump) if the loss diverges.
    """
    if not len(data):
        raise TrainingError("dataset is empty")
    dcfg = cfg.decoder_config()
    model = MapDecoder(dcfg, seed=cfg.seed)
    feats = data.ensure_features(dcfg.bev_h, dcfg.bev_w)
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    rows = []
    start = time.perf_counter()
    for step, batch in enumerate(batch_schedule(len(data), cfg.steps, cfg.batch_size, cfg.seed)):
        model.zero_grad()
        bds = []
        for i in batch:
            bd = scene_loss(model, feats[i], data.scenes[i], cfg)
            if not np.isfinite(bd.total):
                path = _dump_non_finite(out_dir, step, batch, data, bd)
                raise NonFiniteLoss(f"non-finite loss at step {step} (scenes {batch})", path)
            (bd.tensor * (1.0 / len(batch))).backward()
            bds.append(bd)
        gnorm = clip_grad_norm(opt.params, cfg.grad_clip)
        lr = cosine_lr(cfg.lr, step, cfg.steps)
        opt.step(lr)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.append(_metrics_row(step, lr, bds, cfg.num_layers, gnorm))
            if progress is not None:
                progress(rows[-1])
    result = TrainResult(model, rows, time.perf_counter() - start)
    if out_dir is not None:
        save_run(result, cfg, data, out_dir)
    return result


def _metrics_row(step: int, lr: float, bds: list[LossBreakdown], num_layers: int, grad_norm: float) -> dict:
    n = len(bds)
    row = {"step": step, "lr": lr, "total": sum(b.total for b in bds) / n}
    for l in range(num_layers):
        row[f"cls_{l}"] = sum(b.per_layer_cls[l] for b in bds) / n
    for l in range(num_layers):
        row[f"pts_{l}"] = sum(b.per_layer_pts[l] for b in bds) / n
    row["pts"] = sum(row[f"pts_{l}"] for l in range(num_layers))
    pd = np.concatenate([b.p_dist for b in bds])
    row["mean_p_dist"] = float(pd.mean()) if pd.size else float("nan")
    row["grad_norm"] = grad_norm
    return row


def save_run(result: TrainResult, cfg: TrainConfig, data: SceneDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "train_config": asdict(cfg),
        "dataset": {"seed": data.seed, "n_scenes": len(data), "generator": asdict(data.params)},
        "seconds": result.seconds,
        "num_params": result.model.num_params(),
        "attention": {"heads": cfg.heads, "sample_points": cfg.sample_points},
    }
    write_checkpoint(out / "checkpoint.npz", result.model, extra={"train_config": asdict(cfg)})
    atomic_write_text(out / "metrics.csv", rows_to_csv(result.rows, cfg.num_layers))
    atomic_write_text(out / "run_meta.json", json.dumps(meta, indent=2, sort_keys=True))


# --------------------------------------------------------------- inference
@dataclass
class ScenePrediction:
    scores: np.ndarray  # (N_ins, K)
    points: np.ndarray  # (N_ins, N_v, 2)

    def to_scene(self) -> tuple[MapScene, list[float]]:
        """One instance per query: argmax class with its probability as score."""
        labels = self.scores.argmax(axis=1)
        best = self.scores.max(axis=1)
        insts = [PolylineInstance(int(c), np.clip(p, 0.0, 1.0)) for c, p in zip(labels, self.points)]
        return MapScene(insts), [float(s) for s in best]


def predict(model: MapDecoder, rasters: list[np.ndarray]) -> list[ScenePrediction]:
    preds = []
    for r in rasters:
        final = model.forward(r, mode="infer").final
        preds.append(ScenePrediction(final.scores, final.points))
    return preds


def predict_dataset(model: MapDecoder, data: SceneDataset) -> list[ScenePrediction]:
    return predict(model, data.ensure_features(model.cfg.bev_h, model.cfg.bev_w))
