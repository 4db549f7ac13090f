"""Cascade map decoder: hierarchical queries, self-attention, deformable or
task-modulated cross-attention, task FFNs and heads with reference refinement."""

from __future__ import annotations

import io
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    Tensor,
    as_tensor,
    bilinear_sample_hwc,
    clip,
    concat,
    layer_norm,
    log,
    relu,
    scaled_dot_attention,
    sigmoid,
    softmax,
    split,
)

ATTENTION_MODES = ("shared", "tmda", "setting1", "setting2", "setting3")
CHECKPOINT_VERSION = 1
REF_EPS = 1e-5
CLS_PRIOR = 0.01


class ModelError(ValueError):
    pass


@dataclass
class DecoderConfig:
    num_layers: int = 6
    channels: int = 32
    heads: int = 4
    sample_points: int = 4
    n_instances: int = 12
    n_points: int = 20
    n_classes: int = 3
    attention_mode: str = "tmda"
    # normalized x spans bev_w columns, y spans bev_h rows (square cells over 30 m x 60 m)
    bev_h: int = 64
    bev_w: int = 32
    in_channels: int = 3
    k_one2many: int = 6
    ffn_mult: int = 2
    detach_refs: bool = True
    dtype: str = "float64"
    # "zero": offsets start at the reference point; "grid": bias spreads each head along its own direction
    offset_init: str = "zero"

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ModelError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.num_layers < 1 or self.heads * self.sample_points < 1:
            raise ModelError("need num_layers >= 1 and heads * sample_points >= 1")
        if self.channels % self.heads:
            raise ModelError("channels must be divisible by heads")
        if self.k_one2many < 0:
            raise ModelError("k_one2many must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ModelError("dtype must be float32 or float64")
        if self.offset_init not in ("zero", "grid"):
            raise ModelError("offset_init must be zero or grid")

    @property
    def width(self) -> int:
        return self.channels if self.attention_mode == "shared" else 2 * self.channels

    @property
    def n_queries(self) -> int:
        return self.n_instances * self.n_points


@dataclass
class PredictionSet:
    """Class probabilities ``(N, K)`` and normalized points ``(N, N_v, 2)``."""

    scores: np.ndarray
    points: np.ndarray


@dataclass
class AttentionTrace:
    """Per-stream sampling locations (grid units) and normalized attention weights."""

    locations: dict[str, np.ndarray] = field(default_factory=dict)
    weights: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class LayerOutput:
    scores: Tensor  # (G * N_ins, K)
    points: Tensor  # (G * N_ins, N_v, 2)
    ref_in: np.ndarray  # reference points the layer sampled around, (G, Nq, 2)
    trace: AttentionTrace


@dataclass
class DecoderOutput:
    layers: list[LayerOutput]
    n_groups: int
    n_instances: int

    def group_slice(self, group: str) -> slice:
        if group == "one2one":
            return slice(0, self.n_instances)
        if group == "one2many":
            if self.n_groups < 2:
                raise ModelError("no one-to-many group in this output")
            return slice(self.n_instances, None)
        raise ModelError(f"unknown query group {group!r}")

    def group_tensors(self, layer: int, group: str) -> tuple[Tensor, Tensor]:
        sl = self.group_slice(group)
        out = self.layers[layer]
        return out.scores[sl], out.points[sl]

    def prediction_sets(self, group: str = "one2one") -> list[PredictionSet]:
        sl = self.group_slice(group)
        return [PredictionSet(o.scores.data[sl].copy(), o.points.data[sl].copy()) for o in self.layers]

    @property
    def final(self) -> PredictionSet:
        return self.prediction_sets("one2one")[-1]


# ------------------------------------------------------------------ parameters
def _rng_for(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter name: adding a module never shifts the others
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _linear_specs(cfg: DecoderConfig) -> dict[str, tuple[int, int]]:
    """Every linear projection as name -> (fan_in, fan_out)."""
    C, D, hP = cfg.channels, cfg.width, cfg.heads * cfg.sample_points
    specs: dict[str, tuple[int, int]] = {"bev.proj": (cfg.in_channels, C), "query.ref": (D, 2)}
    for l in range(cfg.num_layers):
        pre = f"layers.{l}"
        for name in ("q", "k", "v", "o"):
            specs[f"{pre}.sa.{name}"] = (D, D)
        specs[f"{pre}.ca.value"] = (C, C)
        mode = cfg.attention_mode
        if mode == "shared":
            specs[f"{pre}.ca.attn"] = (C, hP)
            specs[f"{pre}.ca.offset"] = (C, 2 * hP)
        elif mode == "tmda":
            specs[f"{pre}.ca.attn_cls"] = (C, hP)
            specs[f"{pre}.ca.attn_loc"] = (C, hP)
            specs[f"{pre}.ca.offset"] = (2 * C, 2 * hP)
        elif mode == "setting1":
            specs[f"{pre}.ca.attn_cls"] = (C, hP)
            specs[f"{pre}.ca.attn_loc"] = (C, hP)
            specs[f"{pre}.ca.offset_cls"] = (C, 2 * hP)
            specs[f"{pre}.ca.offset_loc"] = (C, 2 * hP)
        elif mode == "setting2":
            specs[f"{pre}.ca.attn_cls"] = (2 * C, hP)
            specs[f"{pre}.ca.attn_loc"] = (2 * C, hP)
            specs[f"{pre}.ca.offset_cls"] = (2 * C, 2 * hP)
            specs[f"{pre}.ca.offset_loc"] = (2 * C, 2 * hP)
        elif mode == "setting3":
            specs[f"{pre}.ca.attn"] = (2 * C, hP)
            specs[f"{pre}.ca.offset_cls"] = (2 * C, 2 * hP)
            specs[f"{pre}.ca.offset_loc"] = (2 * C, 2 * hP)
        streams = ("",) if mode == "shared" else ("_cls", "_loc")
        for s in streams:
            specs[f"{pre}.ffn{s}.fc1"] = (C, cfg.ffn_mult * C)
            specs[f"{pre}.ffn{s}.fc2"] = (cfg.ffn_mult * C, C)
        specs[f"{pre}.head_cls"] = (C, cfg.n_classes)
        specs[f"{pre}.head_loc"] = (C, 2)
    return specs


def _norm_names(cfg: DecoderConfig) -> dict[str, int]:
    C, D = cfg.channels, cfg.width
    names: dict[str, int] = {}
    for l in range(cfg.num_layers):
        pre = f"layers.{l}"
        names[f"{pre}.sa_norm"] = D
        streams = ("",) if cfg.attention_mode == "shared" else ("_cls", "_loc")
        for s in streams:
            names[f"{pre}.ca_norm{s}"] = C
            names[f"{pre}.ffn_norm{s}"] = C
    return names


def grid_offset_bias(heads: int, points: int) -> np.ndarray:
    """Head ``h`` points along angle ``2 pi h / heads``; sample ``j`` sits ``j + 1``
    cells out (square-normalized direction). Flattened ``(heads * points * 2,)``."""
    theta = 2.0 * math.pi * np.arange(heads) / heads
    d = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    d = d / np.abs(d).max(axis=1, keepdims=True)
    return (d[:, None, :] * np.arange(1, points + 1)[None, :, None]).reshape(-1)


def init_params(cfg: DecoderConfig, seed: int = 0) -> dict[str, Tensor]:
    """Deterministic initialization: uniform(+-1/sqrt(fan_in)) linears,
    zero sampling-offset projections, unit layer norms, uniform(-1, 1) embeddings."""
    params: dict[str, Tensor] = {}
    D = cfg.width
    for name, shape in (
        ("query.instance", (cfg.n_instances, D)),
        ("query.instance_o2m", (cfg.k_one2many * cfg.n_instances, D)),
        ("query.point", (cfg.n_points, D)),
    ):
        if shape[0]:
            params[name] = Tensor(_rng_for(seed, name).uniform(-1.0, 1.0, size=shape), requires_grad=True)
    for name, (fan_in, fan_out) in _linear_specs(cfg).items():
        if ".ca.offset" in name:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
            if cfg.offset_init == "grid":
                b = grid_offset_bias(cfg.heads, cfg.sample_points)
        else:
            rng = _rng_for(seed, name)
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            if name.endswith("head_cls"):
                b = np.full(fan_out, -math.log((1 - CLS_PRIOR) / CLS_PRIOR))
        params[f"{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.b"] = Tensor(b, requires_grad=True)
    for name, dim in _norm_names(cfg).items():
        params[f"{name}.g"] = Tensor(np.ones(dim), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(dim), requires_grad=True)
    # draws always happen in float64, so both precisions start from the same values
    for t in params.values():
        t.data = t.data.astype(cfg.dtype)
    return params


def count_params(params: dict[str, Tensor], prefix: str = "") -> int:
    return int(sum(t.size for n, t in params.items() if n.startswith(prefix)))


# ---------------------------------------------------------------- layer pieces
def linear(x, p: dict[str, Tensor], name: str) -> Tensor:
    return x @ p[f"{name}.w"] + p[f"{name}.b"]


def norm(x, p: dict[str, Tensor], name: str) -> Tensor:
    return layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def ffn(x, p: dict[str, Tensor], name: str, norm_name: str) -> Tensor:
    return norm(x + linear(relu(linear(x, p, f"{name}.fc1")), p, f"{name}.fc2"), p, norm_name)


def self_attention(q, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention within each query group.

    ``q`` is ``(G, N, D)``; queries of different groups never interact.
    Residual-added and layer-normalized.
    """
    q = as_tensor(q)
    G, N, D = q.shape
    d = D // heads

    def project(name):
        return linear(q, p, f"{prefix}.sa.{name}").reshape(G, N, heads, d).transpose(0, 2, 1, 3)

    mixed = scaled_dot_attention(project("q"), project("k"), project("v"))
    mixed = mixed.transpose(0, 2, 1, 3).reshape(G, N, D)
    return norm(q + linear(mixed, p, f"{prefix}.sa.o"), p, f"{prefix}.sa_norm")


def sampling_locations(ref, offsets, cfg: DecoderConfig) -> Tensor:
    """Reference points (normalized) plus offsets (grid units) -> grid coordinates.

    ``ref`` is ``(Qn, 2)``; ``offsets`` is ``(Qn, heads * P * 2)``.
    Returns ``(Qn, heads, P, 2)``.
    """
    ref = as_tensor(ref)
    Qn = ref.shape[0]
    scale = np.array([cfg.bev_w, cfg.bev_h], dtype=ref.data.dtype)
    ref_grid = (ref * scale - 0.5).reshape(Qn, 1, 1, 2)
    return ref_grid + offsets.reshape(Qn, cfg.heads, cfg.sample_points, 2)


def sample_values(value, locs, cfg: DecoderConfig) -> Tensor:
    """Bilinearly sample the per-head value map. Returns ``(heads, Qn, P, C/heads)``."""
    h, P = cfg.heads, cfg.sample_points
    c = cfg.channels // h
    Qn = locs.shape[0]
    v = value.reshape(cfg.bev_h, cfg.bev_w, h, c).transpose(2, 0, 1, 3)
    coords = locs.transpose(1, 0, 2, 3).reshape(h, Qn * P, 2)
    return bilinear_sample_hwc(v, coords).reshape(h, Qn, P, c)


def attend(logits, sampled, cfg: DecoderConfig) -> tuple[Tensor, Tensor]:
    """Softmax over each head's sample points, then the weighted sum of samples.

    Returns the ``(Qn, C)`` output and the ``(Qn, heads, P)`` weights.
    """
    h, P = cfg.heads, cfg.sample_points
    Qn = logits.shape[0]
    weights = softmax(logits.reshape(Qn, h, P), axis=-1)
    w = weights.transpose(1, 0, 2).reshape(h, Qn, 1, P)
    out = (w @ sampled).reshape(h, Qn, -1).transpose(1, 0, 2).reshape(Qn, cfg.channels)
    return out, weights


def deformable_attention(q, value, ref, p: dict[str, Tensor], prefix: str, cfg: DecoderConfig):
    """Standard single-scale deformable attention, residual-added and normalized.

    ``q`` is ``(Qn, C)``, ``value`` the projected BEV map ``(H*W, C)``,
    ``ref`` ``(Qn, 2)`` normalized reference points.
    """
    q = as_tensor(q)
    locs = sampling_locations(ref, linear(q, p, f"{prefix}.ca.offset"), cfg)
    sampled = sample_values(value, locs, cfg)
    out, weights = attend(linear(q, p, f"{prefix}.ca.attn"), sampled, cfg)
    trace = AttentionTrace({"shared": locs.data}, {"shared": weights.data})
    return norm(q + out, p, f"{prefix}.ca_norm"), trace


def tmda(q_cls, q_loc, value, ref, p: dict[str, Tensor], prefix: str, cfg: DecoderConfig):
    """Task-modulated cross-attention for the two task streams.

    In ``tmda`` mode each stream gets its own attention weights from its own
    query, while one offset projection on the concatenated query drives a
    single shared sampling pass. The ``setting1..3`` modes are the ablation
    designs (see README). Returns the attended, residual-added and normalized
    ``(Q_cls, Q_loc)`` plus a trace.
    """
    q_cls, q_loc = as_tensor(q_cls), as_tensor(q_loc)
    if q_cls.shape[-1] != cfg.channels or q_loc.shape[-1] != cfg.channels:
        raise ModelError(f"task streams must have width {cfg.channels}")
    mode = cfg.attention_mode
    both = concat([q_cls, q_loc], axis=-1)
    if mode == "tmda":
        locs = sampling_locations(ref, linear(both, p, f"{prefix}.ca.offset"), cfg)
        sampled = sample_values(value, locs, cfg)
        out_cls, w_cls = attend(linear(q_cls, p, f"{prefix}.ca.attn_cls"), sampled, cfg)
        out_loc, w_loc = attend(linear(q_loc, p, f"{prefix}.ca.attn_loc"), sampled, cfg)
        loc_cls = loc_loc = locs
    elif mode == "setting1":
        loc_cls = sampling_locations(ref, linear(q_cls, p, f"{prefix}.ca.offset_cls"), cfg)
        loc_loc = sampling_locations(ref, linear(q_loc, p, f"{prefix}.ca.offset_loc"), cfg)
        out_cls, w_cls = attend(linear(q_cls, p, f"{prefix}.ca.attn_cls"), sample_values(value, loc_cls, cfg), cfg)
        out_loc, w_loc = attend(linear(q_loc, p, f"{prefix}.ca.attn_loc"), sample_values(value, loc_loc, cfg), cfg)
    elif mode in ("setting2", "setting3"):
        loc_cls = sampling_locations(ref, linear(both, p, f"{prefix}.ca.offset_cls"), cfg)
        loc_loc = sampling_locations(ref, linear(both, p, f"{prefix}.ca.offset_loc"), cfg)
        if mode == "setting2":
            a_cls = linear(both, p, f"{prefix}.ca.attn_cls")
            a_loc = linear(both, p, f"{prefix}.ca.attn_loc")
        else:
            a_cls = a_loc = linear(both, p, f"{prefix}.ca.attn")
        out_cls, w_cls = attend(a_cls, sample_values(value, loc_cls, cfg), cfg)
        out_loc, w_loc = attend(a_loc, sample_values(value, loc_loc, cfg), cfg)
    else:
        raise ModelError(f"tmda() does not handle mode {mode!r}")
    trace = AttentionTrace({"cls": loc_cls.data, "loc": loc_loc.data}, {"cls": w_cls.data, "loc": w_loc.data})
    return (
        norm(q_cls + out_cls, p, f"{prefix}.ca_norm_cls"),
        norm(q_loc + out_loc, p, f"{prefix}.ca_norm_loc"),
        trace,
    )


def inverse_sigmoid(x) -> Tensor:
    x = clip(as_tensor(x), REF_EPS, 1.0 - REF_EPS)
    return log(x) - log(1.0 - x)


def task_heads(cls_feat, loc_feat, ref, p: dict[str, Tensor], prefix: str, cfg: DecoderConfig):
    """Instance scores from mean-pooled classification features; refined points
    from the localization stream as a residual on the reference logits.

    ``cls_feat``/``loc_feat`` are ``(Qn, C)`` with ``Qn = n_inst * N_v``.
    Returns scores ``(n_inst, K)`` and points ``(n_inst, N_v, 2)``.
    """
    Qn, C = cls_feat.shape
    n_inst = Qn // cfg.n_points
    pooled = cls_feat.reshape(n_inst, cfg.n_points, C).mean(axis=1)
    scores = sigmoid(linear(pooled, p, f"{prefix}.head_cls"))
    points = sigmoid(inverse_sigmoid(ref) + linear(loc_feat, p, f"{prefix}.head_loc"))
    return scores, points.reshape(n_inst, cfg.n_points, 2)


def decoder_layer(q, ref, value, p: dict[str, Tensor], l: int, cfg: DecoderConfig):
    """One cascade stage. ``q`` is ``(G, Nq, D)``, ``ref`` ``(G, Nq, 2)``.

    Returns the updated queries, scores ``(G*N_ins, K)``, points
    ``(G*N_ins, N_v, 2)`` and the attention trace.
    """
    prefix = f"layers.{l}"
    G, Nq, D = q.shape
    q = self_attention(q, p, prefix, cfg.heads).reshape(G * Nq, D)
    ref_flat = as_tensor(ref).reshape(G * Nq, 2)
    if cfg.attention_mode == "shared":
        q_ca, trace = deformable_attention(q, value, ref_flat, p, prefix, cfg)
        q_out = ffn(q_ca, p, f"{prefix}.ffn", f"{prefix}.ffn_norm")
        cls_feat = loc_feat = q_out
    else:
        q_cls, q_loc = split(q, 2, axis=-1)
        q_cls, q_loc, trace = tmda(q_cls, q_loc, value, ref_flat, p, prefix, cfg)
        cls_feat = ffn(q_cls, p, f"{prefix}.ffn_cls", f"{prefix}.ffn_norm_cls")
        loc_feat = ffn(q_loc, p, f"{prefix}.ffn_loc", f"{prefix}.ffn_norm_loc")
        q_out = concat([cls_feat, loc_feat], axis=-1)
    scores, points = task_heads(cls_feat, loc_feat, ref_flat, p, prefix, cfg)
    return q_out.reshape(G, Nq, D), scores, points, trace


class MapDecoder:
    """Parameter container plus the forward pass of the cascade decoder."""

    def __init__(self, cfg: DecoderConfig | None = None, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg or DecoderConfig()
        self.seed = seed
        self.params = params if params is not None else init_params(self.cfg, seed)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_params(self) -> int:
        return count_params(self.params)

    def bev_features(self, raster) -> Tensor:
        """Per-pixel linear projection of the ``(in_ch, H, W)`` raster to ``(H*W, C)``."""
        cfg = self.cfg
        raster = Tensor(np.asarray(getattr(raster, "data", raster), dtype=cfg.dtype))
        if raster.shape != (cfg.in_channels, cfg.bev_h, cfg.bev_w):
            raise ModelError(f"raster shape {raster.shape} != {(cfg.in_channels, cfg.bev_h, cfg.bev_w)}")
        flat = raster.transpose(1, 2, 0).reshape(cfg.bev_h * cfg.bev_w, cfg.in_channels)
        return linear(flat, self.params, "bev.proj")

    def initial_queries(self, n_groups: int) -> tuple[Tensor, Tensor]:
        cfg, p = self.cfg, self.params
        inst = p["query.instance"]
        if n_groups > 1:
            inst = concat([inst, p["query.instance_o2m"]], axis=0)
        D = cfg.width
        q = inst.reshape(-1, 1, D) + p["query.point"].reshape(1, cfg.n_points, D)
        q = q.reshape(n_groups, cfg.n_queries, D)
        return q, sigmoid(linear(q, p, "query.ref"))

    def forward(self, raster, mode: str = "train") -> DecoderOutput:
        """Run all layers. ``train`` adds the one-to-many groups; ``infer`` runs
        only the one-to-one queries."""
        if mode not in ("train", "infer"):
            raise ModelError(f"mode must be train|infer, got {mode!r}")
        cfg = self.cfg
        n_groups = 1 + cfg.k_one2many if mode == "train" and cfg.k_one2many > 0 else 1
        bev = self.bev_features(raster)
        q, ref = self.initial_queries(n_groups)
        layers = []
        for l in range(cfg.num_layers):
            value = linear(bev, self.params, f"layers.{l}.ca.value")
            ref_in = ref.data
            q, scores, points, trace = decoder_layer(q, ref, value, self.params, l, cfg)
            layers.append(LayerOutput(scores, points, ref_in, trace))
            ref = points.reshape(n_groups, cfg.n_queries, 2)
            if cfg.detach_refs:
                ref = ref.detach()
        return DecoderOutput(layers, n_groups, cfg.n_instances)

    __call__ = forward

    # ------------------------------------------------------------ checkpoint
    def save(self, path) -> None:
        write_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> MapDecoder:
        return read_checkpoint(path)


def write_checkpoint(path, model: MapDecoder, extra: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "decoder": asdict(model.cfg),
        "seed": model.seed,
        "param_names": list(model.params),
        "extra": extra or {},
    }
    arrays = {f"param/{n}": t.data for n, t in model.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> MapDecoder:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {meta.get('version')}")
        params = {n: Tensor(np.array(z[f"param/{n}"]), requires_grad=True) for n in meta["param_names"]}
    return MapDecoder(DecoderConfig(**meta["decoder"]), seed=meta["seed"], params=params)


def checkpoint_meta(path) -> dict:
    with np.load(Path(path), allow_pickle=False) as z:
        return json.loads(bytes(z["__meta__"]).decode())
