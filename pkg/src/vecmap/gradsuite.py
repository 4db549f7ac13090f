"""Finite-difference checks of every differentiable piece, from single ops up
to a full training loss through a small decoder."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .geometry import MapScene, PolylineInstance
from .losses import LossConfig, dafl, focal_loss, total_loss
from .model import (
    DecoderConfig,
    MapDecoder,
    decoder_layer,
    deformable_attention,
    init_params,
    self_attention,
    task_heads,
    tmda,
)
from .numerics import Tensor, grad_check

OP_TOL = 1e-5
LAYER_TOL = 1e-4
E2E_TOL = 1e-3


@dataclass
class GradCase:
    name: str
    kind: str  # op | layer | e2e
    tol: float
    build: Callable[[np.random.Generator], tuple[Callable, list[Tensor]]]
    max_coords: int | None = None


@dataclass
class GradResult:
    name: str
    kind: str
    tol: float
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _t(rng, *shape, lo=None, hi=None):
    data = rng.normal(size=shape) if lo is None else rng.uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=True)


def _weighted(rng, shape):
    # a random projection keeps every output coordinate in play
    return Tensor(rng.normal(size=shape))


def _op(fn, *specs):
    """Case builder for ``sum(w * fn(*inputs))`` with inputs drawn per ``specs``."""

    def build(rng):
        inputs = [_t(rng, *shape, **kw) for shape, kw in specs]
        out_shape = fn(*inputs).shape
        w = _weighted(rng, out_shape)
        return (lambda *xs: (fn(*xs) * w).sum()), inputs

    return build


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def _op_cases() -> list[GradCase]:
    P = {}  # default sampling range
    pos = {"lo": 0.3, "hi": 2.0}
    cases = [
        ("add", _op(lambda a, b: a + b, ((3, 4), P), ((4,), P))),
        ("sub", _op(lambda a, b: a - b, ((3, 4), P), ((3, 1), P))),
        ("mul", _op(lambda a, b: a * b, ((3, 4), P), ((3, 4), P))),
        ("div", _op(lambda a, b: a / b, ((3, 4), P), ((3, 4), pos))),
        ("power", _op(lambda a: a ** 2.5, ((3, 4), pos))),
        ("exp", _op(nx.exp, ((3, 4), P))),
        ("log", _op(nx.log, ((3, 4), pos))),
        ("sigmoid", _op(nx.sigmoid, ((3, 4), P))),
        ("sum", _op(lambda a: a.sum(axis=1), ((3, 4, 2), P))),
        ("mean", _op(lambda a: a.mean(axis=(0, 2)), ((3, 4, 2), P))),
        ("matmul", _op(lambda a, b: a @ b, ((3, 4), P), ((4, 5), P))),
        ("matmul_batched", _op(lambda a, b: a @ b, ((2, 3, 4), P), ((2, 4, 5), P))),
        ("matmul_folded", _op(lambda a, b: a @ b, ((2, 3, 4), P), ((4, 5), P))),
        ("reshape", _op(lambda a: a.reshape(4, 3) * a.reshape(4, 3), ((3, 4), P))),
        ("transpose", _op(lambda a: a.transpose(2, 0, 1), ((2, 3, 4), P))),
        ("take", _op(lambda a: a[np.array([2, 0, 2])], ((3, 4), P))),
        ("concat", _op(lambda a, b: nx.concat([a, b], axis=1), ((3, 2), P), ((3, 4), P))),
        ("split", _op(lambda a: nx.split(a, 2, axis=-1)[0] * nx.split(a, 2, axis=-1)[1], ((3, 4), P))),
        ("stack", _op(lambda a, b: nx.stack([a, b], axis=0), ((3, 2), P), ((3, 2), P))),
        ("softmax", _op(lambda a: nx.softmax(a, axis=-1), ((3, 5), P))),
        ("layer_norm", _op(lambda a, g, b: nx.layer_norm(a, g, b), ((3, 6), P), ((6,), P), ((6,), P))),
        ("attention", _op(nx.scaled_dot_attention, ((2, 3, 4), P), ((2, 5, 4), P), ((2, 5, 3), P))),
        ("focal_loss", _op(lambda p: focal_loss(p, np.array([[1.0, 0.0, 1.0]] * 4), 2.0), ((4, 3), {"lo": 0.05, "hi": 0.95}))),
        ("dafl", _op(lambda p: dafl(p, np.array([[0.7, 0.0, 0.2]] * 4), 2.0), ((4, 3), {"lo": 0.05, "hi": 0.95}))),
    ]
    out = [GradCase(n, "op", OP_TOL, b) for n, b in cases]

    def kinked(fn):
        def build(rng):
            x = _away_from_zero(rng, 3, 4)
            w = _weighted(rng, (3, 4))
            return (lambda a: (fn(a) * w).sum()), [x]

        return build

    out.append(GradCase("relu", "op", OP_TOL, kinked(nx.relu)))
    out.append(GradCase("abs", "op", OP_TOL, kinked(nx.tabs)))
    return out


# ----------------------------------------------------------------- layers
def _small_cfg(mode: str = "tmda", **kw) -> DecoderConfig:
    base = dict(
        num_layers=2, channels=8, heads=2, sample_points=2, n_instances=3, n_points=4,
        attention_mode=mode, bev_h=6, bev_w=5, k_one2many=2, detach_refs=False, dtype="float64",
    )
    base.update(kw)
    return DecoderConfig(**base)


def _randomize(params: dict[str, Tensor], rng) -> None:
    # zero-initialized offsets would hide the offset path from the check
    for name, t in params.items():
        if ".ca.offset" in name:
            t.data = rng.normal(scale=0.5, size=t.shape)


def _bilinear_case(rng):
    feat = _t(rng, 3, 5, 6)
    coords = Tensor(rng.uniform(-0.8, 5.8, size=(7, 2)) + 0.03, requires_grad=True)
    w = _weighted(rng, (7, 3))
    return (lambda f, c: (nx.bilinear_sample(f, c) * w).sum()), [feat, coords]


def _sa_case(rng):
    cfg = _small_cfg()
    p = init_params(cfg, seed=1)
    q = _t(rng, 2, 6, cfg.width)
    names = [n for n in p if n.startswith("layers.0.sa")]
    w = _weighted(rng, (2, 6, cfg.width))

    def f(q, *ws):
        pp = dict(p, **dict(zip(names, ws)))
        return (self_attention(q, pp, "layers.0", cfg.heads) * w).sum()

    return f, [q] + [p[n] for n in names]


def _cross_case(mode):
    def build(rng):
        cfg = _small_cfg(mode)
        p = init_params(cfg, seed=2)
        _randomize(p, rng)
        C, Qn = cfg.channels, 5
        value = _t(rng, cfg.bev_h * cfg.bev_w, C)
        ref = Tensor(rng.uniform(0.15, 0.85, size=(Qn, 2)), requires_grad=True)
        names = [n for n in p if n.startswith("layers.0.ca")]
        if mode == "shared":
            q = _t(rng, Qn, C)
            w = _weighted(rng, (Qn, C))

            def f(q, value, ref, *ws):
                pp = dict(p, **dict(zip(names, ws)))
                out, _ = deformable_attention(q, value, ref, pp, "layers.0", cfg)
                return (out * w).sum()

            return f, [q, value, ref] + [p[n] for n in names]
        qc, ql = _t(rng, Qn, C), _t(rng, Qn, C)
        wc, wl = _weighted(rng, (Qn, C)), _weighted(rng, (Qn, C))

        def f(qc, ql, value, ref, *ws):
            pp = dict(p, **dict(zip(names, ws)))
            oc, ol, _ = tmda(qc, ql, value, ref, pp, "layers.0", cfg)
            return (oc * wc).sum() + (ol * wl).sum()

        return f, [qc, ql, value, ref] + [p[n] for n in names]

    return build


def _heads_case(rng):
    cfg = _small_cfg()
    p = init_params(cfg, seed=3)
    n_inst, C = 2, cfg.channels
    cls_feat, loc_feat = _t(rng, n_inst * cfg.n_points, C), _t(rng, n_inst * cfg.n_points, C)
    ref = Tensor(rng.uniform(0.1, 0.9, size=(n_inst * cfg.n_points, 2)), requires_grad=True)
    names = [n for n in p if n.startswith("layers.0.head")]
    ws, wp = _weighted(rng, (n_inst, cfg.n_classes)), _weighted(rng, (n_inst, cfg.n_points, 2))

    def f(cf, lf, r, *w):
        pp = dict(p, **dict(zip(names, w)))
        s, pts = task_heads(cf, lf, r, pp, "layers.0", cfg)
        return (s * ws).sum() + (pts * wp).sum()

    return f, [cls_feat, loc_feat, ref] + [p[n] for n in names]


def _full_layer_case(rng):
    cfg = _small_cfg()
    p = init_params(cfg, seed=4)
    _randomize(p, rng)
    G, Nq = 2, 2 * cfg.n_points
    q = _t(rng, G, Nq, cfg.width)
    ref = Tensor(rng.uniform(0.15, 0.85, size=(G, Nq, 2)), requires_grad=True)
    value = _t(rng, cfg.bev_h * cfg.bev_w, cfg.channels)
    names = [n for n in p if n.startswith("layers.0.")]
    wq = _weighted(rng, (G, Nq, cfg.width))
    ws = _weighted(rng, (G * 2, cfg.n_classes))

    def f(q, ref, value, *w):
        pp = dict(p, **dict(zip(names, w)))
        qo, s, pts, _ = decoder_layer(q, ref, value, pp, 0, cfg)
        return (qo * wq).sum() + (s * ws).sum() + pts.sum()

    return f, [q, ref, value] + [p[n] for n in names]


def _layer_cases() -> list[GradCase]:
    cases = [
        GradCase("bilinear_sample", "layer", LAYER_TOL, _bilinear_case),
        GradCase("self_attention", "layer", OP_TOL, _sa_case),
        GradCase("task_heads", "layer", LAYER_TOL, _heads_case),
        GradCase("decoder_layer_tmda", "layer", LAYER_TOL, _full_layer_case),
    ]
    for mode in ("shared", "tmda", "setting1", "setting2", "setting3"):
        name = "deformable_attention" if mode == "shared" else f"tmda_{mode}" if mode != "tmda" else "tmda"
        cases.append(GradCase(name, "layer", LAYER_TOL, _cross_case(mode)))
    return cases


# ------------------------------------------------------------------- e2e
def _toy_scene(rng, n_points: int) -> MapScene:
    a = np.linspace([0.2, 0.15], [0.3, 0.85], n_points)
    b = np.linspace([0.7, 0.8], [0.75, 0.2], n_points)
    sq = np.array([[0.4, 0.4], [0.6, 0.4], [0.6, 0.55], [0.4, 0.55]])
    ring = np.concatenate([np.linspace(sq[i], sq[(i + 1) % 4], n_points // 4, endpoint=False) for i in range(4)])
    return MapScene([PolylineInstance(1, a), PolylineInstance(2, b), PolylineInstance(0, ring)])


def e2e_case(mode: str = "tmda"):
    """Total training loss of a 2-layer, C=8 decoder in train mode.

    Matches and localization confidences are assignment decisions, so they are
    computed once at the base point and held fixed while probing.
    """
    from .train import TrainConfig, layer_targets  # local: train imports this package

    def build(rng):
        dcfg = _small_cfg(mode, n_points=8)
        model = MapDecoder(dcfg, seed=5)
        _randomize(model.params, rng)
        scene = _toy_scene(rng, dcfg.n_points)
        raster = rng.normal(size=(dcfg.in_channels, dcfg.bev_h, dcfg.bev_w))
        tcfg = TrainConfig(
            steps=1, num_layers=2, channels=8, heads=2, sample_points=2, n_instances=3,
            n_points=8, attention_mode=mode, bev_h=6, bev_w=5, k_one2many=2, detach_refs=False, dtype="float64",
        )
        lcfg = LossConfig(num_layers=2, layers_fl=1)
        gts = list(scene.instances)
        base = model.forward(raster, mode="train")
        frozen = [[tg for (_, _, tg) in layer_targets(base, l, gts, tcfg)] for l in range(dcfg.num_layers)]
        names = list(model.params)

        def f(*ws):
            model.params = dict(zip(names, ws))
            out = model.forward(raster, mode="train")
            groups = []
            for g, group in enumerate(("one2one", "one2many")):
                groups.append([(*out.group_tensors(l, group), frozen[l][g]) for l in range(dcfg.num_layers)])
            return total_loss(groups, lcfg).tensor

        return f, [model.params[n] for n in names]

    return build


def all_cases() -> list[GradCase]:
    return _op_cases() + _layer_cases() + [
        GradCase("e2e_tmda_2layer", "e2e", E2E_TOL, e2e_case("tmda"), max_coords=6),
        GradCase("e2e_shared_2layer", "e2e", E2E_TOL, e2e_case("shared"), max_coords=6),
    ]


def run_case(case: GradCase, seed: int = 0) -> GradResult:
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    start = time.perf_counter()
    f, inputs = case.build(rng)
    err = grad_check(f, inputs, max_coords=case.max_coords, rng=rng)
    return GradResult(case.name, case.kind, case.tol, err, time.perf_counter() - start)


def run_suite(seed: int = 0, names: list[str] | None = None) -> list[GradResult]:
    cases = all_cases()
    if names:
        unknown = set(names) - {c.name for c in cases}
        if unknown:
            raise KeyError(f"unknown gradient checks: {sorted(unknown)}")
        cases = [c for c in cases if c.name in names]
    return [run_case(c, seed) for c in cases]


def format_table(results: list[GradResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  kind   max_rel_err  tol     status"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.kind:<5}  {r.max_rel_err:.3e}    {r.tol:.0e}   {status}")
    return "\n".join(lines)
