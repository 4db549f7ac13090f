import numpy as np
import pytest

from vecmap.data import GeneratorParams, generate_scenes
from vecmap.gradsuite import _small_cfg
from vecmap.model import (
    ATTENTION_MODES,
    DecoderConfig,
    MapDecoder,
    ModelError,
    count_params,
    deformable_attention,
    grid_offset_bias,
    init_params,
    read_checkpoint,
    self_attention,
    task_heads,
    tmda,
    write_checkpoint,
)
from vecmap.numerics import Tensor
from vecmap.train import TrainConfig, scene_loss


def small(mode="tmda", **kw):
    return _small_cfg(mode, **kw)


def raster_for(cfg, seed=0):
    return np.random.default_rng(seed).uniform(size=(cfg.in_channels, cfg.bev_h, cfg.bev_w))


def cross_inputs(cfg, seed=0, qn=5):
    rng = np.random.default_rng(seed)
    value = Tensor(rng.normal(size=(cfg.bev_h * cfg.bev_w, cfg.channels)))
    ref = Tensor(rng.uniform(0.2, 0.8, size=(qn, 2)))
    return rng, value, ref


class TestConfig:
    @pytest.mark.parametrize("mode, width", [("shared", 32), ("tmda", 64), ("setting1", 64), ("setting3", 64)])
    def test_width(self, mode, width):
        assert DecoderConfig(attention_mode=mode).width == width

    @pytest.mark.parametrize(
        "kw", [{"attention_mode": "bogus"}, {"num_layers": 0}, {"channels": 30, "heads": 4}, {"dtype": "float16"}]
    )
    def test_rejected(self, kw):
        with pytest.raises(ModelError):
            DecoderConfig(**kw)

    def test_offset_init_rejected(self):
        with pytest.raises(ModelError):
            DecoderConfig(offset_init="radial")


class TestOffsetInit:
    def test_grid_bias_layout(self):
        b = grid_offset_bias(4, 3).reshape(4, 3, 2)
        np.testing.assert_allclose(b[0], [[1, 0], [2, 0], [3, 0]], atol=1e-12)
        np.testing.assert_allclose(b[1], [[0, 1], [0, 2], [0, 3]], atol=1e-12)
        np.testing.assert_allclose(np.abs(b[:, 0]).max(axis=1), 1.0)

    @pytest.mark.parametrize("mode", ["shared", "tmda", "setting1"])
    def test_only_offset_bias_changes(self, mode):
        zero = init_params(small(mode), seed=0)
        grid = init_params(small(mode, offset_init="grid"), seed=0)
        for name, t in zero.items():
            if ".ca.offset" in name and name.endswith(".b"):
                assert np.abs(grid[name].data).max() >= 1.0
            else:
                assert np.array_equal(t.data, grid[name].data), name


class TestSelfAttention:
    def test_single_query_is_value_projection(self):
        cfg = small()
        p = init_params(cfg, seed=1)
        q = Tensor(np.random.default_rng(0).normal(size=(1, 1, cfg.width)))
        out = self_attention(q, p, "layers.0", cfg.heads).data
        v = q.data @ p["layers.0.sa.v.w"].data + p["layers.0.sa.v.b"].data
        mixed = v @ p["layers.0.sa.o.w"].data + p["layers.0.sa.o.b"].data
        x = q.data + mixed
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + 1e-5) * p["layers.0.sa_norm.g"].data + p["layers.0.sa_norm.b"].data
        np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)

    def test_identical_queries_identical_outputs(self):
        cfg = small()
        p = init_params(cfg, seed=1)
        row = np.random.default_rng(0).normal(size=cfg.width)
        out = self_attention(Tensor(np.tile(row, (1, 3, 1))), p, "layers.0", cfg.heads).data
        np.testing.assert_array_equal(out[0, 0], out[0, 1])

    def test_groups_do_not_interact(self):
        cfg = small()
        p = init_params(cfg, seed=1)
        q = np.random.default_rng(0).normal(size=(2, 4, cfg.width))
        a = self_attention(Tensor(q), p, "layers.0", cfg.heads).data
        q2 = q.copy()
        q2[1] += 1.0
        b = self_attention(Tensor(q2), p, "layers.0", cfg.heads).data
        np.testing.assert_array_equal(a[0], b[0])


class TestDeformableAttention:
    def test_degenerate_sampling_picks_cell(self):
        cfg = small("shared", heads=1, sample_points=1, channels=8)
        p = init_params(cfg, seed=0)
        rng, value, _ = cross_inputs(cfg)
        # cell (row 2, col 3) center in normalized coordinates
        ref = Tensor([[(3 + 0.5) / cfg.bev_w, (2 + 0.5) / cfg.bev_h]])
        q = Tensor(rng.normal(size=(1, cfg.channels)))
        _, trace = deformable_attention(q, value, ref, p, "layers.0", cfg)
        np.testing.assert_allclose(trace.locations["shared"][0, 0, 0], [3.0, 2.0], atol=1e-12)
        np.testing.assert_array_equal(trace.weights["shared"], 1.0)

        from vecmap.model import attend, sample_values, sampling_locations

        locs = sampling_locations(ref, Tensor(np.zeros((1, 2))), cfg)
        out, _ = attend(Tensor(np.zeros((1, 1))), sample_values(value, locs, cfg), cfg)
        np.testing.assert_allclose(out.data[0], value.data[2 * cfg.bev_w + 3], atol=1e-12)

    @pytest.mark.parametrize("mode", ATTENTION_MODES)
    def test_weights_sum_to_one(self, mode):
        cfg = small(mode)
        model = MapDecoder(cfg, seed=0)
        out = model.forward(raster_for(cfg), mode="train")
        for layer in out.layers:
            for w in layer.trace.weights.values():
                assert np.max(np.abs(w.sum(-1) - 1.0)) <= 1e-12


class TestTmda:
    def test_streams_share_locations_bit_exactly(self):
        cfg = small()
        p = init_params(cfg, seed=0)
        rng, value, ref = cross_inputs(cfg)
        for t in (p["layers.0.ca.offset.w"],):
            t.data = rng.normal(size=t.shape)
        qc, ql = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(5, 8)))
        _, _, trace = tmda(qc, ql, value, ref, p, "layers.0", cfg)
        assert trace.locations["cls"] is trace.locations["loc"]
        assert np.array_equal(trace.locations["cls"], trace.locations["loc"])

    def test_symmetric_init_gives_equal_streams(self):
        cfg = small()
        p = init_params(cfg, seed=0)
        rng, value, ref = cross_inputs(cfg)
        for a, b in (("attn_loc", "attn_cls"), ("ca_norm_loc", "ca_norm_cls")):
            for suffix in ("w", "b", "g"):
                key = f"layers.0.ca.{a}.{suffix}" if "attn" in a else f"layers.0.{a}.{suffix}"
                if key in p:
                    p[key] = Tensor(p[key.replace(a, b)].data.copy())
        q = Tensor(rng.normal(size=(5, 8)))
        oc, ol, _ = tmda(q, q, value, ref, p, "layers.0", cfg)
        np.testing.assert_array_equal(oc.data, ol.data)

    def test_width_mismatch(self):
        cfg = small()
        p = init_params(cfg, seed=0)
        _, value, ref = cross_inputs(cfg)
        with pytest.raises(ModelError):
            tmda(Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 8))), value, ref, p, "layers.0", cfg)

    def test_tied_tmda_equals_standard_deformable(self):
        """tmda with Q_cls == Q_loc and tied projections reduces to the shared-mode layer."""
        tc, sc = small("tmda"), small("shared")
        pt, ps = init_params(tc, seed=0), init_params(sc, seed=0)
        rng, value, ref = cross_inputs(tc)
        q = Tensor(rng.normal(size=(5, 8)))
        off = rng.normal(size=ps["layers.0.ca.offset.w"].shape)
        ps["layers.0.ca.offset.w"].data = off
        # the concatenated query [q, q] hits the stacked weight as q @ (W_top + W_bottom)
        pt["layers.0.ca.offset.w"].data = np.concatenate([off, np.zeros_like(off)])
        pt["layers.0.ca.offset.b"].data = ps["layers.0.ca.offset.b"].data.copy()
        for s in ("cls", "loc"):
            for k in ("w", "b"):
                pt[f"layers.0.ca.attn_{s}.{k}"].data = ps[f"layers.0.ca.attn.{k}"].data.copy()
            for k in ("g", "b"):
                pt[f"layers.0.ca_norm_{s}.{k}"].data = ps[f"layers.0.ca_norm.{k}"].data.copy()
        oc, ol, _ = tmda(q, q, value, ref, pt, "layers.0", tc)
        os_, _ = deformable_attention(q, value, ref, ps, "layers.0", sc)
        np.testing.assert_allclose(oc.data, os_.data, rtol=0, atol=1e-13)
        np.testing.assert_allclose(ol.data, os_.data, rtol=0, atol=1e-13)

    def test_setting3_equal_streams_when_offsets_collapse(self):
        cfg = small("setting3")
        p = init_params(cfg, seed=0)
        rng, value, ref = cross_inputs(cfg)
        q = Tensor(rng.normal(size=(5, 8)))
        for s in ("cls", "loc"):
            p[f"layers.0.ca.offset_{s}.w"].data[:] = 0.0
            p[f"layers.0.ca.offset_{s}.b"].data[:] = 0.0
        p["layers.0.ca_norm_loc.g"].data = p["layers.0.ca_norm_cls.g"].data.copy()
        p["layers.0.ca_norm_loc.b"].data = p["layers.0.ca_norm_cls.b"].data.copy()
        oc, ol, _ = tmda(q, q, value, ref, p, "layers.0", cfg)
        np.testing.assert_array_equal(oc.data, ol.data)

    def test_setting1_identical_samplers_equal(self):
        cfg = small("setting1")
        p = init_params(cfg, seed=0)
        rng, value, ref = cross_inputs(cfg)
        for a in ("offset", "attn"):
            for k in ("w", "b"):
                p[f"layers.0.ca.{a}_loc.{k}"].data = p[f"layers.0.ca.{a}_cls.{k}"].data.copy()
        for k in ("g", "b"):
            p[f"layers.0.ca_norm_loc.{k}"].data = p[f"layers.0.ca_norm_cls.{k}"].data.copy()
        q = Tensor(rng.normal(size=(5, 8)))
        oc, ol, _ = tmda(q, q, value, ref, p, "layers.0", cfg)
        np.testing.assert_array_equal(oc.data, ol.data)


class TestParameterCounts:
    EXPECTED = {"shared": 72000, "tmda": 185504, "setting1": 185696, "setting2": 204128, "setting3": 197888}

    def attention_params(self, mode):
        p = init_params(DecoderConfig(attention_mode=mode))
        return sum(t.size for n, t in p.items() if ".ca." in n and ".value" not in n)

    @pytest.mark.parametrize("mode", ATTENTION_MODES)
    def test_total_counts(self, mode):
        assert count_params(init_params(DecoderConfig(attention_mode=mode))) == self.EXPECTED[mode]

    def test_analytic_cross_attention_sizes(self):
        C, h, P = 32, 4, 4
        lin = lambda i, o: i * o + o
        per_layer = {
            "tmda": lin(2 * C, 2 * h * P) + 2 * lin(C, h * P),
            "setting1": 2 * lin(C, 2 * h * P) + 2 * lin(C, h * P),
            "setting2": 2 * lin(2 * C, 2 * h * P) + 2 * lin(2 * C, h * P),
            "setting3": 2 * lin(2 * C, 2 * h * P) + lin(2 * C, h * P),
        }
        for mode, n in per_layer.items():
            assert self.attention_params(mode) == 6 * n

    @pytest.mark.xfail(strict=True, reason="settings 2 and 3 project from the 2C-wide query, ~10% larger")
    def test_settings_within_one_percent(self):
        counts = [self.EXPECTED[m] for m in ("tmda", "setting1", "setting2", "setting3")]
        assert max(counts) <= 1.01 * min(counts)


class TestHeads:
    def test_zero_weights_give_half(self):
        cfg = small()
        p = init_params(cfg, seed=0)
        for n in p:
            if ".head_" in n:
                p[n].data[:] = 0.0
        feat = Tensor(np.random.default_rng(0).normal(size=(2 * cfg.n_points, cfg.channels)))
        ref = Tensor(np.full((2 * cfg.n_points, 2), 0.5))
        s, pts = task_heads(feat, feat, ref, p, "layers.0", cfg)
        np.testing.assert_array_equal(s.data, 0.5)
        np.testing.assert_allclose(pts.data, 0.5, atol=1e-15)

    def test_refinement_wiring(self):
        cfg = small()
        out = MapDecoder(cfg, seed=0).forward(raster_for(cfg), mode="train")
        for prev, nxt in zip(out.layers, out.layers[1:]):
            np.testing.assert_array_equal(nxt.ref_in.reshape(-1, 2), prev.points.data.reshape(-1, 2))


class TestForward:
    @pytest.mark.parametrize("mode", ATTENTION_MODES)
    def test_shapes_and_ranges(self, mode):
        cfg = small(mode)
        model = MapDecoder(cfg, seed=0)
        infer = model.forward(raster_for(cfg), mode="infer")
        train = model.forward(raster_for(cfg), mode="train")
        assert infer.final.scores.shape == (cfg.n_instances, cfg.n_classes)
        assert infer.final.points.shape == (cfg.n_instances, cfg.n_points, 2)
        assert train.layers[0].scores.shape[0] == (1 + cfg.k_one2many) * cfg.n_instances
        s, p = infer.final.scores, infer.final.points
        assert np.all((s > 0) & (s < 1)) and np.all((p >= 0) & (p <= 1))
        np.testing.assert_array_equal(train.prediction_sets()[-1].scores, s)

    def test_deterministic(self):
        cfg = small()
        a = MapDecoder(cfg, seed=3).forward(raster_for(cfg)).final
        b = MapDecoder(cfg, seed=3).forward(raster_for(cfg)).final
        assert np.array_equal(a.scores, b.scores) and np.array_equal(a.points, b.points)

    def test_raster_shape_checked(self):
        with pytest.raises(ModelError):
            MapDecoder(small()).forward(np.zeros((3, 2, 2)))

    @pytest.mark.parametrize("mode", ["tmda", "shared", "setting2"])
    def test_no_dead_parameters(self, mode):
        tcfg = TrainConfig(
            steps=1, num_layers=2, channels=8, heads=2, sample_points=2, n_instances=4, n_points=6,
            attention_mode=mode, bev_h=12, bev_w=8, k_one2many=2, detach_refs=False, dtype="float64",
        )
        data = generate_scenes(1, 1, GeneratorParams(n_points=6))
        model = MapDecoder(tcfg.decoder_config(), seed=0)
        raster = data.ensure_features(12, 8)[0]
        scene_loss(model, raster, data.scenes[0], tcfg).tensor.backward()
        dead = [n for n, t in model.params.items() if t.grad is None or not np.any(t.grad)]
        assert dead == []


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        cfg = small("setting2", dtype="float32")
        model = MapDecoder(cfg, seed=7)
        write_checkpoint(tmp_path / "m.npz", model)
        back = read_checkpoint(tmp_path / "m.npz")
        assert back.cfg == cfg
        assert list(back.params) == list(model.params)
        for n in model.params:
            assert back.params[n].data.dtype == model.params[n].data.dtype
            assert back.params[n].data.tobytes() == model.params[n].data.tobytes()
