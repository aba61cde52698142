"""Assembled models: shape chains, complexity accounting, config round trips."""

import json

import numpy as np
import pytest

from marnet import autodiff as ad
from marnet.model import (
    FCRSpec,
    Model,
    ModelConfig,
    classifier_config,
    complexity,
    lite_config,
    scaled_classifier_config,
    segmenter_config,
)

# (channels, points) chains every forward pass must reproduce exactly, in
# stage order backbone -> cross-reference -> re-encode.
CLS_CHAIN = [
    (64, 512), (128, 128), (256, 32), (256, 1),       # backbone
    (128, 32), (64, 128), (32, 512),                  # cross-reference
    (96, 128), (288, 32), (672, 1),                   # re-encode
]
LITE_CHAIN = [
    (32, 512), (64, 128), (128, 32), (256, 1),
    (128, 32), (64, 128), (32, 512),
    (64, 128), (192, 32), (448, 1),
]
SEG_FP_CHAIN = [(32, 256), (128, 128), (512, 128), (1024, 128)]  # (points, channels)


def _cloud(rng, n):
    pts = rng.uniform(-1, 1, (n, 3))
    nrm = rng.standard_normal((n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pts, nrm


class TestShapeConformance:
    def test_classifier_chain_at_1024_points(self):
        model = Model(classifier_config(40, 2), seed=0)
        pts, nrm = _cloud(np.random.default_rng(0), 1024)
        logits, t = model.forward_classify(pts, nrm, "eval", trace=True)
        assert [(c, p) for (_, _, c, p) in t.shapes()] == CLS_CHAIN
        assert logits.data.shape == (1, 40)

    def test_lite_chain_at_1024_points(self):
        model = Model(lite_config(40, 2), seed=0)
        pts, nrm = _cloud(np.random.default_rng(1), 1024)
        logits, t = model.forward_classify(pts, nrm, "eval", trace=True)
        assert [(c, p) for (_, _, c, p) in t.shapes()] == LITE_CHAIN
        assert logits.data.shape == (1, 40)

    def test_segmenter_decode_chain(self):
        model = Model(segmenter_config(6, 2), seed=0)
        pts, nrm = _cloud(np.random.default_rng(2), 1024)
        logits, t = model.forward_segment(pts, nrm, "eval", trace=True)
        assert [(c, p) for (_, _, c, p) in t.shapes()] == CLS_CHAIN
        assert [f.data.shape for f in t.fp_feats] == SEG_FP_CHAIN
        assert logits.data.shape == (1024, 6)

    def test_sparse_64_point_input_keeps_channel_widths(self):
        model = Model(classifier_config(40, 2), seed=0)
        pts, nrm = _cloud(np.random.default_rng(3), 64)
        _, t = model.forward_classify(pts, nrm, "eval", trace=True)
        chain = [(c, p) for (_, _, c, p) in t.shapes()]
        assert [c for c, _ in chain] == [c for c, _ in CLS_CHAIN]
        # Point counts clamp to what the input can supply.
        assert [p for _, p in chain] == [64, 64, 32, 1, 32, 64, 64, 64, 32, 1]

    def test_global_feature_is_final_reencoded_state(self):
        model = Model(classifier_config(40, 2), seed=0)
        pts, nrm = _cloud(np.random.default_rng(4), 256)
        t = model.trunk(pts, nrm, "eval")
        assert t.global_feats is t.fre[-1].feats
        assert t.global_feats.data.shape == (1, 672)

    def test_constant_duplicate_cloud_gives_equal_part_rows(self):
        model = Model(segmenter_config(4, 2), seed=0)
        pts = np.zeros((64, 3))
        nrm = np.tile([0.0, 0.0, 1.0], (64, 1))
        logits = model.forward_segment(pts, nrm, "eval")
        assert np.abs(logits.data - logits.data[0]).max() < 1e-6


class TestComplexity:
    def test_classifier_parameter_band(self):
        n = Model(classifier_config(40, 2), seed=0).n_parameters()
        assert abs(n - 1_130_000) <= 0.10 * 1_130_000

    def test_lite_parameter_band(self):
        n = Model(lite_config(40, 2), seed=0).n_parameters()
        assert abs(n - 680_000) <= 0.10 * 680_000

    def test_group_sweep_bands_and_strict_monotonicity(self):
        targets = {1: 1_850_000, 2: 1_130_000, 4: 840_000, 8: 670_000}
        counts = {g: Model(classifier_config(40, g), seed=0).n_parameters() for g in targets}
        for g, target in targets.items():
            assert abs(counts[g] - target) <= 0.10 * target, (g, counts[g])
        assert counts[1] > counts[2] > counts[4] > counts[8]

    def test_classifier_flop_band(self):
        flops = complexity(classifier_config(40, 2), n_points=1024).total_flops
        assert abs(flops - 1_040_000_000) <= 0.35 * 1_040_000_000

    def test_lite_is_cheaper_than_classifier(self):
        lite = complexity(lite_config(40, 2), n_points=1024)
        full = complexity(classifier_config(40, 2), n_points=1024)
        assert lite.total_flops < full.total_flops
        assert lite.total_params < full.total_params

    def test_report_totals_equal_breakdown(self):
        rep = complexity(segmenter_config(6, 2), n_points=1024)
        assert rep.total_params == sum(c.params for c in rep.per_layer)
        assert rep.total_flops == sum(c.flops for c in rep.per_layer)
        assert "multiply-accumulate" in rep.convention.lower()

    @pytest.mark.parametrize(
        "config",
        [
            classifier_config(40, 1),
            classifier_config(40, 2),
            classifier_config(40, 8),
            lite_config(40, 2),
            segmenter_config(6, 2),
            scaled_classifier_config(5, 40, 2),
        ],
        ids=["cls-g1", "cls-g2", "cls-g8", "lite", "seg", "levels5"],
    )
    def test_report_matches_built_model(self, config):
        # Dual route: accounting derived from the config alone must agree
        # with the scalar count of the actually constructed arrays.
        assert complexity(config).total_params == Model(config, seed=0).n_parameters()

    def test_level_sweep_is_strictly_increasing(self):
        counts = [
            Model(scaled_classifier_config(n, 40, 2), seed=0).n_parameters()
            for n in (3, 4, 5, 6)
        ]
        assert counts == sorted(counts) and len(set(counts)) == 4

    def test_four_levels_reproduce_reference_classifier(self):
        assert scaled_classifier_config(4, 40, 2) == classifier_config(40, 2)

    def test_table_output_lists_every_layer(self):
        rep = complexity(classifier_config(40, 2))
        text = rep.table()
        for name in ("bb1", "bb4", "fcr3", "fre3", "fc", "total"):
            assert name in text


class TestConfigHandling:
    def test_json_round_trip_rebuilds_identically(self):
        cfg = segmenter_config(6, 4)
        blob = json.dumps(cfg.to_dict())
        back = ModelConfig.from_dict(json.loads(blob))
        assert back == cfg
        a = Model(cfg, seed=7)
        b = Model(back, seed=7)
        name = "bb1.r0.l0.w" if "bb1.r0.l0.w" in a.parameters() else next(iter(a.parameters()))
        np.testing.assert_array_equal(a.parameters()[name].data, b.parameters()[name].data)

    def test_unknown_task_rejected(self):
        cfg = classifier_config(40, 2)
        cfg.task = "regression"
        with pytest.raises(ad.ConfigError):
            Model(cfg, seed=0)

    def test_head_must_end_in_output_width(self):
        cfg = classifier_config(40, 2)
        cfg.head[-1].out_channels = 39
        with pytest.raises(ad.ConfigError):
            Model(cfg, seed=0)

    def test_channel_chain_error_names_offending_layer(self):
        cfg = classifier_config(40, 2)
        cfg.backbone[1].in_channels += 1
        with pytest.raises(ad.ConfigError, match="bb2"):
            Model(cfg, seed=0)

    def test_mismatched_stage_depths_rejected(self):
        cfg = classifier_config(40, 2)
        cfg.cross_reference = cfg.cross_reference[:-1]
        with pytest.raises(ad.ConfigError):
            Model(cfg, seed=0)

    def test_last_backbone_level_must_be_global(self):
        cfg = classifier_config(40, 2)
        cfg.backbone[-1].radii = [0.5]
        with pytest.raises(ad.ConfigError):
            Model(cfg, seed=0)


class TestForwardSemantics:
    def test_eval_forward_is_bitwise_repeatable(self):
        model = Model(classifier_config(10, 2), seed=0)
        pts, nrm = _cloud(np.random.default_rng(5), 256)
        a = model.forward_classify(pts, nrm, "eval")
        b = model.forward_classify(pts, nrm, "eval")
        np.testing.assert_array_equal(a.data, b.data)

    def test_permutation_invariance_within_float32_tolerance(self):
        model = Model(classifier_config(10, 2), seed=0)
        rng = np.random.default_rng(6)
        pts, nrm = _cloud(rng, 256)
        perm = rng.permutation(256)
        a = model.forward_classify(pts, nrm, "eval")
        b = model.forward_classify(pts[perm], nrm[perm], "eval")
        assert np.abs(a.data - b.data).max() < 1e-4

    def test_task_guards(self):
        cls = Model(classifier_config(10, 2), seed=0)
        seg = Model(segmenter_config(4, 2), seed=0)
        pts, nrm = _cloud(np.random.default_rng(7), 64)
        with pytest.raises(ad.ConfigError):
            cls.forward_segment(pts, nrm)
        with pytest.raises(ad.ConfigError):
            seg.forward_classify(pts, nrm)

    def test_nonfinite_activation_error_names_the_layer(self):
        model = Model(lite_config(10, 2), seed=0)
        params = model.parameters()
        name = next(n for n in params if n.startswith("bb1") and n.endswith(".w"))
        params[name].data[...] = np.nan
        pts, nrm = _cloud(np.random.default_rng(8), 64)
        with pytest.raises(ad.NonFiniteError, match="bb1"):
            model.forward_classify(pts, nrm, "eval")

    def test_segmentation_gradient_reaches_every_input_point(self):
        model = Model(segmenter_config(4, 2), seed=0)
        pts, nrm = _cloud(np.random.default_rng(9), 1024)
        logits, t = model.forward_segment(
            pts, nrm, "eval", trace=True, input_requires_grad=True
        )
        loss = ad.softmax_cross_entropy(logits, np.zeros(1024, dtype=np.int64))
        loss.backward()
        assert t.attrs.grad is not None
        assert (np.linalg.norm(t.attrs.grad, axis=1) > 0).all()


class TestResidualToggle:
    @staticmethod
    def _graph_edges(out):
        seen = {id(out)}
        stack = [out]
        edges = 0
        while stack:
            node = stack.pop()
            edges += len(node._parents)
            for p in node._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        return edges

    def test_residual_off_same_params_fewer_graph_edges(self):
        on = Model(classifier_config(10, 2, use_residual=True), seed=0)
        off = Model(classifier_config(10, 2, use_residual=False), seed=0)
        assert on.n_parameters() == off.n_parameters()
        name = next(iter(on.parameters()))
        np.testing.assert_array_equal(
            on.parameters()[name].data, off.parameters()[name].data
        )
        pts, nrm = _cloud(np.random.default_rng(10), 128)
        e_on = self._graph_edges(on.forward_classify(pts, nrm, "eval"))
        e_off = self._graph_edges(off.forward_classify(pts, nrm, "eval"))
        assert e_off < e_on

    def test_residual_off_counts_fewer_flops(self):
        on = complexity(classifier_config(40, 2, use_residual=True))
        off = complexity(classifier_config(40, 2, use_residual=False))
        assert off.total_params == on.total_params
        assert off.total_flops < on.total_flops


class TestParameterFreePathGradient:
    def test_zeroed_transforms_still_pass_gradient_to_level1_features(self):
        model = Model(lite_config(10, 2), seed=0, dtype=np.float64)
        model.zero_transform_params()
        model.set_bn_bypass(True)
        pts, nrm = _cloud(np.random.default_rng(11), 128)
        t = model.trunk(pts, nrm, "eval")
        logits = model.head_forward(t.global_feats, "eval")
        loss = ad.softmax_cross_entropy(logits, np.array([3]))
        loss.backward()
        g = t.bb[1].feats.grad
        assert g is not None and np.linalg.norm(g) > 0
