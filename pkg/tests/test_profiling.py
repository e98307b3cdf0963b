"""Operation accounting: oracle equality, conventions, ratios, skip reports."""

from dataclasses import replace

import numpy as np
import pytest

from spiking_conformer.model import ModelConfig, SpikingConformer, build_model, detection_config, prediction_config
from spiking_conformer.neurons import LifParams
from spiking_conformer.profiling import (
    AnnOpModel,
    OpTally,
    _masked_linear_adds,
    count_ann_ops,
    count_snn_ops,
    efficiency_ratio,
    run_outcome,
    skip_report,
)
from spiking_conformer.synthetic import make_separable_dataset

from op_oracle import oracle_count


def random_tiny_model(rng, approx=False, t_th=None):
    cfg = ModelConfig(
        task="detection",
        ch=int(rng.integers(2, 4)),
        sample_len=int(rng.integers(89, 140)),
        T=int(rng.integers(2, 4)),
        k=int(rng.integers(1, 3)),
        embed_dim=int(rng.integers(2, 5)),
        n_encoders=int(rng.integers(1, 3)),
        mlp_ratio=1.0,
        classifier_hidden=2,
        t_th=0,
        lif=LifParams(v_th=float(rng.uniform(0.4, 1.0))),
    )
    if t_th is None:
        t_th = int(rng.integers(0, cfg.T + 1))
    cfg = replace(cfg, t_th=t_th, approx_enabled=approx)
    model = build_model(cfg, seed=int(rng.integers(1 << 30)))
    # perturb weights so spiking activity is present without training
    for key, val in model.params.items():
        if key.endswith(".w"):
            model.params[key] = val * 3.0
    seg = rng.normal(size=(cfg.ch, cfg.sample_len))
    return model, seg


def tallies_match(model, seg):
    tally = count_snn_ops(model, seg)
    oracle, _, _ = oracle_count(model, seg)
    got = {name: (ops.adds, ops.core_muls, ops.full_muls)
           for name, ops in tally.per_layer.items()}
    zero = (0, 0, 0)
    for name in sorted(set(got) | set(oracle)):
        assert got.get(name, zero) == oracle.get(name, zero), (
            f"{name}: profiler {got.get(name, zero)} != oracle {oracle.get(name, zero)}"
        )
    return tally


class TestCountConventions:
    def test_linear_layer_example(self):
        # 2 -> 1 linear, raster [1,0] then [1,1]: 1 + 2 = 3 synaptic adds
        raster = np.array([[[1.0, 0.0]], [[1.0, 1.0]]])  # (T=2, N=1, D=2)
        assert _masked_linear_adds(raster, None, t_th=2, n_out=1) == 3

    def test_all_silent(self):
        raster = np.zeros((4, 3, 5))
        assert _masked_linear_adds(raster, None, t_th=4, n_out=7) == 0

    def test_silent_segment_still_counts_state_ops(self):
        model = build_model(
            ModelConfig(task="detection", ch=2, sample_len=100, T=2, k=1,
                        embed_dim=2, n_encoders=1, classifier_hidden=2),
            seed=0,
        )
        tally = count_snn_ops(model, np.zeros((2, 100)))
        assert tally.per_layer["conv.spatial"].adds > 0  # offset adds remain
        assert tally.per_layer["lif.temporal"].adds == 2 * 1 * 2 * 76 * 2
        assert tally.per_layer["head.rate"].adds == 0


class TestOracleEquality:
    def test_exact_mode_matches(self):
        rng = np.random.default_rng(42)
        for _ in range(12):
            model, seg = random_tiny_model(rng, approx=False)
            tallies_match(model, seg)

    def test_approx_mode_matches(self):
        rng = np.random.default_rng(43)
        for _ in range(12):
            model, seg = random_tiny_model(rng, approx=True)
            tallies_match(model, seg)

    def test_rasters_agree(self):
        rng = np.random.default_rng(44)
        from spiking_conformer.model import _forward_batch

        for _ in range(6):
            model, seg = random_tiny_model(rng, approx=bool(rng.integers(2)))
            _, aux = _forward_batch(
                model, seg[None], approx_enabled=model.cfg.approx_enabled,
                collect=True, checked=True,
            )
            _, logits_o, rasters = oracle_count(model, seg)
            rec = aux["record"]
            np.testing.assert_array_equal(rec["s1"][:, 0], rasters["s1"])
            np.testing.assert_array_equal(rec["tokens0"][:, 0], rasters["tokens0"])
            last = f"enc{model.cfg.n_encoders - 1}.out"
            np.testing.assert_array_equal(rec["tokens_final"][:, 0], rasters[last])

    def test_tally_determinism(self):
        rng = np.random.default_rng(45)
        model, seg = random_tiny_model(rng, approx=True)
        a = count_snn_ops(model, seg)
        b = count_snn_ops(model, seg)
        assert {k: (v.adds, v.core_muls, v.full_muls) for k, v in a.per_layer.items()} == \
               {k: (v.adds, v.core_muls, v.full_muls) for k, v in b.per_layer.items()}

    def test_approx_never_increases_adds(self):
        rng = np.random.default_rng(46)
        for _ in range(10):
            model, seg = random_tiny_model(rng, approx=False)
            exact = count_snn_ops(model, seg)
            approx_model = SpikingConformer(
                replace(model.cfg, approx_enabled=True, t_th=int(rng.integers(0, model.cfg.T))),
                model.params, model.bn_running, model.seed,
            )
            approx = count_snn_ops(approx_model, seg)
            assert approx.adds <= exact.adds


class TestAnnOps:
    def test_single_linear(self):
        ann = AnnOpModel(per_layer={"fc": 2})
        assert ann.total_macs == 2
        assert ann.total_ops == 4

    def test_doubling_embed_quadruples_encoder_macs(self):
        base = count_ann_ops(detection_config(embed_dim=32))
        wide = count_ann_ops(detection_config(embed_dim=64))
        for name in ("enc0.qkv", "enc0.attn_proj"):
            assert wide.per_layer[name] == 4 * base.per_layer[name]

    def test_prediction_order_of_magnitude(self):
        # tens of millions of ops; 2.7e7 is the reference figure
        ann = count_ann_ops(prediction_config())
        assert 1e7 <= ann.grand_total <= 2e8

    def test_softmax_counted_separately(self):
        ann = count_ann_ops(detection_config())
        assert ann.softmax_ops == 5 * 24 * 24


class TestEfficiencyRatio:
    def test_paper_prediction_figures(self):
        # 2.1M ADD + 6.1K MUL vs 27.1M ops -> 12.87
        snn = OpTally.from_totals(2_100_000, 6_100)
        ann = AnnOpModel(per_layer={"total": 13_550_000})  # 27.1M ops
        assert abs(efficiency_ratio(snn, ann) - 12.87) <= 0.01

    def test_paper_detection_figures(self):
        # 0.32M ADD + 1.0K MUL vs 4.1M ops -> 12.77
        snn = OpTally.from_totals(320_000, 1_000)
        ann = AnnOpModel(per_layer={"total": 2_050_000})
        assert abs(efficiency_ratio(snn, ann) - 12.77) <= 0.01

    def test_ratio_decreases_with_spike_rate(self):
        ann = AnnOpModel(per_layer={"total": 1_000_000})
        ratios = [
            efficiency_ratio(OpTally.from_totals(adds, 100), ann)
            for adds in (1_000, 10_000, 100_000)
        ]
        assert ratios[0] > ratios[1] > ratios[2]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            efficiency_ratio(OpTally.from_totals(0, 0), AnnOpModel(per_layer={"x": 1}))
        with pytest.raises(ValueError):
            efficiency_ratio(OpTally.from_totals(1, 1), AnnOpModel())


class TestSkipReport:
    def make_model_and_data(self, t_th):
        cfg = ModelConfig(task="detection", ch=4, sample_len=200, T=4, k=2,
                          embed_dim=4, n_encoders=1, classifier_hidden=3,
                          t_th=t_th, lif=LifParams(v_th=0.5))
        model = build_model(cfg, seed=9)
        ds = make_separable_dataset(12, seed=5, n_channels=4, n_samples=200)
        return model, ds

    def test_boundary_zero_reduction(self):
        model, ds = self.make_model_and_data(t_th=4)
        exact = run_outcome(model, ds.X, ds.y, approx_enabled=False, max_op_segments=4)
        approx = run_outcome(model, ds.X, ds.y, approx_enabled=True, max_op_segments=4)
        rep = skip_report(exact, approx)
        assert rep.reduction_percent == 0.0
        assert rep.divergent_predictions == 0
        assert rep.adds_exact == rep.adds_approx
        assert rep.acc_delta == 0.0

    def test_skipping_reported(self):
        model, ds = self.make_model_and_data(t_th=1)
        exact = run_outcome(model, ds.X, ds.y, approx_enabled=False, max_op_segments=4)
        approx = run_outcome(model, ds.X, ds.y, approx_enabled=True, max_op_segments=4)
        rep = skip_report(exact, approx)
        assert rep.reduction_percent > 0.0
        assert rep.adds_approx <= rep.adds_exact
        assert set(rep.per_layer) == {
            "conv.spatial", "enc0.q", "enc0.k", "enc0.v",
            "enc0.attn_proj", "enc0.mlp1", "enc0.mlp2",
        }

    def test_mismatched_inputs_rejected(self):
        model, ds = self.make_model_and_data(t_th=2)
        a = run_outcome(model, ds.X[:4], ds.y[:4], max_op_segments=1)
        b = run_outcome(model, ds.X[:6], ds.y[:6], max_op_segments=1)
        with pytest.raises(ValueError):
            skip_report(a, b)


class TestFullScaleTallies:
    def test_detection_counts_reported(self):
        # reporting sanity at the real shape: spike adds dominate core muls
        model = build_model(detection_config(), seed=0)
        ds = make_separable_dataset(2, seed=6)
        tally = count_snn_ops(model, ds.X[0])
        assert tally.adds > 100_000
        assert tally.core_muls < tally.adds
        assert tally.full_muls >= tally.core_muls
        ann = count_ann_ops(model.cfg)
        ratio = efficiency_ratio(tally, ann)
        assert ratio > 1.0
