import numpy as np
import pytest
from scipy import special

from cradle.data import load_dataset, write_dataset
from cradle.qc import QcConfig
from cradle.synth import (
    SynthConfig,
    benchmark_config,
    read_truth,
    synth_generate,
    synth_qc_consistency,
    synth_sample_clean,
    true_ate,
    write_truth,
)


@pytest.fixture(scope="module")
def bench():
    cfg = benchmark_config(0)
    return (cfg,) + synth_generate(cfg)


def oracle_frequencies(truth, zb, zp):
    """Independent reimplementation: flagged genes compete with a unit mass for the ordinary block."""
    logits = np.concatenate([zb, zp], axis=1) @ truth.loadings.T + truth.baseline
    f = truth.flagged
    denom = 1.0 + np.exp(logits[:, f]).sum(axis=1, keepdims=True)
    out = np.empty_like(logits)
    out[:, f] = np.exp(logits[:, f]) / denom
    out[:, ~f] = special.softmax(logits[:, ~f], axis=1) / denom
    return out


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(artifact_prevalence=1.2), dict(doublet_rate=-0.1), dict(n_genes=9),
        dict(n_hb=0), dict(n_treatments=1), dict(combinations=[[0, 0]]), dict(combinations=[[0, 9]]),
        dict(n_cells=2, control_fraction=0.1), dict(n_genes=12, n_mito=4, n_hb=4, n_ribo=4),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)

    def test_benchmark_is_frozen(self):
        cfg = benchmark_config(3)
        assert (cfg.n_cells, cfg.n_genes, cfg.n_treatments, cfg.d_z) == (2000, 50, 6, 8)
        assert (cfg.artifact_prevalence, cfg.doublet_rate, cfg.theta, cfg.seed) == (0.3, 0.05, 2.0, 3)


class TestGenerate:
    def test_shapes_and_flags(self, bench):
        cfg, ds, truth = bench
        assert ds.expression.counts.shape == (2000, 50)
        assert ds.perturbations.n_treatments == 6
        assert truth.masks.shape == truth.embeddings.shape == (6, 8)
        assert not truth.masks[-1].any()
        assert truth.masks[:-1].any(axis=1).all()
        assert ds.expression.is_hemoglobin.sum() == cfg.n_hb
        assert (ds.expression.counts.sum(axis=1) > 0).all()
        np.testing.assert_array_equal(ds.doublets, truth.doublet)
        assert truth.labels == ds.perturbations.labels()

    def test_no_artifacts_when_rates_zero(self):
        _, truth = synth_generate(SynthConfig(n_cells=300, artifact_prevalence=0, doublet_rate=0, n_truth_samples=10))
        assert not truth.artifact.any() and not truth.doublet.any()

    def test_zero_effect_scale_zero_ate(self):
        cfg = SynthConfig(n_cells=50, effect_scale=0.0, n_truth_samples=500)
        _, truth = synth_generate(cfg)
        for vec in truth.ate.values():
            np.testing.assert_array_equal(vec, 0.0)

    def test_artifact_prevalence(self):
        cfg = SynthConfig(n_cells=10_000, n_truth_samples=10, seed=11)
        _, truth = synth_generate(cfg)
        # binomial 3-sigma band: 3 * sqrt(.3 * .7 / 1e4) ~ 0.0137
        assert abs(truth.artifact.mean() - 0.3) <= 0.015

    def test_determinism_and_seed_independence(self):
        cfg = SynthConfig(n_cells=200, n_truth_samples=100)
        a, ta = synth_generate(cfg)
        b, tb = synth_generate(cfg)
        np.testing.assert_array_equal(a.expression.counts, b.expression.counts)
        np.testing.assert_array_equal(ta.artifact, tb.artifact)
        c, _ = synth_generate(SynthConfig(n_cells=200, n_truth_samples=100, seed=1))
        assert not np.array_equal(a.expression.counts, c.expression.counts)

    def test_prefix_is_stable(self):
        # per-cell streams: a longer run starts with the same cells
        small, _ = synth_generate(SynthConfig(n_cells=100, n_truth_samples=10))
        large, _ = synth_generate(SynthConfig(n_cells=150, n_truth_samples=10))
        np.testing.assert_array_equal(small.expression.counts, large.expression.counts[:100])

    def test_combination_latent_is_sum_of_singles(self, bench):
        cfg, _, truth = bench
        shift = truth.masks * truth.embeddings
        for combo in cfg.combinations:
            p = np.zeros(cfg.n_treatments)
            p[combo] = 1
            np.testing.assert_allclose(p @ shift, shift[combo].sum(axis=0), rtol=0, atol=1e-15)

    def test_ate_keys(self, bench):
        cfg, ds, truth = bench
        assert set(truth.ate) == {"PERT1", "PERT2", "PERT3", "PERT4", "PERT5",
                                  "PERT1+PERT2", "PERT2+PERT3", "PERT3+PERT4", "PERT4+PERT5"}
        assert all(v.shape == (50,) for v in truth.ate.values())
        assert any(np.abs(v).max() > 0.1 for v in truth.ate.values())

    def test_flagged_genes_barely_move(self, bench):
        # flagged loadings are shrunk tenfold, so QC statistics stay close to treatment-independent
        _, _, truth = bench
        for v in truth.ate.values():
            assert np.abs(v[truth.flagged]).max() < 0.25 * np.abs(v[~truth.flagged]).max()

    def test_expected_counts(self, bench):
        cfg, _, truth = bench
        n = 10_000
        x = synth_sample_clean(cfg, truth, "non-targeting", n, 5)
        zb = np.random.default_rng(99).standard_normal((400_000, cfg.d_z))
        freq = oracle_frequencies(truth, zb, np.zeros_like(zb)).mean(axis=0)
        mean_lib = np.exp(cfg.library_log_mean + cfg.library_log_sd ** 2 / 2)
        se = x.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(x.mean(axis=0) - freq * mean_lib) <= 3 * se)

    def test_true_ate_matches_oracle(self, bench):
        cfg, _, truth = bench
        zb = np.random.default_rng([cfg.seed, 2]).standard_normal((cfg.n_truth_samples, cfg.d_z))
        shift = truth.masks * truth.embeddings
        base = np.log1p(1e4 * oracle_frequencies(truth, zb, np.zeros_like(zb))).mean(axis=0)
        zp = np.broadcast_to(shift[1] + shift[2], zb.shape)
        expected = np.log1p(1e4 * oracle_frequencies(truth, zb, zp)).mean(axis=0) - base
        np.testing.assert_allclose(true_ate(cfg, truth)["PERT2+PERT3"], expected, rtol=1e-10, atol=1e-12)


class TestQcConsistency:
    def test_benchmark_recall(self, bench):
        cfg, ds, truth = bench
        out = synth_qc_consistency(ds, truth, QcConfig(3))
        assert out["artifact_recall"] >= 0.9
        assert out["doublet_recall"] == 1.0
        assert out["artifact_fail"] + out["artifact_pass"] == truth.artifact.sum()
        assert out["clean_fail_rate"] < 0.2

    @pytest.mark.parametrize("seed", [1, 2])
    def test_recall_other_seeds(self, seed):
        cfg = benchmark_config(seed)
        ds, truth = synth_generate(cfg)
        assert synth_qc_consistency(ds, truth, QcConfig(3))["artifact_recall"] >= 0.9

    def test_no_shift_report_only(self):
        cfg = SynthConfig(n_cells=500, hb_boost=1.0, library_factor=1.0, doublet_rate=0, n_truth_samples=10)
        ds, truth = synth_generate(cfg)
        out = synth_qc_consistency(ds, truth)
        # artifacts are indistinguishable from clean cells; both sit at the MAD rule's floor
        assert out["artifact_recall"] < 0.3 and out["clean_fail_rate"] < 0.3


class TestPersistence:
    def test_truth_round_trip(self, bench, tmp_path):
        _, _, truth = bench
        write_truth(truth, tmp_path / "truth.json")
        back = read_truth(tmp_path / "truth.json")
        for name in ("masks", "embeddings", "loadings", "baseline", "artifact", "doublet",
                     "artifact_log_shift", "flagged"):
            np.testing.assert_array_equal(getattr(back, name), getattr(truth, name))
        assert back.labels == truth.labels
        for k, v in truth.ate.items():
            np.testing.assert_array_equal(back.ate[k], v)

    def test_dataset_round_trip(self, bench, tmp_path):
        _, ds, _ = bench
        write_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        np.testing.assert_array_equal(back.expression.counts, ds.expression.counts)
        np.testing.assert_array_equal(back.expression.is_mito, ds.expression.is_mito)
        np.testing.assert_array_equal(back.doublets, ds.doublets)
        assert back.perturbations.labels() == ds.perturbations.labels()
