import csv

import numpy as np
import pytest

from paramid.evaluation import (
    entanglement_export,
    extract_learned_graph,
    intervene_rollout,
    mcc_score,
    posterior_means,
    quartile_summary,
)
from paramid.graphs import AdjacencyMatrix
from paramid.models import DecoderConfig, default_encoder_config, init_model
from paramid.envs import make_spec


def latents(seed=0, n=1500, dims=3):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.5, 1.5, size=(n, dims))


class TestMcc:
    def test_identity_near_one(self):
        gt = latents(0)
        report = mcc_score(gt, gt.copy(), sample_limit=1500)
        assert report.mcc >= 0.99
        assert report.assignment == (0, 1, 2)

    def test_permuted_cubes_high(self):
        gt = latents(1)
        learned = np.power(gt, 3)[:, [2, 0, 1]]
        report = mcc_score(gt, learned, sample_limit=1500)
        assert report.mcc >= 0.98
        assert report.assignment == (1, 2, 0)

    def test_independent_noise_low(self):
        gt = latents(2)
        noise = np.random.default_rng(3).standard_normal(gt.shape)
        assert mcc_score(gt, noise, sample_limit=1500).mcc <= 0.3

    def test_permutation_invariance_exact(self):
        gt = latents(4, n=900)
        learned = np.tanh(gt) + 0.05 * np.random.default_rng(5).standard_normal(gt.shape)
        a = mcc_score(gt, learned, sample_limit=900)
        b = mcc_score(gt, learned[:, [1, 2, 0]], sample_limit=900)
        assert abs(a.mcc - b.mcc) < 1e-6

    def test_monotone_reparam_stable(self):
        gt = latents(6, n=1200)
        a = mcc_score(gt, gt.copy(), sample_limit=1200)
        b = mcc_score(gt, np.tanh(1.5 * gt), sample_limit=1200)
        assert abs(a.mcc - b.mcc) <= 0.02

    def test_constant_column_scores_zero(self):
        gt = latents(7, n=800)
        learned = gt.copy()
        learned[:, 1] = 3.14
        report = mcc_score(gt, learned, sample_limit=800)
        assert report.r2[1, 1] == 0.0

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            mcc_score(np.zeros((100, 2)), np.zeros((100, 2)))

    def test_report_json(self):
        gt = latents(8, n=600)
        report = mcc_score(gt, gt, sample_limit=600)
        import json

        parsed = json.loads(report.to_json())
        assert set(parsed) == {"mcc", "assignment", "r2"}


class TestGraphExtraction:
    def test_vcd_saturated_gamma_all_ones(self):
        spec = make_spec("dual-particle", horizon=4)
        model = init_model(
            spec,
            DecoderConfig(kind="vcd", hidden=(8,)),
            np.random.default_rng(0),
            encoder=default_encoder_config(spec, hidden=(8,)),
        )
        model.params["vcd_gamma"][:] = 20.0
        graph, probs = extract_learned_graph(model, dataset=None)
        assert graph == AdjacencyMatrix.ones(8, 3)
        assert probs.shape == (8, 3)

    def test_spartan_extraction_shape_and_type(self, tiny_dual_dataset):
        spec = tiny_dual_dataset.spec
        model = init_model(
            spec,
            DecoderConfig(kind="spartan", width=8, key_dim=4, ffn_width=12),
            np.random.default_rng(1),
            encoder=default_encoder_config(spec, hidden=(16,)),
        )
        graph, raw = extract_learned_graph(model, tiny_dual_dataset, max_rows=6)
        assert isinstance(graph, AdjacencyMatrix)
        assert graph.data.shape == (8, 3) and raw.shape == (8, 3)

    def test_mlp_has_no_graph(self, tiny_dual_dataset):
        spec = tiny_dual_dataset.spec
        model = init_model(
            spec,
            DecoderConfig(kind="mlp", hidden=(8,)),
            np.random.default_rng(2),
            encoder=default_encoder_config(spec, hidden=(8,)),
        )
        with pytest.raises(ValueError):
            extract_learned_graph(model, tiny_dual_dataset)


class TestExport:
    def test_row_count_and_round_trip(self, tmp_path):
        gt = latents(9, n=2)[:, :1]
        learned = latents(10, n=2)[:, :1]
        path = tmp_path / "scatter.csv"
        entanglement_export(gt, learned, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 1 * 1
        assert float(rows[0]["gt_value"]) == pytest.approx(gt[0, 0], abs=1e-9)

    def test_row_count_formula(self, tmp_path):
        gt = latents(11, n=7)
        learned = latents(12, n=7)[:, :2]
        path = tmp_path / "scatter.csv"
        entanglement_export(gt, learned, path)
        n_lines = sum(1 for _ in open(path))
        assert n_lines == 7 * 3 * 2 + 1


class TestIntervene:
    def make_model(self):
        spec = make_spec("dual-particle", horizon=5)
        return init_model(
            spec,
            DecoderConfig(kind="spartan", width=8, key_dim=4, ffn_width=12),
            np.random.default_rng(3),
            encoder=default_encoder_config(spec, hidden=(8,)),
        )

    def test_base_value_reproduces_base_rollout(self):
        model = self.make_model()
        x0 = np.random.default_rng(4).uniform(-1, 1, 8)
        base = np.array([0.5, 1.0, -0.3])
        a = intervene_rollout(model, x0, base, dim=1, values=[base[1]])
        b = intervene_rollout(model, x0, base, dim=2, values=[base[2]])
        assert np.array_equal(a[0], b[0])

    def test_output_count_and_determinism(self):
        model = self.make_model()
        x0 = np.zeros(8)
        outs = intervene_rollout(model, x0, np.ones(3), dim=0, values=[0.1, 0.5, 0.9])
        assert len(outs) == 3
        again = intervene_rollout(model, x0, np.ones(3), dim=0, values=[0.1, 0.5, 0.9])
        for a, b in zip(outs, again):
            assert np.array_equal(a, b)

    def test_bad_dim(self):
        model = self.make_model()
        with pytest.raises(ValueError):
            intervene_rollout(model, np.zeros(8), np.ones(3), dim=7, values=[0.0])


class TestSummary:
    def test_single_value_min_equals_max(self):
        s = quartile_summary([0.7])
        assert s["min"] == s["max"] == s["median"] == 0.7

    def test_quartiles(self):
        s = quartile_summary([1, 2, 3, 4, 5])
        assert s["median"] == 3 and s["min"] == 1 and s["max"] == 5


class TestPosteriorMeans:
    def test_shapes_and_chunking(self, tiny_dual_dataset):
        spec = tiny_dual_dataset.spec
        model = init_model(
            spec,
            DecoderConfig(kind="mlp", hidden=(8,)),
            np.random.default_rng(5),
            encoder=default_encoder_config(spec, hidden=(8,)),
        )
        means = posterior_means(model, tiny_dual_dataset.states, chunk=7)
        assert means.shape == (len(tiny_dual_dataset), 3)
