import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sinklab.analysis import (
    HeatmapStats,
    attention_stats,
    export_stats,
    read_heatmap_csv,
    read_pgm,
    sink_report,
    value_norm_diagnostics,
    write_pgm,
)
from sinklab.grad import init_params
from sinklab.model import forward_batch
from sinklab.taskgen import linf_loss, sample_batch
from sinklab.theory import SinkCriteria, build_relu_construction, consequence_checks, lemma_evaluation_set


def stats_from(mean_col, L=6, trigger_pos=4):
    m = np.zeros((L, L))
    m[:, 0] = mean_col
    return HeatmapStats(((m,),), ((np.zeros((L, L)),),), 10, trigger_pos)


class TestAttentionStats:
    def test_single_example_has_zero_std(self):
        stats = attention_stats(init_params(0, (2, 2), 6), 1, trigger_pos=3, L=8)
        for _, _, _, std in stats.heads():
            assert np.all(std == 0)

    def test_construction_pinned(self):
        stats = attention_stats(build_relu_construction(16, 16), 200, trigger_pos=8)
        mean = stats.mean[0][0]
        assert np.all(mean[:, 0] == 0)
        assert_allclose(mean[7, 1:8], 1 / 7, rtol=0, atol=1e-15)
        assert stats.trigger_pos == 8 and stats.sample_count == 200

    def test_trained_softmax_sink(self, softmax_model):
        stats = attention_stats(softmax_model, 1000, trigger_pos=8)
        col, std = stats.mean[0][0][:, 0], stats.std[0][0][:, 0]
        non_trigger = [i for i in range(2, 17) if i != 8]
        assert np.all(col[np.array(non_trigger) - 1] > 0.9)
        assert np.all(std[np.array(non_trigger) - 1] < 0.1)

    def test_matches_two_pass_recomputation(self):
        params = init_params(3, (1, 2), 6, scale=0.5)
        stats = attention_stats(params, 50, seed=4, L=7)
        batch = sample_batch(4, 50, 7, 6, stream=(21,))
        trace = forward_batch(params, batch.tokens).trace
        for d, h, a in trace.heads():
            mean = np.zeros((7, 7))
            for b in range(50):
                mean += a[b]
            mean /= 50
            var = np.zeros((7, 7))
            for b in range(50):
                var += (a[b] - mean) ** 2
            assert_allclose(stats.mean[d][h], mean, rtol=0, atol=1e-12)
            assert_allclose(stats.std[d][h], np.sqrt(var / 50), rtol=0, atol=1e-12)
            assert np.max(np.abs(stats.mean[d][h].sum(axis=1) - 1)) <= 1e-10

    def test_deterministic(self):
        params = init_params(1, (1,), 6)
        a, b = attention_stats(params, 20, seed=9, L=6), attention_stats(params, 20, seed=9, L=6)
        assert_array_equal(a.mean[0][0], b.mean[0][0])
        assert attention_stats(params, 5, L=6).trigger_pos == "mixed"

    def test_rejects_zero_count(self):
        with pytest.raises(ValueError):
            attention_stats(init_params(0, (1,), 6), 0)


class TestSinkReport:
    def test_all_ones_is_sink(self):
        report = sink_report(stats_from(np.ones(6)), SinkCriteria())
        assert report.classes == {"0.0": "sink"}
        assert report.layers_with_sink() == {"0": True}

    def test_construction_is_sink_free(self):
        report = sink_report(attention_stats(build_relu_construction(16, 16), 100, 8), SinkCriteria())
        assert report.sink_free_heads == ["0.0"] and report.sink_heads == []

    def test_mixed_and_witnesses(self):
        report = sink_report(stats_from([1, 1, 0.5, 0, 1, 1]), SinkCriteria(0.1))
        assert report.classes["0.0"] == "mixed"
        assert report.witnesses["0.0"]["min_bos_position"] == 3

    def test_pinned_trigger_row_excluded_from_sink_test(self):
        report = sink_report(stats_from([1, 1, 1, 0.1, 1, 1], trigger_pos=4), SinkCriteria(0.1))
        assert report.classes["0.0"] == "sink"
        mixed = sink_report(stats_from([1, 1, 1, 0.1, 1, 1], trigger_pos="mixed"), SinkCriteria(0.1))
        assert mixed.classes["0.0"] == "mixed"

    def test_bad_criteria(self):
        with pytest.raises(TypeError):
            sink_report(stats_from(np.ones(6)), {"epsilon": 0.1})

    def test_json(self, tmp_path):
        sink_report(stats_from(np.ones(6)), SinkCriteria()).write_json(tmp_path / "s.json")
        doc = json.loads((tmp_path / "s.json").read_text())
        assert doc["sink_heads"] == ["0.0"] and len(doc["bos_mean"]["0.0"]) == 6


class TestValueNorms:
    def test_construction(self):
        diag = value_norm_diagnostics(build_relu_construction(8, 6), sample_batch(0, 10, 8, 6))
        assert diag["bos_value_norm"] == 1.0

    def test_trained_model_bounds(self, softmax_model):
        evaluation = lemma_evaluation_set(2, 200, 16, 16)
        eta = consequence_checks(softmax_model, evaluation).measured_eta
        diag = value_norm_diagnostics(softmax_model, evaluation)
        assert diag["bos_value_norm"] <= eta
        assert diag["trigger_value_norm_min"] >= 1 - 2 * eta
        assert linf_loss(forward_batch(softmax_model, evaluation.tokens).outputs, evaluation.targets) <= eta

    def test_rejects_residual(self):
        with pytest.raises(ValueError):
            value_norm_diagnostics(init_params(0, (1,), 6, residual=True), sample_batch(0, 2, 6, 6))


class TestExport:
    def test_pgm_scaling(self, tmp_path):
        m = np.array([[0.0, 0.5], [1.0, 0.25]])
        lo, hi = write_pgm(tmp_path / "a.pgm", m, 0.0, 1.0)
        pixels, meta = read_pgm(tmp_path / "a.pgm")
        assert (tmp_path / "a.pgm").read_bytes()[:2] == b"P5"
        assert_array_equal(pixels, [[0, 128], [255, 64]])
        assert meta == {"min": 0.0, "max": 1.0} and (lo, hi) == (0.0, 1.0)

    def test_constant_matrix(self, tmp_path):
        write_pgm(tmp_path / "z.pgm", np.zeros((3, 3)))
        assert np.all(read_pgm(tmp_path / "z.pgm")[0] == 0)

    def test_export_files(self, tmp_path):
        stats = attention_stats(init_params(0, (2, 2), 6), 1, trigger_pos=5, L=8)
        paths = export_stats(stats, tmp_path)
        assert len(paths) == 16
        mean, meta = read_heatmap_csv(tmp_path / "attn_L1_H0_mean.csv")
        assert_array_equal(mean, stats.mean[1][0])
        assert meta["trigger_pos"] == "5" and meta["std"].startswith("population")
        std, _ = read_heatmap_csv(tmp_path / "attn_L0_H1_std.csv")
        assert np.all(std == 0)
