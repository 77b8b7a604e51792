import json
from dataclasses import replace

import numpy as np
import pytest

from lamedit.errors import ShapeError
from lamedit.merging import MergeConfig, apply_update, merge
from lamedit.metrics import MetricsReport, MetricsRow, accuracy, evaluate, evaluate_all, run_mono
from lamedit.model import predict_batch
from lamedit.solvers import edit_model
from lamedit.synthdata import fit_initial_model, generate_dataset

from test_model import random_model
from test_synthdata import tiny_cfg


class TestAccuracy:
    def test_all_correct(self):
        rng = np.random.default_rng(0)
        model = random_model(rng, vocab=16)
        inputs = rng.standard_normal((8, 10))
        expected = predict_batch(model, inputs)
        assert accuracy(model, inputs, expected) == 1.0

    def test_duplicated_probes_same_fraction(self):
        rng = np.random.default_rng(1)
        model = random_model(rng, vocab=16)
        inputs = rng.standard_normal((8, 10))
        expected = rng.integers(0, 16, size=10)
        once = accuracy(model, inputs, expected)
        twice = accuracy(model, np.hstack([inputs, inputs]), np.concatenate([expected, expected]))
        assert once == twice

    def test_chance_level_on_untrained_codebook(self):
        rng = np.random.default_rng(2)
        model = random_model(rng, d=8, h=12, vocab=256)
        n = 4096
        inputs = rng.standard_normal((8, n))
        expected = rng.integers(0, 256, size=n)
        acc = accuracy(model, inputs, expected)
        p = 1.0 / 256
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(acc - p) <= 3 * sigma

    def test_empty_probe_list_rejected(self):
        rng = np.random.default_rng(3)
        model = random_model(rng)
        with pytest.raises(ShapeError):
            accuracy(model, np.zeros((8, 0)), np.zeros(0, dtype=int))


class TestEvaluate:
    def test_unedited_model_efficacy_near_zero_specificity_high(self, small_bench):
        dataset, model = small_bench
        rows = evaluate_all(model, dataset)
        for row in rows:
            assert row.efficacy <= 0.05
            assert row.specificity >= 0.95

    def test_zero_noise_generalization_equals_efficacy(self):
        cfg = tiny_cfg(rephrase_noise=0.0)
        ds = generate_dataset(cfg)
        model = fit_initial_model(cfg, ds)
        delta_set = edit_model(
            model, ds.all_language_requests(), ds.preserved_inputs_all(),
            method="memit", cov_mode="shared", lam=2.75,
        )
        edited = apply_update(model, merge(MergeConfig("sum_cov"), delta_set), 1.0)
        for i in range(ds.m_languages):
            row = evaluate(edited, ds, i)
            assert row.generalization == row.efficacy

    def test_refit_on_new_tokens_reaches_high_efficacy(self):
        # A hypothetical perfect edit: refit the backbone with the new tokens
        # as the stored answers, then score it on the original probes.
        cfg = tiny_cfg()
        ds = generate_dataset(cfg)
        swapped = replace(ds, old_tokens=ds.new_tokens.copy(), new_tokens=ds.old_tokens.copy())
        refit = fit_initial_model(cfg, swapped)
        eff = float(np.mean([evaluate(refit, ds, i).efficacy for i in range(ds.m_languages)]))
        assert eff >= 0.95

    def test_averaged_recomputes_bit_exactly(self):
        row = MetricsRow(efficacy=0.3, generalization=0.7, specificity=0.9, portability=0.1)
        assert row.averaged == (0.3 + 0.7 + 0.9 + 0.1) / 4
        assert row.as_dict()["averaged"] == row.averaged

    def test_range_validation(self):
        with pytest.raises(ShapeError):
            MetricsRow(efficacy=1.2, generalization=0.0, specificity=0.0, portability=0.0)

    def test_report_serialization_deterministic(self, small_bench):
        dataset, model = small_bench
        reports = []
        for _ in range(2):
            rows = evaluate_all(model, dataset)
            rep = MetricsReport(
                method="sum", cov_mode="per_language", alpha=1.0, rank_ratio=None,
                seed=dataset.config.seed, languages=dataset.languages, rows=rows,
            )
            reports.append(json.dumps(rep.to_json_dict(), sort_keys=True))
        assert reports[0] == reports[1]

    def test_report_row_count_enforced(self, small_bench):
        dataset, model = small_bench
        rows = evaluate_all(model, dataset)
        with pytest.raises(ShapeError):
            MetricsReport(
                method="sum", cov_mode="per_language", alpha=1.0, rank_ratio=None,
                seed=0, languages=dataset.languages[:-1], rows=rows,
            )


class TestRunMono:
    def test_zero_alpha_equals_unedited_baseline(self, small_bench):
        dataset, model = small_bench
        for lang in range(dataset.m_languages):
            base = evaluate(model, dataset, lang)
            mono = run_mono(model, dataset, lang, alpha=0.0)
            assert mono == base

    def test_mono_efficacy_dominates_multilingual_sum(self, small_bench):
        dataset, model = small_bench
        delta_set = edit_model(
            model, dataset.all_language_requests(), dataset.preserved_inputs_all(),
            method="memit", cov_mode="per_language", lam=2.75,
        )
        edited = apply_update(model, merge(MergeConfig("sum"), delta_set), 1.0)
        sum_eff = float(np.mean([evaluate(edited, dataset, i).efficacy for i in range(dataset.m_languages)]))
        mono_eff = float(np.mean([
            run_mono(model, dataset, i, lam=2.75).efficacy for i in range(dataset.m_languages)
        ]))
        assert mono_eff >= sum_eff
