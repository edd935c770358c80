import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from suture_ease.data import ClipRecord, split_videos, write_clip, write_manifest
from suture_ease.domains import ALL_DOMAINS
from suture_ease.errors import DataError, DegenerateInputError, FormatError
from suture_ease.evaluation import (
    EvalReport,
    bootstrap_aucs,
    bootstrap_ci,
    evaluate,
    format_table,
    format_tsv,
    read_report,
    report_from_scores,
    roc_auc,
    roc_curve,
    write_report,
)
from suture_ease.models import CNN3D, build_model, save_checkpoint

from nano import SMALL_CNN
from oracles import auc_bruteforce

DOMAIN = "Needle Handling: Needle Hold Angle"


def _tied_instance(rng, n):
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 6, n) / 5.0
    return scores, labels


class TestRocAuc:
    def test_four_scores(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_separated(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_tied(self):
        assert roc_auc(np.full(10, 0.3), [0, 1] * 5) == 0.5

    def test_brute_force_with_ties(self, rng):
        for _ in range(300):
            s, y = _tied_instance(rng, int(rng.integers(2, 51)))
            assert roc_auc(s, y) == auc_bruteforce(s, y)

    @given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.integers(0, 1)), min_size=2, max_size=40))
    @settings(max_examples=200, deadline=None)
    def test_brute_force_hypothesis(self, pairs):
        s, y = np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])
        if y.min() == y.max():
            return
        assert roc_auc(s, y) == auc_bruteforce(s, y)

    def test_monotone_invariance(self, rng):
        for _ in range(50):
            s, y = _tied_instance(rng, 30)
            assert roc_auc(np.exp(3 * s) - 7, y) == roc_auc(s, y)

    def test_complement(self, rng):
        for _ in range(50):
            s, y = _tied_instance(rng, 30)
            # exact in the pair count; the final division may round differently
            np.testing.assert_allclose(roc_auc(1 - s, y), 1 - roc_auc(s, y), rtol=0, atol=2e-16)

    def test_single_class(self):
        with pytest.raises(DegenerateInputError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_non_binary_labels(self):
        with pytest.raises(DegenerateInputError):
            roc_auc([0.1, 0.2], [0, 2])


class TestRocCurve:
    def test_endpoints_and_area(self, rng):
        s, y = _tied_instance(rng, 40)
        fpr, tpr = roc_curve(s, y)
        assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
        # trapezoid area equals the tie-corrected AUC
        np.testing.assert_allclose(np.trapezoid(tpr, fpr), roc_auc(s, y), rtol=1e-12)


class TestBootstrap:
    def test_deterministic(self, rng):
        s, y = rng.random(60), np.r_[np.zeros(30), np.ones(30)]
        assert bootstrap_ci(s, y, seed=3) == bootstrap_ci(s, y, seed=3)
        assert bootstrap_ci(s, y, seed=3) != bootstrap_ci(s, y, seed=4)

    def test_separated_interval(self):
        s = np.r_[np.linspace(0, 0.4, 200), np.linspace(0.6, 1, 200)]
        y = np.r_[np.zeros(200), np.ones(200)]
        assert bootstrap_ci(s, y, n_bootstrap=2000, seed=0) == (1.0, 1.0)

    def test_resample_order_independent(self, rng):
        s, y = rng.random(40), np.r_[np.zeros(20), np.ones(20)]
        full = bootstrap_aucs(s, y, 50, seed=2)
        # resample b depends only on (seed, b), so a prefix run reproduces the prefix
        np.testing.assert_array_equal(bootstrap_aucs(s, y, 20, seed=2), full[:20])

    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(4, 60))
    @settings(max_examples=25, deadline=None, derandomize=True)
    def test_interval_bounds(self, seed, n):
        r = np.random.default_rng(seed)
        y = np.r_[0, 1, r.integers(0, 2, n - 2)]
        s = r.random(n)
        low, high = bootstrap_ci(s, y, n_bootstrap=1000, seed=seed)
        assert 0.0 <= low <= high <= 1.0
        assert low <= roc_auc(s, y) <= high

    def test_stratified_counts_kept(self, rng):
        s, y = rng.random(11), np.array([1] + [0] * 10)
        # one positive: every resample keeps it, so no degenerate resamples
        assert np.all(np.isfinite(bootstrap_aucs(s, y, 200, seed=1)))


class TestReport:
    def test_oracle_scorer(self, rng):
        y = rng.integers(0, 2, 100)
        r = report_from_scores(y.astype(float), y, DOMAIN)
        assert (r.auc, r.ci_low, r.ci_high) == (1.0, 1.0, 1.0)

    def test_anti_oracle(self, rng):
        y = rng.integers(0, 2, 100)
        assert report_from_scores(1.0 - y, y, DOMAIN, n_bootstrap=100).auc == 0.0

    def test_coin_scorer(self):
        r = np.random.default_rng(7)
        y = np.r_[np.zeros(500), np.ones(500)]
        assert 0.45 <= report_from_scores(r.random(1000), y, DOMAIN, n_bootstrap=200).auc <= 0.55

    def test_json_round_trip(self, tmp_path, rng):
        y = np.r_[0, 1, rng.integers(0, 2, 30)]
        r = report_from_scores(rng.random(32), y, DOMAIN, n_bootstrap=300, seed=5, checkpoint="abc")
        path = write_report(r, tmp_path / "r.json")
        assert set(json.loads(path.read_text())) == set(EvalReport.__dataclass_fields__)
        assert read_report(path) == r

    def test_extra_field_rejected(self, tmp_path):
        d = EvalReport(DOMAIN, 0.5, 0.4, 0.6, 3, 3, 10, 0, None).to_dict()
        d["note"] = "x"
        (tmp_path / "r.json").write_text(json.dumps(d))
        with pytest.raises(FormatError):
            read_report(tmp_path / "r.json")

    def test_table_layout(self):
        r = EvalReport("Needle Handling: Number of Repositions", 0.82, 0.78, 0.86, 10, 10, 2000, 0, None)
        lines = format_table([r]).splitlines()
        assert len(lines) == 7
        assert lines[0].startswith("Needle Handling: Number of Repositions")
        assert lines[0].endswith("  0.82 [0.78, 0.86]")
        assert [l.split("  ")[0] for l in lines] == [d.canonical for d in ALL_DOMAINS]
        tsv = format_tsv([r]).splitlines()
        assert tsv[0].split("\t")[0] == "domain" and len(tsv) == 8


class TestEvaluate:
    @pytest.fixture
    def dataset(self, tmp_path, rng):
        records = []
        for v in range(10):
            for s in range(2):
                label = (v + s) % 2
                clip = np.full((3, 16, 16, 16), 0.2 + 0.6 * label, np.float32)
                clip += 0.01 * rng.standard_normal(clip.shape).astype(np.float32)
                path = write_clip(tmp_path / f"v{v}_{s}.clip", clip)
                records.append(ClipRecord(f"v{v}", s, DOMAIN, label, path))
        return write_manifest(split_videos(records, 0.2, seed=0), tmp_path / "manifest.jsonl")

    def test_scores_test_split(self, tmp_path, dataset):
        model = build_model(CNN3D, SMALL_CNN, seed=0)
        ckpt = save_checkpoint(model, tmp_path / "m.ckpt")
        report, scores, labels = evaluate(ckpt, dataset, DOMAIN, seed=1, n_bootstrap=200)
        assert report.n_pos + report.n_neg == 4 == len(scores)
        assert report.domain == DOMAIN
        assert report.auc == roc_auc(scores, labels)
        assert np.all((scores > 0) & (scores < 1))
        again, _, _ = evaluate(ckpt, dataset, DOMAIN, seed=1, n_bootstrap=200)
        assert again == report

    def test_no_records(self, tmp_path, dataset):
        ckpt = save_checkpoint(build_model(CNN3D, SMALL_CNN), tmp_path / "m.ckpt")
        with pytest.raises(DataError):
            evaluate(ckpt, dataset, "Needle Driving: Wrist Rotation")
