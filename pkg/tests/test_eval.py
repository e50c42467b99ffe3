"""Tests for tIoU, average precision and mAP reporting."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soundloc.decode import Interval
from soundloc.errors import EmptyInputError
from soundloc.evaluate import (
    DEFAULT_THRESHOLDS,
    EvalReport,
    average_over_thresholds,
    average_precision,
    mean_ap,
    oracle_ap,
    tiou,
)


def iv(start, end, score=1.0, label=0, video="v"):
    return Interval(video, label, score, start, end)


def random_instance(rng, n_pred_max=50, n_gt_max=20, n_classes=3, n_videos=3):
    gts, preds = [], []
    for _ in range(int(rng.integers(1, n_gt_max + 1))):
        s = float(rng.uniform(0, 50))
        gts.append(iv(s, s + float(rng.uniform(0.5, 10)),
                      label=int(rng.integers(0, n_classes)),
                      video=f"v{rng.integers(0, n_videos)}"))
    for _ in range(int(rng.integers(0, n_pred_max + 1))):
        if gts and rng.random() < 0.5:
            base = gts[int(rng.integers(0, len(gts)))]
            s = max(0.0, base.start_sec + float(rng.normal(0, 2)))
            e = max(s + 0.25, base.end_sec + float(rng.normal(0, 2)))
            label, video = base.label_id, base.video_id
        else:
            s = float(rng.uniform(0, 50))
            e = s + float(rng.uniform(0.5, 10))
            label = int(rng.integers(0, n_classes))
            video = f"v{rng.integers(0, n_videos)}"
        preds.append(iv(s, e, score=float(rng.random()),
                        label=label, video=video))
    return preds, gts


class TestTiou:
    def test_identical(self):
        assert tiou(iv(1.0, 4.0), iv(1.0, 4.0)) == 1.0

    def test_hand_case(self):
        assert tiou(iv(0.0, 10.0), iv(5.0, 15.0)) == pytest.approx(1.0 / 3.0)

    def test_disjoint(self):
        assert tiou(iv(0.0, 1.0), iv(2.0, 3.0)) == 0.0


class TestAveragePrecision:
    def test_single_match(self):
        assert average_precision([iv(1.0, 3.0, 0.9)], [iv(1.0, 3.0)], 0.5) == 1.0

    def test_high_scored_fp_halves_ap(self):
        preds = [iv(20.0, 22.0, 0.9), iv(1.0, 3.0, 0.5)]
        gts = [iv(1.0, 3.0)]
        assert average_precision(preds, gts, 0.5) == 0.5

    def test_no_predictions(self):
        assert average_precision([], [iv(0.0, 1.0)], 0.5) == 0.0

    def test_score_rescaling_invariance(self):
        rng = np.random.default_rng(0)
        preds, gts = random_instance(rng)
        base = average_precision(preds, gts, 0.3)
        scaled = [Interval(p.video_id, p.label_id, p.score * 0.5,
                           p.start_sec, p.end_sec) for p in preds]
        assert average_precision(scaled, gts, 0.3) == base

    def test_low_scored_disjoint_fp_never_raises_ap(self):
        rng = np.random.default_rng(1)
        for seed in range(20):
            preds, gts = random_instance(np.random.default_rng(seed))
            base = average_precision(preds, gts, 0.4)
            fp = iv(900.0, 901.0, score=1e-9, label=gts[0].label_id,
                    video=gts[0].video_id)
            with_fp = average_precision(preds + [fp], gts, 0.4)
            assert with_fp <= base + 1e-15

    def test_matches_restricted_to_same_video(self):
        preds = [iv(1.0, 3.0, 0.9, video="a")]
        gts = [iv(1.0, 3.0, video="b")]
        assert average_precision(preds, gts, 0.5) == 0.0

    def test_each_gt_matched_once(self):
        preds = [iv(1.0, 3.0, 0.9), iv(1.0, 3.0, 0.8)]
        gts = [iv(1.0, 3.0)]
        # second (duplicate) prediction is a FP: AP stays 1.0 since the TP
        # ranks first
        assert average_precision(preds, gts, 0.5) == 1.0


class TestOracleEquivalence:
    def test_100_random_instances_exact(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            preds, gts = random_instance(rng)
            for tau in (0.1, 0.3, 0.5, 0.7):
                a = average_precision(preds, gts, tau)
                b = oracle_ap(preds, gts, tau)
                assert a == b, f"seed={seed} tau={tau}: {a} != {b}"

    def test_oracle_trivial_cases(self):
        assert oracle_ap([], [iv(0.0, 1.0)], 0.5) == 0.0
        assert oracle_ap([iv(0.0, 1.0, 0.9)], [iv(0.0, 1.0)], 0.5) == 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=10 ** 9))
    def test_property_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        preds, gts = random_instance(rng, n_pred_max=20, n_gt_max=8)
        assert average_precision(preds, gts, 0.5) == oracle_ap(preds, gts, 0.5)


class TestMeanAp:
    def test_perfect_predictions(self):
        gts = [iv(1.0, 3.0, label=0), iv(5.0, 8.0, label=1)]
        preds = [iv(1.0, 3.0, 0.9, label=0), iv(5.0, 8.0, 0.9, label=1)]
        report = mean_ap(preds, gts)
        assert report.map_per_threshold == [1.0] * 5
        assert report.average_map == 1.0

    def test_empty_gt_rejected(self):
        with pytest.raises(EmptyInputError):
            mean_ap([], [])

    def test_classes_without_gt_excluded(self):
        gts = [iv(1.0, 3.0, label=0)]
        preds = [iv(1.0, 3.0, 0.9, label=0), iv(4.0, 5.0, 0.9, label=7)]
        report = mean_ap(preds, gts)
        # label 7 has no ground truth: it must not drag the mean down
        assert report.average_map == 1.0

    def test_identical_threshold_values_average_to_same(self):
        gts = [iv(1.0, 3.0, label=0)]
        preds = [iv(1.0, 3.0, 0.9, label=0)]
        report = mean_ap(preds, gts, thresholds=(0.2, 0.2, 0.2))
        assert report.average_map == report.map_per_threshold[0]

    def test_average_equals_hand_mean(self):
        rng = np.random.default_rng(5)
        preds, gts = random_instance(rng)
        report = mean_ap(preds, gts)
        hand = math.fsum(report.map_per_threshold) / 5.0
        assert abs(report.average_map - hand) <= 1e-12

    def test_counts(self):
        gts = [iv(1.0, 3.0, label=0), iv(4.0, 6.0, label=1)]
        preds = [iv(1.0, 3.0, 0.9, label=0)]
        report = mean_ap(preds, gts)
        assert report.num_gt == 2
        assert report.num_predictions == 1


class TestReportedAveraging:
    """One-decimal presentation of published-style threshold rows."""

    def row_average(self, percents):
        maps = [v / 100.0 for v in percents]
        return average_over_thresholds(maps)

    def test_weak_modality_row(self):
        avg = self.row_average([16.2, 13.5, 10.8, 8.4, 5.8])
        assert f"{100.0 * avg:.1f}" == "10.9"

    def test_fused_baseline_row(self):
        avg = self.row_average([18.8, 17.6, 15.9, 13.9, 11.3])
        assert f"{100.0 * avg:.1f}" == "15.5"

    def test_table_layout(self):
        report = EvalReport(
            thresholds=DEFAULT_THRESHOLDS,
            map_per_threshold=[0.162, 0.135, 0.108, 0.084, 0.058],
            average_map=self.row_average([16.2, 13.5, 10.8, 8.4, 5.8]),
        )
        table = report.format_table(row_name="audio")
        lines = table.splitlines()
        assert "@0.1" in lines[0] and "Avg" in lines[0]
        assert lines[1].split()[0] == "audio"
        assert lines[1].split()[-1] == "10.9"
