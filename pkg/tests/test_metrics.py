import dataclasses
import math

import numpy as np
import pytest

from _psds_cases import random_instance
from dualsed.exceptions import ConfigurationError
from dualsed.metrics import (
    DetectedEvent,
    PsdsParams,
    decode_events,
    decode_over_thresholds,
    default_thresholds,
    event_f1,
    psds,
    psds_presets,
    psds_reference,
)


class TestDecodeEvents:
    def test_all_zero_no_events(self):
        assert decode_events(np.zeros((50, 3)), 0.5, 7, 0.064) == []

    def test_block_duration(self):
        strong = np.zeros((40, 1))
        strong[10:20, 0] = 1.0
        (ev,) = decode_events(strong, 0.5, 1, 0.064)
        assert ev.onset == pytest.approx(10 * 0.064)
        assert ev.offset == pytest.approx(20 * 0.064)
        assert ev.length == pytest.approx(0.64)

    def test_isolated_frame_removed_by_median(self):
        strong = np.zeros((20, 1))
        strong[7, 0] = 1.0
        assert decode_events(strong, 0.5, 3, 0.064) == []
        assert len(decode_events(strong, 0.5, 1, 0.064)) == 1

    def test_median_one_equals_plain_threshold(self):
        rng = np.random.default_rng(2)
        strong = rng.random((60, 2))
        events = decode_events(strong, 0.4, 1, 0.1)
        mask = np.zeros_like(strong, dtype=bool)
        for ev in events:
            mask[round(ev.onset / 0.1) : round(ev.offset / 0.1), ev.class_id] = True
        assert np.array_equal(mask, strong >= 0.4)

    def test_per_class_median_lengths(self):
        strong = np.zeros((20, 2))
        strong[5, 0] = 1.0
        strong[5, 1] = 1.0
        events = decode_events(strong, 0.5, [1, 3], 0.064)
        assert [e.class_id for e in events] == [0]

    def test_even_median_rejected(self):
        with pytest.raises(ConfigurationError):
            decode_events(np.zeros((10, 1)), 0.5, 4, 0.064)

    def test_sorted_nonoverlapping(self):
        rng = np.random.default_rng(8)
        events = decode_events(rng.random((100, 3)), 0.5, 3, 0.064)
        by_class = {}
        for ev in events:
            by_class.setdefault(ev.class_id, []).append(ev)
        for evs in by_class.values():
            for a, b in zip(evs, evs[1:]):
                assert a.offset <= b.onset


class TestThresholdsAndParams:
    def test_default_thresholds(self):
        ths = default_thresholds(50)
        assert len(ths) == 50
        assert all(0 < t < 1 for t in ths)
        assert all(b > a for a, b in zip(ths, ths[1:]))

    def test_presets(self):
        p1, p2 = psds_presets()
        assert (p1.dtc, p1.gtc, p1.cttc, p1.alpha_ct, p1.alpha_st, p1.e_max) == (
            0.7, 0.7, None, 0.0, 1.0, 100.0,
        )
        assert (p2.dtc, p2.gtc, p2.cttc, p2.alpha_ct, p2.alpha_st, p2.e_max) == (
            0.1, 0.1, 0.3, 0.5, 1.0, 100.0,
        )
        assert p1.dtc > p2.dtc  # preset 1 demands tighter temporal overlap

    def test_param_validation(self):
        with pytest.raises(ConfigurationError):
            PsdsParams(dtc=0.5, gtc=0.5, cttc=None, alpha_ct=0, alpha_st=1, e_max=0.0)
        with pytest.raises(ConfigurationError):
            PsdsParams(
                dtc=0.5, gtc=0.5, cttc=None, alpha_ct=0, alpha_st=1, e_max=100,
                thresholds=(0.5, 0.4),
            )


def _perfect_case(n_clips=3, n_classes=2, thresholds=(0.25, 0.5, 0.75)):
    rng = np.random.default_rng(17)
    truth = {}
    for i in range(n_clips):
        events = []
        for _ in range(3):
            onset = float(rng.uniform(0, 8))
            events.append(
                DetectedEvent(class_id=int(rng.integers(n_classes)), onset=onset, offset=onset + 1.0)
            )
        truth[f"clip{i}"] = events
    detections = {t: {cid: list(evs) for cid, evs in truth.items()} for t in thresholds}
    return detections, truth, n_clips * 10.0, n_classes


class TestPsds:
    def test_perfect_detections_score_one(self):
        detections, truth, dur, n_classes = _perfect_case()
        for preset in psds_presets():
            params = dataclasses.replace(preset, thresholds=(0.25, 0.5, 0.75))
            assert psds(detections, truth, dur, n_classes, params).score == pytest.approx(1.0)

    def test_empty_detections_score_zero(self):
        _, truth, dur, n_classes = _perfect_case()
        detections = {t: {} for t in (0.25, 0.5, 0.75)}
        for preset in psds_presets():
            params = dataclasses.replace(preset, thresholds=(0.25, 0.5, 0.75))
            assert psds(detections, truth, dur, n_classes, params).score == 0.0

    def test_no_ground_truth_rejected(self):
        params = dataclasses.replace(psds_presets()[0], thresholds=(0.5,))
        with pytest.raises(ConfigurationError):
            psds({0.5: {}}, {"c": []}, 10.0, 2, params)

    def test_missing_threshold_rejected(self):
        detections, truth, dur, n_classes = _perfect_case()
        params = dataclasses.replace(psds_presets()[0], thresholds=(0.1, 0.25))
        with pytest.raises(ConfigurationError):
            psds(detections, truth, dur, n_classes, params)

    def test_hand_built_roc_and_e_max(self):
        # one class, one 1 h clip; thr 0.3 yields the true event plus one FP,
        # thr 0.6 yields nothing: TPR(e) = 1 for e >= 1/h, so the normalized
        # area is (e_max - 1) / e_max.
        truth = {"c": [DetectedEvent(class_id=0, onset=5.0, offset=6.0)]}
        dets = {
            0.3: {"c": [
                DetectedEvent(class_id=0, onset=5.0, offset=6.0),
                DetectedEvent(class_id=0, onset=100.0, offset=101.0),
            ]},
            0.6: {"c": []},
        }
        base = PsdsParams(
            dtc=0.7, gtc=0.7, cttc=None, alpha_ct=0.0, alpha_st=1.0, e_max=100.0,
            thresholds=(0.3, 0.6),
        )
        s100 = psds(dets, truth, 3600.0, 1, base).score
        s50 = psds(dets, truth, 3600.0, 1, dataclasses.replace(base, e_max=50.0)).score
        assert s100 == pytest.approx(99.0 / 100.0, abs=1e-12)
        assert s50 == pytest.approx(49.0 / 50.0, abs=1e-12)

    def test_clip_and_event_order_invariance(self):
        rng = np.random.default_rng(23)
        detections, truth, dur, n_classes, params = random_instance(rng)
        s1 = psds(detections, truth, dur, n_classes, params).score
        truth_rev = {cid: list(reversed(evs)) for cid, evs in reversed(list(truth.items()))}
        dets_rev = {
            t: {cid: list(reversed(evs)) for cid, evs in reversed(list(per.items()))}
            for t, per in detections.items()
        }
        s2 = psds(dets_rev, truth_rev, dur, n_classes, params).score
        assert s1 == pytest.approx(s2, abs=1e-12)

    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            detections, truth, dur, n_classes, params = random_instance(rng)
            fast = psds(detections, truth, dur, n_classes, params).score
            slow = psds_reference(detections, truth, dur, n_classes, params)
            assert fast == pytest.approx(slow, abs=1e-9)

    def test_monotone_under_added_true_positive(self):
        # adding an exact-match detection for an uncovered event never lowers
        # the score (checked with the spread penalty disabled: alpha_st=0)
        rng = np.random.default_rng(41)
        for _ in range(10):
            detections, truth, dur, n_classes, params = random_instance(rng)
            params = dataclasses.replace(params, alpha_st=0.0)
            before = psds(detections, truth, dur, n_classes, params).score
            target_cid = next(cid for cid, evs in truth.items() if evs)
            g = truth[target_cid][0]
            added = {
                t: {
                    cid: evs + ([DetectedEvent(g.class_id, g.onset, g.offset, t)] if cid == target_cid else [])
                    for cid, evs in per.items()
                }
                for t, per in detections.items()
            }
            after = psds(added, truth, dur, n_classes, params).score
            assert after >= before - 1e-12


class TestEventF1:
    def test_exact_detections(self):
        truth = {"a": [DetectedEvent(0, 1.0, 2.0), DetectedEvent(1, 3.0, 4.0)]}
        assert event_f1(truth, truth) == 1.0

    def test_empty_detections(self):
        truth = {"a": [DetectedEvent(0, 1.0, 2.0)]}
        assert event_f1({"a": []}, truth) == 0.0

    def test_half_detected(self):
        truth = {"a": [DetectedEvent(0, 1.0, 2.0), DetectedEvent(0, 5.0, 6.0)]}
        dets = {"a": [DetectedEvent(0, 1.0, 2.0)]}
        assert event_f1(dets, truth) == pytest.approx(2 * 0.5 / 1.5)

    def test_collar_tolerance(self):
        truth = {"a": [DetectedEvent(0, 1.0, 2.0)]}
        near = {"a": [DetectedEvent(0, 1.15, 2.15)]}
        far = {"a": [DetectedEvent(0, 1.5, 2.5)]}
        assert event_f1(near, truth, collar=0.2) == 1.0
        assert event_f1(far, truth, collar=0.2) == 0.0

    def test_class_must_match(self):
        truth = {"a": [DetectedEvent(0, 1.0, 2.0)]}
        dets = {"a": [DetectedEvent(1, 1.0, 2.0)]}
        assert event_f1(dets, truth) == 0.0


class TestDecodeOverThresholds:
    def test_keys_and_consistency(self):
        rng = np.random.default_rng(5)
        strong = rng.random((60, 2))
        ths = default_thresholds(5)
        per = decode_over_thresholds(strong, ths, 3, 0.064)
        assert set(per) == set(ths)
        for t, evs in per.items():
            assert evs == decode_events(strong, t, 3, 0.064)
