import numpy as np
import pytest
from scipy import stats

from intentloop import synth
from intentloop.dsp import IDLE, PRE_MOVEMENT, Segment
from intentloop.errors import ParameterError
from intentloop.features import (
    rank_channels,
    rank_from_segments,
    segment_drift,
    slope_features,
)

RATE = 250.0


def seg(data, channels=None):
    data = np.atleast_2d(data)
    channels = channels or [f"ch{i}" for i in range(data.shape[0])]
    return Segment(data=data, t0=0.0, rate=RATE, channels=channels)


def ols_slope_oracle(y, rate=RATE):
    """Brute-force OLS slope: direct covariance formula, one value at a time."""
    t = np.arange(len(y)) / rate
    tbar = t.mean()
    ybar = y.mean()
    num = sum((ti - tbar) * (yi - ybar) for ti, yi in zip(t, y))
    den = sum((ti - tbar) ** 2 for ti in t)
    return num / den


class TestSegmentDrift:
    def test_constant_channel_zero(self):
        assert segment_drift(seg(np.full((1, 250), 3.7)))[0] == pytest.approx(0.0)

    def test_linear_ramp_closed_form(self):
        # ramp 0 -> 10 uV over 1 s sampled at t = i/250
        y = 10.0 * np.arange(250) / 250.0
        drift = segment_drift(seg(y))[0]
        expected = y[:25].mean() - y[-25:].mean()  # = 0.48 - 9.48
        assert expected == pytest.approx(-9.0)
        assert drift == pytest.approx(expected)

    def test_negative_going_template_positive_drift(self):
        template = synth.rp_waveform(synth.RpParams(), RATE)
        drift = segment_drift(seg(template[-250:]))[0]
        assert drift > 0

    def test_window_must_fit(self):
        with pytest.raises(ParameterError):
            segment_drift(seg(np.zeros((1, 30))))


class TestRankChannels:
    def test_dominant_channel_first(self):
        order = rank_channels(
            np.array([5.0, 0.1]), np.array([0.0, 0.1]), ["A", "B"]
        ).order
        assert order == ["A", "B"]

    def test_forced_channels_first(self):
        channels = ["P3", "C4", "Cz", "O1", "C3"]
        rng = np.random.default_rng(0)
        for _ in range(20):
            ranking = rank_channels(
                rng.standard_normal(5), rng.standard_normal(5), channels
            )
            assert ranking.order[:3] == ["C3", "C4", "Cz"]

    def test_output_is_permutation(self):
        channels = [f"ch{i}" for i in range(12)] + ["C3", "C4", "Cz"]
        rng = np.random.default_rng(1)
        ranking = rank_channels(rng.standard_normal(15), rng.standard_normal(15), channels)
        assert sorted(ranking.order) == sorted(channels)
        assert sorted(ranking.unforced_order) == sorted(channels)

    def test_rank_sum_ordering(self):
        # hand-built: pm magnitudes rank A,B,C ; idle magnitudes rank C,B,A
        pm = np.array([3.0, 2.0, 1.0])
        idle = np.array([0.3, 0.2, 0.1])
        ranking = rank_channels(pm, idle, ["A", "B", "C"])
        # sums: A=0+2, B=1+1, C=2+0 -> tie on 2, broken by pre-movement rank
        assert ranking.unforced_order == ["A", "B", "C"]
        assert ranking.rank_sum == {"A": 2, "B": 2, "C": 2}

    def test_signed_mode_flag(self):
        pm = np.array([-5.0, 4.0])
        idle = np.array([0.0, 0.0])
        absolute = rank_channels(pm, idle, ["A", "B"], absolute=True)
        signed = rank_channels(pm, idle, ["A", "B"], absolute=False)
        assert absolute.unforced_order[0] == "A"
        assert signed.unforced_order[0] == "B"

    def test_mismatched_labels_rejected(self):
        with pytest.raises(ParameterError):
            rank_channels(np.zeros(3), np.zeros(2), ["A", "B"])

    def test_injected_channels_top_premove_ranks(self):
        # short sessions, 20 seeds here; the acceptance suite runs 100
        from dataclasses import replace
        from intentloop.labeling import build_training_set
        from intentloop.pipeline import detect_session_onsets, eeg_channels, filter_eeg

        hits = 0
        for seed in range(20):
            cfg = synth.SynthConfig(seed=seed)
            rec, _ = synth.generate_session(cfg, synth.INTENTION)
            onset = detect_session_onsets(rec)
            segments, _ = build_training_set(filter_eeg(rec), onset.onsets)
            eeg = eeg_channels(rec)
            segments = [
                replace(s, data=s.data[[s.channels.index(c) for c in eeg]], channels=eeg)
                for s in segments
            ]
            ranking = rank_from_segments(segments, eeg)
            top2 = sorted(ranking.premove_rank, key=ranking.premove_rank.get)[:2]
            hits += set(top2) == {"Cz", "C3"}
        assert hits >= 18


class TestSlopeFeatures:
    def test_constant_zero(self):
        assert slope_features(seg(np.full((1, 250), 2.0)), ["ch0"])[0] == pytest.approx(0.0)

    def test_unit_ramp(self):
        y = np.arange(250, dtype=float)  # i uV at 250 Hz -> 250 uV/s
        assert slope_features(seg(y), ["ch0"])[0] == pytest.approx(250.0)

    def test_matches_brute_force_ols(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((4, 250)) * 10
        s = seg(data)
        got = slope_features(s, s.channels)
        for k in range(4):
            assert abs(got[k] - ols_slope_oracle(data[k])) < 1e-9

    def test_matches_polyfit(self):
        rng = np.random.default_rng(3)
        y = rng.standard_normal(250)
        t = np.arange(250) / RATE
        assert slope_features(seg(y), ["ch0"])[0] == pytest.approx(
            np.polyfit(t, y, 1)[0], abs=1e-9
        )

    def test_linearity(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(250)
        y = rng.standard_normal(250)
        a, b = 2.5, -1.25
        lhs = slope_features(seg(a * x + b * y), ["ch0"])[0]
        rhs = a * slope_features(seg(x), ["ch0"])[0] + b * slope_features(seg(y), ["ch0"])[0]
        assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_channel_subset_order(self):
        data = np.vstack([np.arange(250.0), -np.arange(250.0), np.zeros(250)])
        s = seg(data, ["a", "b", "c"])
        got = slope_features(s, ["b", "a"])
        assert got[0] == pytest.approx(-250.0)
        assert got[1] == pytest.approx(250.0)

    def test_unknown_channel_rejected(self):
        with pytest.raises(ParameterError):
            slope_features(seg(np.zeros((1, 250))), ["nope"])


def test_premove_slopes_differ_from_idle(train_result, intention_session):
    """Injected channels separate the classes on slope features
    (paired test on >= 30 trials)."""
    from dataclasses import replace
    from intentloop.labeling import build_training_set
    from intentloop.pipeline import filter_eeg

    recording, truth = intention_session
    filtered = filter_eeg(recording)
    segments, _ = build_training_set(filtered, list(truth.onsets))
    pre = [s for s in segments if s.label == PRE_MOVEMENT]
    idl = [s for s in segments if s.label == IDLE]
    pre_slopes = np.array([slope_features(s, ["Cz"])[0] for s in pre])
    idle_slopes = np.array([slope_features(s, ["Cz"])[0] for s in idl])
    assert len(pre_slopes) >= 30
    assert pre_slopes.mean() < 0
    t, p = stats.ttest_rel(pre_slopes, idle_slopes)
    assert p < 0.01
