import numpy as np
import pytest
from dataclasses import replace

from intentloop import synth
from intentloop.dsp import Recording
from intentloop.errors import EmptyConditionError, ParameterError
from intentloop.evaluation import (
    BindingStat,
    TrialRow,
    bh_fdr,
    binding_summary,
    contrast,
    erp_extract,
    permutation_p,
    screen_trials,
    simulate_erp_cohort,
    table_from_truth,
    tukey_reject,
)

RATE = 250.0


def tukey_oracle(values, k):
    """Brute-force fences: explicit linear-interpolation quartiles."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)

    def quantile(q):
        pos = q * (n - 1)
        lo = int(np.floor(pos))
        hi = int(np.ceil(pos))
        return v[lo] + (pos - lo) * (v[hi] - v[lo])

    q1, q3 = quantile(0.25), quantile(0.75)
    iqr = q3 - q1
    lo, hi = q1 - k * iqr, q3 + k * iqr
    return np.array([lo <= x <= hi for x in values])


class TestTukey:
    def test_hand_computed_example(self):
        # Q1=2, Q3=4, IQR=2 -> fences [-4, 10]: 100 is out
        values = np.array([1.0, 2.0, 3.0, 4.0, 100.0])
        assert np.array_equal(tukey_reject(values, 3.0), [True, True, True, True, False])

    def test_all_equal_kept(self):
        assert tukey_reject(np.full(10, 7.0), 3.0).all()

    def test_gaussian_rarely_rejected(self):
        x = np.random.default_rng(0).standard_normal(1000)
        assert (~tukey_reject(x, 3.0)).mean() < 0.01

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            n = int(rng.integers(4, 60))
            values = np.round(rng.standard_normal(n) * rng.uniform(0.5, 20), 3)
            k = float(rng.uniform(1.0, 4.0))
            assert np.array_equal(tukey_reject(values, k), tukey_oracle(values, k))

    def test_too_few_values(self):
        with pytest.raises(ParameterError):
            tukey_reject(np.array([1.0, 2.0, 3.0]))


def make_table(n=20, condition=synth.INTENTION, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    t = 0.0
    for i in range(n):
        fix_off = t + 2.0
        tap = fix_off + rng.uniform(2.1, 3.1)
        rows.append(
            TrialRow(
                trial=i, condition=condition, fixation_off_s=fix_off, tap_s=tap,
                tone_delay_ms=350.0, estimate_ms=float(rng.normal(190, 40)),
            )
        )
        t = tap + 3.0
    return rows


class TestScreenTrials:
    def test_clean_table_keeps_everything(self):
        out = screen_trials(make_table(30))
        assert all(row.kept for row in out)

    def test_late_ems_tap_hard_rule(self):
        rows = make_table(10)
        rows[3].ems_s = rows[3].tap_s - 0.4  # tap 400 ms after the pulse
        out = screen_trials(rows)
        assert not out[3].kept
        assert "ems_tap_gap" in out[3].reject_reason

    def test_gross_tap_latency_rejected(self):
        rows = make_table(20)
        rows[5].tap_s = rows[5].fixation_off_s + 30.0
        out = screen_trials(rows)
        assert not out[5].kept
        assert "tap_interval" in out[5].reject_reason

    def test_estimate_outlier_rejected(self):
        rows = make_table(20)
        rows[7].estimate_ms = 9000.0
        out = screen_trials(rows)
        assert not out[7].kept
        assert "estimate" in out[7].reject_reason

    def test_idempotent(self):
        rows = make_table(25, seed=3)
        rows[2].estimate_ms = 5000.0
        rows[4].ems_s = rows[4].tap_s - 0.5
        once = screen_trials(rows)
        twice = screen_trials(once)
        assert [(r.kept, r.reject_reason) for r in twice] == [
            (r.kept, r.reject_reason) for r in once
        ]

    def test_input_not_mutated(self):
        rows = make_table(10)
        rows[0].estimate_ms = 10_000.0
        screen_trials(rows)
        assert rows[0].kept

    def test_synthetic_truth_clean(self, intention_session):
        _, truth = intention_session
        out = screen_trials(table_from_truth(truth))
        # estimates are Gaussian, extreme fences should keep nearly all
        assert sum(not r.kept for r in out) <= 2


class TestBindingSummary:
    def test_delta_formula(self):
        rows = [
            TrialRow(trial=0, condition=synth.INTENTION, fixation_off_s=0.0, tap_s=2.0,
                     tone_delay_ms=350.0, estimate_ms=250.0)
        ] * 4
        stats = binding_summary(rows)
        assert stats[0].mean_ms == pytest.approx(-100.0)

    def test_zero_bias_generator(self):
        cfg = synth.SynthConfig(seed=8, n_trials=30)
        cfg.behavior.estimate_bias_ms = {c: 0.0 for c in synth.CONDITIONS}
        cfg.behavior.estimate_sd_ms = 0.0
        _, truth = synth.generate_session(cfg, synth.INTENTION)
        stats = binding_summary(table_from_truth(truth))
        assert stats[0].mean_ms == pytest.approx(0.0, abs=1e-9)

    def test_intention_default_bias(self, intention_session):
        _, truth = intention_session
        stats = binding_summary(screen_trials(table_from_truth(truth)))
        intention = [s for s in stats if s.group == synth.INTENTION][0]
        assert intention.mean_ms == pytest.approx(-160.0, abs=30.0)

    def test_augmented_split(self):
        rows = []
        for i in range(8):
            rows.append(
                TrialRow(trial=i, condition=synth.AUGMENTED, fixation_off_s=0.0,
                         tap_s=2.0, tone_delay_ms=350.0, estimate_ms=200.0,
                         ems_s=1.9 if i < 3 else None)
            )
        groups = {s.group: s.n for s in binding_summary(rows)}
        assert groups["AUGMENTED_EMS"] == 3
        assert groups["AUGMENTED_SELF"] == 5
        assert groups[synth.AUGMENTED] == 8

    def test_unkept_trials_excluded(self):
        rows = make_table(10)
        for r in rows[:5]:
            r.kept = False
        stats = binding_summary(rows)
        assert stats[0].n == 5


class TestErpExtract:
    def test_waveform_length_375(self, intention_session):
        recording, truth = intention_session
        events = [(t.onset_s, t.condition) for t in truth.trials]
        erp = erp_extract(recording, events, channel="FCz")
        assert erp.waveforms[synth.INTENTION].shape == (375,)
        assert erp.counts[synth.INTENTION] == 75

    def test_injected_negativity_recovered(self):
        cfg = synth.SynthConfig(seed=21)
        rec, truth = synth.generate_session(cfg, synth.INVOLUNTARY)
        events = [(t.onset_s, t.condition) for t in truth.trials]
        erp = erp_extract(rec, events, channel="FCz")
        wave = erp.waveforms[synth.INVOLUNTARY]
        peak_idx = int(np.argmin(wave))
        peak_t = erp.times_s[peak_idx]
        assert wave[peak_idx] == pytest.approx(-10.0, abs=1.0)
        assert peak_t == pytest.approx(0.210, abs=0.020)

    def test_averaging_shrinks_noise(self):
        rng = np.random.default_rng(4)
        n = int(200 * RATE)
        rec = Recording(rate=RATE, channels=["FCz"], data=5 * rng.standard_normal((1, n)))
        onsets_many = [(2.0 + 2.0 * k, "A") for k in range(80)]
        onsets_few = [(2.0 + 2.0 * k, "B") for k in range(5)]
        erp = erp_extract(rec, onsets_many + onsets_few, channel="FCz")
        rms_many = np.sqrt(np.mean(erp.waveforms["A"] ** 2))
        rms_few = np.sqrt(np.mean(erp.waveforms["B"] ** 2))
        assert rms_many < rms_few / 2.0  # expect ~ sqrt(5/80) = 0.25

    def test_no_events_is_error(self, intention_session):
        recording, _ = intention_session
        with pytest.raises(EmptyConditionError):
            erp_extract(recording, [], channel="FCz")


def bh_oracle(pvalues, alpha):
    """Step-up by hand: largest k with p_(k) <= k/m * alpha."""
    p = np.asarray(pvalues)
    m = len(p)
    order = np.argsort(p)
    k_max = 0
    for rank, idx in enumerate(order, start=1):
        if p[idx] <= rank / m * alpha:
            k_max = rank
    reject = np.zeros(m, dtype=bool)
    reject[order[:k_max]] = True
    return reject


class TestBhFdr:
    def test_worked_example(self):
        # thresholds are 0.0125, 0.025, 0.0375, 0.05: 0.04 > 0.0375, so
        # the step-up stops at k=2
        p = np.array([0.01, 0.02, 0.04, 0.8])
        reject, adjusted = bh_fdr(p, alpha=0.05)
        assert np.array_equal(reject, bh_oracle(p, 0.05))
        assert np.array_equal(reject, [True, True, False, False])
        assert adjusted[0] == pytest.approx(0.04)
        assert adjusted[2] == pytest.approx(0.04 * 4 / 3)

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            m = int(rng.integers(1, 40))
            p = np.round(rng.random(m), 3)
            alpha = float(rng.uniform(0.01, 0.2))
            reject, adjusted = bh_fdr(p, alpha)
            assert np.array_equal(reject, bh_oracle(p, alpha))
            assert np.array_equal(reject, adjusted <= alpha)

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            bh_fdr(np.array([]))


class TestPermutation:
    def test_identical_data_all_p_one(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((8, 20))
        result = contrast(a, a.copy(), times_s=np.linspace(0, 1, 20), window_s=(0.2, 0.6))
        assert np.all(result.pointwise_p_fdr == 1.0)
        assert result.window_p == 1.0
        assert not result.significant.any()

    def test_injected_difference_detected(self):
        # 5 uV difference, n=10, unit noise: the window test is essentially certain
        rng = np.random.default_rng(7)
        hits = 0
        for rep in range(100):
            d = 5.0 + rng.standard_normal(10)
            p = permutation_p(d[:, None], seed=rep)[0]
            hits += p < 0.01
        assert hits >= 95

    def test_exhaustive_when_small(self):
        d = np.array([1.0, 2.0, 0.5, 1.5])[:, None]
        p = permutation_p(d, n_perm=10_000)
        # 2^4 = 16 sign patterns, identity and full flip both reach |t|
        assert p[0] == pytest.approx(2 / 16)

    def test_null_calibration(self):
        rng = np.random.default_rng(8)
        rejections = 0
        reps = 1000
        for rep in range(reps):
            d = rng.standard_normal(10)
            p = permutation_p(d[:, None], seed=rep)[0]
            rejections += p <= 0.05
        assert 0.03 <= rejections / reps <= 0.07

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ParameterError):
            contrast(np.zeros((4, 10)), np.zeros((5, 10)), times_s=np.linspace(0, 1, 10))

    def test_window_must_select_samples(self):
        with pytest.raises(ParameterError):
            contrast(
                np.zeros((4, 10)), np.ones((4, 10)),
                times_s=np.linspace(0, 1, 10), window_s=(5.0, 6.0),
            )


class TestErpCohortHarness:
    def test_strong_vs_weak_negativity_detected(self):
        times = -1.0 + np.arange(375) / RATE
        a, b = simulate_erp_cohort(10, -10.0, -2.0, times, seed=0)
        result = contrast(a, b, times, window_s=(0.150, 0.250))
        assert result.window_p < 0.05

    def test_cohort_shapes(self):
        times = np.linspace(-1, 0.5, 375)
        a, b = simulate_erp_cohort(7, -10.0, -2.0, times, seed=1)
        assert a.shape == b.shape == (7, 375)
