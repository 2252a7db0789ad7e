"""Post-hoc statistics: outlier screening, intentional-binding summaries,
ERP extraction with permutation contrasts, and the classifier report.

Screens recompute their fences from the full table every time, so
re-screening a screened table is a no-op. Permutation tests flip the
signs of paired differences (exhaustively when feasible) and
Benjamini-Hochberg controls the false discovery rate across time points.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import Recording, design_bandpass, epoch_extract
from .errors import EmptyConditionError, ParameterError
from . import synth
from .model import f1_score, predict_proba
from .pipeline import segment_features, train_from_recording
from .realtime import run_replay

log = logging.getLogger(__name__)

TUKEY_EXTREME_K = 3.0
EMS_TAP_LIMIT_S = 0.35
ERP_WINDOW_MS = (-1000.0, 500.0)
ERP_BASELINE_MS = (-1000.0, -900.0)
CONTRAST_WINDOW_S = (0.150, 0.250)


def tukey_reject(values: np.ndarray, k: float = TUKEY_EXTREME_K) -> np.ndarray:
    """Keep mask under Tukey fences: Q1 - k*IQR <= v <= Q3 + k*IQR.

    Quartiles use linear interpolation, so the fences are reproducible
    bit-for-bit by any implementation using the same quantile rule.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 4:
        raise ParameterError(f"need at least 4 values, got shape {values.shape}")
    q1, q3 = np.percentile(values, [25.0, 75.0])
    iqr = q3 - q1
    return (values >= q1 - k * iqr) & (values <= q3 + k * iqr)


@dataclass
class TrialRow:
    trial: int
    condition: str
    fixation_off_s: float
    tap_s: float
    tone_delay_ms: float
    estimate_ms: float
    ems_s: float | None = None
    kept: bool = True
    reject_reason: str = ""


def table_from_truth(truth: synth.SynthGroundTruth, pulses=None) -> list[TrialRow]:
    """Build the screening table from ground truth, merging replayed EMS
    pulse times into AUGMENTED trials when a pulse log is given."""
    rows = [
        TrialRow(
            trial=t.trial,
            condition=t.condition,
            fixation_off_s=t.fixation_off_s,
            tap_s=t.tap_s,
            tone_delay_ms=t.tone_delay_ms,
            estimate_ms=t.estimate_ms,
            ems_s=t.ems_s,
        )
        for t in truth.trials
    ]
    if pulses:
        times = sorted(p.t for p in pulses)
        for row, t in zip(rows, truth.trials):
            window = [pt for pt in times if t.fixation_off_s <= pt <= t.tap_s + 1.0]
            if window:
                row.ems_s = window[0]
    return rows


def screen_trials(
    table: list[TrialRow],
    k: float = TUKEY_EXTREME_K,
    ems_tap_limit_s: float = EMS_TAP_LIMIT_S,
) -> list[TrialRow]:
    """Apply the three outlier screens and update kept flags.

    1. Tukey on the fixation-offset-to-tap interval.
    2. Tukey on the interval estimates.
    3. For EMS trials: hard rejection when the tap does not follow the
       pulse within ``ems_tap_limit_s``, then Tukey on the EMS-to-tap
       delta. Rejections are the union of all screens; every fence is
       computed from the full table, so the screening is idempotent and
       the screens commute.
    """
    out = [replace(row, kept=True, reject_reason="") for row in table]
    reasons: dict[int, list[str]] = {i: [] for i in range(len(out))}

    intervals = np.array([row.tap_s - row.fixation_off_s for row in out])
    if intervals.size >= 4:
        for i, ok in enumerate(tukey_reject(intervals, k)):
            if not ok:
                reasons[i].append("tap_interval")

    estimates = np.array([row.estimate_ms for row in out])
    if estimates.size >= 4:
        for i, ok in enumerate(tukey_reject(estimates, k)):
            if not ok:
                reasons[i].append("estimate")

    ems_idx = [i for i, row in enumerate(out) if row.ems_s is not None]
    deltas = np.array([out[i].tap_s - out[i].ems_s for i in ems_idx])
    for i, d in zip(ems_idx, deltas):
        if d > ems_tap_limit_s or d < 0:
            reasons[i].append("ems_tap_gap")
    if deltas.size >= 4:
        for i, ok in zip(ems_idx, tukey_reject(deltas, k)):
            if not ok and "ems_delta" not in reasons[i]:
                reasons[i].append("ems_delta")

    for i, row in enumerate(out):
        if reasons[i]:
            row.kept = False
            row.reject_reason = ";".join(reasons[i])
    return out


@dataclass
class BindingStat:
    group: str
    n: int
    mean_ms: float
    sd_ms: float


def binding_summary(table: list[TrialRow]) -> list[BindingStat]:
    """Mean and SD of (estimate - true delay) per condition, kept trials
    only; negative means temporal compression. AUGMENTED additionally
    splits into EMS-driven and self-executed trials."""
    groups: dict[str, list[float]] = {}
    for row in table:
        if not row.kept:
            continue
        delta = row.estimate_ms - row.tone_delay_ms
        groups.setdefault(row.condition, []).append(delta)
        if row.condition == synth.AUGMENTED:
            sub = "AUGMENTED_EMS" if row.ems_s is not None else "AUGMENTED_SELF"
            groups.setdefault(sub, []).append(delta)
    stats = []
    for name in (synth.INTENTION, synth.INVOLUNTARY, synth.AUGMENTED, "AUGMENTED_EMS", "AUGMENTED_SELF"):
        values = groups.get(name)
        if not values:
            if name in (synth.INTENTION, synth.INVOLUNTARY, synth.AUGMENTED):
                log.warning("no kept trials for condition %s; omitted", name)
            continue
        arr = np.asarray(values)
        stats.append(
            BindingStat(
                group=name,
                n=arr.size,
                mean_ms=float(arr.mean()),
                sd_ms=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            )
        )
    return stats


@dataclass
class ErpMatrix:
    """Per-condition mean waveforms at one channel, -1000..+500 ms."""

    channel: str
    rate: float
    times_s: np.ndarray
    waveforms: dict[str, np.ndarray]
    counts: dict[str, int]


def erp_extract(
    recording: Recording,
    events: list[tuple[float, str]],
    channel: str,
    low_hz: float = 0.1,
    high_hz: float = 15.0,
    window_ms: tuple[float, float] = ERP_WINDOW_MS,
    baseline_ms: tuple[float, float] = ERP_BASELINE_MS,
) -> ErpMatrix:
    """Band-pass, epoch around each onset, baseline-correct and average.

    ``events`` pairs each movement onset with its condition label. This
    post-hoc path filters zero-phase (no group delay), unlike the causal
    live path, so peak latencies are preserved.
    """
    if not events:
        raise EmptyConditionError("no events to extract ERPs from")
    spec = design_bandpass(low_hz, high_hz, recording.rate, order=4)
    idx = recording.channel_index(channel)
    trace = sps.sosfiltfilt(spec.sos, recording.data[idx])
    filtered = Recording(
        rate=recording.rate, channels=[channel], data=trace[np.newaxis, :]
    )

    n_base = int(round((baseline_ms[1] - baseline_ms[0]) / 1000.0 * recording.rate))
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for onset, cond in events:
        seg = epoch_extract(filtered, onset, window_ms[0], window_ms[1])
        wave = seg.data[0] - seg.data[0][:n_base].mean()
        if cond in sums:
            sums[cond] += wave
            counts[cond] += 1
        else:
            sums[cond] = wave.copy()
            counts[cond] = 1
    empty = [c for c, n in counts.items() if n == 0]
    if empty:
        raise EmptyConditionError(f"no kept trials for {empty}")
    n = int(round((window_ms[1] - window_ms[0]) / 1000.0 * recording.rate))
    times = window_ms[0] / 1000.0 + np.arange(n) / recording.rate
    return ErpMatrix(
        channel=channel,
        rate=recording.rate,
        times_s=times,
        waveforms={c: sums[c] / counts[c] for c in sums},
        counts=counts,
    )


def _paired_t(diffs: np.ndarray) -> np.ndarray:
    """t statistic of paired differences along axis 0, guarded at sd=0."""
    n = diffs.shape[0]
    mean = diffs.mean(axis=0)
    sd = diffs.std(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = mean / (sd / math.sqrt(n))
        t = np.where(sd == 0, np.sign(mean) * np.inf, t)
    return np.where((sd == 0) & (mean == 0), 0.0, t)


def _sign_patterns(n: int, n_perm: int, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """All 2^n sign flips when that fits the budget, else a random draw.

    The identity pattern is always included (row 0), which keeps the
    Monte-Carlo p-value valid.
    """
    if 2**n <= n_perm:
        bits = np.arange(2**n, dtype=np.uint32)
        patterns = ((bits[:, None] >> np.arange(n)) & 1).astype(np.float64) * 2.0 - 1.0
        # put the identity (+1 everywhere) first
        patterns[[0, -1]] = patterns[[-1, 0]]
        return patterns, True
    patterns = rng.choice([-1.0, 1.0], size=(n_perm, n))
    patterns[0] = 1.0
    return patterns, False


def permutation_p(diffs: np.ndarray, n_perm: int = 10000, seed: int = 0) -> np.ndarray:
    """Two-sided sign-flip p-values per column of paired differences."""
    diffs = np.atleast_2d(np.asarray(diffs, dtype=np.float64))
    n = diffs.shape[0]
    if n < 2:
        raise ParameterError(f"need at least 2 pairs, got {n}")
    patterns, exhaustive = _sign_patterns(n, n_perm, np.random.default_rng(seed))
    t_obs = np.abs(_paired_t(diffs))
    # per pattern: mean = (s @ d)/n, var from sum of squares (signs square away)
    sums = patterns @ diffs
    m = sums / n
    sq = np.sum(diffs**2, axis=0)
    var = (sq - n * m**2) / (n - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_perm = np.abs(m / np.sqrt(var / n))
    t_perm = np.where(var <= 0, np.where(m == 0, 0.0, np.inf), t_perm)
    hits = np.sum(t_perm >= t_obs[None, :] - 1e-12, axis=0)
    if exhaustive:
        return hits / patterns.shape[0]
    return hits / patterns.shape[0]  # identity row included -> valid MC p


def bh_fdr(pvalues: np.ndarray, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up: (reject mask, adjusted p-values)."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ParameterError("p-values must be a non-empty vector")
    m = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(adj, 1.0)
    reject = adjusted <= alpha
    return reject, adjusted


@dataclass
class ContrastResult:
    pointwise_p: np.ndarray
    pointwise_p_fdr: np.ndarray
    significant: np.ndarray
    window_t: float
    window_p: float


def contrast(
    cond_a: np.ndarray,
    cond_b: np.ndarray,
    times_s: np.ndarray,
    window_s: tuple[float, float] = CONTRAST_WINDOW_S,
    n_perm: int = 10000,
    alpha: float = 0.05,
    seed: int = 0,
) -> ContrastResult:
    """Paired permutation t-tests per time point plus a windowed test.

    ``cond_a`` and ``cond_b`` are (n_participants, n_samples) mean
    waveforms with matched participant rows. Pointwise p-values are
    BH-corrected across the whole epoch; the window test permutes the
    mean amplitude over ``window_s``.
    """
    cond_a = np.asarray(cond_a, dtype=np.float64)
    cond_b = np.asarray(cond_b, dtype=np.float64)
    if cond_a.shape != cond_b.shape or cond_a.ndim != 2:
        raise ParameterError(
            f"condition matrices must have matching (n, samples) shapes, "
            f"got {cond_a.shape} and {cond_b.shape}"
        )
    diffs = cond_a - cond_b
    pointwise = permutation_p(diffs, n_perm=n_perm, seed=seed)
    reject, adjusted = bh_fdr(pointwise, alpha)

    mask = (times_s >= window_s[0]) & (times_s <= window_s[1])
    if not mask.any():
        raise ParameterError(f"window {window_s} s selects no samples")
    window_diffs = diffs[:, mask].mean(axis=1)
    window_p = float(permutation_p(window_diffs[:, None], n_perm=n_perm, seed=seed)[0])
    window_t = float(_paired_t(window_diffs[:, None])[0])
    return ContrastResult(
        pointwise_p=pointwise,
        pointwise_p_fdr=adjusted,
        significant=reject,
        window_t=window_t,
        window_p=window_p,
    )


def simulate_erp_cohort(
    n_participants: int,
    amp_a_uv: float,
    amp_b_uv: float,
    times_s: np.ndarray,
    peak_s: float = 0.210,
    sigma_s: float = 0.035,
    between_sd_uv: float = 1.0,
    residual_sd_uv: float = 0.5,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Participant-level ERP matrices with injected post-onset bumps.

    Each participant's waveform is the condition bump scaled by an
    individual gain plus smooth residual noise, standing in for a
    trial-averaged ERP.
    """
    rng = np.random.default_rng(seed)
    shape = np.exp(-0.5 * ((times_s - peak_s) / sigma_s) ** 2)
    out = []
    for amp in (amp_a_uv, amp_b_uv):
        gains = 1.0 + (between_sd_uv / max(abs(amp), 1e-9)) * rng.standard_normal(n_participants)
        noise = residual_sd_uv * rng.standard_normal((n_participants, times_s.size))
        out.append(amp * gains[:, None] * shape[None, :] + noise)
    return out[0], out[1]


@dataclass
class SessionReport:
    session: int
    seed: int
    oof_f1: float
    chosen_k: int
    threshold: float
    holdout_f1: float
    holdout_fpr: float
    holdout_tpr: float
    n_pulses: int
    pulse_lead_ms: float | None  # pulse time minus true onset (negative = pre-emption)


def evaluate_holdout(model, recording, truth) -> tuple[float, float, float]:
    """Segment-level F1/FPR/TPR of a trained model on a fresh session.

    Segments are built from the ground-truth onsets so the measurement
    does not depend on the label path under test.
    """
    from .labeling import build_training_set
    from .pipeline import eeg_channels, filter_eeg

    filtered = filter_eeg(recording)
    segments, _ = build_training_set(filtered, list(truth.onsets))
    eeg = eeg_channels(recording)
    segments = [
        replace(seg, data=seg.data[[seg.channels.index(c) for c in eeg]], channels=eeg)
        for seg in segments
    ]
    X, y = segment_features(segments, model.channels)
    scores = predict_proba(model.lda, X)
    pred = (np.asarray(scores) > 0.5).astype(int)
    fired = np.asarray(scores) >= model.threshold
    fpr = float(np.mean(fired[y == 0])) if np.any(y == 0) else 0.0
    tpr = float(np.mean(fired[y == 1])) if np.any(y == 1) else 0.0
    return f1_score(pred, y), fpr, tpr


def pulse_timing(log_pulses, truth) -> tuple[int, float | None]:
    """Mean pulse-to-true-onset offset across triggered trials (ms)."""
    leads = []
    for t in truth.trials:
        window = [p.t for p in log_pulses if t.fixation_off_s <= p.t <= t.tap_s + 0.5]
        if window:
            leads.append((window[0] - t.onset_s) * 1000.0)
    return len(leads), (float(np.mean(leads)) if leads else None)


def evaluate_participant(config: synth.SynthConfig, seed: int) -> SessionReport:
    """Generate train + holdout sessions for one synthetic participant,
    train the model, and measure everything the report needs."""
    from dataclasses import replace as dc_replace

    train_cfg = dc_replace(config, seed=seed)
    holdout_cfg = dc_replace(config, seed=seed + 50_000)
    rec_train, _ = synth.generate_session(train_cfg, synth.INTENTION)
    rec_hold, truth_hold = synth.generate_session(holdout_cfg, synth.INTENTION)

    result = train_from_recording(rec_train, seed=seed)
    f1_hold, fpr, tpr = evaluate_holdout(result.model, rec_hold, truth_hold)
    log_ = run_replay(result.model, rec_hold)
    n_pulses, lead = pulse_timing(log_.pulses, truth_hold)
    return SessionReport(
        session=seed,
        seed=seed,
        oof_f1=result.oof_f1,
        chosen_k=result.grid.chosen_k,
        threshold=result.model.threshold,
        holdout_f1=f1_hold,
        holdout_fpr=fpr,
        holdout_tpr=tpr,
        n_pulses=n_pulses,
        pulse_lead_ms=lead,
    )


def classifier_report(
    reports: list[SessionReport], out_dir: str | Path | None = None, header: dict | None = None
) -> str:
    """Tidy CSV (one row per session x metric) plus a readable summary."""
    rows = []
    for r in reports:
        for metric in ("oof_f1", "chosen_k", "threshold", "holdout_f1", "holdout_fpr", "holdout_tpr", "n_pulses", "pulse_lead_ms"):
            value = getattr(r, metric)
            rows.append({"session": r.session, "metric": metric, "value": "" if value is None else value})
    lines = [
        f"sessions: {len(reports)}",
        f"mean cross-validated F1: {np.mean([r.oof_f1 for r in reports]):.3f}",
        f"mean holdout F1: {np.mean([r.holdout_f1 for r in reports]):.3f}",
        f"mean threshold: {np.mean([r.threshold for r in reports]):.3f}",
        f"mean holdout FPR: {np.mean([r.holdout_fpr for r in reports]):.3f}",
        f"mean chosen channel count: {np.mean([r.chosen_k for r in reports]):.1f}",
    ]
    leads = [r.pulse_lead_ms for r in reports if r.pulse_lead_ms is not None]
    if leads:
        lines.append(f"mean pulse-to-onset offset: {np.mean(leads):.1f} ms")
    summary = "\n".join(lines)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
            for key, value in (header or {}).items():
                fh.write(f"# {key}={value}\n")
            writer = csv.DictWriter(fh, fieldnames=["session", "metric", "value"])
            writer.writeheader()
            writer.writerows(rows)
        (out_dir / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    return summary


def write_erp_csv(path: str | Path, erp: ErpMatrix, condition: str, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}={value}\n")
        fh.write("time_s\tamplitude_uv\n")
        for t, v in zip(erp.times_s, erp.waveforms[condition]):
            fh.write(f"{t!r}\t{v!r}\n")


def calibrate_noise_rms(
    target_f1: float = 0.71,
    lo: float = 1.0,
    hi: float = 30.0,
    n_iter: int = 9,
    n_sessions: int = 3,
    base_seed: int = 100,
    config: synth.SynthConfig | None = None,
) -> float:
    """Binary-search the EEG noise level so cross-validated F1 hits the
    target. F1 decreases monotonically with noise, so bisection applies."""
    base = config or synth.SynthConfig()

    def mean_f1(rms: float) -> float:
        scores = []
        for s in range(n_sessions):
            cfg = replace(base, seed=base_seed + s, noise=replace(base.noise, rms_uv=rms))
            rec, _ = synth.generate_session(cfg, synth.INTENTION)
            scores.append(train_from_recording(rec, seed=base_seed + s).oof_f1)
        return float(np.mean(scores))

    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        if mean_f1(mid) > target_f1:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
