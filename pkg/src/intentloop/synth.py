"""Ground-truth session generator.

Produces multichannel EEG + EMG recordings for the three task conditions
(INTENTION, INVOLUNTARY, AUGMENTED) with known movement onsets, injected
readiness-potential templates, EMG bursts, behavioral timing estimates
and pink background noise. Every downstream claim in the pipeline is
verified against these sessions because their ground truth is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import Marker, Recording, design_bandpass, filter_apply
from .errors import DataFormatError, ParameterError

INTENTION = "INTENTION"
INVOLUNTARY = "INVOLUNTARY"
AUGMENTED = "AUGMENTED"
CONDITIONS = (INTENTION, INVOLUNTARY, AUGMENTED)

EMG_CHANNEL = "EMG1"


def default_channels() -> list[str]:
    """64 EEG labels from the extended 10-20 layout."""
    rows = [
        "Fp1 Fpz Fp2",
        "AF7 AF3 AF4 AF8",
        "F7 F5 F3 F1 Fz F2 F4 F6 F8",
        "FT9 FT7 FC5 FC3 FC1 FCz FC2 FC4 FC6 FT8 FT10",
        "T7 C5 C3 C1 Cz C2 C4 C6 T8",
        "TP9 TP7 CP5 CP3 CP1 CPz CP2 CP4 CP6 TP8 TP10",
        "P7 P5 P3 P1 Pz P2 P4 P6 P8",
        "PO7 PO3 POz PO4 PO8",
        "O1 Oz O2",
    ]
    labels = " ".join(rows).split()
    assert len(labels) == 64
    return labels


def default_channel_scales(channels: list[str]) -> dict[str, float]:
    """Relative noise level per channel.

    Peripheral sites (frontal pole, temporal, occipital) run noisier than
    central motor sites, which is what makes the idle-drift ranking
    criterion informative.
    """
    scales = {}
    for c in channels:
        if c.startswith(("Fp", "AF")):
            s = 1.6
        elif c in ("F7", "F8", "FT9", "FT10", "T7", "T8", "TP9", "TP10"):
            s = 1.5
        elif c in ("F5", "F6", "FT7", "FT8", "TP7", "TP8", "P7", "P8"):
            s = 1.35
        elif c.startswith(("O", "PO")):
            s = 1.3
        elif c.startswith("F") and not c.startswith("FC"):
            s = 1.15
        elif c.startswith(("C", "FC", "CP")):
            s = 0.85
        elif c.startswith("P"):
            s = 1.0
        else:
            s = 1.1
        scales[c] = s
    return scales


def default_rp_weights() -> dict[str, float]:
    return {
        "Cz": 0.32, "C3": 0.30, "C4": 0.10, "FCz": 0.08, "FC1": 0.05,
        "C1": 0.05, "FC2": 0.03, "C2": 0.03, "CP1": 0.02, "CPz": 0.02,
    }


@dataclass
class RpParams:
    """Two-stage readiness-potential template (piecewise linear).

    Amplitudes are calibration knobs, not measured values: the template
    runs from 0 at ``early_onset_ms`` through ``early_amp_uv`` at
    ``late_onset_ms`` down to ``late_amp_uv`` at the movement onset.
    ``weights`` spread the template across channels and sum to 1.
    """

    early_onset_ms: float = -2000.0
    early_amp_uv: float = -5.0
    late_onset_ms: float = -400.0
    late_amp_uv: float = -22.0
    weights: dict[str, float] = field(default_factory=default_rp_weights)


@dataclass
class NoiseParams:
    exponent: float = 0.6
    rms_uv: float = 5.3  # calibrated so cross-validated F1 lands near 0.71
    channel_scales: dict[str, float] | None = None


@dataclass
class BehaviorParams:
    fixation_s: float = 2.0
    wait_s: tuple[float, float] = (2.0, 3.0)
    tone_delays_ms: tuple[float, ...] = (200.0, 350.0, 500.0)
    response_s: float = 2.0
    estimate_bias_ms: dict[str, float] = field(
        default_factory=lambda: {INTENTION: -160.0, INVOLUNTARY: -135.0, AUGMENTED: -162.0}
    )
    estimate_sd_ms: float = 100.0
    quantize: bool = False
    quantize_step_ms: float = 50.0


@dataclass
class EmgParams:
    burst_low_hz: float = 20.0
    burst_high_hz: float = 120.0
    lead_ms: float = 120.0  # movement onset precedes the tap by this much
    background_rms_uv: float = 4.0
    burst_rms_uv: float = 40.0
    burst_duration_ms: float = 300.0
    onset_spike_factor: float = 8.0


@dataclass
class BumpParams:
    """Post-onset negativity injected at fronto-central sites."""

    amp_uv: dict[str, float] = field(
        default_factory=lambda: {INTENTION: -2.0, INVOLUNTARY: -10.0, AUGMENTED: -6.0}
    )
    peak_ms: dict[str, float] = field(
        default_factory=lambda: {INTENTION: 150.0, INVOLUNTARY: 210.0, AUGMENTED: 210.0}
    )
    sigma_ms: float = 35.0
    weights: dict[str, float] = field(
        default_factory=lambda: {
            "FCz": 1.0, "Fz": 0.5, "Cz": 0.5, "FC1": 0.45, "FC2": 0.45, "F1": 0.3, "F2": 0.3,
        }
    )


@dataclass
class SynthConfig:
    n_trials: int = 75
    rate: float = 250.0
    channels: list[str] = field(default_factory=default_channels)
    rp: RpParams = field(default_factory=RpParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    behavior: BehaviorParams = field(default_factory=BehaviorParams)
    emg: EmgParams = field(default_factory=EmgParams)
    bump: BumpParams = field(default_factory=BumpParams)
    ems_tap_lag_s: tuple[float, float] = (0.12, 0.18)
    seed: int = 0

    def __post_init__(self):
        if self.n_trials < 1:
            raise ParameterError(f"n_trials must be positive, got {self.n_trials}")
        if self.rate <= 0:
            raise ParameterError(f"rate must be positive, got {self.rate}")
        for name, value in (
            ("fixation_s", self.behavior.fixation_s),
            ("response_s", self.behavior.response_s),
            ("lead_ms", self.emg.lead_ms),
        ):
            if value <= 0:
                raise ParameterError(f"{name} must be positive, got {value}")
        wsum = sum(self.rp.weights.values())
        if self.rp.weights and abs(wsum - 1.0) > 1e-9:
            raise ParameterError(f"spatial weights must sum to 1, got {wsum}")
        unknown = [c for c in self.rp.weights if c not in self.channels]
        if unknown:
            raise ParameterError(f"weight channels not in channel set: {unknown}")


@dataclass
class TrialTruth:
    trial: int
    condition: str
    fixation_on_s: float
    fixation_off_s: float
    onset_s: float
    tap_s: float
    tone_s: float
    tone_delay_ms: float
    ems_s: float | None
    estimate_ms: float


@dataclass
class SynthGroundTruth:
    """Exact trial schedule and injection parameters of a session."""

    condition: str
    seed: int
    lead_ms: float
    weights: dict[str, float]
    trials: list[TrialTruth]

    def __post_init__(self):
        onsets = [t.onset_s for t in self.trials]
        if any(b <= a for a, b in zip(onsets, onsets[1:])):
            raise ParameterError("ground-truth onsets must be strictly increasing")

    @property
    def onsets(self) -> list[float]:
        return [t.onset_s for t in self.trials]

    @property
    def taps(self) -> list[float]:
        return [t.tap_s for t in self.trials]


def rp_waveform(rp: RpParams, rate: float) -> np.ndarray:
    """Sampled template covering ``[early_onset, 0)`` ending at movement."""
    duration = -rp.early_onset_ms / 1000.0
    if duration <= 0:
        raise ParameterError(f"early onset must be negative, got {rp.early_onset_ms}")
    n = int(round(duration * rate))
    t_ms = rp.early_onset_ms + np.arange(n) / rate * 1000.0
    knots_t = [rp.early_onset_ms, rp.late_onset_ms, 0.0]
    knots_v = [0.0, rp.early_amp_uv, rp.late_amp_uv]
    return np.interp(t_ms, knots_t, knots_v)


def pink_noise(
    n: int, exponent: float, rng: np.random.Generator, n_rows: int | None = None
) -> np.ndarray:
    """Unit-rms noise with a 1/f^exponent power spectrum.

    With ``n_rows`` a batch of independent rows is produced in one pass.
    """
    from scipy.fft import next_fast_len

    m = next_fast_len(n)
    shape = (m,) if n_rows is None else (n_rows, m)
    white = rng.standard_normal(shape)
    spectrum = np.fft.rfft(white, axis=-1)
    f = np.fft.rfftfreq(m, 1.0)
    shaping = np.zeros_like(f)
    shaping[1:] = f[1:] ** (-exponent / 2.0)
    x = np.fft.irfft(spectrum * shaping, m, axis=-1)[..., :n]
    rms = np.sqrt(np.mean(x**2, axis=-1, keepdims=True))
    return np.divide(x, rms, out=x, where=rms > 0)


def simulate_behavioral_estimates(
    true_delays_ms: np.ndarray,
    condition: str,
    config: SynthConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Interval estimates: true delay plus condition bias plus noise."""
    if condition not in CONDITIONS:
        raise ParameterError(f"unknown condition {condition!r}")
    b = config.behavior
    est = (
        np.asarray(true_delays_ms, dtype=np.float64)
        + b.estimate_bias_ms[condition]
        + b.estimate_sd_ms * rng.standard_normal(len(true_delays_ms))
    )
    if b.quantize:
        est = np.round(est / b.quantize_step_ms) * b.quantize_step_ms
    return est


def _snap(t: float, rate: float) -> float:
    return round(t * rate) / rate


def make_emg_trace(
    emg: EmgParams,
    rate: float,
    n_samples: int,
    onset_indices: list[int],
    rng: np.random.Generator,
) -> np.ndarray:
    """Single-channel EMG: background noise plus band-limited bursts.

    Each burst starts exactly at its onset sample with a biphasic
    motor-unit spike, so the causally filtered power trace crosses the
    detection threshold at the true onset rather than after the filter's
    rise time.
    """
    trace = np.zeros(n_samples)
    if emg.background_rms_uv > 0:
        trace += emg.background_rms_uv * rng.standard_normal(n_samples)
    if emg.burst_rms_uv > 0:
        burst_n = int(round(emg.burst_duration_ms / 1000.0 * rate))
        hi = min(emg.burst_high_hz, rate / 2.0 - 1.0)
        spec = design_bandpass(emg.burst_low_hz, hi, rate, order=4)
        pad = int(round(rate))  # settle the filter before the kept portion
        spike = emg.onset_spike_factor * emg.burst_rms_uv
        for onset_idx in onset_indices:
            raw = rng.standard_normal(burst_n + pad)
            shaped, _ = filter_apply(spec, raw)
            shaped = shaped[pad:]
            rms = np.sqrt(np.mean(shaped**2))
            if rms > 0:
                shaped *= emg.burst_rms_uv / rms
            stop = min(onset_idx + burst_n, n_samples)
            trace[onset_idx:stop] += shaped[: stop - onset_idx]
            trace[onset_idx] += spike
            if onset_idx + 1 < n_samples:
                trace[onset_idx + 1] -= spike
    return trace


def generate_session(
    config: SynthConfig,
    condition: str,
    intention_rts: np.ndarray | None = None,
) -> tuple[Recording, SynthGroundTruth]:
    """Simulate one session of the tapping task.

    INTENTION and AUGMENTED trials carry an injected readiness potential
    ending at a sampled movement time and an EMG burst from the onset.
    INVOLUNTARY trials have no readiness potential; a scripted EMS
    trigger is drawn between the 5th and 95th percentile of the supplied
    (or internally simulated) INTENTION reaction times and the tap
    follows it. AUGMENTED trials get no scripted trigger -- whether EMS
    fires there is up to the closed loop at replay time.
    """
    if condition not in CONDITIONS:
        raise ParameterError(f"unknown condition {condition!r}")
    rate = config.rate
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_sched = np.random.default_rng(seeds[0])
    rng_noise = np.random.default_rng(seeds[1])
    rng_emg = np.random.default_rng(seeds[2])
    rng_est = np.random.default_rng(seeds[3])

    b = config.behavior
    lead_s = config.emg.lead_ms / 1000.0

    if condition == INVOLUNTARY:
        if intention_rts is None:
            waits = rng_sched.uniform(*b.wait_s, size=config.n_trials)
            intention_rts = waits + lead_s
        p5, p95 = np.percentile(np.asarray(intention_rts, dtype=np.float64), [5.0, 95.0])

    trials: list[TrialTruth] = []
    markers: list[Marker] = []
    cursor = 1.0  # settle time before the first trial
    for i in range(config.n_trials):
        fix_on = _snap(cursor, rate)
        fix_off = _snap(fix_on + b.fixation_s, rate)
        ems: float | None = None
        if condition == INVOLUNTARY:
            rt = rng_sched.uniform(p5, p95)
            ems = _snap(fix_off + rt, rate)
            tap = _snap(ems + rng_sched.uniform(*config.ems_tap_lag_s), rate)
            onset = ems
        else:
            wait = rng_sched.uniform(*b.wait_s)
            onset = _snap(fix_off + wait, rate)
            tap = _snap(onset + lead_s, rate)
        delay_ms = float(rng_sched.choice(b.tone_delays_ms))
        tone = tap + delay_ms / 1000.0

        markers.append(Marker(fix_on, "fixation_on", f"trial={i}"))
        markers.append(Marker(fix_off, "fixation_off", f"trial={i}"))
        if ems is not None:
            markers.append(Marker(ems, "ems", f"trial={i}"))
        markers.append(Marker(tap, "tap", f"trial={i}"))
        markers.append(Marker(tone, "tone", f"trial={i};delay_ms={delay_ms:g}"))

        trials.append(
            TrialTruth(
                trial=i, condition=condition,
                fixation_on_s=fix_on, fixation_off_s=fix_off,
                onset_s=onset, tap_s=tap, tone_s=tone,
                tone_delay_ms=delay_ms, ems_s=ems, estimate_ms=0.0,
            )
        )
        cursor = tone + b.response_s

    estimates = simulate_behavioral_estimates(
        np.array([t.tone_delay_ms for t in trials]), condition, config, rng_est
    )
    for t, est in zip(trials, estimates):
        t.estimate_ms = float(est)

    n_samples = int(math.ceil((cursor + 1.0) * rate))
    channels = list(config.channels) + [EMG_CHANNEL]
    data = np.zeros((len(channels), n_samples))

    # EEG background: pink noise, channel-specific level
    scales = config.noise.channel_scales or default_channel_scales(config.channels)
    if config.noise.rms_uv > 0:
        noise = pink_noise(n_samples, config.noise.exponent, rng_noise, n_rows=len(config.channels))
        levels = config.noise.rms_uv * np.array(
            [scales.get(label, 1.0) for label in config.channels]
        )
        data[: len(config.channels)] = levels[:, np.newaxis] * noise

    # Readiness potential, ending at each movement onset
    if condition in (INTENTION, AUGMENTED):
        template = rp_waveform(config.rp, rate)
        for t in trials:
            onset_idx = int(round(t.onset_s * rate))
            start = onset_idx - len(template)
            if start < 0:
                raise ParameterError("trial schedule leaves no room for the template")
            for label, w in config.rp.weights.items():
                data[channels.index(label), start:onset_idx] += w * template

    # Post-onset negativity (prediction-error deflection)
    amp = config.bump.amp_uv.get(condition, 0.0)
    if amp != 0.0:
        peak = config.bump.peak_ms[condition] / 1000.0
        sigma = config.bump.sigma_ms / 1000.0
        span = int(round((peak + 4 * sigma) * rate))
        t_rel = np.arange(span) / rate
        shape = np.exp(-0.5 * ((t_rel - peak) / sigma) ** 2)
        for t in trials:
            onset_idx = int(round(t.onset_s * rate))
            stop = min(onset_idx + span, n_samples)
            for label, w in config.bump.weights.items():
                if label in config.channels:
                    data[channels.index(label), onset_idx:stop] += amp * w * shape[: stop - onset_idx]

    # EMG: background noise plus a burst from each movement onset
    onset_indices = [int(round(t.onset_s * rate)) for t in trials]
    data[channels.index(EMG_CHANNEL)] = make_emg_trace(
        config.emg, rate, n_samples, onset_indices, rng_emg
    )

    recording = Recording(rate=rate, channels=channels, data=data, markers=markers)
    truth = SynthGroundTruth(
        condition=condition,
        seed=config.seed,
        lead_ms=config.emg.lead_ms,
        weights=dict(config.rp.weights),
        trials=trials,
    )
    return recording, truth


def noise_free(config: SynthConfig) -> SynthConfig:
    """Copy of the config with EEG and EMG background noise silenced."""
    return replace(
        config,
        noise=replace(config.noise, rms_uv=0.0),
        emg=replace(config.emg, background_rms_uv=0.0),
    )


def write_ground_truth(path: str | Path, truth: SynthGroundTruth) -> None:
    lines = [
        f"# condition={truth.condition}",
        f"# seed={truth.seed}",
        f"# lead_ms={truth.lead_ms!r}",
    ]
    for label in sorted(truth.weights):
        lines.append(f"# weight\t{label}\t{truth.weights[label]!r}")
    lines.append(
        "trial\tcondition\tfixation_on_s\tfixation_off_s\tonset_s\ttap_s"
        "\ttone_s\ttone_delay_ms\tems_s\testimate_ms"
    )
    for t in truth.trials:
        ems = repr(t.ems_s) if t.ems_s is not None else "-"
        lines.append(
            f"{t.trial}\t{t.condition}\t{t.fixation_on_s!r}\t{t.fixation_off_s!r}"
            f"\t{t.onset_s!r}\t{t.tap_s!r}\t{t.tone_s!r}\t{t.tone_delay_ms!r}"
            f"\t{ems}\t{t.estimate_ms!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ground_truth(path: str | Path) -> SynthGroundTruth:
    meta: dict[str, str] = {}
    weights: dict[str, float] = {}
    trials: list[TrialTruth] = []
    header_seen = False
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        if line.startswith("# weight\t"):
            _, label, w = line.split("\t")
            weights[label] = float(w)
        elif line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        elif line.startswith("trial\t"):
            header_seen = True
        else:
            if not header_seen:
                raise DataFormatError(f"{path}:{lineno}: data before column header")
            parts = line.split("\t")
            if len(parts) != 10:
                raise DataFormatError(f"{path}:{lineno}: expected 10 columns, got {len(parts)}")
            trials.append(
                TrialTruth(
                    trial=int(parts[0]), condition=parts[1],
                    fixation_on_s=float(parts[2]), fixation_off_s=float(parts[3]),
                    onset_s=float(parts[4]), tap_s=float(parts[5]), tone_s=float(parts[6]),
                    tone_delay_ms=float(parts[7]),
                    ems_s=None if parts[8] == "-" else float(parts[8]),
                    estimate_ms=float(parts[9]),
                )
            )
    try:
        return SynthGroundTruth(
            condition=meta["condition"],
            seed=int(meta["seed"]),
            lead_ms=float(meta["lead_ms"]),
            weights=weights,
            trials=trials,
        )
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing metadata {exc}") from None
