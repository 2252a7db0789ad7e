"""Movement-onset detection from EMG and construction of the labeled
training set (pre-movement vs idle segments)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import (
    IDLE,
    PRE_MOVEMENT,
    Recording,
    Segment,
    design_bandpass,
    epoch_extract,
    filter_apply,
)
from .errors import (
    BoundsError,
    DetectionError,
    EmptyTrainingSetError,
    ParameterError,
)

log = logging.getLogger(__name__)

EMG_BAND = (20.0, 100.0)


@dataclass
class LabeledSegment(Segment):
    """A 1 s training segment with its trial index."""

    trial: int = -1


@dataclass
class OnsetResult:
    """Detected muscle-activation lead time and the per-trial onsets.

    ``onset_offset_ms`` is how far movement onset precedes the screen tap;
    ``onsets`` are the tap times minus that offset, in seconds.
    """

    onset_offset_ms: float
    onsets: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.onset_offset_ms <= 1000.0):
            raise ParameterError(
                f"onset offset must lie in [0, 1000] ms, got {self.onset_offset_ms}"
            )


def emg_power(raw_emg: np.ndarray, rate: float) -> np.ndarray:
    """Band-pass the raw EMG to 20-100 Hz causally and square it."""
    raw_emg = np.asarray(raw_emg, dtype=np.float64)
    if raw_emg.ndim != 1:
        raise ParameterError(f"expected a single-channel EMG trace, got shape {raw_emg.shape}")
    spec = design_bandpass(*EMG_BAND, rate=rate, order=4)
    filtered, _ = filter_apply(spec, raw_emg)
    return filtered**2


def detect_onset(
    power_traces: list[np.ndarray], tap_times: list[float], rate: float
) -> OnsetResult:
    """Locate movement onset from trial-averaged EMG power before the tap.

    The 1 s windows immediately preceding each tap are averaged across
    trials; the onset is the first sample at-or-above the 95th percentile
    of that averaged trace, reported as milliseconds before the tap.
    """
    if len(power_traces) == 0:
        raise ParameterError("need at least one trial")
    if len(power_traces) != len(tap_times):
        raise ParameterError(
            f"{len(power_traces)} power traces but {len(tap_times)} tap times"
        )
    n = int(round(rate))
    windows = []
    for trace, tap in zip(power_traces, tap_times):
        trace = np.asarray(trace, dtype=np.float64)
        end = int(round(tap * rate))
        if end - n < 0 or end > trace.shape[-1]:
            raise ParameterError(
                f"trial tapped at {tap:.3f} s has less than 1 s of EMG before the tap"
            )
        windows.append(trace[end - n : end])
    averaged = np.mean(windows, axis=0)

    threshold = np.percentile(averaged, 95.0)
    below = averaged < threshold
    if not below.any():
        raise DetectionError("averaged EMG power trace is flat; no threshold crossing")
    idx = int(np.argmax(averaged >= threshold))
    offset_ms = (n - idx) / rate * 1000.0
    onsets = [tap - offset_ms / 1000.0 for tap in tap_times]
    return OnsetResult(onset_offset_ms=offset_ms, onsets=onsets)


def build_training_set(
    recording: Recording,
    onsets: list[float],
    idle_offset_s: float = 0.5,
    fixation_kind: str = "fixation_on",
) -> tuple[list[LabeledSegment], int]:
    """One pre-movement and one idle segment per trial.

    Pre-movement is the second ending at the detected onset; idle is the
    second starting ``idle_offset_s`` after the trial's fixation-cross
    onset. Trials whose windows fall outside the recording are skipped;
    the skip count is returned alongside the segments.
    """
    fixations = [m.t for m in recording.markers_of(fixation_kind)]
    if len(fixations) < len(onsets):
        raise ParameterError(
            f"{len(onsets)} onsets but only {len(fixations)} {fixation_kind!r} markers"
        )
    segments: list[LabeledSegment] = []
    skipped = 0
    for trial, (onset, fix_on) in enumerate(zip(onsets, fixations)):
        try:
            pre = epoch_extract(recording, onset, -1000.0, 0.0)
            idle_start = fix_on + idle_offset_s
            idl = epoch_extract(recording, idle_start, 0.0, 1000.0)
        except BoundsError:
            skipped += 1
            log.warning("trial %d skipped: windows outside recording", trial)
            continue
        segments.append(
            LabeledSegment(
                data=pre.data, t0=pre.t0, rate=pre.rate,
                channels=pre.channels, label=PRE_MOVEMENT, trial=trial,
            )
        )
        segments.append(
            LabeledSegment(
                data=idl.data, t0=idl.t0, rate=idl.rate,
                channels=idl.channels, label=IDLE, trial=trial,
            )
        )
    return segments, skipped


def reject_artifacts(
    segments: list[LabeledSegment],
    amplitude_limit_uv: float = 100.0,
    variance_factor: float = 5.0,
) -> list[LabeledSegment]:
    """Drop trial pairs containing an artifactual segment.

    A segment is rejected when any sample exceeds ``amplitude_limit_uv``
    in magnitude, or when any channel's variance exceeds
    ``variance_factor`` times that channel's median variance across the
    kept segments. Whole trials are dropped: if either member of an
    idle/pre-movement pair is rejected, both go. The variance fence is
    re-applied until stable, so a second pass is a no-op.
    """
    if not segments:
        raise ParameterError("non-empty segment set required")
    kept = list(segments)
    while True:
        bad_trials: set[int] = set()
        variances = np.stack([seg.data.var(axis=1) for seg in kept])
        median_var = np.median(variances, axis=0)
        fence = variance_factor * median_var
        for seg, var in zip(kept, variances):
            if np.abs(seg.data).max() > amplitude_limit_uv or np.any(var > fence):
                bad_trials.add(seg.trial)
        if not bad_trials:
            break
        kept = [seg for seg in kept if seg.trial not in bad_trials]
        if not kept:
            raise EmptyTrainingSetError("artifact rejection removed every trial")
    return kept


def write_label_file(path: str | Path, onsets: list[float], kept_trials: set[int]) -> None:
    """Audit file: one line per trial, ``trial_idx<TAB>onset_s<TAB>kept``."""
    with open(path, "w", encoding="utf-8") as fh:
        for trial, onset in enumerate(onsets):
            fh.write(f"{trial}\t{onset!r}\t{int(trial in kept_trials)}\n")
