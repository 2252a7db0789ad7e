"""End-to-end training: from a labeled session recording to a deployable
intent model.

Order of operations mirrors the offline procedure: EMG-derived movement
onsets label the EEG, the EEG is causally band-passed 0.1-15 Hz (the same
filter the live engine applies, so there is no train/serve skew),
segments are cut and screened, channels ranked, the channel count picked
by 5-fold cross-validation, and the decision threshold read off the ROC
of the pooled out-of-fold scores at 15 % false positive rate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dsp import IDLE, PRE_MOVEMENT, Recording, design_bandpass, filter_apply
from .errors import ParameterError
from .features import ChannelRanking, rank_from_segments, slope_features
from .labeling import (
    LabeledSegment,
    OnsetResult,
    build_training_set,
    detect_onset,
    emg_power,
    reject_artifacts,
)
from .model import (
    TARGET_FPR,
    GridSearchResult,
    IntentModel,
    f1_score,
    lda_train,
    roc_curve,
    threshold_at_fpr,
)

log = logging.getLogger(__name__)

EEG_BAND = (0.1, 15.0)
EMG_PREFIX = "EMG"

_THRESHOLD_EPS = 1e-9


@dataclass
class TrainResult:
    model: IntentModel
    onset: OnsetResult
    ranking: ChannelRanking
    grid: GridSearchResult
    kept_trials: set[int]
    trials_skipped: int
    oof_f1: float

    @property
    def segments_kept(self) -> int:
        return 2 * len(self.kept_trials)


def eeg_channels(recording: Recording) -> list[str]:
    return [c for c in recording.channels if not c.startswith(EMG_PREFIX)]


def emg_channel(recording: Recording) -> str:
    for c in recording.channels:
        if c.startswith(EMG_PREFIX):
            return c
    raise ParameterError("recording has no EMG channel to derive labels from")


def filter_eeg(recording: Recording, low_hz: float = EEG_BAND[0], high_hz: float = EEG_BAND[1]) -> Recording:
    """Causally band-pass all EEG channels; EMG passes through untouched."""
    spec = design_bandpass(low_hz, high_hz, recording.rate, order=4)
    data = recording.data.copy()
    idx = [recording.channels.index(c) for c in eeg_channels(recording)]
    data[idx], _ = filter_apply(spec, recording.data[idx])
    return Recording(
        rate=recording.rate,
        channels=list(recording.channels),
        data=data,
        markers=list(recording.markers),
    )


def detect_session_onsets(recording: Recording) -> OnsetResult:
    """EMG-power onset detection over all tapped trials of a session."""
    taps = [m.t for m in recording.markers_of("tap")]
    if not taps:
        raise ParameterError("recording carries no tap markers")
    power = emg_power(recording.channel(emg_channel(recording)), recording.rate)
    return detect_onset([power] * len(taps), taps, recording.rate)


def segment_features(
    segments: list[LabeledSegment], channels: list[str]
) -> tuple[np.ndarray, np.ndarray]:
    """Slope-feature matrix and 0/1 labels (idle=0, pre-movement=1)."""
    X = np.stack([slope_features(seg, channels) for seg in segments])
    y = np.array([1 if seg.label == PRE_MOVEMENT else 0 for seg in segments])
    return X, y


def train_from_recording(
    recording: Recording,
    seed: int = 0,
    idle_offset_s: float = 0.5,
    max_channels: int = 20,
) -> TrainResult:
    """Full training path on one raw session recording."""
    onset = detect_session_onsets(recording)
    filtered = filter_eeg(recording)
    segments, skipped = build_training_set(filtered, onset.onsets, idle_offset_s=idle_offset_s)
    eeg_only = eeg_channels(recording)
    segments = [
        LabeledSegment(
            data=seg.data[[seg.channels.index(c) for c in eeg_only]],
            t0=seg.t0, rate=seg.rate, channels=eeg_only,
            label=seg.label, trial=seg.trial,
        )
        for seg in segments
    ]
    kept = reject_artifacts(segments)

    ranking = rank_from_segments(kept, eeg_only)
    prefix = ranking.top(min(max_channels, len(ranking.order)))
    X, y = segment_features(kept, prefix)

    from .model import cv_grid_search

    grid = cv_grid_search(X, y, seed=seed)
    curve = roc_curve(grid.oof_scores, grid.oof_labels)
    threshold = threshold_at_fpr(curve, TARGET_FPR)
    threshold = float(np.clip(threshold, _THRESHOLD_EPS, 1.0 - _THRESHOLD_EPS))

    chosen = prefix[: grid.chosen_k]
    lda = lda_train(X[:, : grid.chosen_k], y)
    oof_pred = (grid.oof_scores > 0.5).astype(int)
    oof_f1 = f1_score(oof_pred, y)

    spec = design_bandpass(*EEG_BAND, rate=recording.rate, order=4)
    model = IntentModel(
        filter=spec,
        channels=chosen,
        lda=lda,
        threshold=threshold,
        metadata={
            "seed": seed,
            "chosen_k": grid.chosen_k,
            "oof_f1": f"{oof_f1:.6f}",
            "onset_offset_ms": f"{onset.onset_offset_ms:.3f}",
            "mean_accuracy": ";".join(
                f"{k}:{grid.mean_accuracy[k]:.4f}" for k in sorted(grid.mean_accuracy)
            ),
            "n_segments": len(kept),
            "trials_skipped": skipped,
        },
    )
    return TrainResult(
        model=model,
        onset=onset,
        ranking=ranking,
        grid=grid,
        kept_trials={seg.trial for seg in kept},
        trials_skipped=skipped,
        oof_f1=oof_f1,
    )
