"""Causal filtering, ring buffering and epoch extraction.

Everything here is shared by the offline training path and the streaming
engine: both apply the same causal recursive band-pass so that features
computed live are sample-identical to features computed on the recorded
file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import BoundsError, DesignError, NotReadyError, ParameterError

PRE_MOVEMENT = "pre-movement"
IDLE = "idle"


@dataclass(frozen=True)
class Marker:
    """A timestamped event attached to a recording."""

    t: float
    kind: str
    payload: str = ""


@dataclass
class Recording:
    """A multichannel sampled signal in microvolts plus its event markers.

    ``data`` is channel-major, shape ``(n_channels, n_samples)``. Sample
    ``i`` of every channel is taken at time ``i / rate`` seconds. Markers
    are kept sorted by timestamp.
    """

    rate: float
    channels: list[str]
    data: np.ndarray
    markers: list[Marker] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.rate <= 0:
            raise ParameterError(f"rate must be positive, got {self.rate}")
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channels):
            raise ParameterError(
                f"data must be (n_channels, n_samples) with "
                f"{len(self.channels)} channels, got shape {self.data.shape}"
            )
        if len(set(self.channels)) != len(self.channels):
            raise ParameterError("channel labels must be unique")
        self.markers = sorted(self.markers, key=lambda m: m.t)

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.rate

    def channel_index(self, label: str) -> int:
        try:
            return self.channels.index(label)
        except ValueError:
            raise ParameterError(f"no channel named {label!r}") from None

    def channel(self, label: str) -> np.ndarray:
        return self.data[self.channel_index(label)]

    def markers_of(self, kind: str) -> list[Marker]:
        return [m for m in self.markers if m.kind == kind]


@dataclass
class Segment:
    """A short multichannel window cut out of a recording.

    ``t0`` is the timestamp of the first sample. ``label`` is set for
    training segments (``"pre-movement"`` or ``"idle"``).
    """

    data: np.ndarray
    t0: float
    rate: float
    channels: list[str]
    label: str | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channels):
            raise ParameterError(
                f"segment data must be (n_channels, n_samples), got {self.data.shape}"
            )

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def channel(self, label: str) -> np.ndarray:
        try:
            return self.data[self.channels.index(label)]
        except ValueError:
            raise ParameterError(f"no channel named {label!r}") from None


@dataclass(frozen=True)
class FilterSpec:
    """A causal recursive band-pass in second-order sections.

    ``sos`` has shape ``(n_sections, 6)``; each row is one biquad's
    numerator and denominator. ``initial_state`` is the per-channel
    zero state template of shape ``(n_sections, 2)``.
    """

    low_hz: float
    high_hz: float
    rate: float
    order: int
    kind: str
    sos: np.ndarray
    initial_state: np.ndarray

    def zero_state(self, n_channels: int | None = None) -> np.ndarray:
        """Zero initial conditions for 1-D input or for ``n_channels`` rows."""
        if n_channels is None:
            return self.initial_state.copy()
        return np.zeros((self.sos.shape[0], n_channels, 2))

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(sec[3:]) for sec in self.sos])

    def response_db(self, freqs_hz) -> np.ndarray:
        """Magnitude response in dB at the given frequencies."""
        w = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
        _, h = sps.sosfreqz(self.sos, worN=w, fs=self.rate)
        return 20.0 * np.log10(np.maximum(np.abs(h), 1e-300))


def design_bandpass(low_hz: float, high_hz: float, rate: float, order: int = 4) -> FilterSpec:
    """Design a causal Butterworth band-pass as second-order sections.

    Raises ParameterError for invalid edges and DesignError if the
    resulting filter is not strictly stable.
    """
    if rate <= 0:
        raise ParameterError(f"rate must be positive, got {rate}")
    if not (0.0 < low_hz < high_hz < rate / 2.0):
        raise ParameterError(
            f"band edges must satisfy 0 < low < high < rate/2, "
            f"got low={low_hz}, high={high_hz}, rate={rate}"
        )
    if order < 1:
        raise ParameterError(f"order must be >= 1, got {order}")
    sos = sps.butter(order, [low_hz, high_hz], btype="band", fs=rate, output="sos")
    spec = FilterSpec(
        low_hz=float(low_hz),
        high_hz=float(high_hz),
        rate=float(rate),
        order=int(order),
        kind="band-pass",
        sos=sos,
        initial_state=np.zeros((sos.shape[0], 2)),
    )
    if np.any(np.abs(spec.poles()) >= 1.0):
        raise DesignError(
            f"unstable band-pass design for ({low_hz}, {high_hz}) Hz at {rate} Hz, order {order}"
        )
    return spec


def filter_apply(
    spec: FilterSpec, x: np.ndarray, state: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the filter causally, carrying state across chunks.

    ``x`` is 1-D or ``(n_channels, n_samples)``. Returns the filtered
    signal and the updated state; feeding chunks with the carried state
    is sample-identical to filtering in one shot.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ParameterError("empty input signal")
    if state is None:
        state = spec.zero_state() if x.ndim == 1 else spec.zero_state(x.shape[0])
    y, zf = sps.sosfilt(spec.sos, x, axis=-1, zi=state)
    return y, zf


class RingBuffer:
    """Fixed-capacity per-channel circular storage with a single writer.

    ``last(n)`` and ``snapshot`` return contiguous, time-ordered copies of
    the most recent samples, so they are safe to hand to another thread.
    """

    def __init__(self, channels: list[str], rate: float, capacity_s: float = 2.0):
        if rate <= 0:
            raise ParameterError(f"rate must be positive, got {rate}")
        capacity = int(round(capacity_s * rate))
        if capacity < int(round(rate)):
            raise ParameterError("capacity must cover at least one second")
        self.channels = list(channels)
        self.rate = float(rate)
        self.capacity = capacity
        self._buf = np.zeros((len(channels), capacity))
        self._pos = 0
        self._written = 0

    @property
    def total_written(self) -> int:
        return self._written

    def push(self, samples: np.ndarray) -> None:
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :] if len(self.channels) == 1 else samples[:, np.newaxis]
        if samples.shape[0] != len(self.channels):
            raise ParameterError(
                f"expected {len(self.channels)} channels, got {samples.shape[0]}"
            )
        k = samples.shape[1]
        if k == 0:
            return
        if k >= self.capacity:
            self._buf[:] = samples[:, -self.capacity:]
            self._pos = 0
        else:
            end = self._pos + k
            if end <= self.capacity:
                self._buf[:, self._pos:end] = samples
            else:
                split = self.capacity - self._pos
                self._buf[:, self._pos:] = samples[:, :split]
                self._buf[:, : end - self.capacity] = samples[:, split:]
            self._pos = end % self.capacity
        self._written += k

    def last(self, n: int) -> np.ndarray:
        if n > self.capacity:
            raise ParameterError(f"requested {n} samples but capacity is {self.capacity}")
        if self._written < n:
            raise NotReadyError(f"buffer holds {min(self._written, self.capacity)} samples, need {n}")
        start = (self._pos - n) % self.capacity
        if start + n <= self.capacity:
            return self._buf[:, start : start + n].copy()
        return np.concatenate((self._buf[:, start:], self._buf[:, : self._pos]), axis=1)


def ring_snapshot(buffer: RingBuffer, window_s: float = 1.0) -> Segment:
    """Most recent ``window_s`` of buffered data as a time-ordered segment."""
    n = int(round(window_s * buffer.rate))
    data = buffer.last(n)
    t0 = (buffer.total_written - n) / buffer.rate
    return Segment(data=data, t0=t0, rate=buffer.rate, channels=list(buffer.channels))


def epoch_extract(
    recording: Recording, event_time: float, start_ms: float, end_ms: float
) -> Segment:
    """Cut ``[event+start_ms, event+end_ms)`` out of a recording.

    The first sample is the one at-or-after the requested start time and
    the sample count is ``round((end_ms - start_ms) / 1000 * rate)``.
    """
    if end_ms <= start_ms:
        raise ParameterError(f"end_ms must exceed start_ms, got ({start_ms}, {end_ms})")
    rate = recording.rate
    n = int(round((end_ms - start_ms) / 1000.0 * rate))
    start_idx = math.ceil((event_time + start_ms / 1000.0) * rate - 1e-9)
    if start_idx < 0 or start_idx + n > recording.n_samples:
        raise BoundsError(
            f"window [{event_time + start_ms / 1000.0:.3f}, "
            f"{event_time + end_ms / 1000.0:.3f}] s outside recording "
            f"of {recording.duration:.3f} s"
        )
    data = recording.data[:, start_idx : start_idx + n].copy()
    return Segment(data=data, t0=start_idx / rate, rate=rate, channels=list(recording.channels))
