"""The 10 Hz closed-loop engine.

Acquired samples are causally filtered into per-channel ring buffers; on
each 100 ms tick the engine snapshots the last second, extracts slope
features, scores them with the trained discriminant, smooths the
probability and drives the stimulation gate. Tick deadlines are absolute
(sample-count based), so cadence never drifts.

Concurrency contract: the acquisition path is the single writer of the
ring buffers, snapshots are immutable copies, the gate state is owned
exclusively by the ticker, and pulse commands can be handed to a bounded
queue consumed by a separate actuator writer so dispatch never blocks a
tick.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .dsp import IDLE, PRE_MOVEMENT, Marker, Recording, RingBuffer, ring_snapshot
from .errors import ActuatorError, NotReadyError, ParameterError
from .features import slope_features
from .model import IntentModel, predict_proba

log = logging.getLogger(__name__)

TICK_HZ = 10.0
PULSE_DURATION_S = 0.5
SMOOTH_PREV_WEIGHT = 0.3
SMOOTH_CURR_WEIGHT = 0.5

FRAME_MAGIC = b"IL"
FRAME_HEADER = struct.Struct("<2sIQH")  # magic, seq, t_us, n_channels

# gate event kinds
EVENT_ARM = "arm"            # fixation cross disappeared
EVENT_TAP = "tap"            # screen tap registered
EVENT_TRIAL_END = "trial_end"

MARKER_TO_EVENT = {"fixation_off": EVENT_ARM, "tap": EVENT_TAP, "fixation_on": EVENT_TRIAL_END}


def smooth(prev_raw: float, curr_raw: float, normalized: bool = False) -> float:
    """Weighted blend of the previous and current raw probabilities.

    Weights are 0.3 and 0.5 as used live; they do not sum to one, so the
    smoothed value tops out at 0.8 unless ``normalized`` is set.
    """
    if not (0.0 <= prev_raw <= 1.0 and 0.0 <= curr_raw <= 1.0):
        raise ParameterError(f"probabilities must lie in [0, 1], got {prev_raw}, {curr_raw}")
    value = SMOOTH_PREV_WEIGHT * prev_raw + SMOOTH_CURR_WEIGHT * curr_raw
    if normalized:
        value /= SMOOTH_PREV_WEIGHT + SMOOTH_CURR_WEIGHT
    return value


@dataclass
class Prediction:
    t: float
    raw: float
    smoothed: float
    label: str
    latency_ms: float

    def __post_init__(self):
        if not (0.0 <= self.raw <= 1.0 and 0.0 <= self.smoothed <= 1.0):
            raise ParameterError("probabilities must lie in [0, 1]")
        if self.latency_ms < 0:
            raise ParameterError("latency cannot be negative")


@dataclass(frozen=True)
class PulseCommand:
    t: float
    duration_s: float = PULSE_DURATION_S


@dataclass(frozen=True)
class GateEvent:
    t: float
    kind: str


class Phase(Enum):
    DISARMED = "DISARMED"
    ARMED = "ARMED"
    PULSING = "PULSING"
    REFRACTORY = "REFRACTORY"


@dataclass
class GateState:
    phase: Phase = Phase.DISARMED
    armed_since: float | None = None
    pulse_started: float | None = None
    trial: int = -1
    protocol_errors: int = 0


def gate_step(
    state: GateState,
    prediction: Prediction | None,
    threshold: float,
    events: list[GateEvent],
    now: float,
) -> tuple[GateState, PulseCommand | None]:
    """Advance the stimulation gate by one tick.

    Events since the previous tick are applied first (arming on fixation
    offset, disarming on tap or trial end), then the pulse timeout, then
    the firing rule: a pulse is issued only from ARMED, when the smoothed
    probability exceeds the threshold and the predicted class is
    pre-movement. After a pulse the gate stays REFRACTORY until the trial
    ends, so each trial sees at most one pulse. An arm event arriving
    while the gate is not disarmed is a protocol error and forces
    DISARMED.
    """
    command: PulseCommand | None = None
    for event in sorted(events, key=lambda e: e.t):
        if event.kind == EVENT_ARM:
            if state.phase is Phase.DISARMED:
                state.phase = Phase.ARMED
                state.armed_since = event.t
                state.trial += 1
            else:
                state.protocol_errors += 1
                log.warning("arm event at %.3f s while %s; gate forced DISARMED", event.t, state.phase.value)
                state.phase = Phase.DISARMED
                state.armed_since = None
        elif event.kind in (EVENT_TAP, EVENT_TRIAL_END):
            state.phase = Phase.DISARMED
            state.armed_since = None
        # unknown kinds are ignored

    if state.phase is Phase.PULSING and state.pulse_started is not None:
        if now - state.pulse_started >= PULSE_DURATION_S:
            state.phase = Phase.REFRACTORY

    if (
        state.phase is Phase.ARMED
        and prediction is not None
        and prediction.smoothed > threshold
        and prediction.label == PRE_MOVEMENT
    ):
        state.phase = Phase.PULSING
        state.pulse_started = now
        command = PulseCommand(t=now)
    return state, command


class MockActuator:
    """Records pulses for assertions instead of driving hardware."""

    def __init__(self):
        self.log: list[tuple[float, float]] = []  # (issue time, duration ms)
        self.closed = False

    def send(self, line: str) -> str:
        if self.closed:
            raise ActuatorError("mock actuator transport is closed")
        parts = line.strip().split()
        if len(parts) != 2 or parts[0] != "PULSE":
            raise ActuatorError(f"unsupported actuator command {line!r}")
        self.log.append((time.monotonic(), float(parts[1])))
        return "OK"

    def close(self):
        self.closed = True


class TcpActuator:
    """Line-protocol client: sends ``PULSE <ms>`` and expects ``OK``."""

    def __init__(self, host: str, port: int, timeout: float = 2.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self._sock.makefile("rwb")
        self.closed = False

    def send(self, line: str) -> str:
        if self.closed:
            raise ActuatorError("actuator connection is closed")
        try:
            self._file.write(line.encode("ascii") + b"\n")
            self._file.flush()
            reply = self._file.readline().decode("ascii").strip()
        except OSError as exc:
            raise ActuatorError(f"actuator transport failed: {exc}") from exc
        if reply != "OK":
            raise ActuatorError(f"actuator refused command: {reply!r}")
        return reply

    def close(self):
        self.closed = True
        try:
            self._file.close()
            self._sock.close()
        except OSError:
            pass


def actuator_send(transport, command: PulseCommand) -> str:
    """Dispatch one pulse over the line protocol: ``PULSE <ms>``."""
    return transport.send(f"PULSE {int(round(command.duration_s * 1000))}")


class ActuatorWorker:
    """Background writer draining a bounded queue of pulse commands."""

    def __init__(self, transport, maxsize: int = 8):
        self.transport = transport
        self.queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self.errors: list[str] = []
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def submit(self, command: PulseCommand) -> None:
        try:
            self.queue.put_nowait(command)
        except queue.Full:
            self.errors.append(f"pulse at {command.t:.3f} s dropped: queue full")

    def _run(self):
        while True:
            command = self.queue.get()
            if command is None:
                return
            try:
                actuator_send(self.transport, command)
            except ActuatorError as exc:
                self.errors.append(str(exc))

    def stop(self):
        self.queue.put(None)
        self._thread.join(timeout=2.0)


def pack_frame(seq: int, t_us: int, samples: np.ndarray) -> bytes:
    samples = np.ascontiguousarray(samples, dtype="<f4")
    return FRAME_HEADER.pack(FRAME_MAGIC, seq, t_us, samples.size) + samples.tobytes()


class FrameReader:
    """Incremental parser for the sample-stream framing.

    Frame layout, little-endian: ``magic(2) | seq(4) | t_us(8) | n_ch(2)``
    followed by ``n_ch`` float32 samples.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, int, np.ndarray]]:
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < FRAME_HEADER.size:
                break
            magic, seq, t_us, n_ch = FRAME_HEADER.unpack_from(self._buf, 0)
            if magic != FRAME_MAGIC:
                raise ParameterError(f"bad frame magic {magic!r}")
            total = FRAME_HEADER.size + 4 * n_ch
            if len(self._buf) < total:
                break
            samples = np.frombuffer(bytes(self._buf[FRAME_HEADER.size : total]), dtype="<f4")
            frames.append((seq, t_us, samples.astype(np.float64)))
            del self._buf[:total]
        return frames


@dataclass
class TickSkip:
    t: float
    reason: str


@dataclass
class RunLog:
    """Everything a run produced, in tick order."""

    predictions: list[Prediction] = field(default_factory=list)
    features: list[np.ndarray] = field(default_factory=list)
    pulses: list[PulseCommand] = field(default_factory=list)
    skips: list[TickSkip] = field(default_factory=list)
    actuator_errors: list[str] = field(default_factory=list)
    protocol_errors: int = 0

    @property
    def n_ticks(self) -> int:
        return len(self.predictions) + len(self.skips)


class IntentEngine:
    """Streams samples in, emits predictions and gated pulses.

    The engine clock is the sample counter: sample ``i`` of the stream is
    at ``i / rate`` seconds, and tick ``k`` fires once every sample
    strictly before ``k / tick_hz`` has been ingested. That makes replay
    byte-deterministic and keeps live cadence anchored to the amplifier
    clock rather than to ``sleep()`` accumulation.
    """

    def __init__(
        self,
        model: IntentModel,
        stream_channels: list[str],
        actuator=None,
        events: list[GateEvent] | None = None,
        tick_hz: float = TICK_HZ,
        window_s: float = 1.0,
        normalized_smoothing: bool = False,
    ):
        missing = [c for c in model.channels if c not in stream_channels]
        if missing:
            raise ParameterError(f"stream does not carry model channels: {missing}")
        rate = model.filter.rate
        samples_per_tick = rate / tick_hz
        if abs(samples_per_tick - round(samples_per_tick)) > 1e-9:
            raise ParameterError(
                f"tick rate {tick_hz} Hz must divide the sampling rate {rate} Hz"
            )
        self.model = model
        self.tick_hz = tick_hz
        self.rate = rate
        self.window_s = window_s
        self.window_n = int(round(window_s * rate))
        self.normalized_smoothing = normalized_smoothing
        self._samples_per_tick = int(round(samples_per_tick))
        self._chan_idx = [stream_channels.index(c) for c in model.channels]
        self._filter_state = model.filter.zero_state(len(model.channels))
        self._ring = RingBuffer(model.channels, rate, capacity_s=max(2.0, 2 * window_s))
        self._events = sorted(events or [], key=lambda e: e.t)
        self._event_pos = 0
        self._n_written = 0
        self._next_tick = 1  # tick k fires at t = k / tick_hz
        self._prev_raw = 0.0
        self.gate = GateState()
        self.actuator = actuator
        self.log = RunLog()

    @property
    def stream_time(self) -> float:
        return self._n_written / self.rate

    def push(self, samples: np.ndarray) -> None:
        """Ingest raw stream samples (n_stream_channels, k) or (n, ) 1-ch."""
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, np.newaxis]
        picked = samples[self._chan_idx, :]
        offset = 0
        total = picked.shape[1]
        while offset < total:
            tick_boundary = self._next_tick * self._samples_per_tick
            take = min(total - offset, tick_boundary - self._n_written)
            if take > 0:
                chunk = picked[:, offset : offset + take]
                filtered, self._filter_state = self._apply_filter(chunk)
                self._ring.push(filtered)
                self._n_written += take
                offset += take
            if self._n_written == tick_boundary:
                self._fire(self._next_tick / self.tick_hz)
                self._next_tick += 1

    def _apply_filter(self, chunk: np.ndarray):
        from scipy.signal import sosfilt

        return sosfilt(self.model.filter.sos, chunk, axis=-1, zi=self._filter_state)

    def _pending_events(self, deadline: float) -> list[GateEvent]:
        out = []
        while self._event_pos < len(self._events) and self._events[self._event_pos].t <= deadline:
            out.append(self._events[self._event_pos])
            self._event_pos += 1
        return out

    def _fire(self, deadline: float) -> None:
        started = time.perf_counter()
        events = self._pending_events(deadline)
        prediction: Prediction | None = None
        try:
            snap = ring_snapshot(self._ring, self.window_s)
        except NotReadyError:
            self.log.skips.append(TickSkip(t=deadline, reason="buffer underfilled"))
            snap = None
        if snap is not None:
            feats = slope_features(snap, self.model.channels)
            raw = float(predict_proba(self.model.lda, feats))
            smoothed = smooth(self._prev_raw, raw, normalized=self.normalized_smoothing)
            self._prev_raw = raw
            latency_ms = (time.perf_counter() - started) * 1000.0
            prediction = Prediction(
                t=deadline,
                raw=raw,
                smoothed=smoothed,
                label=PRE_MOVEMENT if raw > 0.5 else IDLE,
                latency_ms=latency_ms,
            )
            self.log.predictions.append(prediction)
            self.log.features.append(feats)

        self.gate, command = gate_step(
            self.gate, prediction, self.model.threshold, events, now=deadline
        )
        self.log.protocol_errors = self.gate.protocol_errors
        if command is not None:
            self.log.pulses.append(command)
            if self.actuator is not None:
                try:
                    if isinstance(self.actuator, ActuatorWorker):
                        self.actuator.submit(command)
                    else:
                        actuator_send(self.actuator, command)
                except ActuatorError as exc:
                    self.log.actuator_errors.append(str(exc))
                    log.warning("actuator error at %.3f s: %s", deadline, exc)


def events_from_markers(markers: list[Marker]) -> list[GateEvent]:
    """Map session markers onto gate events (fixation offset arms, tap
    disarms, the next fixation onset closes the trial)."""
    out = []
    for m in markers:
        kind = MARKER_TO_EVENT.get(m.kind)
        if kind is not None:
            out.append(GateEvent(t=m.t, kind=kind))
    return out


def run_replay(
    model: IntentModel,
    recording: Recording,
    actuator=None,
    chunk_samples: int = 25,
    normalized_smoothing: bool = False,
) -> RunLog:
    """Stream a recorded session through the engine at file speed."""
    engine = IntentEngine(
        model,
        stream_channels=recording.channels,
        actuator=actuator,
        events=events_from_markers(recording.markers),
        normalized_smoothing=normalized_smoothing,
    )
    n = recording.n_samples
    for start in range(0, n, chunk_samples):
        engine.push(recording.data[:, start : start + chunk_samples])
    return engine.log


def serve_recording(
    recording: Recording, host: str, port: int, pace: bool = False, chunk: int = 25
) -> threading.Thread:
    """Publish a recording as framed samples over TCP (test/demo server).

    Returns the serving thread; it accepts a single client, streams every
    sample, then closes.
    """

    def _serve():
        srv = socket.create_server((host, port))
        conn, _ = srv.accept()
        try:
            seq = 0
            for i in range(0, recording.n_samples, chunk):
                block = recording.data[:, i : i + chunk]
                payload = b""
                for j in range(block.shape[1]):
                    t_us = int(round((i + j) / recording.rate * 1e6))
                    payload += pack_frame(seq, t_us, block[:, j])
                    seq += 1
                conn.sendall(payload)
                if pace:
                    time.sleep(chunk / recording.rate)
        finally:
            conn.close()
            srv.close()

    thread = threading.Thread(target=_serve, daemon=True)
    thread.start()
    return thread


def run_live(
    model: IntentModel,
    stream_channels: list[str],
    source_addr: tuple[str, int],
    actuator=None,
    events: list[GateEvent] | None = None,
    max_seconds: float | None = None,
    normalized_smoothing: bool = False,
) -> RunLog:
    """Consume a framed TCP sample stream until it closes.

    The engine's sample-count clock drives the tick cadence, so the
    sender's pacing (real-time or faster) does not change the decisions.
    """
    engine = IntentEngine(
        model,
        stream_channels=stream_channels,
        actuator=actuator,
        events=events,
        normalized_smoothing=normalized_smoothing,
    )
    reader = FrameReader()
    with socket.create_connection(source_addr, timeout=10.0) as sock:
        while True:
            data = sock.recv(65536)
            if not data:
                break
            for _, _, samples in reader.feed(data):
                if samples.shape[0] != len(stream_channels):
                    raise ParameterError(
                        f"frame carries {samples.shape[0]} channels, expected {len(stream_channels)}"
                    )
                engine.push(samples[:, np.newaxis])
            if max_seconds is not None and engine.stream_time >= max_seconds:
                break
    return engine.log


def write_prediction_log(path, log: RunLog, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}={value}\n")
        fh.write("t_s\traw\tsmoothed\tlabel\tlatency_ms\n")
        rows = [(p.t, f"{p.t!r}\t{p.raw!r}\t{p.smoothed!r}\t{p.label}\t{p.latency_ms:.3f}") for p in log.predictions]
        rows += [(s.t, f"{s.t!r}\tskip\tskip\t{s.reason}\t0") for s in log.skips]
        for _, row in sorted(rows, key=lambda r: r[0]):
            fh.write(row + "\n")


def write_pulse_log(path, log: RunLog, header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}={value}\n")
        fh.write("t_s\tduration_ms\n")
        for pulse in log.pulses:
            fh.write(f"{pulse.t!r}\t{int(round(pulse.duration_s * 1000))}\n")


def read_pulse_log(path) -> list[PulseCommand]:
    pulses = []
    for line in open(path, "r", encoding="utf-8"):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("t_s"):
            continue
        t_s, dur_ms = line.split("\t")
        pulses.append(PulseCommand(t=float(t_s), duration_s=float(dur_ms) / 1000.0))
    return pulses
