import socket
import threading
import time

import numpy as np
import pytest

from intentloop.dsp import IDLE, PRE_MOVEMENT, Recording
from intentloop.errors import ActuatorError, ParameterError
from intentloop.realtime import (
    EVENT_ARM,
    EVENT_TAP,
    EVENT_TRIAL_END,
    ActuatorWorker,
    FrameReader,
    GateEvent,
    GateState,
    IntentEngine,
    MockActuator,
    Phase,
    Prediction,
    PulseCommand,
    TcpActuator,
    actuator_send,
    events_from_markers,
    gate_step,
    pack_frame,
    run_live,
    run_replay,
    serve_recording,
    smooth,
)


def pred(raw, smoothed=None, label=PRE_MOVEMENT, t=0.0):
    return Prediction(t=t, raw=raw, smoothed=smoothed if smoothed is not None else raw,
                      label=label, latency_ms=0.1)


class TestSmooth:
    def test_weighted_blend(self):
        assert smooth(0.6, 0.8) == pytest.approx(0.58)

    def test_weights_do_not_sum_to_one(self):
        assert smooth(1.0, 1.0) == pytest.approx(0.8)

    def test_zero(self):
        assert smooth(0.0, 0.0) == 0.0

    def test_normalized_flag(self):
        assert smooth(1.0, 1.0, normalized=True) == pytest.approx(1.0)

    def test_range_validated(self):
        with pytest.raises(ParameterError):
            smooth(1.5, 0.2)


class TestGateStep:
    def test_armed_fires_above_threshold(self):
        state = GateState(phase=Phase.ARMED, armed_since=0.0, trial=0)
        state, cmd = gate_step(state, pred(0.7, smoothed=0.60), 0.57, [], now=1.0)
        assert state.phase is Phase.PULSING
        assert cmd == PulseCommand(t=1.0)
        assert cmd.duration_s == 0.5

    def test_disarmed_never_fires(self):
        state = GateState()
        state, cmd = gate_step(state, pred(0.99, smoothed=0.79), 0.57, [], now=1.0)
        assert cmd is None
        assert state.phase is Phase.DISARMED

    def test_idle_class_blocks_pulse(self):
        state = GateState(phase=Phase.ARMED, armed_since=0.0)
        state, cmd = gate_step(state, pred(0.4, smoothed=0.60, label=IDLE), 0.57, [], now=1.0)
        assert cmd is None
        assert state.phase is Phase.ARMED

    def test_threshold_is_strict(self):
        state = GateState(phase=Phase.ARMED, armed_since=0.0)
        state, cmd = gate_step(state, pred(0.8, smoothed=0.57), 0.57, [], now=1.0)
        assert cmd is None

    def test_arm_event_from_disarmed(self):
        state = GateState()
        state, _ = gate_step(state, None, 0.5, [GateEvent(0.5, EVENT_ARM)], now=1.0)
        assert state.phase is Phase.ARMED
        assert state.trial == 0

    def test_double_arm_is_protocol_error(self):
        state = GateState(phase=Phase.ARMED, armed_since=0.0)
        state, cmd = gate_step(state, None, 0.5, [GateEvent(0.5, EVENT_ARM)], now=1.0)
        assert state.phase is Phase.DISARMED
        assert state.protocol_errors == 1
        assert cmd is None

    def test_tap_disarms_any_phase(self):
        for phase in Phase:
            state = GateState(phase=phase, armed_since=0.0, pulse_started=0.0)
            state, _ = gate_step(state, None, 0.5, [GateEvent(0.5, EVENT_TAP)], now=1.0)
            assert state.phase is Phase.DISARMED

    def test_pulse_times_out_to_refractory(self):
        state = GateState(phase=Phase.ARMED, armed_since=0.0, trial=0)
        state, cmd = gate_step(state, pred(0.9, smoothed=0.7), 0.5, [], now=1.0)
        assert state.phase is Phase.PULSING
        state, _ = gate_step(state, pred(0.9, smoothed=0.7), 0.5, [], now=1.4)
        assert state.phase is Phase.PULSING
        state, _ = gate_step(state, pred(0.9, smoothed=0.7), 0.5, [], now=1.5)
        assert state.phase is Phase.REFRACTORY

    def test_refractory_blocks_second_pulse_until_trial_end(self):
        state = GateState(phase=Phase.REFRACTORY, trial=0)
        state, cmd = gate_step(state, pred(0.9, smoothed=0.75), 0.5, [], now=2.0)
        assert cmd is None
        state, _ = gate_step(state, None, 0.5, [GateEvent(2.5, EVENT_TRIAL_END)], now=3.0)
        assert state.phase is Phase.DISARMED

    def test_tap_then_high_probability_same_tick(self):
        state = GateState(phase=Phase.ARMED, armed_since=0.0)
        state, cmd = gate_step(
            state, pred(0.9, smoothed=0.75), 0.5, [GateEvent(0.9, EVENT_TAP)], now=1.0
        )
        assert cmd is None
        assert state.phase is Phase.DISARMED

    def test_randomized_safety_quickcheck(self):
        # the acceptance suite runs >= 1e5 traces; this is the fast version
        rng = np.random.default_rng(0)
        kinds = [EVENT_ARM, EVENT_TAP, EVENT_TRIAL_END, None, None]
        for _ in range(2000):
            state = GateState()
            pulses_by_trial = {}
            now = 0.0
            for _ in range(int(rng.integers(5, 25))):
                now += 0.1
                events = []
                kind = kinds[rng.integers(0, len(kinds))]
                if kind is not None:
                    events.append(GateEvent(now - 0.05, kind))
                phase_before = state.phase
                p = pred(
                    float(rng.random()),
                    smoothed=float(rng.random() * 0.8),
                    label=PRE_MOVEMENT if rng.random() < 0.5 else IDLE,
                    t=now,
                )
                state, cmd = gate_step(state, p, 0.57, events, now=now)
                if cmd is not None:
                    armed_after_events = phase_before is Phase.ARMED or (
                        events and events[0].kind == EVENT_ARM and phase_before is Phase.DISARMED
                    )
                    assert armed_after_events
                    pulses_by_trial[state.trial] = pulses_by_trial.get(state.trial, 0) + 1
            assert all(n <= 1 for n in pulses_by_trial.values())


class TestActuators:
    def test_mock_records_pulse(self):
        mock = MockActuator()
        actuator_send(mock, PulseCommand(t=1.0))
        assert len(mock.log) == 1
        assert mock.log[0][1] == 500.0

    def test_closed_mock_raises(self):
        mock = MockActuator()
        mock.close()
        with pytest.raises(ActuatorError):
            actuator_send(mock, PulseCommand(t=1.0))

    def test_three_pulses_three_entries(self):
        mock = MockActuator()
        for k in range(3):
            actuator_send(mock, PulseCommand(t=float(k)))
        assert len(mock.log) == 3

    def test_tcp_actuator_line_protocol(self):
        received = []

        def server(srv):
            conn, _ = srv.accept()
            with conn, conn.makefile("rwb") as fh:
                line = fh.readline()
                received.append(line)
                fh.write(b"OK\n")
                fh.flush()

        srv = socket.create_server(("127.0.0.1", 0))
        port = srv.getsockname()[1]
        thread = threading.Thread(target=server, args=(srv,), daemon=True)
        thread.start()
        actuator = TcpActuator("127.0.0.1", port)
        reply = actuator_send(actuator, PulseCommand(t=0.0))
        actuator.close()
        thread.join(timeout=2)
        srv.close()
        assert reply == "OK"
        assert received == [b"PULSE 500\n"]

    def test_worker_drains_queue(self):
        mock = MockActuator()
        worker = ActuatorWorker(mock)
        for k in range(3):
            worker.submit(PulseCommand(t=float(k)))
        deadline = time.monotonic() + 2.0
        while len(mock.log) < 3 and time.monotonic() < deadline:
            time.sleep(0.01)
        worker.stop()
        assert len(mock.log) == 3

    def test_worker_records_errors(self):
        mock = MockActuator()
        mock.close()
        worker = ActuatorWorker(mock)
        worker.submit(PulseCommand(t=0.0))
        deadline = time.monotonic() + 2.0
        while not worker.errors and time.monotonic() < deadline:
            time.sleep(0.01)
        worker.stop()
        assert worker.errors


class TestFrameFormat:
    def test_round_trip(self):
        reader = FrameReader()
        samples = np.array([1.5, -2.25, 3.0], dtype=np.float64)
        frames = reader.feed(pack_frame(7, 123_456, samples))
        assert len(frames) == 1
        seq, t_us, got = frames[0]
        assert (seq, t_us) == (7, 123_456)
        assert np.array_equal(got, samples)

    def test_partial_feed(self):
        reader = FrameReader()
        raw = pack_frame(0, 0, np.zeros(4)) + pack_frame(1, 4000, np.ones(4))
        assert reader.feed(raw[:10]) == []
        frames = reader.feed(raw[10:])
        assert [f[0] for f in frames] == [0, 1]

    def test_bad_magic(self):
        reader = FrameReader()
        with pytest.raises(ParameterError):
            reader.feed(b"XX" + b"\x00" * 20)


@pytest.fixture(scope="module")
def replay_setup(intention_session, train_result):
    recording, truth = intention_session
    return recording, truth, train_result.model


class TestEngineReplay:
    def test_matches_offline_slope_features(self, replay_setup):
        from intentloop.dsp import epoch_extract
        from intentloop.features import slope_features
        from intentloop.pipeline import filter_eeg

        recording, _, model = replay_setup
        log = run_replay(model, recording)
        offline = filter_eeg(recording)
        rng = np.random.default_rng(0)
        picks = rng.choice(len(log.predictions), size=40, replace=False)
        for i in picks:
            p = log.predictions[i]
            seg = epoch_extract(offline, p.t, -1000.0, 0.0)
            want = slope_features(seg, model.channels)
            assert np.max(np.abs(log.features[i] - want)) < 1e-6

    def test_tick_cadence_600_per_minute(self, replay_setup):
        recording, _, model = replay_setup
        minute = Recording(
            rate=recording.rate,
            channels=recording.channels,
            data=recording.data[:, : 15_000],
            markers=[m for m in recording.markers if m.t <= 60.0],
        )
        log = run_replay(model, minute)
        assert abs(log.n_ticks - 600) <= 1
        ticks = sorted([p.t for p in log.predictions] + [s.t for s in log.skips])
        assert np.allclose(np.diff(ticks), 0.1, atol=1e-9)

    def test_first_second_skipped_then_predictions(self, replay_setup):
        recording, _, model = replay_setup
        log = run_replay(model, recording)
        assert all(s.t < 1.0 for s in log.skips)
        assert log.predictions[0].t == pytest.approx(1.0)

    def test_deterministic(self, replay_setup):
        recording, _, model = replay_setup
        a = run_replay(model, recording)
        b = run_replay(model, recording)
        assert [(p.t, p.raw, p.smoothed, p.label) for p in a.predictions] == [
            (p.t, p.raw, p.smoothed, p.label) for p in b.predictions
        ]
        assert [p.t for p in a.pulses] == [p.t for p in b.pulses]

    def test_chunk_size_does_not_change_results(self, replay_setup):
        recording, _, model = replay_setup
        short = Recording(
            rate=recording.rate, channels=recording.channels,
            data=recording.data[:, : 20_000],
            markers=[m for m in recording.markers if m.t <= 80.0],
        )
        a = run_replay(model, short, chunk_samples=25)
        b = run_replay(model, short, chunk_samples=7)
        assert [(p.t, p.raw) for p in a.predictions] == [(p.t, p.raw) for p in b.predictions]

    def test_pulses_only_in_armed_windows(self, replay_setup):
        recording, truth, model = replay_setup
        mock = MockActuator()
        log = run_replay(model, recording, actuator=mock)
        windows = [(t.fixation_off_s, t.tap_s) for t in truth.trials]
        for pulse in log.pulses:
            assert any(a < pulse.t <= b + 0.1001 for a, b in windows)
        assert len(mock.log) == len(log.pulses)

    def test_at_most_one_pulse_per_trial(self, replay_setup):
        recording, truth, model = replay_setup
        log = run_replay(model, recording)
        for a, b in [(t.fixation_off_s, t.tap_s + 0.5) for t in truth.trials]:
            assert sum(a < p.t <= b for p in log.pulses) <= 1

    def test_closed_actuator_does_not_stop_engine(self, replay_setup):
        recording, _, model = replay_setup
        mock = MockActuator()
        mock.close()
        log = run_replay(model, recording)
        log_closed = run_replay(model, recording, actuator=mock)
        assert len(log_closed.predictions) == len(log.predictions)
        if log.pulses:
            assert log_closed.actuator_errors

    def test_smoothing_initializes_from_zero(self, replay_setup):
        recording, _, model = replay_setup
        log = run_replay(model, recording)
        first = log.predictions[0]
        assert first.smoothed == pytest.approx(0.5 * first.raw)

    def test_smoothing_recurrence(self, replay_setup):
        recording, _, model = replay_setup
        log = run_replay(model, recording)
        for prev, curr in zip(log.predictions[:-1], log.predictions[1:]):
            if curr.t - prev.t > 0.1001:
                continue
            assert curr.smoothed == pytest.approx(0.3 * prev.raw + 0.5 * curr.raw)

    def test_tick_compute_under_10ms(self, replay_setup):
        recording, _, model = replay_setup
        log = run_replay(model, recording)
        latencies = np.array([p.latency_ms for p in log.predictions])
        assert np.median(latencies) < 10.0

    def test_missing_model_channel_rejected(self, replay_setup):
        _, _, model = replay_setup
        with pytest.raises(ParameterError):
            IntentEngine(model, stream_channels=["Cz", "EMG1"])


class TestRunLive:
    def test_live_stream_matches_replay(self, replay_setup):
        recording, _, model = replay_setup
        short = Recording(
            rate=recording.rate, channels=recording.channels,
            # the wire format carries float32, so compare from a f32 source
            data=recording.data[:, : 10_000].astype(np.float32).astype(np.float64),
            markers=[m for m in recording.markers if m.t <= 40.0],
        )
        srv = socket.create_server(("127.0.0.1", 0))
        port = srv.getsockname()[1]
        srv.close()
        thread = serve_recording(short, "127.0.0.1", port)
        time.sleep(0.1)
        live = run_live(
            model,
            short.channels,
            ("127.0.0.1", port),
            events=events_from_markers(short.markers),
        )
        thread.join(timeout=10)
        replay = run_replay(model, short)
        assert [(p.t, p.raw) for p in live.predictions] == [
            (p.t, p.raw) for p in replay.predictions
        ]
        assert [p.t for p in live.pulses] == [p.t for p in replay.pulses]


def test_events_from_markers_mapping(intention_session):
    recording, _ = intention_session
    events = events_from_markers(recording.markers)
    kinds = {e.kind for e in events}
    assert kinds == {EVENT_ARM, EVENT_TAP, EVENT_TRIAL_END}
