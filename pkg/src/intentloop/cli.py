"""Command-line entry point wiring the pipeline:
generate -> train -> run/replay -> evaluate.

Exit codes: 0 ok, 2 usage error, 3 data error, 4 pipeline error. Every
command emits a resolved-config file so any run can be reproduced from
its outputs alone.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, synth
from .errors import (
    DataFormatError,
    IntentLoopError,
    ParameterError,
)
from .model import load_model, save_model
from .realtime import (
    MockActuator,
    TcpActuator,
    events_from_markers,
    read_pulse_log,
    run_live,
    run_replay,
    write_prediction_log,
    write_pulse_log,
)
from .sessionio import load_recording, read_markers, save_recording

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_PIPELINE = 4


def read_config_file(path: Path) -> dict[str, str]:
    """key=value lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def resolved_config(args: argparse.Namespace, keys: list[str]) -> dict[str, str]:
    resolved = {k: str(getattr(args, k)) for k in keys}
    resolved["version"] = __version__
    digest = hashlib.sha256(
        "\n".join(f"{k}={resolved[k]}" for k in sorted(resolved)).encode()
    ).hexdigest()[:16]
    resolved["config_hash"] = digest
    return resolved


def write_resolved_config(path: Path, resolved: dict[str, str]) -> None:
    path.write_text(
        "".join(f"{k}={resolved[k]}\n" for k in sorted(resolved)), encoding="utf-8"
    )


def _apply_overrides(args) -> synth.SynthConfig:
    cfg = synth.SynthConfig(n_trials=args.trials, seed=args.seed)
    if args.noise_rms is not None:
        cfg = replace(cfg, noise=replace(cfg.noise, rms_uv=args.noise_rms))
    if args.rp_late_amp is not None:
        cfg = replace(cfg, rp=replace(cfg.rp, late_amp_uv=args.rp_late_amp))
    if args.rp_early_amp is not None:
        cfg = replace(cfg, rp=replace(cfg.rp, early_amp_uv=args.rp_early_amp))
    if args.quantize:
        cfg = replace(cfg, behavior=replace(cfg.behavior, quantize=True))
    return cfg


def cmd_generate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _apply_overrides(args)
    condition = args.condition.upper()
    if condition not in synth.CONDITIONS:
        raise ParameterError(f"condition must be one of {synth.CONDITIONS}, got {args.condition}")
    recording, truth = synth.generate_session(config, condition)
    stem = args.name or f"session_{condition.lower()}_{args.seed}"
    save_recording(out_dir / f"{stem}.ilrc", recording)
    synth.write_ground_truth(out_dir / f"{stem}.truth.tsv", truth)
    resolved = resolved_config(args, ["condition", "trials", "seed", "noise_rms", "rp_late_amp", "rp_early_amp", "quantize"])
    write_resolved_config(out_dir / f"{stem}.config", resolved)
    print(f"wrote {out_dir / (stem + '.ilrc')} ({recording.duration:.1f} s, seed {args.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .labeling import write_label_file
    from .pipeline import train_from_recording

    recording = load_recording(Path(args.session))
    result = train_from_recording(recording, seed=args.seed)
    save_model(result.model, args.out)
    label_path = Path(args.out).with_suffix(".labels.tsv")
    write_label_file(label_path, result.onset.onsets, kept_trials=result.kept_trials)
    resolved = resolved_config(args, ["session", "seed"])
    write_resolved_config(Path(args.out).with_suffix(".config"), resolved)
    print(
        f"trained model: k={result.grid.chosen_k}, threshold={result.model.threshold:.3f}, "
        f"cross-validated F1={result.oof_f1:.3f} -> {args.out}"
    )
    return EXIT_OK


def _make_actuator(spec: str):
    if spec == "mock":
        return MockActuator()
    if spec.startswith("tcp:"):
        host, port = spec[4:].rsplit(":", 1)
        return TcpActuator(host, int(port))
    raise ParameterError(f"actuator must be 'mock' or 'tcp:host:port', got {spec!r}")


def _run_common(args, live: bool) -> int:
    model = load_model(args.model)
    actuator = _make_actuator(args.actuator)
    log_dir = Path(args.log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)

    if args.source.startswith("file:"):
        recording = load_recording(Path(args.source[5:]))
        run = run_replay(model, recording, actuator=actuator)
    elif args.source.startswith("tcp:"):
        if not live:
            raise ParameterError("replay needs a file: source; use 'run' for tcp streams")
        host, port = args.source[4:].rsplit(":", 1)
        if not args.channels:
            raise ParameterError("--channels is required for tcp sources")
        channels = Path(args.channels).read_text(encoding="utf-8").split()
        events = events_from_markers(read_markers(Path(args.events))) if args.events else []
        run = run_live(model, channels, (host, int(port)), actuator=actuator, events=events)
    else:
        raise ParameterError(f"source must be file:PATH or tcp:host:port, got {args.source!r}")

    resolved = resolved_config(args, ["model", "source", "actuator"])
    write_prediction_log(log_dir / "predictions.tsv", run, header=resolved)
    write_pulse_log(log_dir / "pulses.tsv", run, header=resolved)
    write_resolved_config(log_dir / "run.config", resolved)
    print(
        f"{run.n_ticks} ticks, {len(run.predictions)} predictions, "
        f"{len(run.pulses)} pulses, {len(run.skips)} skipped -> {log_dir}"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    return _run_common(args, live=True)


def cmd_replay(args) -> int:
    return _run_common(args, live=False)


def cmd_evaluate(args) -> int:
    from .evaluation import (
        binding_summary,
        classifier_report,
        erp_extract,
        evaluate_holdout,
        pulse_timing,
        screen_trials,
        table_from_truth,
        write_erp_csv,
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = resolved_config(args, ["session", "truth", "model", "pulses", "erp_channel"])

    recording = load_recording(Path(args.session))
    truth = synth.read_ground_truth(Path(args.truth))
    pulses = read_pulse_log(Path(args.pulses)) if args.pulses else None

    table = screen_trials(table_from_truth(truth, pulses))
    stats = binding_summary(table)
    with open(out_dir / "binding.csv", "w", encoding="utf-8") as fh:
        for key, value in resolved.items():
            fh.write(f"# {key}={value}\n")
        fh.write("group,n,mean_ms,sd_ms\n")
        for s in stats:
            fh.write(f"{s.group},{s.n},{s.mean_ms:.3f},{s.sd_ms:.3f}\n")

    events = [(row.ems_s if row.ems_s is not None else row.tap_s - truth.lead_ms / 1000.0, row.condition)
              for row in table if row.kept]
    erp = erp_extract(recording, events, channel=args.erp_channel)
    for cond in erp.waveforms:
        write_erp_csv(out_dir / f"erp_{cond.lower()}.csv", erp, cond, header=resolved)

    lines = [f"{s.group}: n={s.n} mean={s.mean_ms:.1f} ms sd={s.sd_ms:.1f} ms" for s in stats]
    if args.model:
        model = load_model(args.model)
        f1, fpr, tpr = evaluate_holdout(model, recording, truth)
        lines.append(f"holdout F1={f1:.3f} FPR={fpr:.3f} TPR={tpr:.3f}")
        if pulses:
            n_pulses, lead = pulse_timing(pulses, truth)
            lead_txt = f"{lead:.1f} ms" if lead is not None else "n/a"
            lines.append(f"pulses={n_pulses} mean pulse-to-onset offset={lead_txt}")
    summary = "\n".join(lines)
    (out_dir / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    write_resolved_config(out_dir / "evaluate.config", resolved)
    print(summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intentloop",
        description="Movement-intention BCI pipeline: generate, train, run, replay, evaluate.",
    )
    parser.add_argument("--config", help="key=value config file; command-line flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic session with ground truth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--condition", default="intention")
    p.add_argument("--trials", type=int, default=75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default=None, help="output file stem")
    p.add_argument("--noise-rms", type=float, default=None, help="EEG noise rms in uV")
    p.add_argument("--rp-late-amp", type=float, default=None)
    p.add_argument("--rp-early-amp", type=float, default=None)
    p.add_argument("--quantize", action="store_true", help="quantize behavioral estimates")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train an intent model from a session")
    p.add_argument("--session", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    for name, helptext in (("run", "run live from a tcp stream"), ("replay", "replay a session file")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--source", required=True, help="file:PATH or tcp:host:port")
        p.add_argument("--actuator", default="mock", help="mock or tcp:host:port")
        p.add_argument("--log-dir", required=True)
        p.add_argument("--events", default=None, help="marker file for tcp sources")
        p.add_argument("--channels", default=None, help="whitespace-separated channel list file for tcp sources")
        p.set_defaults(func=cmd_run if name == "run" else cmd_replay)

    p = sub.add_parser("evaluate", help="screens, binding summary, ERPs, classifier metrics")
    p.add_argument("--session", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--pulses", default=None, help="pulse log from run/replay")
    p.add_argument("--erp-channel", default="FCz")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _inject_config(argv: list[str], command: str, values: dict[str, str]) -> list[str]:
    """Splice config entries in as flags right after the subcommand, so
    flags given on the command line (later) take precedence."""
    injected: list[str] = []
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                injected.append(flag)
        else:
            injected.extend([flag, value])
    idx = argv.index(command)
    return argv[: idx + 1] + injected + argv[idx + 1 :]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.config:
        try:
            defaults = read_config_file(Path(args.config))
        except FileNotFoundError:
            print(f"error: config file not found: {args.config}", file=sys.stderr)
            return EXIT_USAGE
        except DataFormatError as exc:
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        args = parser.parse_args(_inject_config(argv, args.command, defaults))
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ParameterError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except IntentLoopError as exc:
        print(f"pipeline error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
