"""Session file and marker sidecar I/O.

Session files are binary: a header with the magic ``ILRC1``, sampling
rate, channel count and labels, followed by little-endian float32 samples
stored channel-major (all samples of channel 0, then channel 1, ...).

Markers live in a text sidecar, one event per line::

    timestamp_s<TAB>kind<TAB>payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dsp import Marker, Recording
from .errors import DataFormatError

MAGIC = b"ILRC1"


def write_session(path: str | Path, recording: Recording) -> None:
    """Write signal data; markers go in a separate sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<dIQ", recording.rate, len(recording.channels), recording.n_samples))
        for label in recording.channels:
            raw = label.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(recording.data, dtype="<f4").tobytes())


def read_session(path: str | Path) -> Recording:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header = fh.read(struct.calcsize("<dIQ"))
        if len(header) != struct.calcsize("<dIQ"):
            raise DataFormatError(f"{path}: truncated header")
        rate, n_channels, n_samples = struct.unpack("<dIQ", header)
        channels = []
        for _ in range(n_channels):
            (ln,) = struct.unpack("<H", fh.read(2))
            channels.append(fh.read(ln).decode("utf-8"))
        raw = fh.read(4 * n_channels * n_samples)
        if len(raw) != 4 * n_channels * n_samples:
            raise DataFormatError(f"{path}: truncated sample block")
        data = np.frombuffer(raw, dtype="<f4").reshape(n_channels, n_samples)
    return Recording(rate=rate, channels=channels, data=data.astype(np.float64))


def write_markers(path: str | Path, markers: list[Marker]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in sorted(markers, key=lambda m: m.t):
            fh.write(f"{m.t!r}\t{m.kind}\t{m.payload}\n")


def read_markers(path: str | Path) -> list[Marker]:
    markers = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 2)
            if len(parts) < 2:
                raise DataFormatError(f"{path}:{lineno}: expected timestamp<TAB>kind[<TAB>payload]")
            try:
                t = float(parts[0])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
            payload = parts[2] if len(parts) == 3 else ""
            markers.append(Marker(t=t, kind=parts[1], payload=payload))
    return markers


def load_recording(path: str | Path) -> Recording:
    """Read a session file and, when present, its ``.markers.tsv`` sidecar."""
    path = Path(path)
    rec = read_session(path)
    sidecar = path.with_suffix(path.suffix + ".markers.tsv") if path.suffix != ".ilrc" else path.with_suffix(".markers.tsv")
    if sidecar.exists():
        rec.markers = sorted(read_markers(sidecar), key=lambda m: m.t)
    return rec


def save_recording(path: str | Path, recording: Recording) -> None:
    """Write a session file plus its ``.markers.tsv`` sidecar."""
    path = Path(path)
    write_session(path, recording)
    sidecar = path.with_suffix(".markers.tsv") if path.suffix == ".ilrc" else path.with_suffix(path.suffix + ".markers.tsv")
    write_markers(sidecar, recording.markers)
