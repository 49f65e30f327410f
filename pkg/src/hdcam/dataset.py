"""Recordings, on-disk formats, sliding windows and the repetition split."""
from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError, IngestionError, ProtocolError

log = logging.getLogger(__name__)

MAGIC = b"SEMG"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")  # magic, version, header length
_HEADER_KEYS = ("fs", "n_channels", "n_samples", "subject_id")

DB2_CHANNELS = 12
DB2_FS = 2000
DEFAULT_TEST_REPS = frozenset({2, 5})


@dataclass(frozen=True, eq=False)
class EmgRecording:
    """One subject's continuous multichannel stream with per-sample labels.

    ``movement`` is 0 for rest and 1..K for gestures; ``repetition`` is 0
    exactly where ``movement`` is 0. ``pipeline`` records which
    preprocessing stages have already been applied.
    """

    subject_id: int
    fs: float
    samples: np.ndarray
    movement: np.ndarray
    repetition: np.ndarray
    pipeline: tuple[str, ...] = ()

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise DataError(f"samples must be [n_samples, n_channels], got {list(self.samples.shape)}")
        n = self.samples.shape[0]
        for nm in ("movement", "repetition"):
            arr = getattr(self, nm)
            if arr.shape != (n,):
                raise DataError(f"{nm} labels have {arr.size} entries for {n} samples")
        mismatch = np.flatnonzero((self.movement == 0) != (self.repetition == 0))
        if mismatch.size:
            i = int(mismatch[0])
            raise DataError(
                f"sample {i}: movement={int(self.movement[i])} but repetition={int(self.repetition[i])} "
                "(rest and repetition 0 must coincide)"
            )

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples: np.ndarray, stage: str) -> "EmgRecording":
        return replace(self, samples=samples, pipeline=self.pipeline + (stage,))


# on-disk formats -----------------------------------------------------------

def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _payload(rec: EmgRecording) -> bytes:
    return (
        np.ascontiguousarray(rec.samples, dtype="<f4").tobytes()
        + np.ascontiguousarray(rec.movement, dtype="<i2").tobytes()
        + np.ascontiguousarray(rec.repetition, dtype="<i2").tobytes()
    )


def write_recording(rec: EmgRecording, path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or _infer_format(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"ch{i}" for i in range(rec.n_channels)] + ["movement", "repetition"])
            samples = rec.samples.astype(np.float32)
            for row, m, r in zip(samples, rec.movement, rec.repetition):
                w.writerow([repr(float(v)) for v in row] + [int(m), int(r)])
        return path
    fs = rec.fs
    fields = {
        "fs": int(fs) if float(fs).is_integer() else float(fs),
        "n_channels": rec.n_channels,
        "n_samples": rec.n_samples,
        "subject_id": int(rec.subject_id),
    }
    payload = _payload(rec)
    header = dict(fields, crc32=f"{zlib.crc32(_canonical(fields) + payload):08x}")
    hbytes = _canonical(header)
    with path.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return path


def _infer_format(path: Path) -> str:
    return "csv" if path.suffix.lower() == ".csv" else "semg-bin"


def load_recording(path, fmt: str | None = None, *, fs: float = DB2_FS,
                   subject_id: int | None = None) -> EmgRecording:
    """Read a ``semg-bin`` or CSV recording, validating everything.

    ``fs`` and ``subject_id`` only apply to CSV, which carries no header
    metadata; the subject defaults to the ``subject_NN`` directory name.
    """
    path = Path(path)
    fmt = fmt or _infer_format(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    if fmt == "csv":
        if subject_id is None:
            subject_id = _subject_from_path(path)
        return _load_csv(path, fs, subject_id)
    if fmt != "semg-bin":
        raise IngestionError(f"unknown recording format {fmt!r}")
    return _load_bin(path)


def _subject_from_path(path: Path) -> int:
    for part in reversed(path.parts):
        if part.startswith("subject_"):
            try:
                return int(part.split("_", 1)[1])
            except ValueError:
                break
    return 0


def _load_bin(path: Path) -> EmgRecording:
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise IngestionError(f"{path}: truncated prefix ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise IngestionError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise IngestionError(f"{path}: unsupported version {version} at byte 4")
    hstart = _PREFIX.size
    if hlen == 0 or hstart + hlen > len(raw):
        raise IngestionError(f"{path}: header length {hlen} at byte 6 exceeds file size {len(raw)}")
    hbytes = raw[hstart:hstart + hlen]
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{path}: header at byte {hstart} is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise IngestionError(f"{path}: header at byte {hstart} is not a JSON object")
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise IngestionError(f"{path}: header at byte {hstart} lacks {missing}")
    extra = sorted(set(header) - set(_HEADER_KEYS) - {"crc32"})
    if extra:
        # strict so that a damaged "crc32" key cannot silently skip the checksum
        raise IngestionError(f"{path}: header at byte {hstart} has unknown keys {extra}")
    for k in ("n_channels", "n_samples", "subject_id"):
        if not isinstance(header[k], int) or isinstance(header[k], bool) or header[k] < 0:
            raise IngestionError(f"{path}: header field {k}={header[k]!r} is not a non-negative integer")
    fs = header["fs"]
    if not isinstance(fs, (int, float)) or isinstance(fs, bool) or not fs > 0:
        raise IngestionError(f"{path}: header field fs={fs!r} is not a positive number")
    n, C = header["n_samples"], header["n_channels"]
    pstart = hstart + hlen
    expected = n * C * 4 + 2 * n * 2
    if len(raw) - pstart != expected:
        raise IngestionError(
            f"{path}: payload at byte {pstart} holds {len(raw) - pstart} bytes, "
            f"header implies {expected} ({n} samples x {C} channels)"
        )
    payload = raw[pstart:]
    if "crc32" in header:
        fields = {k: header[k] for k in _HEADER_KEYS}
        if _canonical(header) != hbytes:
            raise IngestionError(f"{path}: header at byte {hstart} is not canonically encoded")
        crc = f"{zlib.crc32(_canonical(fields) + payload):08x}"
        if header["crc32"] != crc:
            raise IngestionError(f"{path}: checksum mismatch (header {header['crc32']!r}, computed {crc!r})")
    samples = np.frombuffer(payload, dtype="<f4", count=n * C).reshape(n, C).astype(np.float32)
    off = n * C * 4
    movement = np.frombuffer(payload, dtype="<i2", count=n, offset=off).astype(np.int16)
    repetition = np.frombuffer(payload, dtype="<i2", count=n, offset=off + 2 * n).astype(np.int16)
    bad = np.flatnonzero(~np.isfinite(samples).all(axis=1))
    if bad.size:
        row = int(bad[0])
        raise IngestionError(f"{path}: non-finite sample in row {row} (byte {pstart + row * C * 4})")
    try:
        return EmgRecording(int(header["subject_id"]), float(fs), samples, movement, repetition)
    except DataError as exc:
        raise IngestionError(f"{path}: {exc}") from None


def _load_csv(path: Path, fs: float, subject_id: int) -> EmgRecording:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty CSV") from None
        C = len(head) - 2
        if C < 1 or head[-2:] != ["movement", "repetition"] or head[:C] != [f"ch{i}" for i in range(C)]:
            raise IngestionError(f"{path}: header row must be ch0..chN, movement, repetition; got {head}")
        rows, mov, rep = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != C + 2:
                raise IngestionError(f"{path}: row {lineno} has {len(row)} fields, expected {C + 2}")
            try:
                vals = [float(v) for v in row[:C]]
                m, r = int(row[C]), int(row[C + 1])
            except ValueError as exc:
                raise IngestionError(f"{path}: row {lineno}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise IngestionError(f"{path}: non-finite sample in row {lineno}")
            rows.append(vals)
            mov.append(m)
            rep.append(r)
    samples = np.asarray(rows, dtype=np.float32).reshape(len(rows), C)
    try:
        return EmgRecording(subject_id, float(fs), samples,
                            np.asarray(mov, dtype=np.int16), np.asarray(rep, dtype=np.int16))
    except DataError as exc:
        raise IngestionError(f"{path}: {exc}") from None


def subject_path(data_dir, subject_id: int) -> Path:
    return Path(data_dir) / f"subject_{subject_id:02d}" / "exerciseB.semg"


def discover_subjects(data_dir) -> list[int]:
    out = []
    for p in sorted(Path(data_dir).glob("subject_*/exerciseB.semg")):
        try:
            out.append(int(p.parent.name.split("_", 1)[1]))
        except ValueError:
            continue
    return sorted(out)


# windows -------------------------------------------------------------------

def ms_to_samples(ms: float, fs: float) -> int:
    n = ms * fs / 1000.0
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise DataError(f"{ms} ms at {fs} Hz is not a whole positive number of samples")
    return int(round(n))


@dataclass(frozen=True, eq=False)
class WindowSet:
    """Fixed-length labeled windows, stored as start offsets into ``source``."""

    source: np.ndarray           # [n_samples, C], read-only
    starts: np.ndarray           # [N]
    length: int
    labels: np.ndarray           # [N] class index
    subjects: np.ndarray         # [N]
    repetitions: np.ndarray      # [N]
    num_classes: int
    fs: float = DB2_FS

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def n_channels(self) -> int:
        return self.source.shape[1]

    def batch(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        offs = self.starts[idx][:, None] + np.arange(self.length)
        return self.source[offs]

    @property
    def X(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))

    def subset(self, mask) -> "WindowSet":
        mask = np.asarray(mask)
        return replace(self, starts=self.starts[mask], labels=self.labels[mask],
                       subjects=self.subjects[mask], repetitions=self.repetitions[mask])

    def __iter__(self) -> Iterator[tuple[np.ndarray, int, int, int]]:
        for i in range(len(self)):
            s = self.starts[i]
            yield (self.source[s:s + self.length], int(self.labels[i]),
                   int(self.subjects[i]), int(self.repetitions[i]))


def label_runs(movement: np.ndarray, repetition: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Maximal runs of constant (movement, repetition) as (start, stop, movement, repetition)."""
    n = len(movement)
    if n == 0:
        return []
    change = np.flatnonzero((np.diff(movement) != 0) | (np.diff(repetition) != 0)) + 1
    bounds = np.concatenate([[0], change, [n]])
    return [(int(a), int(b), int(movement[a]), int(repetition[a]))
            for a, b in zip(bounds[:-1], bounds[1:])]


def window_count(run_len: int, L: int, stride: int) -> int:
    return 0 if run_len < L else (run_len - L) // stride + 1


def segment_windows(rec: EmgRecording, window_ms: float, stride_ms: float, *,
                    num_classes: int = 17, include_rest: bool = False) -> WindowSet:
    """Cut windows from runs of constant nonzero movement.

    Gesture ``m`` maps to class ``m - 1``. With ``include_rest`` rest is
    class 0, gestures shift to ``m``, and each rest run takes the
    repetition of the movement before it (or after it, at the start).
    """
    L = ms_to_samples(window_ms, rec.fs)
    stride = ms_to_samples(stride_ms, rec.fs)
    runs = label_runs(rec.movement, rec.repetition)
    starts, labels, reps = [], [], []
    prev_rep = next((r for _, _, m, r in runs if m), 0)
    for a, b, m, r in runs:
        if m == 0:
            if not include_rest:
                continue
            r, cls = prev_rep, 0
        else:
            prev_rep = r
            cls = m if include_rest else m - 1
        k = window_count(b - a, L, stride)
        if k:
            starts.append(a + stride * np.arange(k))
            labels.append(np.full(k, cls))
            reps.append(np.full(k, r))
    if starts:
        starts_a = np.concatenate(starts).astype(np.int64)
        labels_a = np.concatenate(labels).astype(np.int64)
        reps_a = np.concatenate(reps).astype(np.int64)
    else:
        log.warning("window of %s ms (%d samples) is longer than every movement run", window_ms, L)
        starts_a = labels_a = reps_a = np.zeros(0, dtype=np.int64)
    n_cls = num_classes + 1 if include_rest else num_classes
    if labels_a.size and labels_a.max() >= n_cls:
        raise DataError(f"movement label {int(labels_a.max()) + (0 if include_rest else 1)} "
                        f"exceeds {num_classes} classes")
    source = np.ascontiguousarray(rec.samples)
    source.flags.writeable = False
    return WindowSet(source, starts_a, L, labels_a, np.full(len(starts_a), rec.subject_id, dtype=np.int64),
                     reps_a, n_cls, rec.fs)


def split_by_repetition(ws: WindowSet, test_reps: Iterable[int] = DEFAULT_TEST_REPS
                        ) -> tuple[WindowSet, WindowSet]:
    test_reps = set(int(r) for r in test_reps)
    if not test_reps:
        raise ProtocolError("test_reps is empty; pick held-out repetitions (default 2 and 5)")
    if not test_reps <= set(range(1, 7)):
        raise ProtocolError(f"test_reps {sorted(test_reps)} not within repetitions 1..6")
    is_test = np.isin(ws.repetitions, sorted(test_reps))
    train, test = ws.subset(~is_test), ws.subset(is_test)
    if len(train) == 0 or len(test) == 0:
        side = "train" if len(train) == 0 else "test"
        raise ProtocolError(f"repetition split with test_reps={sorted(test_reps)} leaves the {side} side empty")
    return train, test


# synthetic data ------------------------------------------------------------

def synth_generate(num_classes: int = 17, channels: int = DB2_CHANNELS, fs: float = DB2_FS,
                   reps: int = 6, seed: int = 0, *, subject_id: int = 1,
                   move_s: float = 5.0, rest_s: float = 3.0, noise: float = 0.02) -> EmgRecording:
    """Deterministic DB2-shaped recording: each movement repeated ``reps`` times,
    ``move_s`` seconds of activity then ``rest_s`` seconds of rest.

    Activity on each channel is a rectified mixture of three 20-150 Hz
    oscillations under a slow envelope whose level, modulation rate and
    phase depend on the class and channel. Repetitions jitter the gains.
    """
    if num_classes < 2:
        raise DataError("synth_generate needs at least two classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, subject_id]))
    n_move = int(round(move_s * fs))
    n_rest = int(round(rest_s * fs))
    block = n_move + n_rest
    total = num_classes * reps * block

    level = rng.uniform(0.1, 1.0, size=(num_classes, channels))
    mod_depth = rng.uniform(0.1, 0.4, size=(num_classes, channels))
    mod_freq = rng.uniform(0.2, 0.8, size=(num_classes, channels))
    mod_phase = rng.uniform(0, 2 * np.pi, size=(num_classes, channels))
    subject_gain = rng.uniform(0.7, 1.3, size=channels)

    samples = np.empty((total, channels), dtype=np.float32)
    movement = np.zeros(total, dtype=np.int16)
    repetition = np.zeros(total, dtype=np.int16)
    t = np.arange(n_move)[:, None] / fs
    for c in range(num_classes):
        for r in range(reps):
            a = (c * reps + r) * block
            freqs = rng.uniform(20, 150, size=(3, channels))
            phases = rng.uniform(0, 2 * np.pi, size=(3, channels))
            carrier = np.abs(np.sin(2 * np.pi * freqs[:, None, :] * t[None] + phases[:, None, :]).sum(axis=0)) / 3
            jitter = rng.uniform(0.85, 1.15, size=channels)
            env = level[c] * (1 + mod_depth[c] * np.sin(2 * np.pi * mod_freq[c] * t + mod_phase[c]))
            active = subject_gain * jitter * env * carrier
            samples[a:a + n_move] = active + noise * rng.standard_normal((n_move, channels))
            samples[a + n_move:a + block] = noise * rng.standard_normal((n_rest, channels))
            movement[a:a + n_move] = c + 1
            repetition[a:a + n_move] = r + 1
    return EmgRecording(subject_id, float(fs), samples, movement, repetition)
