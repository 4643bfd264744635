"""Recordings on disk, the dataset catalog, and a synthetic sEMG-like generator.

FSE1 recording layout (little-endian, 29-byte header)::

    offset  type     field
    0       4s       magic b"FSE1"
    4       u16      format version (1)
    6       u16      subject id (1..40)
    8       u16      gesture id (0..49, 0 = rest)
    10      u16      repetition id (1..6)
    12      1s       exercise (b"B", b"C" or b"D")
    13      f64      sampling rate in Hz
    21      u32      T, number of samples
    25      u32      C, number of channels
    29      f32[T*C] samples, time-major (row t holds all C channels)

Directory layout: ``root/subject_SS/gesture_GG_rep_R.fse``.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import CatalogError, FormatError, ParameterError

log = logging.getLogger(__name__)

__all__ = [
    "MAGIC",
    "Recording",
    "RecordKey",
    "Catalog",
    "SynthSpec",
    "exercise_for_gesture",
    "write_recording",
    "load_recording",
    "read_header",
    "recording_path",
    "build_catalog",
    "synthesize",
    "generate_synthetic",
]

MAGIC = b"FSE1"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHcdII")
HEADER_SIZE = _HEADER.size


def exercise_for_gesture(gesture_id: int) -> str:
    """DB2 exercise for a gesture: B = 1..17, C = 18..40, D = 41..49 (rest -> B)."""
    if gesture_id <= 17:
        return "B"
    if gesture_id <= 40:
        return "C"
    return "D"


@dataclass
class Recording:
    subject_id: int
    gesture_id: int
    repetition_id: int
    exercise: str
    fs: float
    samples: np.ndarray  # (T, C)

    def __post_init__(self):
        if not 1 <= self.subject_id <= 40:
            raise ParameterError(f"subject id {self.subject_id} outside 1..40")
        if not 0 <= self.gesture_id <= 49:
            raise ParameterError(f"gesture id {self.gesture_id} outside 0..49")
        if not 1 <= self.repetition_id <= 6:
            raise ParameterError(f"repetition id {self.repetition_id} outside 1..6")
        if self.exercise not in ("B", "C", "D"):
            raise ParameterError(f"exercise must be B, C or D, got {self.exercise!r}")
        if self.gesture_id > 0 and self.exercise != exercise_for_gesture(self.gesture_id):
            raise ParameterError(
                f"gesture {self.gesture_id} belongs to exercise {exercise_for_gesture(self.gesture_id)}, not {self.exercise}"
            )
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2:
            raise ParameterError(f"samples must be (T, C), got shape {self.samples.shape}")

    @property
    def key(self) -> "RecordKey":
        return RecordKey(self.subject_id, self.gesture_id, self.repetition_id)


class RecordKey(NamedTuple):
    subject: int
    gesture: int
    repetition: int


# ---------------------------------------------------------------------------
# FSE1 io
# ---------------------------------------------------------------------------


def write_recording(path, rec: Recording) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    T, C = rec.samples.shape
    header = _HEADER.pack(
        MAGIC, VERSION, rec.subject_id, rec.gesture_id, rec.repetition_id, rec.exercise.encode("ascii"), float(rec.fs), T, C
    )
    payload = np.ascontiguousarray(rec.samples, dtype="<f4").tobytes()
    path.write_bytes(header + payload)


def _parse_header(buf: bytes, path) -> tuple:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", offset=0, path=path)
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER_SIZE} bytes", offset=len(buf), path=path)
    magic, version, s, g, r, ex, fs, T, C = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, path=path)
    try:
        exercise = ex.decode("ascii")
    except UnicodeDecodeError:
        raise FormatError(f"exercise byte {ex!r} is not ASCII", offset=12, path=path) from None
    return s, g, r, exercise, fs, T, C


def read_header(path) -> tuple:
    """(subject, gesture, repetition, exercise, fs, T, C) without reading samples."""
    with open(path, "rb") as fh:
        return _parse_header(fh.read(HEADER_SIZE), path)


def load_recording(path) -> Recording:
    buf = Path(path).read_bytes()
    s, g, r, exercise, fs, T, C = _parse_header(buf, path)
    expected = HEADER_SIZE + 4 * T * C
    if len(buf) != expected:
        raise FormatError(
            f"payload length mismatch: header declares {T}x{C} samples ({expected} bytes total), file has {len(buf)} bytes",
            offset=min(len(buf), expected),
            path=path,
        )
    samples = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).reshape(T, C).astype(np.float32)
    try:
        return Recording(s, g, r, exercise, fs, samples)
    except ParameterError as exc:
        raise FormatError(f"invalid header field: {exc}", offset=6, path=path) from None


def recording_path(root, key: RecordKey) -> Path:
    return Path(root) / f"subject_{key.subject:02d}" / f"gesture_{key.gesture:02d}_rep_{key.repetition}.fse"


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CatalogEntry:
    path: Path | None
    exercise: str
    fs: float
    n_samples: int
    n_channels: int


class Catalog:
    """Immutable index from (subject, gesture, repetition) to recordings."""

    def __init__(self, entries: dict[RecordKey, CatalogEntry]):
        self._entries = dict(sorted(entries.items()))

    @classmethod
    def from_keys(cls, keys, fs=2000.0, n_samples=10000, n_channels=12) -> "Catalog":
        """Metadata-only catalog (no files); useful for split bookkeeping."""
        entries = {}
        for k in keys:
            k = RecordKey(*k)
            if k in entries:
                raise CatalogError(f"duplicate key {tuple(k)}")
            entries[k] = CatalogEntry(None, exercise_for_gesture(k.gesture), fs, n_samples, n_channels)
        return cls(entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[RecordKey]:
        return iter(self._entries)

    def __contains__(self, key) -> bool:
        return RecordKey(*key) in self._entries

    def keys(self) -> list[RecordKey]:
        return list(self._entries)

    def entry(self, key) -> CatalogEntry:
        return self._entries[RecordKey(*key)]

    def subjects(self) -> list[int]:
        return sorted({k.subject for k in self._entries})

    def gestures(self) -> list[int]:
        return sorted({k.gesture for k in self._entries})

    def repetitions(self) -> list[int]:
        return sorted({k.repetition for k in self._entries})

    def coverage(self) -> dict[int, tuple[int, int]]:
        """subject -> (number of gestures, number of distinct repetitions)."""
        out = {}
        for s in self.subjects():
            ks = [k for k in self._entries if k.subject == s]
            out[s] = (len({k.gesture for k in ks}), len({k.repetition for k in ks}))
        return out

    def load(self, key) -> Recording:
        e = self.entry(key)
        if e.path is None:
            raise CatalogError(f"catalog entry {tuple(key)} has no backing file")
        return load_recording(e.path)

    def split(self, scenario: str) -> dict[str, list[RecordKey]]:
        """Recording keys per split for a generalization scenario."""
        from .episodes import scenario_partition

        return scenario_partition(self.keys(), scenario)

    def summary(self) -> str:
        if not self._entries:
            return "empty catalog"
        return (
            f"{len(self)} recordings: {len(self.subjects())} subjects, "
            f"{len(self.gestures())} gestures, {len(self.repetitions())} repetitions"
        )


def build_catalog(root) -> Catalog:
    """Index every ``*.fse`` file under ``root``, validating headers and sizes."""
    root = Path(root)
    if not root.is_dir():
        raise CatalogError(f"data root {root} is not a directory")
    entries: dict[RecordKey, CatalogEntry] = {}
    for path in sorted(root.rglob("*.fse")):
        s, g, r, ex, fs, T, C = read_header(path)
        size = path.stat().st_size
        if size != HEADER_SIZE + 4 * T * C:
            raise FormatError(
                f"payload length mismatch: expected {HEADER_SIZE + 4 * T * C} bytes, file has {size}",
                offset=min(size, HEADER_SIZE + 4 * T * C),
                path=path,
            )
        key = RecordKey(s, g, r)
        if key in entries:
            raise CatalogError(
                f"duplicate recording key subject={s} gesture={g} repetition={r}: {entries[key].path} and {path}"
            )
        entries[key] = CatalogEntry(path, ex, fs, T, C)
    if not entries:
        warnings.warn(f"no .fse recordings found under {root}", stacklevel=2)
    return Catalog(entries)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Parameters of the synthetic generator.

    Each gesture owns a per-channel activation pattern plus a few slow
    sinusoids; subjects rescale channels and perturb the pattern, and each
    repetition jitters it again before additive white noise.
    """

    n_subjects: int = 8
    n_gestures: int = 10
    n_reps: int = 6
    duration_s: float = 5.0
    fs: float = 2000.0
    n_channels: int = 12
    noise: float = 0.05
    rep_jitter: float = 0.05
    subject_gain: float = 0.2
    subject_jitter: float = 0.15
    ramp_s: float = 0.1
    n_sines: int = 3
    level_decades: float = 2.0  # base levels are log-uniform over this many decades below 1

    def __post_init__(self):
        if not 1 <= self.n_subjects <= 40:
            raise ParameterError(f"n_subjects must be in 1..40, got {self.n_subjects}")
        if not 1 <= self.n_gestures <= 49:
            raise ParameterError(f"n_gestures must be in 1..49, got {self.n_gestures}")
        if not 1 <= self.n_reps <= 6:
            raise ParameterError(f"n_reps must be in 1..6, got {self.n_reps}")
        if self.duration_s <= 0 or self.fs <= 0 or self.n_channels < 1:
            raise ParameterError("duration, fs and channel count must be positive")
        for name in ("noise", "rep_jitter", "subject_gain", "subject_jitter", "ramp_s", "level_decades"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.fs))


def _gesture_templates(spec: SynthSpec, seed: int):
    rng = np.random.default_rng([seed, 0])
    shape = (spec.n_gestures, spec.n_channels)
    # muscle activation levels span orders of magnitude across channels
    base = 10.0 ** rng.uniform(-spec.level_decades, 0.0, size=shape)
    freqs = rng.uniform(0.2, 1.5, size=shape + (spec.n_sines,))
    amps = rng.uniform(0.0, 0.3, size=shape + (spec.n_sines,)) * base[..., None]
    return base, freqs, amps


def _subject_params(spec: SynthSpec, seed: int, subject: int):
    rng = np.random.default_rng([seed, 1, subject])
    gains = np.exp(spec.subject_gain * rng.uniform(-1, 1, size=spec.n_channels))
    perturb = 1.0 + spec.subject_jitter * rng.standard_normal((spec.n_gestures, spec.n_channels))
    phases = rng.uniform(0, 2 * np.pi, size=(spec.n_gestures, spec.n_channels, spec.n_sines))
    return gains, np.clip(perturb, 0.2, None), phases


def _envelope(spec: SynthSpec) -> np.ndarray:
    t = np.arange(spec.n_samples) / spec.fs
    if spec.ramp_s == 0:
        return np.ones_like(t)
    up = np.clip(t / spec.ramp_s, 0, 1)
    down = np.clip((spec.duration_s - t) / spec.ramp_s, 0, 1)
    return np.minimum(up, down)


def synthesize(spec: SynthSpec, seed: int = 0) -> Iterator[Recording]:
    """Yield every synthetic recording in (subject, gesture, repetition) order.

    Each recording depends only on (seed, subject, gesture, repetition), so
    the output does not depend on generation order.
    """
    base, freqs, amps = _gesture_templates(spec, seed)
    env = _envelope(spec)
    t = np.arange(spec.n_samples)[:, None, None] / spec.fs
    for s in range(1, spec.n_subjects + 1):
        gains, perturb, phases = _subject_params(spec, seed, s)
        for gi in range(spec.n_gestures):
            g = gi + 1
            level = base[gi] * gains * perturb[gi]
            for r in range(1, spec.n_reps + 1):
                rng = np.random.default_rng([seed, 2, s, g, r])
                jitter = 1.0 + spec.rep_jitter * rng.standard_normal(spec.n_channels)
                dphase = spec.rep_jitter * rng.standard_normal(phases[gi].shape)
                wave = np.sum(amps[gi] * gains[:, None] * np.sin(2 * np.pi * freqs[gi] * t + phases[gi] + dphase), axis=-1)
                clean = env[:, None] * (level * jitter + wave)
                noisy = clean + spec.noise * rng.standard_normal(clean.shape)
                yield Recording(s, g, r, exercise_for_gesture(g), spec.fs, noisy.astype(np.float32))


def generate_synthetic(spec: SynthSpec, root, seed: int = 0) -> list[Path]:
    """Write the synthetic dataset as FSE1 files under ``root``."""
    paths = []
    for rec in synthesize(spec, seed):
        path = recording_path(root, rec.key)
        write_recording(path, rec)
        paths.append(path)
    log.info("wrote %d synthetic recordings under %s", len(paths), root)
    return paths
