"""Recording data model, CSV loader/writer, HTTP fetcher and synthetic generator.

CSV layout (one file per subject, UTF-8, header required)::

    [time,]AF3,F7,F3,FC5,T7,P7,O1,O2,P8,T8,FC6,F4,F8,AF4,label,task

``label`` is one of ``L``, ``W``, ``R`` or ``none``; ``task`` is the experiment
number (1-144, ignored for ``none`` rows). The optional leading ``time`` column
must be strictly increasing.
"""

from __future__ import annotations

import csv
import enum
import io
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

CHANNELS: tuple[str, ...] = (
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1",
    "O2", "P8", "T8", "FC6", "F4", "F8", "AF4",
)
FS = 128
N_SUBJECTS = 25
N_TASKS = 144

# name, lo_hz, hi_hz
BANDS: tuple[tuple[str, float, float], ...] = (
    ("delta", 0.1, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 14.0),
    ("beta", 14.0, 30.0),
    ("gamma1", 30.0, 47.0),
    ("gamma2", 47.0, 64.0),
)
BAND_NAMES: tuple[str, ...] = tuple(b[0] for b in BANDS)


class Task(enum.IntEnum):
    """Task labels; integer order doubles as the majority tie-break order."""

    LISTENING = 0
    WRITING = 1
    RESTING = 2

    @property
    def code(self) -> str:
        return "LWR"[self.value]

    @classmethod
    def from_code(cls, code: str) -> "Task":
        return cls("LWR".index(code))


class ParseError(ValueError):
    """Malformed recording file."""


class FetchError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, retryable: bool = True):
        super().__init__(message)
        self.status = status
        self.retryable = retryable


@dataclass(frozen=True)
class TaskAnnotation:
    label: Task
    task_index: int
    start_sample: int
    end_sample: int  # exclusive
    conditions: Mapping[str, float] | None = None

    def __post_init__(self):
        if self.start_sample >= self.end_sample:
            raise ValueError("annotation must have start_sample < end_sample")

    @property
    def length(self) -> int:
        return self.end_sample - self.start_sample


@dataclass
class EegRecording:
    samples: np.ndarray  # (14, n_samples), microvolts
    fs: float = FS
    channel_names: tuple[str, ...] = CHANNELS
    subject_id: int = 1
    annotations: list[TaskAnnotation] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(CHANNELS):
            raise ValueError(f"samples must have shape (14, n), got {self.samples.shape}")
        if tuple(self.channel_names) != CHANNELS:
            raise ValueError("channel order must match the Emotiv Epoc montage")
        self.channel_names = tuple(self.channel_names)
        prev_end, prev_task = 0, 0
        for ann in self.annotations:
            if ann.start_sample < prev_end:
                raise ValueError("annotations must be sorted and non-overlapping")
            if ann.task_index < prev_task:
                raise ValueError("task_index must be non-decreasing across annotations")
            if ann.end_sample > self.n_samples:
                raise ValueError("annotation extends past the end of the recording")
            prev_end, prev_task = ann.end_sample, ann.task_index

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples: np.ndarray) -> "EegRecording":
        return EegRecording(samples, self.fs, self.channel_names, self.subject_id, list(self.annotations))


# --------------------------------------------------------------------------
# CSV


def _annotations_from_rows(labels: Sequence[str], tasks: Sequence[int]) -> list[TaskAnnotation]:
    anns = []
    start = None
    for i in range(len(labels) + 1):
        boundary = (
            i == len(labels)
            or i == 0
            or labels[i] != labels[i - 1]
            or tasks[i] != tasks[i - 1]
        )
        if not boundary:
            continue
        if start is not None and labels[start] != "none":
            anns.append(TaskAnnotation(Task.from_code(labels[start]), tasks[start], start, i))
        start = i
    return anns


def parse_recording(text: str, subject_id: int = 1) -> EegRecording:
    """Parse the CSV schema from a string."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty file: header row required") from None

    has_time = bool(header) and header[0] == "time"
    cols = header[1:] if has_time else header
    expected = list(CHANNELS) + ["label", "task"]
    missing = [c for c in expected if c not in cols]
    if missing:
        raise ParseError(f"missing column(s): {', '.join(missing)}")
    extra = [c for c in cols if c not in expected]
    if extra:
        raise ParseError(f"unexpected column(s): {', '.join(extra)}")
    if cols != expected:
        raise ParseError("channel columns must appear in montage order followed by label, task")

    off = 1 if has_time else 0
    rows, labels, tasks = [], [], []
    last_time = None
    last_task = 0
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            if has_time:
                t = float(row[0])
                if last_time is not None and not t > last_time:
                    raise ParseError(f"row {lineno}: non-monotonic timestamp {row[0]}")
                last_time = t
            values = [float(v) for v in row[off:off + len(CHANNELS)]]
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"row {lineno}: non-numeric sample value") from None
        label = row[off + len(CHANNELS)].strip()
        if label not in ("L", "W", "R", "none"):
            raise ParseError(f"row {lineno}: unknown label {label!r}")
        task_field = row[off + len(CHANNELS) + 1].strip()
        try:
            task = int(task_field) if task_field else 0
        except ValueError:
            raise ParseError(f"row {lineno}: task must be an integer, got {task_field!r}") from None
        if label != "none" and not 1 <= task <= N_TASKS:
            raise ParseError(f"row {lineno}: task {task} outside 1-{N_TASKS}")
        if label != "none":
            if task < last_task:
                raise ParseError(f"row {lineno}: task index decreases")
            last_task = task
        rows.append(values)
        labels.append(label)
        tasks.append(task)

    samples = np.array(rows, dtype=np.float64).reshape(-1, len(CHANNELS)).T
    try:
        return EegRecording(samples, FS, CHANNELS, subject_id, _annotations_from_rows(labels, tasks))
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def load_recording(path: str | os.PathLike, subject_id: int | None = None) -> EegRecording:
    path = Path(path)
    if subject_id is None:
        digits = "".join(ch for ch in path.stem if ch.isdigit())
        subject_id = int(digits) if digits else 1
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_recording(fh.read(), subject_id)


def recording_to_csv(rec: EegRecording) -> str:
    labels = ["none"] * rec.n_samples
    tasks = [0] * rec.n_samples
    for ann in rec.annotations:
        for i in range(ann.start_sample, ann.end_sample):
            labels[i] = ann.label.code
            tasks[i] = ann.task_index
    out = io.StringIO()
    out.write(",".join(CHANNELS + ("label", "task")) + "\n")
    for i in range(rec.n_samples):
        # repr() round-trips float64 exactly
        out.write(",".join(repr(float(v)) for v in rec.samples[:, i]))
        out.write(f",{labels[i]},{tasks[i]}\n")
    return out.getvalue()


def save_recording(rec: EegRecording, path: str | os.PathLike) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(recording_to_csv(rec), encoding="utf-8")
    os.replace(tmp, path)
    return path


# --------------------------------------------------------------------------
# fetching

_locks: dict[str, threading.Lock] = {}
_locks_guard = threading.Lock()


def _lock_for(path: Path) -> threading.Lock:
    with _locks_guard:
        return _locks.setdefault(str(path.resolve()), threading.Lock())


def subject_filename(subject_id: int) -> str:
    return f"S{subject_id}.csv"


def fetch_subject(subject_id: int, base_url: str, dest_dir: str | os.PathLike,
                  timeout: float = 30.0) -> Path:
    """Download ``{base_url}/S{id}.csv`` into ``dest_dir`` unless already cached."""
    if not 1 <= int(subject_id) <= N_SUBJECTS:
        raise ValueError(f"subject_id must be in 1-{N_SUBJECTS}, got {subject_id}")
    dest_dir = Path(dest_dir)
    dest_dir.mkdir(parents=True, exist_ok=True)
    dest = dest_dir / subject_filename(subject_id)
    with _lock_for(dest):
        if dest.exists() and dest.stat().st_size > 0:
            return dest
        if not base_url:
            raise ValueError("no base URL given for the download (set base_url or --base-url)")
        url = base_url.rstrip("/") + "/" + subject_filename(subject_id)
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                payload = resp.read()
        except urllib.error.HTTPError as exc:
            raise FetchError(f"GET {url} failed with HTTP {exc.code}", status=exc.code) from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise FetchError(f"GET {url} failed: {exc}") from exc
        if not payload:
            raise FetchError(f"GET {url} returned an empty body")
        tmp = dest.with_name(dest.name + ".partial")
        tmp.write_bytes(payload)
        os.replace(tmp, dest)
    return dest


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Synthetic recording recipe.

    ``signatures`` maps each task to ``{(channel, band): snr}`` where ``snr`` is
    the ratio of burst power to white-noise power inside that band. Bursts are
    sinusoids with a frequency drawn per task window from the band interior.
    """

    signatures: Mapping[Task, Mapping[tuple[str, str], float]] = field(default_factory=dict)
    noise_floor: float = 10.0  # white-noise standard deviation, microvolts
    n_experiments: int = N_TASKS
    task_samples: Mapping[Task, int] | int = 160
    gap_samples: int = 0
    subject_id: int = 1
    seed: int = 0

    def duration(self, task: Task) -> int:
        if isinstance(self.task_samples, Mapping):
            return int(self.task_samples[task])
        return int(self.task_samples)


DEFAULT_SIGNATURES: dict[Task, dict[tuple[str, str], float]] = {
    Task.LISTENING: {("O1", "alpha"): 6.0},
    Task.WRITING: {("F3", "beta"): 6.0},
    Task.RESTING: {("T8", "theta"): 6.0},
}


def _band_limits(name: str) -> tuple[float, float]:
    for band, lo, hi in BANDS:
        if band == name:
            return lo, hi
    raise ValueError(f"unknown band {name!r}")


def synth_recording(spec: SyntheticSpec) -> EegRecording:
    """Generate a labelled recording: experiments of L, W, R tasks in sequence."""
    for task, sig in spec.signatures.items():
        for (ch, band), snr in sig.items():
            if ch not in CHANNELS:
                raise ValueError(f"unknown channel {ch!r}")
            lo, hi = _band_limits(band)
            if lo < 0.1 or hi > FS / 2:
                raise ValueError(f"band {band!r} outside 0.1-64 Hz")
            if snr < 0:
                raise ValueError("signature ratios must be non-negative")
    if spec.noise_floor < 0:
        raise ValueError("noise_floor must be non-negative")

    rng = np.random.default_rng(spec.seed)
    layout = []
    pos = 0
    for exp in range(1, spec.n_experiments + 1):
        for task in Task:
            n = spec.duration(task)
            layout.append((task, exp, pos, pos + n))
            pos += n + spec.gap_samples
    total = pos
    sigma = float(spec.noise_floor)
    samples = sigma * rng.standard_normal((len(CHANNELS), total))

    t = np.arange(total) / FS
    anns = []
    for task, exp, start, stop in layout:
        anns.append(TaskAnnotation(task, exp, start, stop))
        for (ch, band), snr in spec.signatures.get(task, {}).items():
            lo, hi = _band_limits(band)
            # keep the tone one bin clear of the band edges to limit leakage
            f_lo, f_hi = (lo + 1.0, hi - 1.0) if hi - lo > 2.5 else (lo, hi)
            freq = rng.uniform(f_lo, f_hi)
            phase = rng.uniform(0, 2 * np.pi)
            noise_in_band = sigma ** 2 * (hi - lo) / (FS / 2)
            amp = np.sqrt(2.0 * snr * noise_in_band)
            idx = CHANNELS.index(ch)
            samples[idx, start:stop] += amp * np.sin(2 * np.pi * freq * t[start:stop] + phase)
    return EegRecording(samples, FS, CHANNELS, spec.subject_id, anns)


# disjoint electrode triples so that one subject's discriminative sites carry
# no signal in another subject's recordings
_SUBJECT_SITES = (
    (("O1", "alpha"), ("F3", "beta"), ("T8", "theta")),
    (("F8", "alpha"), ("P7", "beta"), ("FC5", "theta")),
    (("O2", "beta"), ("AF3", "theta"), ("T7", "alpha")),
    (("P8", "theta"), ("FC6", "beta"), ("AF4", "alpha")),
)


def subject_signatures(subject_id: int, snr: float = 6.0) -> dict[Task, dict[tuple[str, str], float]]:
    """Deterministic per-subject class signatures for synthetic cohorts.

    Subjects 1-4 use mutually disjoint electrodes; later subjects draw three
    distinct electrodes and bands from a generator seeded by the subject id.
    """
    if subject_id < 1:
        raise ValueError("subject ids start at 1")
    if subject_id <= len(_SUBJECT_SITES):
        sites = _SUBJECT_SITES[subject_id - 1]
    else:
        rng = np.random.default_rng(subject_id)
        chans = rng.choice(len(CHANNELS), size=3, replace=False)
        bands = rng.choice(np.arange(1, len(BANDS)), size=3, replace=False)  # skip delta
        sites = tuple((CHANNELS[c], BAND_NAMES[b]) for c, b in zip(chans, bands))
    return {task: {site: snr} for task, site in zip(Task, sites)}
