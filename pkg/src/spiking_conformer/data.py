"""EEG ingestion: EDF parsing, phase labeling, segmentation, and folds.

Supports continuous EDF recordings (ASCII header, 256 bytes plus 256 per
signal, little-endian 16-bit samples).  The discontinuous EDF+D variant is
rejected.  Recordings keep both the calibrated physical samples and the raw
digital payload so the payload can be re-serialized byte-identically.

Phases: ictal = [onset, offset]; pre-ictal = the 15 minutes before onset,
truncated by the recording start or an earlier seizure; inter-ictal = the
remainder at a guard distance from any seizure (plus a post-ictal exclusion
window, 30 minutes by default).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DTYPE, load_bundle, save_bundle

WINDOW_S = 5.0
SEGMENT_SAMPLES = 1280
N_CHANNELS = 22
POST_ICTAL_EXCLUDE_S = 1800.0


class EdfError(ValueError):
    """Malformed or unsupported EDF content."""


@dataclass
class EdfSignal:
    label: str
    transducer: str = ""
    phys_dim: str = "uV"
    phys_min: float = -1000.0
    phys_max: float = 1000.0
    dig_min: int = -32768
    dig_max: int = 32767
    samples_per_record: int = 256
    prefilter: str = ""

    @property
    def gain(self) -> float:
        return (self.phys_max - self.phys_min) / (self.dig_max - self.dig_min)

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        return (digital.astype(DTYPE) - self.dig_min) * self.gain + self.phys_min


@dataclass
class EegRecording:
    case_id: str
    channels: list[str]
    fs: float
    samples: np.ndarray          # (n_channels, n_samples) physical units
    digital: np.ndarray          # (n_channels, n_samples) int16 payload
    signal_headers: list[EdfSignal]
    n_records: int
    record_duration: float
    bit_depth: int = 16

    @property
    def duration_s(self) -> float:
        return self.samples.shape[1] / self.fs


@dataclass
class SeizureAnnotation:
    file_id: str
    onset_s: float
    offset_s: float

    def __post_init__(self):
        if not 0 <= self.onset_s < self.offset_s:
            raise ValueError(
                f"annotation must satisfy 0 <= onset < offset, got "
                f"[{self.onset_s}, {self.offset_s}]"
            )


@dataclass
class PhaseInterval:
    phase: str  # "ictal" | "pre_ictal" | "inter_ictal"
    start_s: float
    end_s: float
    file_id: str

    @property
    def length_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class Segment:
    data: np.ndarray  # (22, 1280)
    label: int        # 0 = positive (ictal/pre-ictal), 1 = negative (inter-ictal)
    source: tuple[str, int]  # (file_id, start_sample)


POSITIVE, NEGATIVE = 0, 1


# ---------------------------------------------------------------------------
# EDF read / write
# ---------------------------------------------------------------------------


def _a(field: bytes) -> str:
    return field.decode("ascii").strip()


def parse_edf(src, n_channels: int = N_CHANNELS, case_id: str | None = None) -> EegRecording:
    """Decode a continuous EDF file (path or bytes) into a recording.

    Selects the first ``n_channels`` signals in header order, skipping any
    'EDF Annotations' stream.  Calibration maps the digital range to the
    physical range linearly per signal.
    """
    if isinstance(src, (str, Path)):
        raw = Path(src).read_bytes()
        if case_id is None:
            case_id = Path(src).stem
    else:
        raw = bytes(src)
        case_id = case_id or "memory"
    if len(raw) < 256:
        raise EdfError("truncated file: fixed header missing")
    version = _a(raw[0:8])
    if version != "0":
        raise EdfError(f"unsupported EDF version {version!r}")
    reserved = _a(raw[192:236])
    if reserved.startswith("EDF+D"):
        raise EdfError("discontinuous EDF+D recordings are not supported")
    header_bytes = int(_a(raw[184:192]))
    n_records = int(_a(raw[236:244]))
    record_duration = float(_a(raw[244:252]))
    ns = int(_a(raw[252:256]))
    if header_bytes != 256 + 256 * ns:
        raise EdfError(
            f"header size {header_bytes} does not match 256 + 256*{ns} signals"
        )
    if len(raw) < header_bytes:
        raise EdfError("truncated file: signal headers missing")

    # signal headers are stored field-major: all labels, all transducers, ...
    field_offsets = {}
    pos = 256
    for fname, width in (
        ("label", 16), ("transducer", 80), ("phys_dim", 8), ("phys_min", 8),
        ("phys_max", 8), ("dig_min", 8), ("dig_max", 8), ("prefilter", 80),
        ("samples_per_record", 8), ("reserved", 32),
    ):
        field_offsets[fname] = (pos, width)
        pos += width * ns

    def sig_field(fname: str, idx: int) -> str:
        base, width = field_offsets[fname]
        return _a(raw[base + width * idx : base + width * (idx + 1)])

    sigs = []
    for i in range(ns):
        sigs.append(
            EdfSignal(
                label=sig_field("label", i),
                transducer=sig_field("transducer", i),
                phys_dim=sig_field("phys_dim", i),
                phys_min=float(sig_field("phys_min", i)),
                phys_max=float(sig_field("phys_max", i)),
                dig_min=int(sig_field("dig_min", i)),
                dig_max=int(sig_field("dig_max", i)),
                prefilter=sig_field("prefilter", i),
                samples_per_record=int(sig_field("samples_per_record", i)),
            )
        )

    data_sigs = [i for i, s in enumerate(sigs) if s.label != "EDF Annotations"]
    if len(data_sigs) < 1:
        raise EdfError("no data signals present")
    keep = data_sigs[:n_channels]
    spr = [s.samples_per_record for s in sigs]
    record_size = 2 * sum(spr)
    payload = raw[header_bytes:]
    if len(payload) < n_records * record_size:
        raise EdfError(
            f"truncated payload: need {n_records * record_size} bytes, have {len(payload)}"
        )
    fs = {sigs[i].samples_per_record / record_duration for i in keep}
    if len(fs) != 1:
        raise EdfError(f"selected signals disagree on sampling rate: {sorted(fs)}")
    fs = fs.pop()

    offsets = np.cumsum([0] + spr)
    all_records = np.frombuffer(
        payload[: n_records * record_size], dtype="<i2"
    ).reshape(n_records, sum(spr))
    digital = np.empty((len(keep), n_records * sigs[keep[0]].samples_per_record), dtype=np.int16)
    for row, i in enumerate(keep):
        if sigs[i].samples_per_record != sigs[keep[0]].samples_per_record:
            raise EdfError("selected signals have differing samples per record")
        chunk = all_records[:, offsets[i] : offsets[i + 1]]
        digital[row] = chunk.reshape(-1)
    physical = np.empty(digital.shape, dtype=DTYPE)
    for row, i in enumerate(keep):
        physical[row] = sigs[i].to_physical(digital[row])
    return EegRecording(
        case_id=case_id,
        channels=[sigs[i].label for i in keep],
        fs=fs,
        samples=physical,
        digital=digital,
        signal_headers=[sigs[i] for i in keep],
        n_records=n_records,
        record_duration=record_duration,
    )


def _pad(text: str, width: int) -> bytes:
    b = text.encode("ascii")
    if len(b) > width:
        raise EdfError(f"field {text!r} exceeds {width} bytes")
    return b.ljust(width)


def _fmt8(value: float) -> str:
    # EDF numeric fields are 8 ASCII chars
    if float(value) == int(value):
        return str(int(value))
    s = f"{value:.8g}"
    if len(s) > 8:
        s = f"{value:.3f}"[:8]
    return s


def digital_payload(digital: np.ndarray, samples_per_record: int) -> bytes:
    """Interleave per-channel int16 samples into EDF data records."""
    n_ch, n_samp = digital.shape
    if n_samp % samples_per_record:
        raise EdfError("sample count is not a whole number of records")
    n_records = n_samp // samples_per_record
    rec = digital.reshape(n_ch, n_records, samples_per_record)
    interleaved = rec.transpose(1, 0, 2)  # (records, channels, spr)
    return np.ascontiguousarray(interleaved, dtype="<i2").tobytes()


def write_edf(
    path,
    digital: np.ndarray,
    signal_headers: list[EdfSignal],
    record_duration: float = 1.0,
    patient_id: str = "X X X X",
    recording_id: str = "synthetic",
) -> None:
    """Serialize int16 channel data (n_ch, n_samples) to a continuous EDF."""
    n_ch, n_samp = digital.shape
    if n_ch != len(signal_headers):
        raise EdfError("one signal header required per channel")
    spr = signal_headers[0].samples_per_record
    for s in signal_headers:
        if s.samples_per_record != spr:
            raise EdfError("all channels must share samples_per_record")
    if n_samp % spr:
        raise EdfError("sample count is not a whole number of records")
    n_records = n_samp // spr
    header_bytes = 256 + 256 * n_ch
    with open(path, "wb") as fp:
        fp.write(_pad("0", 8))
        fp.write(_pad(patient_id, 80))
        fp.write(_pad(recording_id, 80))
        fp.write(_pad("01.01.20", 8))
        fp.write(_pad("00.00.00", 8))
        fp.write(_pad(str(header_bytes), 8))
        fp.write(_pad("", 44))
        fp.write(_pad(str(n_records), 8))
        fp.write(_pad(_fmt8(record_duration), 8))
        fp.write(_pad(str(n_ch), 4))
        for get, width in (
            (lambda s: s.label, 16),
            (lambda s: s.transducer, 80),
            (lambda s: s.phys_dim, 8),
            (lambda s: _fmt8(s.phys_min), 8),
            (lambda s: _fmt8(s.phys_max), 8),
            (lambda s: str(s.dig_min), 8),
            (lambda s: str(s.dig_max), 8),
            (lambda s: s.prefilter, 80),
            (lambda s: str(s.samples_per_record), 8),
            (lambda s: "", 32),
        ):
            for s in signal_headers:
                fp.write(_pad(get(s), width))
        fp.write(digital_payload(digital, spr))


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


def read_annotations_csv(path) -> list[SeizureAnnotation]:
    """CSV with header file_id,onset_s,offset_s."""
    out = []
    with open(path, newline="") as fp:
        for row in csv.DictReader(fp):
            out.append(
                SeizureAnnotation(
                    file_id=row["file_id"],
                    onset_s=float(row["onset_s"]),
                    offset_s=float(row["offset_s"]),
                )
            )
    return out


def write_annotations_csv(path, annotations: list[SeizureAnnotation]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["file_id", "onset_s", "offset_s"])
        for a in annotations:
            w.writerow([a.file_id, a.onset_s, a.offset_s])


# ---------------------------------------------------------------------------
# phases and segmentation
# ---------------------------------------------------------------------------


def extract_phases(
    recording: EegRecording,
    annotations: list[SeizureAnnotation],
    preictal_len_s: float = 900.0,
    guard_s: float = 1800.0,
) -> list[PhaseInterval]:
    """Label ictal / pre-ictal / inter-ictal spans of one recording.

    Pre-ictal windows are clipped at the recording start and at the end of
    any earlier seizure.  Inter-ictal time keeps a guard distance from every
    seizure/pre-ictal span and excludes a post-ictal window after offsets.
    """
    duration = recording.duration_s
    anns = sorted(annotations, key=lambda a: a.onset_s)
    for a in anns:
        if a.offset_s > duration + 1e-9:
            raise ValueError(f"annotation [{a.onset_s}, {a.offset_s}] exceeds recording")
    for prev, cur in zip(anns, anns[1:]):
        if cur.onset_s < prev.offset_s:
            raise ValueError("overlapping seizure annotations")

    fid = recording.case_id
    intervals: list[PhaseInterval] = []
    exclusions: list[tuple[float, float]] = []
    prev_offset = 0.0
    for a in anns:
        pre_start = max(0.0, a.onset_s - preictal_len_s, prev_offset)
        if pre_start < a.onset_s:
            intervals.append(PhaseInterval("pre_ictal", pre_start, a.onset_s, fid))
        intervals.append(PhaseInterval("ictal", a.onset_s, a.offset_s, fid))
        exclusions.append(
            (pre_start - guard_s, a.offset_s + max(guard_s, POST_ICTAL_EXCLUDE_S))
        )
        prev_offset = a.offset_s

    # complement of the exclusion zones is inter-ictal
    cursor = 0.0
    for lo, hi in sorted(exclusions):
        if lo > cursor:
            intervals.append(PhaseInterval("inter_ictal", cursor, min(lo, duration), fid))
        cursor = max(cursor, hi)
    if cursor < duration:
        intervals.append(PhaseInterval("inter_ictal", cursor, duration, fid))
    return [iv for iv in intervals if iv.length_s > 1e-12]


def segment_count(length_s: float, window_s: float, stride_s: float) -> int:
    """Closed-form count of stride-spaced windows inside an interval."""
    if stride_s <= 0:
        raise ValueError("stride must be positive")
    if length_s < window_s:
        return 0
    return int(math.floor((length_s - window_s) / stride_s)) + 1


def segment_interval(
    interval: PhaseInterval,
    recording: EegRecording,
    window_s: float = WINDOW_S,
    stride_s: float = 1.0,
) -> list[Segment]:
    """Cut 5 s windows from one phase interval; shorter intervals yield []."""
    n = segment_count(interval.length_s, window_s, stride_s)
    fs = recording.fs
    window = int(round(window_s * fs))
    base = int(round(interval.start_s * fs))
    end_sample = int(round(interval.end_s * fs))
    label = NEGATIVE if interval.phase == "inter_ictal" else POSITIVE
    out = []
    for i in range(n):
        start = base + int(round(i * stride_s * fs))
        if start + window > end_sample or start + window > recording.samples.shape[1]:
            break
        out.append(
            Segment(
                data=np.ascontiguousarray(recording.samples[:, start : start + window]),
                label=label,
                source=(interval.file_id, start),
            )
        )
    return out


def standardize_recording(recording: EegRecording) -> EegRecording:
    """Channel-wise zero-mean unit-variance conditioning of the raw signal."""
    x = recording.samples
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    std[std == 0.0] = 1.0
    recording.samples = (x - mean) / std
    return recording


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    X: np.ndarray  # (N, 22, 1280)
    y: np.ndarray  # (N,) int, 0 = positive, 1 = negative
    sources: list[tuple[str, int]] = field(default_factory=list)
    folds: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.X.shape[0]


def from_segments(segments: list[Segment]) -> Dataset:
    X = np.stack([s.data for s in segments]).astype(DTYPE)
    y = np.array([s.label for s in segments], dtype=int)
    return Dataset(X=X, y=y, sources=[s.source for s in segments])


def balance(
    pos_segments: list[Segment],
    neg_segments: list[Segment],
    target_ratio: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Subsample the majority class so |pos| / |neg| approaches the target.

    Selection is a seeded uniform draw without replacement and keeps the
    original ordering of the retained items.
    """
    if not pos_segments or not neg_segments:
        raise ValueError("both classes must be non-empty")
    n_pos, n_neg = len(pos_segments), len(neg_segments)
    rng = np.random.default_rng(seed)
    want_pos = min(n_pos, int(round(n_neg * target_ratio)))
    want_neg = min(n_neg, int(round(n_pos / target_ratio)))
    if n_pos > want_pos:
        keep = np.sort(rng.choice(n_pos, size=want_pos, replace=False))
        pos_segments = [pos_segments[i] for i in keep]
    elif n_neg > want_neg:
        keep = np.sort(rng.choice(n_neg, size=want_neg, replace=False))
        neg_segments = [neg_segments[i] for i in keep]
    return from_segments(pos_segments + neg_segments)


def kfold_split(n_or_dataset, k: int = 10, seed: int = 0):
    """Seeded shuffled k-fold partition; test sizes differ by at most one."""
    n = n_or_dataset if isinstance(n_or_dataset, int) else len(n_or_dataset)
    if k <= 1:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"need at least k={k} items, have {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    folds = []
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    start = 0
    for size in sizes:
        test = np.sort(order[start : start + size])
        train = np.sort(np.concatenate([order[:start], order[start + size :]]))
        folds.append((train, test))
        start += size
    return folds


# ---------------------------------------------------------------------------
# manifest + payload io
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, out_dir, name: str = "segments") -> None:
    """Write manifest CSV (segment_id, file_id, start_sample, label, fold)
    and the segment payloads as a named tensor bundle."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fold_of = {}
    for fid, (_, test_ids) in enumerate(dataset.folds):
        for idx in test_ids:
            fold_of[int(idx)] = fid
    with open(out_dir / "manifest.csv", "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["segment_id", "file_id", "start_sample", "label", "fold"])
        for i in range(len(dataset)):
            src = dataset.sources[i] if i < len(dataset.sources) else ("", -1)
            w.writerow([i, src[0], src[1], int(dataset.y[i]), fold_of.get(i, -1)])
    entries = {f"segment_{i:06d}": dataset.X[i] for i in range(len(dataset))}
    save_bundle(out_dir / f"{name}.bundle", {"kind": "segments", "count": len(dataset)}, entries)


def load_dataset(out_dir, name: str = "segments") -> Dataset:
    out_dir = Path(out_dir)
    rows = []
    with open(out_dir / "manifest.csv", newline="") as fp:
        for row in csv.DictReader(fp):
            rows.append(row)
    header, entries = load_bundle(out_dir / f"{name}.bundle")
    n = int(header["count"])
    X = np.stack([entries[f"segment_{i:06d}"] for i in range(n)]).astype(DTYPE)
    y = np.array([int(r["label"]) for r in rows], dtype=int)
    sources = [(r["file_id"], int(r["start_sample"])) for r in rows]
    ds = Dataset(X=X, y=y, sources=sources)
    fold_ids = sorted({int(r["fold"]) for r in rows if int(r["fold"]) >= 0})
    if fold_ids:
        all_ids = np.arange(n)
        for fid in fold_ids:
            test = np.array([i for i, r in enumerate(rows) if int(r["fold"]) == fid])
            train = np.setdiff1d(all_ids, test)
            ds.folds.append((train, test))
    return ds
