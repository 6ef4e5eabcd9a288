"""Cohort -> dense tensors for model training, guarded by sanity checks.

Tensor file layout (little-endian)::

    b"SCLT1" | u8 dtype (0 = f64, 1 = i64) | u8 ndim | ndim x u64 dims | row-major payload

A tab-separated sidecar maps codes to the last axis and patients to rows.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import SanityCheckError, ValidationError
from .findings import ERROR, Finding
from .model import canonical_key, format_ts, is_utc, to_utc

MAGIC = b"SCLT1"
DTYPES = {"f64": (0, "<f8"), "i64": (1, "<i8")}
CODE_DTYPES = {0: "f64", 1: "i64"}
NATIVE = {"f64": np.float64, "i64": np.int64}


@dataclass(frozen=True)
class FeatureMapping:
    code_index: dict
    bucket_days: int
    window: tuple
    qualified: bool = False

    def __post_init__(self):
        if self.bucket_days <= 0:
            raise ValidationError("bucket_days must be positive")
        if sorted(self.code_index.values()) != list(range(len(self.code_index))):
            raise ValidationError("code indices must be contiguous from 0")
        ws, we = to_utc(self.window[0]), to_utc(self.window[1])
        if ws > we:
            raise ValidationError("window start after end")
        object.__setattr__(self, "window", (ws, we))
        object.__setattr__(self, "code_index", dict(self.code_index))

    @property
    def n_codes(self) -> int:
        return len(self.code_index)

    @property
    def n_buckets(self) -> int:
        days = (self.window[1] - self.window[0]).days + 1
        return math.ceil(days / self.bucket_days)

    def code_of(self, e) -> str:
        return f"{e.category}:{e.value}" if self.qualified else e.value

    @classmethod
    def from_cohort(cls, c, bucket_days: int = 30, window=None, qualified: bool = False) -> "FeatureMapping":
        window = window or c.window
        if window is None:
            raise ValidationError("cohort has no window; pass one explicitly")
        codes = sorted({f"{e.category}:{e.value}" if qualified else e.value for e in c.events})
        return cls({code: i for i, code in enumerate(codes)}, bucket_days, window, qualified)


@dataclass
class DenseTensor:
    shape: tuple
    dtype: str
    data: np.ndarray
    patients: list = field(default_factory=list)
    dropped: int = 0

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValidationError(f"dtype must be one of {sorted(DTYPES)}")
        self.shape = tuple(int(d) for d in self.shape)
        self.data = np.ascontiguousarray(self.data).reshape(-1)
        if int(np.prod(self.shape, dtype=np.int64)) != self.data.size:
            raise ValidationError("shape does not match data length")

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def total(self) -> float:
        return float(self.data.sum())


# --- sanity checks ---------------------------------------------------------------------------

def _subject_ids(c) -> set:
    s = c.subjects
    return set(s.keys()) if isinstance(s, dict) else set(s)


def _event_problems(e, ids: set, m: FeatureMapping) -> list[tuple[str, str]]:
    out = []
    if e.patient_id not in ids:
        out.append(("unknown_patient", f"patient {e.patient_id!r} is not a cohort subject"))
    stamps = [e.start] + ([e.end] if e.end is not None else [])
    if not all(isinstance(t, datetime) and is_utc(t) for t in stamps):
        out.append(("not_utc", "timestamp is not UTC-normalized"))
    start = to_utc(e.start)
    stop = to_utc(e.end) if e.end is not None else start
    if stop < start:
        out.append(("end_before_start", f"end {format_ts(stop)} precedes start {format_ts(start)}"))
    ws, we = m.window
    if min(start, stop) < ws or max(start, stop) > we:
        out.append(("outside_window", f"event [{format_ts(start)}, {format_ts(stop)}] outside the window"))
    if m.code_of(e) not in m.code_index:
        out.append(("unknown_code", f"code {m.code_of(e)!r} has no column"))
    return out


def _problems(c, m: FeatureMapping) -> list[tuple[int, str, str]]:
    ids = _subject_ids(c)
    return [(i, code, msg) for i, e in enumerate(c.events) for code, msg in _event_problems(e, ids, m)]


def sanity_check(c, m: FeatureMapping) -> list[Finding]:
    """One finding per (event, violation)."""
    return [Finding(ERROR, code, f"event {i}: {msg}") for i, code, msg in _problems(c, m)]


def _valid_events(c, m: FeatureMapping, drop_invalid: bool):
    problems = _problems(c, m)
    if problems and not drop_invalid:
        findings = [Finding(ERROR, code, f"event {i}: {msg}") for i, code, msg in problems]
        raise SanityCheckError(f"{len(findings)} sanity check failures; first: {findings[0]}", findings)
    bad = {i for i, _, _ in problems}
    events = [e for i, e in enumerate(c.events) if i not in bad]
    # fixed summation order keeps float results independent of input order
    return sorted(events, key=canonical_key), len(bad)


def _finish(arr: np.ndarray, dtype: str) -> np.ndarray:
    if dtype == "i64":
        rounded = np.rint(arr)
        if not np.array_equal(rounded, arr):
            raise ValidationError("i64 output requested but cells are not integral")
        return rounded.astype(np.int64)
    return arr


def build_count_matrix(c, m: FeatureMapping, drop_invalid: bool = False, dtype: str = "f64") -> DenseTensor:
    """(patients x codes) sums of event weights; rows follow sorted patient id."""
    events, dropped = _valid_events(c, m, drop_invalid)
    patients = sorted(_subject_ids(c))
    row = {p: i for i, p in enumerate(patients)}
    arr = np.zeros((len(patients), m.n_codes), dtype=np.float64)
    for e in events:
        arr[row[e.patient_id], m.code_index[m.code_of(e)]] += e.weight
    return DenseTensor(arr.shape, dtype, _finish(arr, dtype), patients, dropped)


def build_event_tensor(c, m: FeatureMapping, drop_invalid: bool = False, dtype: str = "f64",
                       duration_weighted: bool = False) -> DenseTensor:
    """(patients x buckets x codes).

    A punctual event adds its weight to its bucket. A continuous event adds
    1.0 to every bucket it overlaps, or with ``duration_weighted`` spreads its
    weight over buckets in proportion to the days covered.
    """
    events, dropped = _valid_events(c, m, drop_invalid)
    patients = sorted(_subject_ids(c))
    row = {p: i for i, p in enumerate(patients)}
    nb, bd = m.n_buckets, m.bucket_days
    ws = m.window[0]
    arr = np.zeros((len(patients), nb, m.n_codes), dtype=np.float64)
    for e in events:
        r, k = row[e.patient_id], m.code_index[m.code_of(e)]
        s = (e.start - ws).days
        if e.end is None:
            arr[r, s // bd, k] += e.weight
            continue
        t = (e.end - ws).days
        b0, b1 = s // bd, t // bd
        if not duration_weighted:
            arr[r, b0:b1 + 1, k] += 1.0
            continue
        total = t - s + 1
        for b in range(b0, b1 + 1):
            lo, hi = max(s, b * bd), min(t, (b + 1) * bd - 1)
            arr[r, b, k] += e.weight * (hi - lo + 1) / total
    return DenseTensor(arr.shape, dtype, _finish(arr, dtype), patients, dropped)


# --- binary format -----------------------------------------------------------------------------

def encode_tensor(t: DenseTensor) -> bytes:
    code, le = DTYPES[t.dtype]
    head = MAGIC + struct.pack("<BB", code, len(t.shape)) + struct.pack(f"<{len(t.shape)}Q", *t.shape)
    return head + np.asarray(t.data, dtype=le).tobytes()


def decode_tensor(buf: bytes) -> DenseTensor:
    if buf[:5] != MAGIC:
        raise ValidationError("not a SCLT1 tensor file")
    code, ndim = struct.unpack_from("<BB", buf, 5)
    if code not in CODE_DTYPES:
        raise ValidationError(f"unknown tensor dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 7)
    dtype = CODE_DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64))
    off = 7 + 8 * ndim
    le = DTYPES[dtype][1]
    if len(buf) - off != n * 8:
        raise ValidationError("tensor payload length does not match its dims")
    data = np.frombuffer(buf, dtype=le, count=n, offset=off).astype(NATIVE[dtype])
    return DenseTensor(dims, dtype, data)


def write_tensor(t: DenseTensor, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> DenseTensor:
    return decode_tensor(Path(path).read_bytes())


def sidecar_text(m: FeatureMapping, patients) -> str:
    lines = [f"bucket_days\t{m.bucket_days}", f"window\t{format_ts(m.window[0])}\t{format_ts(m.window[1])}"]
    lines += [f"code\t{code}\t{i}" for code, i in sorted(m.code_index.items(), key=lambda kv: kv[1])]
    lines += [f"patient\t{p}\t{i}" for i, p in enumerate(patients)]
    return "\n".join(lines) + "\n"


def export_features(c, m: FeatureMapping, out_dir, drop_invalid: bool = False,
                    duration_weighted: bool = False, prefix: Optional[str] = None) -> dict:
    """Write count matrix, event tensor and sidecar; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = build_count_matrix(c, m, drop_invalid)
    tensor = build_event_tensor(c, m, drop_invalid, duration_weighted=duration_weighted)
    stem = prefix or "features"
    paths = {"counts": out / f"{stem}.counts.sclt", "events": out / f"{stem}.events.sclt",
             "sidecar": out / f"{stem}.tsv"}
    write_tensor(counts, paths["counts"])
    write_tensor(tensor, paths["events"])
    paths["sidecar"].write_text(sidecar_text(m, counts.patients), encoding="utf-8")
    return {"paths": paths, "dropped": counts.dropped, "counts": counts, "events": tensor}

