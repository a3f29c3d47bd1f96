"""
Session logs, feature tensors and cohort validation.

This module owns every on-disk format of the package:

- session logs: JSON Lines, one header record followed by viewport samples
- ATNT tensors: little-endian binary ("ATNT", u32 version, u8 dtype, u8 ndim,
  ndim x u32 dims, row-major payload)
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import pandas as pd

from .errors import (
    BadCoordinate,
    BadMagic,
    DimMismatch,
    EmptySession,
    GradeOutOfDomain,
    MalformedRecord,
    NonFiniteValue,
    NonMonotonicTime,
    UnsupportedVersion,
)

EXPERTISE_LEVELS = ("resident", "general", "specialist")
DEFAULT_GRADE_DOMAIN = (3, 4, 5)
DEFAULT_FEATURE_DIM = 384
MAX_T_MS = 2 ** 53

ATNT_MAGIC = b"ATNT"
ATNT_VERSION = 1
# dtype code -> little-endian numpy dtype; code 2 is used by parameter checkpoints
ATNT_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


# =========================================================
# 1. Domain types
# =========================================================

@dataclass(frozen=True)
class ViewportSample:
    """One viewport state: time, normalized bounding box and magnification."""

    t_ms: int
    x0: float
    y0: float
    x1: float
    y1: float
    mag: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) and 0.0 <= c <= 1.0 for c in coords):
            raise BadCoordinate(f"bbox outside [0,1]: {coords}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise BadCoordinate(f"inverted or empty bbox: {coords}")
        if not (math.isfinite(self.mag) and self.mag > 0):
            raise MalformedRecord(f"magnification must be positive: {self.mag}")
        if self.t_ms < 0:
            raise MalformedRecord(f"negative t_ms: {self.t_ms}")

    @property
    def bbox(self):
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def center(self):
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)


@dataclass(frozen=True)
class GradePair:
    primary: int
    secondary: int
    confidence: Optional[float] = None

    def check_domain(self, domain=DEFAULT_GRADE_DOMAIN):
        for g in (self.primary, self.secondary):
            if g not in domain:
                raise GradeOutOfDomain(f"Gleason pattern {g} not in domain {tuple(domain)}")
        return self


@dataclass(frozen=True)
class Session:
    """One pathologist's reading of one slide."""

    session_id: str
    pathologist_id: str
    wsi_id: str
    expertise: str
    samples: tuple
    grade: Optional[GradePair] = None

    def __post_init__(self):
        if self.expertise not in EXPERTISE_LEVELS:
            raise MalformedRecord(f"Unsupported expertise: {self.expertise}")
        if len(self.samples) < 2:
            raise EmptySession(
                f"session {self.session_id} has {len(self.samples)} samples, need at least 2"
            )
        times = [s.t_ms for s in self.samples]
        for prev, cur in zip(times, times[1:]):
            if cur <= prev:
                raise NonMonotonicTime(
                    f"session {self.session_id}: t_ms {cur} after {prev}"
                )

    @property
    def duration_ms(self):
        return self.samples[-1].t_ms - self.samples[0].t_ms

    @cached_property
    def arrays(self):
        """(t_ms[n], bbox[n,4], mag[n]) as float64 arrays."""
        t = np.array([s.t_ms for s in self.samples], dtype=np.float64)
        bbox = np.array([s.bbox for s in self.samples], dtype=np.float64)
        mag = np.array([s.mag for s in self.samples], dtype=np.float64)
        for a in (t, bbox, mag):
            a.flags.writeable = False
        return t, bbox, mag


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Precomputed per-patch embeddings, shape (grid_h, grid_w, dim)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimMismatch(f"feature grid must be 3-d and non-empty, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValue("feature grid contains non-finite values")
        self.data.flags.writeable = False

    @property
    def grid_h(self):
        return self.data.shape[0]

    @property
    def grid_w(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class CohortSummary:
    n_sessions: int
    n_pathologists: int
    n_wsis: int
    sessions_per_expertise: dict
    pathologists_per_expertise: dict
    mean_duration_ms: float
    mean_readers_per_wsi: float
    readers: pd.DataFrame = field(repr=False, compare=False)
    flagged: tuple = ()


# =========================================================
# 2. Session log (JSON Lines)
# =========================================================

def _field(rec, key, line_no):
    if key not in rec:
        raise MalformedRecord(f"line {line_no}: missing field '{key}'")
    return rec[key]


def _number(rec, key, line_no):
    v = _field(rec, key, line_no)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise MalformedRecord(f"line {line_no}: field '{key}' is not a number: {v!r}")
    try:
        v = float(v)
    except OverflowError:
        raise MalformedRecord(f"line {line_no}: field '{key}' is out of range")
    if not math.isfinite(v):
        raise MalformedRecord(f"line {line_no}: field '{key}' is not finite")
    return v


def _optional_int(rec, key, line_no):
    v = rec.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise MalformedRecord(f"line {line_no}: field '{key}' must be an integer or null")
    return v


def _parse_header(rec, grade_domain):
    for key in ("session_id", "pathologist_id", "wsi_id"):
        if not isinstance(_field(rec, key, 1), str):
            raise MalformedRecord(f"line 1: field '{key}' must be a string")

    expertise = _field(rec, "expertise", 1)
    if expertise not in EXPERTISE_LEVELS:
        raise MalformedRecord(f"line 1: unsupported expertise {expertise!r}")

    primary = _optional_int(rec, "primary_grade", 1)
    secondary = _optional_int(rec, "secondary_grade", 1)
    confidence = rec.get("confidence")
    if confidence is not None:
        confidence = _number(rec, "confidence", 1)
        if not 0.0 <= confidence <= 1.0:
            raise MalformedRecord(f"line 1: confidence outside [0,1]: {confidence}")

    if (primary is None) != (secondary is None):
        raise MalformedRecord("line 1: primary and secondary grade must both be set or both null")

    grade = None
    if primary is not None:
        grade = GradePair(primary, secondary, confidence).check_domain(grade_domain)

    return rec["session_id"], rec["pathologist_id"], rec["wsi_id"], expertise, grade


def parse_session_log(data, grade_domain=DEFAULT_GRADE_DOMAIN):
    """
    Parse a JSON Lines session log into a validated Session.

    Parameters
    ----------
    data : bytes
        UTF-8 encoded log; the first line is the header record.
    grade_domain : tuple of int
        Allowed Gleason patterns.

    Returns
    -------
    Session
    """

    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedRecord(f"session log is not valid UTF-8: {e}")

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MalformedRecord("empty session log, header missing")

    records = []
    for i, line in enumerate(lines, 1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedRecord(f"line {i}: invalid JSON ({e.msg})")
        except (ValueError, RecursionError) as e:
            raise MalformedRecord(f"line {i}: unreadable JSON ({type(e).__name__})")
        if not isinstance(rec, dict):
            raise MalformedRecord(f"line {i}: record is not an object")
        records.append(rec)

    if records[0].get("type") != "header":
        raise MalformedRecord("line 1: first record must be the header")
    session_id, pathologist_id, wsi_id, expertise, grade = _parse_header(records[0], grade_domain)

    samples = []
    for i, rec in enumerate(records[1:], 2):
        if rec.get("type") != "sample":
            raise MalformedRecord(f"line {i}: expected a sample record, got type {rec.get('type')!r}")
        t = _field(rec, "t_ms", i)
        if isinstance(t, bool) or not isinstance(t, int) or not 0 <= t <= MAX_T_MS:
            raise MalformedRecord(f"line {i}: t_ms must be an integer in [0, 2**53]: {t!r}")
        if samples and t <= samples[-1].t_ms:
            raise NonMonotonicTime(f"line {i}: t_ms {t} not after {samples[-1].t_ms}")
        samples.append(ViewportSample(
            t_ms=t,
            x0=_number(rec, "x0", i),
            y0=_number(rec, "y0", i),
            x1=_number(rec, "x1", i),
            y1=_number(rec, "y1", i),
            mag=_number(rec, "mag", i),
        ))

    if not samples:
        raise EmptySession(f"session {session_id} has no samples")

    return Session(session_id, pathologist_id, wsi_id, expertise, tuple(samples), grade)


def dump_session_log(session):
    """Serialize a Session back to JSON Lines bytes (field-exact inverse of parse)."""

    grade = session.grade
    header = {
        "type": "header",
        "session_id": session.session_id,
        "pathologist_id": session.pathologist_id,
        "wsi_id": session.wsi_id,
        "expertise": session.expertise,
        "primary_grade": grade.primary if grade else None,
        "secondary_grade": grade.secondary if grade else None,
        "confidence": grade.confidence if grade else None,
    }
    lines = [json.dumps(header)]
    for s in session.samples:
        lines.append(json.dumps({
            "type": "sample", "t_ms": s.t_ms,
            "x0": s.x0, "y0": s.y0, "x1": s.x1, "y1": s.y1, "mag": s.mag,
        }))
    return ("\n".join(lines) + "\n").encode("utf-8")


# =========================================================
# 3. ATNT tensors
# =========================================================

def encode_atnt(array):
    """Encode a float32 or float64 array as ATNT bytes."""

    array = np.asarray(array)
    codes = {(v.kind, v.itemsize): k for k, v in ATNT_DTYPES.items()}
    key = (array.dtype.kind, array.dtype.itemsize)
    if key not in codes:
        raise UnsupportedVersion(f"ATNT cannot store dtype {array.dtype}")
    dtype = ATNT_DTYPES[codes[key]]
    if 0 in array.shape:
        raise DimMismatch(f"ATNT dims must be positive, got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NonFiniteValue("refusing to write non-finite values")

    head = ATNT_MAGIC + struct.pack("<IBB", ATNT_VERSION, codes[key], array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_atnt(data):
    """Decode ATNT bytes into a read-only numpy array."""

    if len(data) < 10 or data[:4] != ATNT_MAGIC:
        raise BadMagic("missing ATNT magic bytes")
    version, dtype_code, ndim = struct.unpack_from("<IBB", data, 4)
    if version != ATNT_VERSION:
        raise UnsupportedVersion(f"Unsupported ATNT version: {version}")
    if dtype_code not in ATNT_DTYPES:
        raise UnsupportedVersion(f"Unsupported ATNT dtype code: {dtype_code}")

    offset = 10 + 4 * ndim
    if len(data) < offset:
        raise DimMismatch("ATNT header truncated")
    dims = struct.unpack_from(f"<{ndim}I", data, 10)
    if 0 in dims:
        raise DimMismatch(f"ATNT dims must be positive, got {dims}")

    dtype = ATNT_DTYPES[dtype_code]
    expected = math.prod(dims) * dtype.itemsize
    if len(data) - offset != expected:
        raise DimMismatch(
            f"declared dims {dims} need {expected} payload bytes, found {len(data) - offset}"
        )

    array = np.frombuffer(data, dtype=dtype, offset=offset).reshape(dims)
    if not np.all(np.isfinite(array)):
        raise NonFiniteValue("ATNT payload contains non-finite values")
    return array


def load_feature_tensor(data):
    array = decode_atnt(data)
    if array.ndim != 3:
        raise DimMismatch(f"feature tensor must have 3 dims, found {array.ndim}")
    return FeatureGrid(array)


def save_feature_tensor(grid):
    return encode_atnt(grid.data)


# =========================================================
# 4. Cohort validation
# =========================================================

def validate_cohort(sessions):
    """
    Summarize a cohort: counts per expertise and per WSI, mean viewing time,
    and the (wsi, expertise) cells with a single reader (unusable for
    agreement analysis).
    """

    if not sessions:
        return CohortSummary(
            n_sessions=0, n_pathologists=0, n_wsis=0,
            sessions_per_expertise={e: 0 for e in EXPERTISE_LEVELS},
            pathologists_per_expertise={e: 0 for e in EXPERTISE_LEVELS},
            mean_duration_ms=0.0, mean_readers_per_wsi=0.0,
            readers=pd.DataFrame(columns=["wsi_id", *EXPERTISE_LEVELS]),
        )

    df = pd.DataFrame({
        "wsi_id": [s.wsi_id for s in sessions],
        "pathologist_id": [s.pathologist_id for s in sessions],
        "expertise": [s.expertise for s in sessions],
        "duration_ms": [s.duration_ms for s in sessions],
    })

    per_exp = df["expertise"].value_counts()
    per_exp_path = df.groupby("expertise")["pathologist_id"].nunique()

    readers = (
        df.groupby(["wsi_id", "expertise"])["pathologist_id"].nunique()
        .unstack(fill_value=0)
        .reindex(columns=list(EXPERTISE_LEVELS), fill_value=0)
        .sort_index()
        .reset_index()
    )
    readers.columns.name = None

    flagged = []
    for _, row in readers.iterrows():
        for e in EXPERTISE_LEVELS:
            if row[e] == 1:
                flagged.append((row["wsi_id"], e))
    if flagged:
        logging.info(f"{len(flagged)} (WSI, expertise) cells have a single reader")

    return CohortSummary(
        n_sessions=len(df),
        n_pathologists=df["pathologist_id"].nunique(),
        n_wsis=df["wsi_id"].nunique(),
        sessions_per_expertise={e: int(per_exp.get(e, 0)) for e in EXPERTISE_LEVELS},
        pathologists_per_expertise={e: int(per_exp_path.get(e, 0)) for e in EXPERTISE_LEVELS},
        mean_duration_ms=float(df["duration_ms"].mean()),
        mean_readers_per_wsi=float(df.groupby("wsi_id")["pathologist_id"].nunique().mean()),
        readers=readers,
        flagged=tuple(flagged),
    )
