"""Ragged longitudinal data and its long-format CSV representation."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataParseError, EmptySubjectError

HEADER = ("subject", "time", "value")


@dataclass(frozen=True)
class LongitudinalDataset:
    """Observations ``(t_ij, y_ij)`` for ``d`` subjects.

    Subjects keep the order in which they were supplied. ``times[i]`` and
    ``values[i]`` are 1-D float arrays of equal length ``n_i``.
    """

    subjects: tuple
    times: tuple
    values: tuple

    def __post_init__(self):
        if not (len(self.subjects) == len(self.times) == len(self.values)):
            raise ValueError("subjects, times and values must have equal length")
        for i, (t, y) in enumerate(zip(self.times, self.values)):
            if len(t) == 0:
                raise EmptySubjectError(f"subject {self.subjects[i]!r} has no observations")
            if len(t) != len(y):
                raise ValueError(f"subject {self.subjects[i]!r}: times and values differ in length")

    @classmethod
    def from_arrays(cls, times: Sequence, values: Sequence, subjects: Sequence | None = None):
        times = tuple(np.asarray(t, dtype=float).ravel() for t in times)
        values = tuple(np.asarray(y, dtype=float).ravel() for y in values)
        if subjects is None:
            subjects = tuple(str(i) for i in range(len(times)))
        return cls(tuple(str(s) for s in subjects), times, values)

    @classmethod
    def from_long(cls, subject: Iterable, time: Iterable, value: Iterable):
        """Group long-format columns by subject, keeping first-appearance order."""
        groups: dict[str, tuple[list, list]] = {}
        for s, t, y in zip(subject, time, value):
            ts, ys = groups.setdefault(str(s), ([], []))
            ts.append(float(t))
            ys.append(float(y))
        return cls.from_arrays(
            [g[0] for g in groups.values()], [g[1] for g in groups.values()], list(groups)
        )

    @property
    def d(self) -> int:
        return len(self.subjects)

    @property
    def n_obs(self) -> np.ndarray:
        return np.array([len(t) for t in self.times])

    @property
    def n_total(self) -> int:
        return int(self.n_obs.sum())

    def pooled_times(self) -> np.ndarray:
        return np.concatenate(self.times)

    def pooled_values(self) -> np.ndarray:
        return np.concatenate(self.values)

    @property
    def t_range(self) -> tuple[float, float]:
        t = self.pooled_times()
        return float(t.min()), float(t.max())

    def fingerprint(self) -> str:
        """SHA-256 over the exact bit patterns of every observation."""
        h = hashlib.sha256()
        for s, t, y in zip(self.subjects, self.times, self.values):
            h.update(s.encode())
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(y, dtype="<f8").tobytes())
        return h.hexdigest()

    def padded(self):
        """Return ``(T, Y, mask)`` arrays of shape ``(d, n_max)``; padding is zero."""
        n_max = int(self.n_obs.max())
        T = np.zeros((self.d, n_max))
        Y = np.zeros((self.d, n_max))
        mask = np.zeros((self.d, n_max))
        for i, (t, y) in enumerate(zip(self.times, self.values)):
            T[i, : len(t)] = t
            Y[i, : len(y)] = y
            mask[i, : len(t)] = 1.0
        return T, Y, mask

    def subset(self, idx: Sequence[int]) -> "LongitudinalDataset":
        return LongitudinalDataset(
            tuple(self.subjects[i] for i in idx),
            tuple(self.times[i] for i in idx),
            tuple(self.values[i] for i in idx),
        )

    def shifted(self, c: float) -> "LongitudinalDataset":
        return LongitudinalDataset(self.subjects, self.times, tuple(y + c for y in self.values))


def format_float(x: float) -> str:
    """Shortest decimal string that round-trips to the same float64."""
    return repr(float(x))


def read_csv(path: str | os.PathLike) -> LongitudinalDataset:
    """Parse a long-format ``subject,time,value`` CSV file.

    Raises
    ------
    DataParseError
        On an empty file, a wrong header, a short row, a non-numeric cell or
        a non-finite number. The error carries the offending line number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    return parse_csv(text)


def parse_csv(text: str) -> LongitudinalDataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataParseError("empty input; expected header 'subject,time,value'", line=1) from None
    if tuple(h.strip() for h in header) != HEADER:
        raise DataParseError(f"bad header {','.join(header)!r}; expected 'subject,time,value'", line=1)
    subj, times, vals = [], [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataParseError(f"expected 3 fields, found {len(row)}", line=line)
        s = row[0].strip()
        if not s:
            raise DataParseError("empty subject label", line=line)
        try:
            t = float(row[1])
            y = float(row[2])
        except ValueError:
            raise DataParseError(f"non-numeric cell in {row!r}", line=line) from None
        if not (math.isfinite(t) and math.isfinite(y)):
            raise DataParseError(f"non-finite value in {row!r}", line=line)
        subj.append(s)
        times.append(t)
        vals.append(y)
    if not subj:
        raise DataParseError("no data rows", line=reader.line_num)
    return LongitudinalDataset.from_long(subj, times, vals)


def to_csv_text(data: LongitudinalDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for s, t, y in zip(data.subjects, data.times, data.values):
        for tj, yj in zip(t, y):
            w.writerow([s, format_float(tj), format_float(yj)])
    return buf.getvalue()


def write_csv(data: LongitudinalDataset, path: str | os.PathLike) -> None:
    atomic_write(path, to_csv_text(data))


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to a temporary sibling file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
