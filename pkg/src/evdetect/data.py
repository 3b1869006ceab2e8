"""Smart-meter data handling: CSV ingestion with gap filling, z-score
normalization, sliding-window construction and a labeled synthetic household
generator for experiments without access to real feeder data.

CSV schema: header ``timestamp,power_kw`` with an optional ``label`` column;
timestamps are ISO-8601 at minute resolution and must be strictly increasing.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .memory import Reading

MINUTE = timedelta(minutes=1)


class CsvFormatError(ValueError):
    """Malformed meter CSV; message carries the offending line number."""


class NormalizationWarning(UserWarning):
    pass


@dataclass
class SeriesStats:
    """Mean/std (population) of a training series, used for z-scoring."""

    mean: float
    std: float
    count: int


@dataclass
class MeterSeries:
    """Columnar meter series: minute timestamps, powers, fill flags, labels.

    `segments` are (start, end) index ranges of contiguous data; a new segment
    starts wherever a gap was too long to forward-fill.
    """

    timestamps: list[datetime]
    powers: np.ndarray
    filled: np.ndarray
    labels: np.ndarray | None = None
    segments: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.timestamps)

    def iter_readings(self):
        for t, p, f in zip(self.timestamps, self.powers, self.filled):
            yield Reading(t, float(p), bool(f))


def _parse_timestamp(text: str, lineno: int) -> datetime:
    try:
        return datetime.fromisoformat(text)
    except ValueError as exc:
        raise CsvFormatError(f"line {lineno}: bad timestamp {text!r}") from exc


def read_meter_csv(source, max_fill_minutes: int = 60) -> MeterSeries:
    """Parse a meter CSV, forward-filling gaps up to `max_fill_minutes`.

    Longer gaps close the current segment and open a new one. Unsorted rows
    and malformed fields raise CsvFormatError with the line number.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        fh = open(source, "r", encoding="utf-8")
        close = True
    else:
        fh, close = source, False
    try:
        header = fh.readline().strip()
        cols = header.split(",")
        if cols[:2] != ["timestamp", "power_kw"] or (len(cols) == 3 and cols[2] != "label") or len(cols) > 3:
            raise CsvFormatError(f"line 1: expected header 'timestamp,power_kw[,label]', got {header!r}")
        has_label = len(cols) == 3

        timestamps: list[datetime] = []
        powers: list[float] = []
        filled: list[bool] = []
        labels: list[int] = []
        segments: list[tuple[int, int]] = []
        seg_start = 0

        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise CsvFormatError(f"line {lineno}: expected {len(cols)} fields, got {len(parts)}")
            t = _parse_timestamp(parts[0], lineno)
            try:
                p = float(parts[1])
            except ValueError as exc:
                raise CsvFormatError(f"line {lineno}: bad power {parts[1]!r}") from exc
            if not math.isfinite(p):
                raise CsvFormatError(f"line {lineno}: non-finite power")
            lab = 0
            if has_label:
                if parts[2] not in ("0", "1"):
                    raise CsvFormatError(f"line {lineno}: label must be 0 or 1, got {parts[2]!r}")
                lab = int(parts[2])

            if timestamps:
                delta = t - timestamps[-1]
                if delta <= timedelta(0):
                    raise CsvFormatError(f"line {lineno}: timestamps not strictly increasing")
                gap_s = delta.total_seconds()
                if gap_s % 60 != 0:
                    raise CsvFormatError(f"line {lineno}: timestamps must stay on the minute grid")
                missing = int(gap_s // 60) - 1
                if 0 < missing <= max_fill_minutes:
                    for j in range(1, missing + 1):
                        timestamps.append(timestamps[-1] + MINUTE)
                        powers.append(powers[-1])
                        filled.append(True)
                        if has_label:
                            labels.append(labels[-1])
                elif missing > max_fill_minutes:
                    segments.append((seg_start, len(timestamps)))
                    seg_start = len(timestamps)

            timestamps.append(t)
            powers.append(p)
            filled.append(False)
            if has_label:
                labels.append(lab)

        if not timestamps:
            raise CsvFormatError("no data rows")
        segments.append((seg_start, len(timestamps)))
        return MeterSeries(
            timestamps=timestamps,
            powers=np.asarray(powers, dtype=np.float64),
            filled=np.asarray(filled, dtype=bool),
            labels=np.asarray(labels, dtype=np.int64) if has_label else None,
            segments=segments,
        )
    finally:
        if close:
            fh.close()


def write_meter_csv(path, series: MeterSeries) -> None:
    """Write a MeterSeries back out; lossless at 9 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_meter_csv(series))


def format_meter_csv(series: MeterSeries) -> str:
    buf = io.StringIO()
    has_label = series.labels is not None
    buf.write("timestamp,power_kw,label\n" if has_label else "timestamp,power_kw\n")
    for i, (t, p) in enumerate(zip(series.timestamps, series.powers)):
        if has_label:
            buf.write(f"{t.isoformat()},{p:.9g},{int(series.labels[i])}\n")
        else:
            buf.write(f"{t.isoformat()},{p:.9g}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def fit_stats(values) -> SeriesStats:
    """Population mean/std of a training series; std falls back to 1 when zero."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot fit statistics on an empty series")
    mean = float(x.mean())
    std = float(x.std())
    if std <= 0.0:
        warnings.warn("constant series: falling back to std=1", NormalizationWarning, stacklevel=2)
        std = 1.0
    return SeriesStats(mean=mean, std=std, count=int(x.size))


def normalize(values, stats: SeriesStats) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


def denormalize(values, stats: SeriesStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# Sliding windows
# ---------------------------------------------------------------------------


@dataclass
class WindowBatch:
    """Paired context/target windows; row i of gm_windows immediately precedes
    row i of lm_windows in the source series."""

    lm_windows: np.ndarray
    gm_windows: np.ndarray

    def __len__(self) -> int:
        return self.lm_windows.shape[0]


def sliding_windows(values, lm: int, gm: int, stride: int = 1) -> WindowBatch:
    """All (global, local) window pairs at the given stride."""
    x = np.asarray(values, dtype=np.float64)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    span = lm + gm
    if x.size < span:
        raise ValueError(f"series of {x.size} too short for window span {span}")
    count = (x.size - span) // stride + 1
    starts = np.arange(count) * stride
    gm_win = np.stack([x[s : s + gm] for s in starts])
    lm_win = np.stack([x[s + gm : s + span] for s in starts])
    return WindowBatch(lm_windows=lm_win, gm_windows=gm_win)


# ---------------------------------------------------------------------------
# Synthetic household
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaseProfile:
    """Smooth double-peak daily load shape plus Gaussian noise (all kW)."""

    base_kw: float = 0.4
    morning_kw: float = 0.6
    evening_kw: float = 1.0
    morning_hour: float = 7.5
    evening_hour: float = 19.0
    width_hours: float = 1.5
    noise_kw: float = 0.05


@dataclass(frozen=True)
class SynthConfig:
    days: int = 7
    base_profile: BaseProfile = BaseProfile()
    ev_power: float = 3.3
    session_rate: float = 1.0 / 1.5  # expected charging sessions per day
    duration_minutes: tuple[int, int] = (60, 240)
    seed: int = 0
    start: datetime = datetime(2018, 1, 1)

    def __post_init__(self):
        if self.ev_power <= 0:
            raise ValueError("ev_power must be positive")
        if self.duration_minutes[0] < 15 or self.duration_minutes[0] > self.duration_minutes[1]:
            raise ValueError("durations must be >= 15 minutes and ordered")
        if self.session_rate < 0:
            raise ValueError("session_rate must be nonnegative")


def synth_household(cfg: SynthConfig) -> MeterSeries:
    """Generate a labeled synthetic meter series, deterministic per seed.

    Rectangular charging blocks of `ev_power` kW start at Poisson-arriving
    times (non-overlapping) with uniform durations; labels are 1 exactly
    during sessions.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.days * 1440
    minute_of_day = np.arange(n) % 1440.0
    hours = minute_of_day / 60.0
    prof = cfg.base_profile

    def bump(center: float, amp: float) -> np.ndarray:
        # wrap-around distance so the evening peak decays smoothly past midnight
        d = np.minimum(np.abs(hours - center), 24.0 - np.abs(hours - center))
        return amp * np.exp(-0.5 * (d / prof.width_hours) ** 2)

    power = prof.base_kw + bump(prof.morning_hour, prof.morning_kw) + bump(prof.evening_hour, prof.evening_kw)
    power = power + rng.normal(0.0, prof.noise_kw, size=n)

    labels = np.zeros(n, dtype=np.int64)
    if cfg.session_rate > 0:
        mean_gap = 1440.0 / cfg.session_rate
        t = 0
        while True:
            t += max(1, int(round(rng.exponential(mean_gap))))
            if t >= n:
                break
            dur = int(rng.integers(cfg.duration_minutes[0], cfg.duration_minutes[1] + 1))
            end = min(t + dur, n)
            labels[t:end] = 1
            power[t:end] += cfg.ev_power
            t = end

    power = np.maximum(power, 0.0)
    timestamps = [cfg.start + i * MINUTE for i in range(n)]
    return MeterSeries(
        timestamps=timestamps,
        powers=power,
        filled=np.zeros(n, dtype=bool),
        labels=labels,
        segments=[(0, n)],
    )


def non_ev_segments(series: MeterSeries, min_len: int = 1) -> list[tuple[int, int]]:
    """Contiguous index ranges that are inside a data segment and labeled non-EV."""
    out: list[tuple[int, int]] = []
    labels = series.labels
    for seg_start, seg_end in series.segments:
        if labels is None:
            if seg_end - seg_start >= min_len:
                out.append((seg_start, seg_end))
            continue
        i = seg_start
        while i < seg_end:
            if labels[i] == 0:
                j = i
                while j < seg_end and labels[j] == 0:
                    j += 1
                if j - i >= min_len:
                    out.append((i, j))
                i = j
            else:
                i += 1
    return out
