"""Per-stream FIFO buffers: a short local window backed by a long global window.

New readings enter the local buffer; elements it evicts spill into the global
buffer, whose own evictions are discarded. Both windows are index-based, not
wall-clock-based, so timestamp gaps are tolerated (gap filling happens at
ingestion).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from datetime import datetime


class StreamOrderError(ValueError):
    """Raised when a reading arrives with a non-increasing timestamp."""


@dataclass(frozen=True)
class Reading:
    """One timestamped real-power sample (kW). `filled` marks gap-filled rows."""

    t: datetime
    power: float
    filled: bool = False


class StreamState:
    """FIFO local/global memory for one household stream.

    Invariants: the local buffer holds the newest `lm` readings, the global
    buffer the `gm` readings immediately before them; every global element is
    older than every local element.
    """

    def __init__(self, lm: int, gm: int):
        if lm < 1 or gm < 1:
            raise ValueError("window lengths must be positive")
        if lm >= gm:
            raise ValueError(f"local window must be shorter than global (got lm={lm}, gm={gm})")
        self.lm = lm
        self.gm = gm
        self.lm_buffer: deque[Reading] = deque()
        self.gm_buffer: deque[Reading] = deque()
        self.total_seen = 0

    def push(self, r: Reading) -> Reading | None:
        """Append a reading; returns the element spilled into the global buffer, if any."""
        if self.lm_buffer and r.t <= self.lm_buffer[-1].t:
            raise StreamOrderError(f"reading at {r.t} is not newer than {self.lm_buffer[-1].t}")
        self.lm_buffer.append(r)
        self.total_seen += 1
        spilled = None
        if len(self.lm_buffer) > self.lm:
            spilled = self.lm_buffer.popleft()
            self.gm_buffer.append(spilled)
            if len(self.gm_buffer) > self.gm:
                self.gm_buffer.popleft()
        return spilled

    def snapshot(self) -> tuple[list[Reading], list[Reading]] | None:
        """Both windows oldest-to-newest, or None while warmup is incomplete."""
        if self.total_seen < self.lm + self.gm:
            return None
        return list(self.lm_buffer), list(self.gm_buffer)
