"""Timestamp-window replay cache keyed by (sender, nonce)."""

from __future__ import annotations

import heapq
from typing import Hashable

WINDOW_S = 300


class ReplayCache:
    """Accepts each key at most once while its timestamp is inside the window.

    Entries older than ``now - window`` are evicted: anything that old is
    already refused as stale, so forgetting it cannot let a replay through.
    """

    def __init__(self, window: int = WINDOW_S):
        self.window = window
        self._seen: dict[Hashable, int] = {}
        self._expiry: list[tuple[int, int, Hashable]] = []
        self._counter = 0

    def __contains__(self, key: Hashable) -> bool:
        return key in self._seen

    def __len__(self) -> int:
        return len(self._seen)

    def check(self, key: Hashable, timestamp: int, now: int) -> str | None:
        """Return a rejection reason (``"stale"``/``"replay"``) or None."""
        if abs(now - timestamp) > self.window:
            return "stale"
        if key in self._seen:
            return "replay"
        return None

    def accept(self, key: Hashable, timestamp: int, now: int) -> str | None:
        reason = self.check(key, timestamp, now)
        if reason is None:
            self._seen[key] = timestamp
            self._counter += 1
            heapq.heappush(self._expiry, (timestamp, self._counter, key))
            self._evict(now)
        return reason

    def _evict(self, now: int) -> None:
        horizon = now - self.window
        while self._expiry and self._expiry[0][0] < horizon:
            ts, _, key = heapq.heappop(self._expiry)
            if self._seen.get(key) == ts:
                del self._seen[key]
