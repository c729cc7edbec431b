"""High-water-mark accounting for toolkit tensor buffers.

Every tensor that owns its backing buffer registers its size here at
construction and releases it when garbage collected. Phases (see
``fmpipe.metrics``) push a frame, and every allocation raises the peak of
all open frames, so nested phases each see their own high-water mark.

Counting is process-global and intentionally lock-free: the GIL keeps the
arithmetic consistent enough for benchmarking, and phase frames are only
pushed/popped by the thread that owns the phase.
"""

from __future__ import annotations


class AllocationTracker:
    __slots__ = ("live_bytes", "live_count", "total_allocs", "_frames")

    def __init__(self) -> None:
        self.live_bytes = 0
        self.live_count = 0
        self.total_allocs = 0
        self._frames: list[list[int]] = []

    def add(self, nbytes: int) -> None:
        self.live_bytes += nbytes
        self.live_count += 1
        self.total_allocs += 1
        live = self.live_bytes
        for frame in self._frames:
            if live > frame[0]:
                frame[0] = live

    def release(self, nbytes: int) -> None:
        self.live_bytes -= nbytes
        self.live_count -= 1

    def push_frame(self) -> list[int]:
        """Open a watermark frame; its peak starts at the current live bytes."""
        frame = [self.live_bytes]
        self._frames.append(frame)
        return frame

    def pop_frame(self, frame: list[int]) -> int:
        """Close a frame and return the peak live bytes observed inside it."""
        self._frames.remove(frame)
        return frame[0]


tracker = AllocationTracker()
