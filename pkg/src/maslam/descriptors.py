"""Frame descriptors for loop detection: a deterministic mean-centered
grayscale thumbnail behind the same similarity-search interface a learned
extractor would use, plus the server-side descriptor store.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LoopConfig
from .world import LUMA_WEIGHTS, Frame


def area_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-average resampling (handles fractional cell boundaries)."""

    def resample_axis(a: np.ndarray, out_n: int) -> np.ndarray:
        n = a.shape[0]
        # antiderivative of the piecewise-constant signal along axis 0
        cums = np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)])

        def integral(x: float):
            i = min(int(np.floor(x)), n)
            if i >= n:
                return cums[n]
            return cums[i] + (x - i) * a[i]

        bounds = np.linspace(0.0, n, out_n + 1)
        out = np.empty((out_n,) + a.shape[1:])
        for k in range(out_n):
            lo, hi = bounds[k], bounds[k + 1]
            out[k] = (integral(hi) - integral(lo)) / (hi - lo)
        return out

    tmp = resample_axis(img, out_h)
    return resample_axis(tmp.swapaxes(0, 1), out_w).swapaxes(0, 1)


@dataclass(frozen=True)
class FrameDescriptor:
    vector: np.ndarray
    agent_id: int
    submap_seq: int
    frame_index: int


def extract_descriptor(frame: Frame, agent_id: int = 0, submap_seq: int = 0,
                       size: int = 32) -> FrameDescriptor:
    """Grayscale thumbnail, mean-subtracted, L2-normalized, flattened."""
    gray = frame.color @ LUMA_WEIGHTS
    thumb = area_resize(gray, size, size).ravel()
    thumb = thumb - thumb.mean()
    norm = float(np.linalg.norm(thumb))
    if norm < 1e-12:
        thumb = np.zeros(size * size)
        thumb[0] = 1.0   # constant image: fixed unit descriptor
    else:
        thumb = thumb / norm
    return FrameDescriptor(thumb, agent_id, submap_seq, frame.index)


@dataclass(frozen=True)
class LoopCandidate:
    query: FrameDescriptor
    match: FrameDescriptor
    distance: float

    @property
    def pair(self) -> tuple:
        return ((self.query.agent_id, self.query.submap_seq),
                (self.match.agent_id, self.match.submap_seq))


@dataclass
class DescriptorStore:
    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def detect_loops(store: DescriptorStore, query: FrameDescriptor,
                 cfg: LoopConfig) -> list[LoopCandidate]:
    """All stored descriptors within theta_feature of the query; same-agent
    matches must also be separated by more than theta_time frames. The query
    is inserted after the search."""
    candidates = []
    for entry in store.entries:
        if (entry.agent_id, entry.submap_seq) == (query.agent_id, query.submap_seq):
            continue
        dist = float(np.linalg.norm(entry.vector - query.vector))
        if dist >= cfg.theta_feature:
            continue
        if entry.agent_id == query.agent_id and \
                abs(query.frame_index - entry.frame_index) <= cfg.theta_time:
            continue
        candidates.append(LoopCandidate(query, entry, dist))
    store.entries.append(query)
    return candidates
