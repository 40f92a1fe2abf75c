"""Must-link / cannot-link supervision derived from track metadata.

Cannot-links come from temporal co-occurrence: two tracks whose frame
spans intersect must belong to different people.  Must-links are implicit
in track membership: any two frames of one track share an identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trackio import TrackSet


class ConstraintError(Exception):
    pass


@dataclass(frozen=True)
class CannotLinkMatrix:
    """Symmetric binary co-occurrence matrix over the tracks of one video."""

    bits: np.ndarray  # (M, M) uint8
    track_ids: tuple[int, ...]

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8)
        object.__setattr__(self, "bits", b)
        m = len(self.track_ids)
        if b.shape != (m, m):
            raise ConstraintError(f"bits shape {b.shape} != ({m}, {m})")
        if not np.array_equal(b, b.T):
            raise ConstraintError("cannot-link matrix must be symmetric")
        if np.any(np.diag(b)):
            raise ConstraintError("cannot-link matrix must have zero diagonal")

    @property
    def size(self) -> int:
        return len(self.track_ids)

    def partners(self, index: int) -> np.ndarray:
        """Indices (not track ids) of tracks cannot-linked with ``index``."""
        return np.flatnonzero(self.bits[index])

    def any_links(self) -> bool:
        return bool(self.bits.any())


@dataclass(frozen=True)
class ConstraintPair:
    """A labeled frame pair: y=1 must-link (same track), y=0 cannot-link."""

    track_a: int
    frame_idx_a: int
    track_b: int
    frame_idx_b: int
    y: int

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ConstraintError(f"y must be 0 or 1, got {self.y}")
        if self.y == 1 and self.track_a != self.track_b:
            raise ConstraintError("must-link pair drawn from two different tracks")
        if self.y == 1 and self.frame_idx_a == self.frame_idx_b:
            raise ConstraintError("must-link pair needs two distinct frames")


def derive_cannot_links(trackset: TrackSet) -> CannotLinkMatrix:
    """bits[a][b] = 1 iff the frame spans of tracks a and b intersect."""
    tracks = trackset.tracks
    starts = np.array([t.start_frame for t in tracks])
    ends = np.array([t.end_frame for t in tracks])
    overlap = (starts[:, None] <= ends[None, :]) & (starts[None, :] <= ends[:, None])
    np.fill_diagonal(overlap, False)
    return CannotLinkMatrix(
        bits=overlap.astype(np.uint8),
        track_ids=tuple(t.track_id for t in tracks),
    )


def sample_pairs(
    trackset: TrackSet,
    n_matrix: CannotLinkMatrix,
    rng: np.random.Generator,
    count_pos: int,
    count_neg: int,
) -> list[ConstraintPair]:
    """Sample labeled frame pairs for pairwise contrastive training.

    Positives are uniform over all within-track unordered frame pairs;
    negatives are uniform over all frame pairs of cannot-linked tracks.
    """
    tracks = trackset.tracks
    pairs: list[ConstraintPair] = []

    if count_pos > 0:
        weights = np.array([t.length * (t.length - 1) / 2 for t in tracks])
        total = weights.sum()
        if total == 0:
            raise ConstraintError("no must-link pairs available: all tracks length 1")
        probs = weights / total
        chosen = rng.choice(len(tracks), size=count_pos, p=probs)
        for ti in chosen:
            t = tracks[ti]
            i, j = rng.choice(t.length, size=2, replace=False)
            pairs.append(
                ConstraintPair(t.track_id, int(i), t.track_id, int(j), y=1)
            )

    if count_neg > 0:
        a_idx, b_idx = np.nonzero(np.triu(n_matrix.bits, k=1))
        if len(a_idx) == 0:
            raise ConstraintError("no cannot-links available")
        weights = np.array(
            [tracks[a].length * tracks[b].length for a, b in zip(a_idx, b_idx)],
            dtype=np.float64,
        )
        probs = weights / weights.sum()
        chosen = rng.choice(len(a_idx), size=count_neg, p=probs)
        for ci in chosen:
            ta, tb = tracks[a_idx[ci]], tracks[b_idx[ci]]
            i = int(rng.integers(ta.length))
            j = int(rng.integers(tb.length))
            pairs.append(ConstraintPair(ta.track_id, i, tb.track_id, j, y=0))

    return pairs
