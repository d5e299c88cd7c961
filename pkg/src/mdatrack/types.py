"""Domain types and index algebra for the association engine.

Index convention: the math layer is 1-based (candidate ``i_k`` runs over
``1..I_k``, flat pair index ``j`` over ``1..I_prev*I_next``).  Arrays are
0-based.  ``to_storage_index`` / ``to_math_index`` below are the single
adapter between the two; every conversion in the package goes through them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputValidationError, RangeError

#: Length of the appearance descriptor carried by every candidate.  A fixed
#: length keeps the affinity provider interface uniform; 24 corresponds to an
#: 8-bin-per-channel color histogram over the candidate patch.
DEFAULT_DESCRIPTOR_LENGTH = 24


def to_storage_index(i: int) -> int:
    """1-based math index -> 0-based array index."""
    return i - 1


def to_math_index(i: int) -> int:
    """0-based array index -> 1-based math index."""
    return i + 1


# ---------------------------------------------------------------------------
# Box geometry helpers (boxes are (left, top, width, height) in pixels)
# ---------------------------------------------------------------------------

def box_center(box: tuple[float, float, float, float]) -> tuple[float, float]:
    left, top, w, h = box
    return (left + w / 2.0, top + h / 2.0)


def box_diagonal(box: tuple[float, float, float, float]) -> float:
    return math.hypot(box[2], box[3])


def box_iou(a: tuple[float, float, float, float],
            b: tuple[float, float, float, float]) -> float:
    """Intersection over union of two (l, t, w, h) boxes."""
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix0 = max(ax0, bx0)
    iy0 = max(ay0, by0)
    ix1 = min(ax0 + aw, bx0 + bw)
    iy1 = min(ay0 + ah, by0 + bh)
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_visible_fraction(box: tuple[float, float, float, float],
                         frame_box: tuple[float, float, float, float]) -> float:
    """Fraction of ``box`` that lies inside ``frame_box``.

    Used for the exit test: a true IoU against the whole frame is near zero
    for any normally sized target, so the exit rule compares the box's
    in-frame overlap against its own area instead.
    """
    x0, y0, w, h = box
    area = w * h
    if area <= 0.0:
        return 0.0
    fx0, fy0, fw, fh = frame_box
    ix0 = max(x0, fx0)
    iy0 = max(y0, fy0)
    ix1 = min(x0 + w, fx0 + fw)
    iy1 = min(y0 + h, fy0 + fh)
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    return (iw * ih) / area


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Candidate:
    """A detection or virtual hypothesis on one frame.

    ``center`` is ``None`` for a virtual candidate that has not been resolved
    yet; reading it in that state is an error (use :func:`require_center`).
    Instances are immutable after construction and safe to share.
    """

    frame_index: int
    center: tuple[float, float] | None
    box: tuple[float, float, float, float]
    score: float
    is_virtual: bool = False
    appearance: np.ndarray = field(
        default_factory=lambda: np.zeros(DEFAULT_DESCRIPTOR_LENGTH))
    #: set for pseudo-candidates injected from a coasting track's prediction
    from_prediction: bool = False

    def __post_init__(self):
        if self.frame_index < 0:
            raise RangeError(f"frame_index must be >= 0, got {self.frame_index}")
        if not self.is_virtual:
            if self.box[2] <= 0 or self.box[3] <= 0:
                raise InputValidationError(
                    f"real candidate box must have positive size, got {self.box}")
            if self.center is None:
                raise InputValidationError("real candidate must carry a center")


def require_center(candidate: Candidate) -> tuple[float, float]:
    """Return the candidate's center, rejecting unresolved virtuals."""
    if candidate.center is None:
        raise InputValidationError(
            "virtual candidate center read before resolution "
            f"(frame {candidate.frame_index})")
    return candidate.center


@dataclass(frozen=True)
class AssociationBatch:
    """A window of K+1 frames processed as one solver instance."""

    K: int
    frames: tuple[int, ...]
    candidates: tuple[tuple[Candidate, ...], ...]

    def __post_init__(self):
        if self.K < 2:
            raise RangeError(f"K must be >= 2, got {self.K}")
        if len(self.frames) != self.K + 1:
            raise ContractError(
                f"expected {self.K + 1} frames, got {len(self.frames)}")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ContractError(f"frames must be strictly increasing: {self.frames}")
        if len(self.candidates) != self.K + 1:
            raise ContractError("one candidate list per frame required")
        for pos, frame_cands in enumerate(self.candidates):
            if sum(1 for c in frame_cands if c.is_virtual) > 1:
                raise ContractError(
                    f"frame position {pos} holds more than one virtual candidate")

    @property
    def anchor_position(self) -> int:
        """Position of the anchor frame within the window (middle frame)."""
        return self.K // 2

    @property
    def anchor_frame(self) -> int:
        return self.frames[self.anchor_position]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.candidates)

    def pair_shapes(self) -> list[tuple[int, int]]:
        """(I_{k-1}, I_k) for each of the K frame pairs."""
        s = self.sizes
        return [(s[k - 1], s[k]) for k in range(1, self.K + 1)]


@dataclass(frozen=True)
class HypothesisTrajectory:
    """A (K+1)-tuple of 1-based candidate indices, one per frame."""

    indices: tuple[int, ...]
    affinity: float = 0.0


@dataclass(frozen=True)
class PairIndex:
    """A frame-pair index triple and its flattened form."""

    k: int
    i_prev: int
    i_next: int
    j: int

    @classmethod
    def from_pair(cls, k: int, i_prev: int, i_next: int, size_next: int) -> "PairIndex":
        return cls(k, i_prev, i_next, flatten_pair(i_prev, i_next, size_next))

    @classmethod
    def from_flat(cls, k: int, j: int, size_next: int,
                  size_prev: int | None = None) -> "PairIndex":
        i_prev, i_next = unflatten_pair(j, size_next, size_prev)
        return cls(k, i_prev, i_next, j)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def flatten_pair(i_prev: int, i_next: int, size_next: int) -> int:
    """Map the 1-based pair (i_prev, i_next) to its flat 1-based index.

    The flat index is (i_prev - 1) * size_next + i_next, which enumerates the
    grid row-major exactly once.
    """
    if i_prev < 1:
        raise RangeError(f"i_prev must be >= 1, got {i_prev}")
    if not 1 <= i_next <= size_next:
        raise RangeError(
            f"i_next must be in 1..{size_next}, got {i_next}")
    return (i_prev - 1) * size_next + i_next


def unflatten_pair(j: int, size_next: int,
                   size_prev: int | None = None) -> tuple[int, int]:
    """Inverse of :func:`flatten_pair`; all indices 1-based."""
    if size_next < 1:
        raise RangeError(f"size_next must be >= 1, got {size_next}")
    if j < 1:
        raise RangeError(f"flat index must be >= 1, got {j}")
    if size_prev is not None and j > size_prev * size_next:
        raise RangeError(
            f"flat index {j} out of range 1..{size_prev * size_next}")
    i_prev = (j - 1) // size_next + 1
    i_next = (j - 1) % size_next + 1
    return i_prev, i_next


def batch_windows(frame_count: int, K: int = 2, overlap: int = 2) -> list[list[int]]:
    """Sliding association windows of K+1 frames sharing ``overlap`` frames.

    With the default (K=2, overlap=2) consecutive windows advance one frame:
    [0,1,2], [1,2,3], ...  A sequence shorter than one window yields an empty
    schedule with a warning.
    """
    if K < 1:
        raise RangeError(f"K must be >= 1, got {K}")
    if not 0 <= overlap <= K:
        raise RangeError(f"overlap must be in 0..K, got {overlap}")
    if frame_count < K + 1:
        warnings.warn(
            f"sequence of {frame_count} frames is shorter than one window "
            f"of {K + 1}; empty schedule", stacklevel=2)
        return []
    step = (K + 1) - overlap
    windows = []
    start = 0
    while start + K <= frame_count - 1:
        windows.append(list(range(start, start + K + 1)))
        start += step
    return windows
