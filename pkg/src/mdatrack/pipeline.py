"""Online tracking loop: sliding association windows, per-anchor virtual
candidate resolution, the solver chain, and target management.

Tracking works on K=2 windows with two overlapping frames.  Each window
appends one virtual candidate to every frame (always the last slot).  The
two adjacent-frame virtuals are resolved per anchor to the location
maximizing a search score built from the anchor's motion prediction and
appearance-weighted attraction to nearby detections; the anchor-frame
virtual is a structural slot that absorbs candidates with no partner and
never carries geometry of its own.

Target management follows the assignment of each real anchor in the
anchor-to-last-frame pair: untracked anchors with good boxes start
trajectories, real partners update them (with the predicted box overriding
a disagreeing low-quality detection), and virtual partners either coast the
track on its prediction or, when the prediction leaves the frame or the
coast budget is exhausted, exit it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affinity import (
    AffinityProviderParams,
    ConnectionGateConfig,
    appearance_similarity,
    compute_affinity,
    generate_hypotheses,
)
from .errors import ContractError, InternalInvariantError
from .solver import (
    PartialNormMask,
    discretize,
    l1_normalize_forward,
    power_iteration_forward,
)
from .types import (
    AssociationBatch,
    Candidate,
    batch_windows,
    box_center,
    box_diagonal,
    box_iou,
    box_visible_fraction,
    require_center,
)

Box = tuple[float, float, float, float]

ACTIVE = "active"
COASTING = "coasting"
EXITED = "exited"


@dataclass(frozen=True)
class PipelineConfig:
    """Tracking-loop knobs; `alpha` scales virtual affinities down so a real
    candidate always beats its own prediction."""

    alpha: float = 0.8
    t_dif: float = 0.5
    t_exit: float = 0.3
    quality_threshold: float = 0.5
    max_coast_frames: int = 10
    frame_width: float = 640.0
    frame_height: float = 480.0
    power_iterations: int = 10
    norm_pairs: int = 10

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ContractError("alpha must lie strictly inside (0, 1)")
        if not 0.0 <= self.t_dif <= 1.0 or not 0.0 <= self.t_exit <= 1.0:
            raise ContractError("IoU thresholds must lie in [0, 1]")
        if self.max_coast_frames < 0:
            raise ContractError("max_coast_frames must be >= 0")

    @property
    def frame_box(self) -> Box:
        return (0.0, 0.0, self.frame_width, self.frame_height)


class GroundTruthQuality:
    """Box-quality estimator for synthetic runs: a box is good when it
    overlaps some ground-truth box of its frame at IoU >= 0.5."""

    def __init__(self, gt_tracks: dict[int, dict[int, Box]],
                 iou_threshold: float = 0.5):
        self.iou_threshold = iou_threshold
        self._per_frame: dict[int, list[Box]] = {}
        for traj in gt_tracks.values():
            for frame, box in traj.items():
                self._per_frame.setdefault(frame, []).append(box)

    def evaluate(self, candidate: Candidate) -> float:
        boxes = self._per_frame.get(candidate.frame_index, [])
        best = max((box_iou(candidate.box, b) for b in boxes), default=0.0)
        return 1.0 if best >= self.iou_threshold else 0.0


class ConfidenceQuality:
    """Box-quality estimator for file-based runs: the detector confidence
    squashed into [0, 1]."""

    def evaluate(self, candidate: Candidate) -> float:
        return min(max(candidate.score, 0.0), 1.0)


@dataclass
class TrackRecord:
    """One target trajectory with per-frame boxes and lifecycle status."""

    id: int
    boxes: dict[int, Box] = field(default_factory=dict)
    status: str = ACTIVE
    frames_coasting: int = 0
    descriptor: np.ndarray = field(default_factory=lambda: np.zeros(1))
    score: float = 1.0


@dataclass
class TrackState:
    """Live targets plus the head bookkeeping that links windows.

    ``heads`` maps (frame index, slot in that frame's candidate list) to the
    track owning that candidate; ids are never reused.
    """

    targets: list[TrackRecord] = field(default_factory=list)
    next_id: int = 1
    heads: dict[tuple[int, int], int] = field(default_factory=dict)
    skipped_windows: int = 0

    def by_id(self, track_id: int) -> TrackRecord:
        for t in self.targets:
            if t.id == track_id:
                return t
        raise InternalInvariantError(f"unknown track id {track_id}")


def _make_virtual_placeholder(frame_index: int) -> Candidate:
    return Candidate(frame_index=frame_index, center=None,
                     box=(0.0, 0.0, 1.0, 1.0), score=0.0, is_virtual=True)


def resolve_virtuals(batch: AssociationBatch,
                     params: AffinityProviderParams,
                     anchor_velocities: dict[int, tuple[float, float]] | None = None,
                     ) -> dict[tuple[int, int], Candidate]:
    """Fix the adjacent-frame virtual centers, one location per anchor.

    For each real anchor the virtual in frame position ``pos`` resolves to
    the argmax of a local search score around the anchor's constant-velocity
    extrapolation: a Gaussian prior at the extrapolated point plus
    appearance-similarity-weighted Gaussians at each real detection of that
    frame.  The grid spans one box diagonal at a step of diagonal / 8.
    Returns {(anchor index 1-based, frame position): resolved candidate}.
    """
    anchor_velocities = anchor_velocities or {}
    anchor_pos = batch.anchor_position
    sigma = params.position_scale
    resolved: dict[tuple[int, int], Candidate] = {}

    for slot, anchor in enumerate(batch.candidates[anchor_pos]):
        if anchor.is_virtual:
            continue
        vx, vy = anchor_velocities.get(slot, (0.0, 0.0))
        ax, ay = require_center(anchor)
        diag = box_diagonal(anchor.box)
        step = diag / 8.0
        offsets = np.arange(-8, 9) * step
        for pos in range(batch.K + 1):
            if pos == anchor_pos:
                continue
            if not batch.candidates[pos] or not batch.candidates[pos][-1].is_virtual:
                continue
            dt = batch.frames[pos] - batch.frames[anchor_pos]
            px, py = ax + vx * dt, ay + vy * dt

            reals = [c for c in batch.candidates[pos] if not c.is_virtual]
            weights = np.array([appearance_similarity(anchor.appearance,
                                                      c.appearance)
                                for c in reals])
            centers = np.array([require_center(c) for c in reals]
                               ).reshape(len(reals), 2)

            # row-major scan of the grid; ties resolve to the first maximum
            gy, gx = np.meshgrid(py + offsets, px + offsets, indexing="ij")
            gxf, gyf = gx.ravel(), gy.ravel()
            scores = np.exp(-((gxf - px) ** 2 + (gyf - py) ** 2)
                            / (2.0 * sigma * sigma))
            for w, (cx, cy) in zip(weights, centers):
                scores += w * np.exp(-((gxf - cx) ** 2 + (gyf - cy) ** 2)
                                     / (2.0 * sigma * sigma))
            best = int(np.argmax(scores))
            best_xy = (float(gxf[best]), float(gyf[best]))

            w, h = anchor.box[2], anchor.box[3]
            resolved[(slot + 1, pos)] = Candidate(
                frame_index=batch.frames[pos],
                center=best_xy,
                box=(best_xy[0] - w / 2.0, best_xy[1] - h / 2.0, w, h),
                score=anchor.score,
                is_virtual=True,
                appearance=anchor.appearance.copy(),
            )
    return resolved


def track_batch(frames_store: list[list[Candidate]],
                window: list[int],
                gate: ConnectionGateConfig,
                params: AffinityProviderParams,
                config: PipelineConfig,
                quality,
                state: TrackState,
                is_first_window: bool = False) -> TrackState:
    """Process one K=2 association window and update the track state.

    ``frames_store`` holds the per-frame candidate lists shared across
    windows; prediction pseudo-candidates for coasting tracks are appended
    to it so later windows see them.  Windows that produce no usable
    hypotheses are skipped and counted.
    """
    if len(window) != 3:
        raise ContractError("tracking windows must span exactly three frames")
    f0, f1, f2 = window

    window_cands = tuple(
        tuple(frames_store[f]) + (_make_virtual_placeholder(f),)
        for f in (f0, f1, f2))
    batch = AssociationBatch(K=2, frames=(f0, f1, f2), candidates=window_cands)
    anchor_list = window_cands[1]
    real_anchor_slots = [i for i, c in enumerate(anchor_list) if not c.is_virtual]
    if not real_anchor_slots:
        state.skipped_windows += 1
        return state

    velocities: dict[int, tuple[float, float]] = {}
    for slot in real_anchor_slots:
        track_id = state.heads.get((f1, slot))
        if track_id is not None:
            track = state.by_id(track_id)
            prev_box = track.boxes.get(f0)
            if prev_box is not None:
                cx, cy = require_center(anchor_list[slot])
                px, py = box_center(prev_box)
                velocities[slot] = (cx - px, cy - py)

    resolved = resolve_virtuals(batch, params, velocities)

    hypotheses = generate_hypotheses(batch, gate)
    if not hypotheses:
        state.skipped_windows += 1
        return state
    bundle = compute_affinity(batch, hypotheses, params,
                              virtual_scale=config.alpha,
                              resolved_virtuals=resolved)
    if bundle.pairwise.max() <= 0.0:
        state.skipped_windows += 1
        return state

    shapes = batch.pair_shapes()
    power_state = power_iteration_forward(
        bundle.pairwise, config.power_iterations, shapes)
    mask = PartialNormMask.for_virtuals(shapes, [True, True], [True, True])
    norm_state = l1_normalize_forward(power_state.matrices(), mask,
                                      config.norm_pairs)
    binary = discretize(norm_state.matrices(), [True, True], [True, True])
    x_prev, x_next = binary[0], binary[1]
    virtual_pred_slot = len(window_cands[0]) - 1
    virtual_next_slot = len(window_cands[2]) - 1

    new_heads: dict[tuple[int, int], int] = {}
    claimed_next: set[int] = set()

    for slot in real_anchor_slots:
        anchor = anchor_list[slot]
        track_id = state.heads.get((f1, slot))
        prediction = resolved[(slot + 1, 2)]

        assigned = np.flatnonzero(x_next[slot])
        next_slot = int(assigned[0]) if assigned.size else virtual_next_slot

        if track_id is None:
            if quality.evaluate(anchor) <= config.quality_threshold:
                continue
            track = TrackRecord(
                id=state.next_id,
                boxes={f1: anchor.box},
                descriptor=anchor.appearance.copy(),
                score=anchor.score,
            )
            state.next_id += 1
            state.targets.append(track)
            track_id = track.id
            if is_first_window:
                preds = np.flatnonzero(x_prev[:, slot])
                if preds.size == 1 and int(preds[0]) != virtual_pred_slot:
                    pred_cand = window_cands[0][int(preds[0])]
                    track.boxes[f0] = pred_cand.box
        else:
            track = state.by_id(track_id)
        if track.status == EXITED:
            raise InternalInvariantError(
                f"exited track {track_id} referenced by an anchor")

        if next_slot != virtual_next_slot:
            if next_slot in claimed_next:
                raise InternalInvariantError(
                    f"candidate {next_slot} on frame {f2} claimed twice")
            claimed_next.add(next_slot)
            partner = window_cands[2][next_slot]
            if (box_iou(prediction.box, partner.box) < config.t_dif
                    and quality.evaluate(partner) < config.quality_threshold):
                # detection disagrees with the prediction and looks bad:
                # keep the predicted box, reuse the stored appearance
                track.boxes[f2] = prediction.box
                track.status = ACTIVE
                pseudo_slot = _append_prediction(frames_store, f2,
                                                 prediction.box, track)
                new_heads[(f2, pseudo_slot)] = track_id
            else:
                track.boxes[f2] = partner.box
                track.status = ACTIVE
                track.frames_coasting = 0
                track.descriptor = partner.appearance.copy()
                track.score = partner.score
                new_heads[(f2, next_slot)] = track_id
        else:
            if box_visible_fraction(prediction.box, config.frame_box) < config.t_exit:
                track.status = EXITED
                continue
            track.frames_coasting += 1
            if track.frames_coasting > config.max_coast_frames:
                track.status = EXITED
                continue
            track.boxes[f2] = prediction.box
            track.status = COASTING
            pseudo_slot = _append_prediction(frames_store, f2,
                                             prediction.box, track)
            new_heads[(f2, pseudo_slot)] = track_id

    state.heads = new_heads
    return state


def _append_prediction(frames_store: list[list[Candidate]], frame: int,
                       box: Box, track: TrackRecord) -> int:
    """Inject a coasting track's predicted box as a candidate so the next
    window can anchor on it; the track's stored appearance is reused."""
    cand = Candidate(
        frame_index=frame,
        center=box_center(box),
        box=box,
        score=track.score,
        appearance=track.descriptor.copy(),
        from_prediction=True,
    )
    frames_store[frame].append(cand)
    return len(frames_store[frame]) - 1


def run_sequence(detection_frames: list[list[Candidate]],
                 gate: ConnectionGateConfig,
                 params: AffinityProviderParams,
                 config: PipelineConfig,
                 quality) -> list[TrackRecord]:
    """Track a whole sequence: slide the windows, thread the state through,
    and return every trajectory (exited ones included)."""
    frames_store = [list(frame) for frame in detection_frames]
    state = TrackState()
    windows = batch_windows(len(frames_store), K=2, overlap=2)
    for index, window in enumerate(windows):
        track_batch(frames_store, window, gate, params, config, quality,
                    state, is_first_window=(index == 0))
    return state.targets
