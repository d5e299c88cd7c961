"""Hypothesis generation and the differentiable affinity provider.

Candidates from consecutive frames are connected when they are spatially
close (relative to box size) and similar in size; a candidate that finds no
partner retries with progressively relaxed distance thresholds.  Valid
hypothesis trajectories are all index tuples whose consecutive pairs pass
the gate; virtual candidates connect unconditionally.

The affinity of a valid trajectory is a two-level differentiable score on
precomputed descriptors and box geometry:

* per consecutive pair, an appearance-plus-position score: the descriptor
  inner product attenuated by a Gaussian in center distance, a bare
  position Gaussian, and a box-size similarity, each with a learnable
  weight;
* per trajectory: a constant-velocity consistency score weighted by
  size-change smoothness, with its own learnable weight.

The provider records a tape sufficient to map a loss gradient on the
pairwise tensor back to parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kvtext
from .errors import ContractError, InputValidationError
from .types import (
    AssociationBatch,
    Candidate,
    HypothesisTrajectory,
    box_diagonal,
    flatten_pair,
    require_center,
    to_storage_index,
)


@dataclass(frozen=True)
class ConnectionGateConfig:
    """Adaptive connection gate between candidates of consecutive frames.

    The distance threshold is ``base_distance_factor`` times the larger of
    the two box diagonals; after r relaxations it grows by
    ``relaxation_factor ** r``.  Size bounds are not relaxed.
    """

    base_distance_factor: float = 1.0
    size_ratio_bounds: tuple[float, float] = (0.5, 2.0)
    relaxation_factor: float = 2.0
    max_relaxations: int = 2

    def __post_init__(self):
        low, high = self.size_ratio_bounds
        if self.base_distance_factor <= 0:
            raise ContractError("base_distance_factor must be positive")
        if not (0 < low < 1 < high):
            raise ContractError(f"size ratio bounds must straddle 1, got {low}, {high}")
        if self.relaxation_factor <= 1:
            raise ContractError("relaxation_factor must exceed 1")
        if self.max_relaxations < 0:
            raise ContractError("max_relaxations must be >= 0")


@dataclass(frozen=True)
class AffinityProviderParams:
    """Learnable weights of the affinity provider.

    ``position_scale`` (pixels) sets both the pairwise Gaussian width and
    the velocity-consistency decay; it is kept strictly positive by
    projection after each training step.
    """

    motion_weight: float = 1.0
    position_scale: float = 30.0
    size_weight: float = 0.5
    appearance_weight: float = 1.0
    long_term_weight: float = 1.0

    FIELD_NAMES = ("motion_weight", "position_scale", "size_weight",
                   "appearance_weight", "long_term_weight")

    def __post_init__(self):
        if self.position_scale <= 0:
            raise ContractError("position_scale must be positive")

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in self.FIELD_NAMES])

    @classmethod
    def from_vector(cls, vec) -> "AffinityProviderParams":
        return cls(**{name: float(v) for name, v in zip(cls.FIELD_NAMES, vec)})


@dataclass(frozen=True)
class AffinityParamGradient:
    """Loss gradient with one slot per learnable provider weight."""

    motion_weight: float = 0.0
    position_scale: float = 0.0
    size_weight: float = 0.0
    appearance_weight: float = 0.0
    long_term_weight: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, name)
                         for name in AffinityProviderParams.FIELD_NAMES])

    @classmethod
    def from_vector(cls, vec) -> "AffinityParamGradient":
        return cls(**{name: float(v)
                      for name, v in zip(AffinityProviderParams.FIELD_NAMES, vec)})


@dataclass
class ProviderTape:
    """Per-hypothesis sufficient statistics for the parameter gradient."""

    entries: list[tuple[int, ...]]        # 0-based tensor coordinates into C
    appearance_edges: np.ndarray          # (H, K) similarity per pair
    squared_distances: np.ndarray         # (H, K) per consecutive pair
    size_sum: np.ndarray                  # (H,)
    acceleration: np.ndarray              # (H,)
    size_smoothness: np.ndarray           # (H,)
    virtual_scale: np.ndarray             # (H,) alpha ** (#virtuals)


@dataclass
class AffinityTensorBundle:
    """Dense affinity values over candidate tuples plus the pairwise reshape."""

    values: np.ndarray                    # (K+1)-order tensor of c >= 0
    pairwise: np.ndarray                  # K-order tensor over flat pair indices
    valid_mask: np.ndarray                # bool, membership in the hypothesis set
    hypotheses: list[HypothesisTrajectory]
    tape: ProviderTape
    params: AffinityProviderParams


def save_params(params: AffinityProviderParams, path: str | Path) -> None:
    kvtext.save_kv(
        {name: getattr(params, name) for name in params.FIELD_NAMES}, path)


def load_params(path: str | Path) -> AffinityProviderParams:
    raw = kvtext.load_kv(path)
    missing = [n for n in AffinityProviderParams.FIELD_NAMES if n not in raw]
    if missing:
        raise ContractError(f"parameter file is missing {missing}")
    return AffinityProviderParams(
        **{n: float(raw[n]) for n in AffinityProviderParams.FIELD_NAMES})


# ---------------------------------------------------------------------------
# Connection gate and hypothesis generation
# ---------------------------------------------------------------------------

def _gate_passes(a: Candidate, b: Candidate, distance_factor: float,
                 size_bounds: tuple[float, float]) -> bool:
    dx = require_center(a)[0] - require_center(b)[0]
    dy = require_center(a)[1] - require_center(b)[1]
    threshold = distance_factor * max(box_diagonal(a.box), box_diagonal(b.box))
    if math.hypot(dx, dy) > threshold:
        return False
    low, high = size_bounds
    wa, ha = a.box[2], a.box[3]
    wb, hb = b.box[2], b.box[3]
    return low <= wb / wa <= high and low <= hb / ha <= high


def _pair_edges(prev_cands, next_cands, gate: ConnectionGateConfig) -> set[tuple[int, int]]:
    """0-based edge set between two consecutive frames, with per-candidate
    relaxation for candidates that found no partner."""
    edges: set[tuple[int, int]] = set()
    for i, a in enumerate(prev_cands):
        for j, b in enumerate(next_cands):
            if a.is_virtual or b.is_virtual:
                edges.add((i, j))
            elif _gate_passes(a, b, gate.base_distance_factor, gate.size_ratio_bounds):
                edges.add((i, j))

    def relax(index, is_prev):
        for r in range(1, gate.max_relaxations + 1):
            factor = gate.base_distance_factor * gate.relaxation_factor ** r
            added = False
            if is_prev:
                a = prev_cands[index]
                for j, b in enumerate(next_cands):
                    if _gate_passes(a, b, factor, gate.size_ratio_bounds):
                        edges.add((index, j))
                        added = True
            else:
                b = next_cands[index]
                for i, a in enumerate(prev_cands):
                    if _gate_passes(a, b, factor, gate.size_ratio_bounds):
                        edges.add((i, index))
                        added = True
            if added:
                return

    for i, a in enumerate(prev_cands):
        if not a.is_virtual and not any(e[0] == i for e in edges):
            relax(i, True)
    for j, b in enumerate(next_cands):
        if not b.is_virtual and not any(e[1] == j for e in edges):
            relax(j, False)
    return edges


def generate_hypotheses(batch: AssociationBatch,
                        gate: ConnectionGateConfig) -> list[HypothesisTrajectory]:
    """All candidate tuples whose consecutive pairs pass the connection gate.

    Returned trajectories carry 1-based indices and a zero affinity; scoring
    happens in :func:`compute_affinity`.  A candidate with no connection even
    after relaxation simply appears in no hypothesis.
    """
    K = batch.K
    adjacency: list[dict[int, list[int]]] = []
    for k in range(1, K + 1):
        edges = _pair_edges(batch.candidates[k - 1], batch.candidates[k], gate)
        adj: dict[int, list[int]] = {}
        for i, j in sorted(edges):
            adj.setdefault(i, []).append(j)
        adjacency.append(adj)

    hypotheses: list[HypothesisTrajectory] = []

    def extend(prefix: list[int]):
        depth = len(prefix)
        if depth == K + 1:
            hypotheses.append(HypothesisTrajectory(
                tuple(i + 1 for i in prefix), 0.0))
            return
        for j in adjacency[depth - 1].get(prefix[-1], []):
            prefix.append(j)
            extend(prefix)
            prefix.pop()

    for i0 in range(len(batch.candidates[0])):
        extend([i0])
    return hypotheses


# ---------------------------------------------------------------------------
# Affinity provider
# ---------------------------------------------------------------------------

def appearance_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Clipped squared cosine of the descriptors, in [0, 1].

    Squaring suppresses the ~0 cosine between unrelated descriptors while
    keeping same-target pairs near 1, which is what makes the term worth
    its learnable weight.  Zero descriptors (file-based candidates) get a
    neutral 0.5.
    """
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        return 0.5
    cos = float(np.dot(a, b)) / (na * nb)
    return max(0.0, cos) ** 2


def _size_similarity(box_a, box_b) -> float:
    wa, ha = box_a[2], box_a[3]
    wb, hb = box_b[2], box_b[3]
    return (min(wa, wb) / max(wa, wb)) * (min(ha, hb) / max(ha, hb))


def compute_affinity(batch: AssociationBatch,
                     hypotheses: list[HypothesisTrajectory],
                     params: AffinityProviderParams,
                     virtual_scale: float = 1.0,
                     resolved_virtuals: dict[tuple[int, int], Candidate] | None = None
                     ) -> AffinityTensorBundle:
    """Score every hypothesis and assemble the affinity tensors.

    ``resolved_virtuals`` maps (anchor index 1-based, frame position) to the
    per-anchor resolved virtual candidate for an adjacent frame; it is
    required whenever a hypothesis contains an adjacent-frame virtual.
    Hypotheses passing through the anchor-frame virtual slot score exactly
    zero (that slot has no geometry of its own).  Each virtual member of a
    hypothesis scales its affinity by ``virtual_scale``.
    """
    if not hypotheses:
        raise ContractError("hypothesis set is empty")
    for frame_cands in batch.candidates:
        for cand in frame_cands:
            if not np.all(np.isfinite(cand.appearance)):
                raise InputValidationError(
                    f"non-finite descriptor on frame {cand.frame_index}")

    K = batch.K
    sizes = batch.sizes
    anchor_pos = batch.anchor_position
    values = np.zeros(sizes)
    valid_mask = np.zeros(sizes, dtype=bool)

    entries: list[tuple[int, ...]] = []
    app_rows: list[list[float]] = []
    sq_dists: list[list[float]] = []
    size_sums: list[float] = []
    accels: list[float] = []
    smooths: list[float] = []
    vscales: list[float] = []
    scored: list[HypothesisTrajectory] = []

    sigma = params.position_scale
    for hyp in hypotheses:
        coords = tuple(to_storage_index(i) for i in hyp.indices)
        valid_mask[coords] = True
        anchor_index = hyp.indices[anchor_pos]

        if batch.candidates[anchor_pos][coords[anchor_pos]].is_virtual:
            # structural slot with no geometry: zero affinity, zero tape row
            entries.append(coords)
            app_rows.append([0.0] * K)
            sq_dists.append([0.0] * K)
            size_sums.append(0.0)
            accels.append(0.0)
            smooths.append(0.0)
            vscales.append(0.0)
            scored.append(replace(hyp, affinity=0.0))
            continue

        members: list[Candidate] = []
        for pos, idx0 in enumerate(coords):
            cand = batch.candidates[pos][idx0]
            if cand.is_virtual and pos != anchor_pos:
                if resolved_virtuals is None or (anchor_index, pos) not in resolved_virtuals:
                    raise ContractError(
                        f"no resolved virtual for anchor {anchor_index} at "
                        f"frame position {pos}")
                cand = resolved_virtuals[(anchor_index, pos)]
            members.append(cand)

        virtual_count = sum(
            1 for pos, idx0 in enumerate(coords)
            if batch.candidates[pos][idx0].is_virtual)
        scale = virtual_scale ** virtual_count

        centers = [np.asarray(require_center(c), dtype=float) for c in members]
        app_edges = []
        d2 = []
        size_sim_edges = []
        for e in range(K):
            app_edges.append(appearance_similarity(
                members[e].appearance, members[e + 1].appearance))
            d2.append(float(np.sum((centers[e + 1] - centers[e]) ** 2)))
            size_sim_edges.append(_size_similarity(members[e].box, members[e + 1].box))
        app_edges = np.asarray(app_edges)
        size_sum = float(np.sum(size_sim_edges))
        accel = 0.0
        for t in range(1, K):
            accel += float(np.linalg.norm(
                (centers[t + 1] - centers[t]) - (centers[t] - centers[t - 1])))
        smooth = float(np.prod(size_sim_edges)) ** (1.0 / K)

        gauss = np.exp(-np.asarray(d2) / (2.0 * sigma * sigma))
        app_gauss = float(np.dot(app_edges, gauss))
        c = scale * (params.appearance_weight * app_gauss
                     + params.motion_weight * float(gauss.sum())
                     + params.size_weight * size_sum
                     + params.long_term_weight * math.exp(-accel / sigma) * smooth)
        values[coords] = c

        entries.append(coords)
        app_rows.append([float(a) for a in app_edges])
        sq_dists.append(d2)
        size_sums.append(size_sum)
        accels.append(accel)
        smooths.append(smooth)
        vscales.append(scale)
        scored.append(replace(hyp, affinity=float(c)))

    tape = ProviderTape(
        entries=entries,
        appearance_edges=np.array(app_rows).reshape(len(entries), K),
        squared_distances=np.array(sq_dists).reshape(len(entries), K),
        size_sum=np.array(size_sums),
        acceleration=np.array(accels),
        size_smoothness=np.array(smooths),
        virtual_scale=np.array(vscales),
    )
    pairwise = reshape_to_pairwise(values, valid_mask)
    return AffinityTensorBundle(values, pairwise, valid_mask, scored, tape, params)


def reshape_to_pairwise(values: np.ndarray, valid_mask: np.ndarray) -> np.ndarray:
    """Reshape the (K+1)-order candidate-tuple tensor to the K-order tensor
    over flattened pair indices.

    Entry (j_1, ..., j_K) equals the tuple value when the shared frame index
    of every adjacent flat pair agrees, and zero otherwise, which is the
    unique rule preserving the multilinear objective across the reshape.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != valid_mask.shape:
        raise ContractError("values and valid_mask shapes differ")
    sizes = values.shape
    K = values.ndim - 1
    pair_dims = tuple(sizes[k - 1] * sizes[k] for k in range(1, K + 1))
    pairwise = np.zeros(pair_dims)
    for coords in np.argwhere(valid_mask):
        flat = tuple(
            to_storage_index(flatten_pair(int(coords[k - 1]) + 1,
                                          int(coords[k]) + 1, sizes[k]))
            for k in range(1, K + 1))
        pairwise[flat] = values[tuple(coords)]
    return pairwise


def backprop_affinity(bundle: AffinityTensorBundle,
                      d_pairwise: np.ndarray) -> AffinityParamGradient:
    """Map a loss gradient on the pairwise tensor to parameter gradients.

    Each valid hypothesis corresponds to exactly one pairwise entry, so its
    incoming gradient is read off directly and pushed through the provider's
    tape.  Parameters not touched by any valid hypothesis get zero gradient.
    """
    d_pairwise = np.asarray(d_pairwise, dtype=float)
    if d_pairwise.shape != bundle.pairwise.shape:
        raise ContractError(
            f"gradient shape {d_pairwise.shape} does not match the pairwise "
            f"tensor {bundle.pairwise.shape}")
    sizes = bundle.values.shape
    K = bundle.values.ndim - 1
    tape = bundle.tape
    params = bundle.params
    sigma = params.position_scale

    if not tape.entries:
        return AffinityParamGradient()

    incoming = np.empty(len(tape.entries))
    for h, coords in enumerate(tape.entries):
        flat = tuple(
            to_storage_index(flatten_pair(coords[k - 1] + 1, coords[k] + 1, sizes[k]))
            for k in range(1, K + 1))
        incoming[h] = d_pairwise[flat]

    gauss = np.exp(-tape.squared_distances / (2.0 * sigma * sigma))
    app_gauss = tape.appearance_edges * gauss
    long_term = np.exp(-tape.acceleration / sigma) * tape.size_smoothness
    scaled = incoming * tape.virtual_scale

    d_motion = float(np.sum(scaled * gauss.sum(axis=1)))
    d_size = float(np.sum(scaled * tape.size_sum))
    d_appearance = float(np.sum(scaled * app_gauss.sum(axis=1)))
    d_long = float(np.sum(scaled * long_term))
    # both Gaussian-attenuated terms contribute d(exp(-d2/2s^2))/ds
    d_sigma = float(np.sum(scaled * (
        np.sum((params.motion_weight + params.appearance_weight
                * tape.appearance_edges)
               * gauss * tape.squared_distances, axis=1) / sigma ** 3
        + params.long_term_weight * long_term * tape.acceleration / sigma ** 2)))

    return AffinityParamGradient(
        motion_weight=d_motion, position_scale=d_sigma, size_weight=d_size,
        appearance_weight=d_appearance, long_term_weight=d_long)
