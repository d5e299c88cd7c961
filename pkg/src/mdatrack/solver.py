"""Differentiable assignment solver.

Two layers, each with a forward pass and an analytic backward pass:

* a rank-1 tensor-approximation power iteration that relaxes the hard
  assignment problem into per-pair soft assignment vectors, and
* an alternating row/column l1 normalization that pushes the soft
  assignment matrices toward the doubly-stochastic constraint set, with
  optional partial masks so a virtual row/column stays unconstrained in
  one direction.

Plus the binary cross-entropy training loss and a Hungarian-based
discretization.  All functions are pure with respect to their inputs;
history needed by the backward passes is returned inside AssignmentState.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import (
    ContractError,
    DegenerateInputError,
    NumericError,
)

DEGENERACY_FLOOR = 1e-30
PROB_EPS = 1e-7

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass
class NormStep:
    """One row or column normalization step, with what backward needs."""

    axis: str                      # 'row' or 'col'
    pre: list[np.ndarray]          # matrices entering the step
    divisors: list[np.ndarray]     # per-line sums actually divided by (1 where skipped)
    applied: list[np.ndarray]      # bool per line: was this line normalized


@dataclass
class PartialNormMask:
    """Lines exempted from one normalization direction, per pair.

    ``rows_column_only[k]`` holds 0-based row indices of X^(k) that are never
    row-normalized (they still participate in column normalization), and
    symmetrically for ``cols_row_only``.  In tracking mode these reference
    only the virtual candidate slot, which always sits at the last index.
    """

    rows_column_only: list[frozenset[int]]
    cols_row_only: list[frozenset[int]]

    @classmethod
    def empty(cls, num_pairs: int) -> "PartialNormMask":
        return cls([frozenset()] * num_pairs, [frozenset()] * num_pairs)

    @classmethod
    def for_virtuals(cls, shapes: list[tuple[int, int]],
                     virtual_rows: list[bool],
                     virtual_cols: list[bool]) -> "PartialNormMask":
        rows = []
        cols = []
        for (n_rows, n_cols), vr, vc in zip(shapes, virtual_rows, virtual_cols):
            rows.append(frozenset({n_rows - 1}) if vr else frozenset())
            cols.append(frozenset({n_cols - 1}) if vc else frozenset())
        return cls(rows, cols)


@dataclass
class AssignmentState:
    """Per-pair soft assignments plus the history the backward passes need."""

    x: list[np.ndarray]
    shapes: list[tuple[int, int]]
    tensor: np.ndarray | None = None
    iterate_history: list[list[np.ndarray]] | None = None
    contraction_history: list[float] | None = None
    slice_history: list[list[np.ndarray]] | None = None
    norm_history: list[NormStep] | None = None
    norm_mask: PartialNormMask | None = None
    skipped_lines: list[tuple[int, str, int]] = field(default_factory=list)

    def matrices(self) -> list[np.ndarray]:
        return [v.reshape(shape) for v, shape in zip(self.x, self.shapes)]


def _check_pair_shapes(tensor: np.ndarray, shapes: list[tuple[int, int]]) -> None:
    if tensor.ndim != len(shapes):
        raise ContractError(
            f"tensor order {tensor.ndim} does not match {len(shapes)} pair shapes")
    for k, ((n_prev, n_next), dim) in enumerate(zip(shapes, tensor.shape)):
        if n_prev * n_next != dim:
            raise ContractError(
                f"pair {k}: shape {n_prev}x{n_next} does not flatten to dim {dim}")
    for k in range(1, len(shapes)):
        if shapes[k - 1][1] != shapes[k][0]:
            raise ContractError(
                f"pairs {k - 1} and {k} disagree on the shared frame size")


def _partial_contraction(tensor: np.ndarray, vectors: list[np.ndarray],
                         free_mode: int) -> np.ndarray:
    """Contract the tensor with one vector per mode except ``free_mode``."""
    K = tensor.ndim
    subs = _LETTERS[:K]
    inputs = [subs] + [subs[m] for m in range(K) if m != free_mode]
    operands = [tensor] + [vectors[m] for m in range(K) if m != free_mode]
    return np.einsum(",".join(inputs) + "->" + subs[free_mode], *operands)


def _outer(vectors: list[np.ndarray]) -> np.ndarray:
    K = len(vectors)
    subs = _LETTERS[:K]
    return np.einsum(",".join(subs) + "->" + subs, *vectors)


def pairwise_objective(tensor: np.ndarray, x: list[np.ndarray]) -> float:
    """Full multilinear contraction of the pairwise tensor with the
    flattened assignment vectors."""
    K = tensor.ndim
    subs = _LETTERS[:K]
    return float(np.einsum(subs + "," + ",".join(subs) + "->", tensor, *x))


def assignment_objective(affinity: np.ndarray, matrices: list[np.ndarray]) -> float:
    """Total affinity of a (soft or binary) assignment expressed on the
    candidate-tuple tensor."""
    K = affinity.ndim - 1
    letters = _LETTERS[:K + 1]
    subscripts = (letters + "," +
                  ",".join(letters[k - 1:k + 1] for k in range(1, K + 1)) + "->")
    return float(np.einsum(subscripts, affinity, *matrices))


# ---------------------------------------------------------------------------
# Power iteration layer
# ---------------------------------------------------------------------------

def power_iteration_forward(tensor: np.ndarray,
                            num_iterations: int,
                            shapes: list[tuple[int, int]],
                            x0: list[np.ndarray] | None = None) -> AssignmentState:
    """Run the rank-1 power iteration on the pairwise affinity tensor.

    Every assignment vector starts at all-ones (or at ``x0``).  One iteration
    updates all pairs synchronously from the same iterate:

        x_k <- x_k * (contraction of the tensor with the other vectors) / C

    where C is the full contraction, shared across pairs, so every updated
    vector sums to one.  All iterates, slices and normalizers are retained
    for the backward pass.
    """
    tensor = np.asarray(tensor, dtype=float)
    _check_pair_shapes(tensor, shapes)
    if num_iterations < 1:
        raise ContractError(f"need at least one iteration, got {num_iterations}")
    # tolerance instead of a strict check so finite-difference probes around
    # structural zeros stay admissible
    if np.any(tensor < -1e-6):
        raise ContractError("affinity tensor must be nonnegative")
    if not np.all(np.isfinite(tensor)):
        raise NumericError("non-finite entries in the affinity tensor")

    K = tensor.ndim
    if x0 is None:
        x = [np.ones(tensor.shape[k]) for k in range(K)]
    else:
        if len(x0) != K:
            raise ContractError(f"x0 needs {K} vectors, got {len(x0)}")
        x = [np.asarray(v, dtype=float).copy() for v in x0]
        for k, v in enumerate(x):
            if v.shape != (tensor.shape[k],):
                raise ContractError(f"x0[{k}] has wrong length")

    iterate_history = [[v.copy() for v in x]]
    contraction_history: list[float] = []
    slice_history: list[list[np.ndarray]] = []

    for n in range(num_iterations):
        slices = [_partial_contraction(tensor, x, k) for k in range(K)]
        norm_const = float(x[0] @ slices[0])
        if not np.isfinite(norm_const):
            raise NumericError(f"non-finite contraction at iteration {n}")
        if norm_const < DEGENERACY_FLOOR:
            raise DegenerateInputError(
                f"all-zero contraction at iteration {n}; the affinity tensor "
                "has no mass on the current support")
        x = [x[k] * slices[k] / norm_const for k in range(K)]
        for k in range(K):
            if not np.all(np.isfinite(x[k])):
                raise NumericError(f"non-finite iterate for pair {k} at iteration {n}")
        iterate_history.append([v.copy() for v in x])
        contraction_history.append(norm_const)
        slice_history.append(slices)

    return AssignmentState(
        x=[v.copy() for v in x],
        shapes=list(shapes),
        tensor=tensor,
        iterate_history=iterate_history,
        contraction_history=contraction_history,
        slice_history=slice_history,
    )


def power_iteration_backward(state: AssignmentState,
                             d_x_final: list[np.ndarray]
                             ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Backward pass of the power iteration layer.

    Given the loss gradient at the final iterates, walks the iterations in
    reverse, accumulating the affinity-tensor gradient

        dL/da  +=  (prod_k x_k(n)) / C(n) * sum_k (e_{j_k} - x_k(n+1))^T g_k(n+1)

    at each iteration and propagating the iterate gradients with the exact
    differential of the synchronous update (own-slice term, shared-normalizer
    term, and the cross-pair contraction terms).  Returns the dense tensor
    gradient and the gradient at the initial vectors.
    """
    if (state.iterate_history is None or state.contraction_history is None
            or state.slice_history is None or state.tensor is None):
        raise ContractError("state is missing power-iteration history")
    tensor = state.tensor
    K = len(state.x)
    if len(d_x_final) != K:
        raise ContractError(f"need {K} gradient vectors, got {len(d_x_final)}")
    g = []
    for k in range(K):
        gk = np.asarray(d_x_final[k], dtype=float)
        if gk.shape != state.x[k].shape:
            raise ContractError(f"gradient {k} has shape {gk.shape}, "
                                f"expected {state.x[k].shape}")
        g.append(gk.copy())

    num_iterations = len(state.contraction_history)
    d_tensor = np.zeros_like(tensor)

    for n in reversed(range(num_iterations)):
        xs = state.iterate_history[n]
        xs_next = state.iterate_history[n + 1]
        slices = state.slice_history[n]
        norm_const = state.contraction_history[n]

        beta = sum(float(xs_next[k] @ g[k]) for k in range(K))

        # tensor gradient contribution of this iteration
        term = -beta * _outer(xs)
        for k in range(K):
            weighted = list(xs)
            weighted[k] = xs[k] * g[k]
            term += _outer(weighted)
        d_tensor += term / norm_const

        # iterate gradients one step earlier
        new_g = []
        for k in range(K):
            cross = np.zeros_like(g[k])
            for m in range(K):
                if m == k:
                    continue
                weighted = list(xs)
                weighted[m] = xs[m] * g[m]
                cross += _partial_contraction(tensor, weighted, k)
            new_g.append(slices[k] / norm_const * (g[k] - beta) + cross / norm_const)
        g = new_g

    return d_tensor, g


# ---------------------------------------------------------------------------
# l1 normalization layer
# ---------------------------------------------------------------------------

def l1_normalize_forward(matrices: list[np.ndarray],
                         mask: PartialNormMask,
                         num_pairs: int) -> AssignmentState:
    """Alternating row/column l1 normalization, ``num_pairs`` (row, col)
    passes, starting with rows.

    Rows listed in the mask are skipped during row normalization and
    symmetrically for columns.  Lines that are identically zero at entry are
    excluded from normalization throughout and reported in
    ``skipped_lines``; a zero sum on any other unmasked line raises.
    """
    K = len(matrices)
    if len(mask.rows_column_only) != K or len(mask.cols_row_only) != K:
        raise ContractError("mask does not cover every pair")
    if num_pairs < 0:
        raise ContractError("iteration pair count must be >= 0")
    mats = []
    for k, m in enumerate(matrices):
        arr = np.asarray(m, dtype=float).copy()
        if arr.ndim != 2:
            raise ContractError(f"pair {k} is not a matrix")
        if np.any(arr < 0):
            raise ContractError(f"pair {k} carries negative entries")
        mats.append(arr)

    skipped: list[tuple[int, str, int]] = []
    zero_rows: list[set[int]] = []
    zero_cols: list[set[int]] = []
    for k, m in enumerate(mats):
        zr = {int(i) for i in np.flatnonzero(m.sum(axis=1) == 0.0)}
        zc = {int(j) for j in np.flatnonzero(m.sum(axis=0) == 0.0)}
        zero_rows.append(zr)
        zero_cols.append(zc)
        skipped.extend((k, "row", i) for i in sorted(zr))
        skipped.extend((k, "col", j) for j in sorted(zc))

    history: list[NormStep] = []
    for _ in range(num_pairs):
        for axis in ("row", "col"):
            pre = [m.copy() for m in mats]
            divisors = []
            applied_flags = []
            for k, m in enumerate(mats):
                if axis == "row":
                    sums = m.sum(axis=1)
                    exempt = mask.rows_column_only[k] | zero_rows[k]
                else:
                    sums = m.sum(axis=0)
                    exempt = mask.cols_row_only[k] | zero_cols[k]
                applied = np.ones(sums.shape, dtype=bool)
                for idx in exempt:
                    applied[idx] = False
                # tiny positive sums normalize fine (entries never exceed
                # their sum); only an exact zero is degenerate
                bad = np.flatnonzero(applied & (sums <= 0.0))
                if bad.size:
                    raise DegenerateInputError(
                        f"pair {k}: {axis} {int(bad[0])} lost all mass "
                        "during normalization")
                div = np.where(applied, sums, 1.0)
                if axis == "row":
                    mats[k] = m / div[:, None]
                else:
                    mats[k] = m / div[None, :]
                divisors.append(div)
                applied_flags.append(applied)
            history.append(NormStep(axis, pre, divisors, applied_flags))

    return AssignmentState(
        x=[m.reshape(-1) for m in mats],
        shapes=[m.shape for m in mats],
        norm_history=history,
        norm_mask=mask,
        skipped_lines=skipped,
    )


def l1_normalize_backward(state: AssignmentState,
                          d_x_final: list[np.ndarray]) -> list[np.ndarray]:
    """Backward pass of the normalization layer.

    Walks the recorded steps in reverse.  For a normalized line with
    pre-step values v and sum s, the gradient maps as
    g_pre = g_post / s - <v/s, g_post> / s; skipped lines pass the gradient
    through unchanged.
    """
    if state.norm_history is None:
        raise ContractError("state is missing normalization history")
    K = len(state.shapes)
    if len(d_x_final) != K:
        raise ContractError(f"need {K} gradients, got {len(d_x_final)}")
    g = []
    for k in range(K):
        gk = np.asarray(d_x_final[k], dtype=float)
        if gk.shape != state.shapes[k]:
            raise ContractError(
                f"gradient {k} has shape {gk.shape}, expected {state.shapes[k]}")
        g.append(gk.copy())

    for step in reversed(state.norm_history):
        for k in range(K):
            pre = step.pre[k]
            div = step.divisors[k]
            applied = step.applied[k]
            if step.axis == "row":
                post = pre / div[:, None]
                inner = (post * g[k]).sum(axis=1)
                new = g[k] / div[:, None] - (inner / div)[:, None]
                g[k] = np.where(applied[:, None], new, g[k])
            else:
                post = pre / div[None, :]
                inner = (post * g[k]).sum(axis=0)
                new = g[k] / div[None, :] - (inner / div)[None, :]
                g[k] = np.where(applied[None, :], new, g[k])
    return g


# ---------------------------------------------------------------------------
# Loss and discretization
# ---------------------------------------------------------------------------

def bce_loss(predicted: list[np.ndarray],
             target: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Summed binary cross entropy over all assignment entries.

    Predictions are clamped to [eps, 1-eps] before the logs; the returned
    gradient is that of the clamped expression, i.e. exactly zero where the
    clamp is active.
    """
    if len(predicted) != len(target):
        raise ContractError("prediction/target pair counts differ")
    loss = 0.0
    grads = []
    for k, (p, t) in enumerate(zip(predicted, target)):
        p = np.asarray(p, dtype=float)
        t = np.asarray(t, dtype=float)
        if p.shape != t.shape:
            raise ContractError(
                f"pair {k}: prediction shape {p.shape} vs target {t.shape}")
        clamped = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        loss -= float(np.sum(t * np.log(clamped) + (1.0 - t) * np.log1p(-clamped)))
        inside = (p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)
        grad = np.where(inside, (clamped - t) / (clamped * (1.0 - clamped)), 0.0)
        grads.append(grad)
    return loss, grads


def discretize(matrices: list[np.ndarray],
               virtual_rows: list[bool] | None = None,
               virtual_cols: list[bool] | None = None) -> list[np.ndarray]:
    """Binarize soft assignments pair by pair.

    Real rows/columns get a maximum-weight bipartite matching.  When the last
    column is a virtual slot, a matched row whose weight falls strictly below
    its virtual entry is reassigned to the virtual column, and unmatched real
    rows go there too; symmetrically, real columns left without a partner are
    attached to the virtual row.  Virtual slots may absorb several partners.
    """
    K = len(matrices)
    if virtual_rows is None:
        virtual_rows = [False] * K
    if virtual_cols is None:
        virtual_cols = [False] * K
    result = []
    for k, m in enumerate(matrices):
        m = np.asarray(m, dtype=float)
        n_rows, n_cols = m.shape
        real_rows = n_rows - 1 if virtual_rows[k] else n_rows
        real_cols = n_cols - 1 if virtual_cols[k] else n_cols
        out = np.zeros((n_rows, n_cols))
        taken_cols: set[int] = set()
        if real_rows > 0 and real_cols > 0:
            weights = m[:real_rows, :real_cols]
            rows, cols = linear_sum_assignment(-weights)
            for r, c in zip(rows, cols):
                if virtual_cols[k] and m[r, n_cols - 1] > weights[r, c]:
                    out[r, n_cols - 1] = 1.0
                else:
                    out[r, c] = 1.0
                    taken_cols.add(int(c))
            matched_rows = set(int(r) for r in rows)
        else:
            matched_rows = set()
        if virtual_cols[k]:
            for r in range(real_rows):
                if r not in matched_rows and out[r].sum() == 0.0:
                    out[r, n_cols - 1] = 1.0
        if virtual_rows[k]:
            for c in range(real_cols):
                if c not in taken_cols:
                    out[n_rows - 1, c] = 1.0
        result.append(out)
    return result


def dump_state(state: AssignmentState) -> str:
    """Deterministic plain-text serialization of the assignment matrices:
    one shape header line per pair, then row-major values at 17 significant
    digits."""
    chunks = []
    for k, mat in enumerate(state.matrices()):
        chunks.append(f"pair {k} shape {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            chunks.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(chunks) + "\n"
