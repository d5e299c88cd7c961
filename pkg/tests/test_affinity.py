"""Gate, hypothesis generation, provider scores and their gradients."""

import itertools
import math

import numpy as np
import pytest

from mdatrack.affinity import (
    AffinityProviderParams,
    ConnectionGateConfig,
    backprop_affinity,
    compute_affinity,
    generate_hypotheses,
    load_params,
    reshape_to_pairwise,
    save_params,
)
from mdatrack.errors import ContractError, InputValidationError
from mdatrack.oracle import finite_diff_grad
from mdatrack.solver import pairwise_objective, assignment_objective
from mdatrack.types import AssociationBatch, Candidate, flatten_pair


def cand(frame, cx, cy, w=20.0, h=20.0, appearance=None, virtual=False,
         score=1.0):
    if appearance is None:
        appearance = np.ones(8)
    return Candidate(frame_index=frame, center=(cx, cy) if not virtual else None,
                     box=(cx - w / 2, cy - h / 2, w, h) if not virtual else (0, 0, 1, 1),
                     score=score, is_virtual=virtual,
                     appearance=np.asarray(appearance, dtype=float))


def make_batch(per_frame):
    return AssociationBatch(K=len(per_frame) - 1,
                            frames=tuple(range(len(per_frame))),
                            candidates=tuple(tuple(f) for f in per_frame))


def gate_oracle(a, b, factor, bounds):
    """Direct restatement of the gate predicate for brute-force checks."""
    dist = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
    diag = max(math.hypot(a.box[2], a.box[3]), math.hypot(b.box[2], b.box[3]))
    low, high = bounds
    return (dist <= factor * diag
            and low <= b.box[2] / a.box[2] <= high
            and low <= b.box[3] / a.box[3] <= high)


class TestGenerateHypotheses:
    def test_two_far_targets_give_two_hypotheses(self):
        # brute-force gate evaluation over all 8 tuples finds exactly the
        # two per-target trajectories
        frames = [[cand(f, 50.0, 50.0), cand(f, 400.0, 300.0)]
                  for f in range(3)]
        gate = ConnectionGateConfig(max_relaxations=0)
        batch = make_batch(frames)
        hyps = generate_hypotheses(batch, gate)

        expected = []
        for tup in itertools.product(range(2), repeat=3):
            ok = all(gate_oracle(frames[k][tup[k]], frames[k + 1][tup[k + 1]],
                                 gate.base_distance_factor,
                                 gate.size_ratio_bounds)
                     for k in range(2))
            if ok:
                expected.append(tuple(i + 1 for i in tup))
        assert sorted(h.indices for h in hyps) == sorted(expected)
        assert len(hyps) == 2

    def test_single_candidate_per_frame(self):
        frames = [[cand(f, 100.0, 100.0)] for f in range(3)]
        hyps = generate_hypotheses(make_batch(frames), ConnectionGateConfig())
        assert len(hyps) == 1
        assert hyps[0].indices == (1, 1, 1)

    def test_isolated_candidate_recovered_by_relaxation(self):
        # frame-1 candidate sits beyond the base threshold (one diagonal)
        # but inside base * relaxation_factor
        diag = math.hypot(20.0, 20.0)
        frames = [
            [cand(0, 100.0, 100.0)],
            [cand(1, 100.0 + 1.5 * diag, 100.0)],
            [cand(2, 100.0 + 3.0 * diag, 100.0)],
        ]
        gate = ConnectionGateConfig(base_distance_factor=1.0,
                                    relaxation_factor=2.0, max_relaxations=2)
        hyps = generate_hypotheses(make_batch(frames), gate)
        assert len(hyps) == 1
        strict = ConnectionGateConfig(base_distance_factor=1.0,
                                      relaxation_factor=2.0, max_relaxations=0)
        assert generate_hypotheses(make_batch(frames), strict) == []

    def test_virtual_connects_unconditionally(self):
        frames = [
            [cand(0, 0.0, 0.0), cand(0, 0, 0, virtual=True)],
            [cand(1, 500.0, 500.0)],
            [cand(2, 500.0, 500.0)],
        ]
        gate = ConnectionGateConfig(max_relaxations=0)
        hyps = generate_hypotheses(make_batch(frames), gate)
        # the real frame-0 candidate is out of range, the virtual is not
        assert (2, 1, 1) in {h.indices for h in hyps}

    def test_gate_monotone_in_base_distance_factor(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            frames = [[cand(f, *rng.uniform(0, 300, 2),
                            w=rng.uniform(15, 30), h=rng.uniform(15, 30))
                       for _ in range(3)] for f in range(3)]
            batch = make_batch(frames)
            small = generate_hypotheses(batch, ConnectionGateConfig(
                base_distance_factor=1.0, max_relaxations=0))
            large = generate_hypotheses(batch, ConnectionGateConfig(
                base_distance_factor=2.5, max_relaxations=0))
            assert {h.indices for h in small} <= {h.indices for h in large}


class TestComputeAffinity:
    def test_identical_candidates_attain_the_maximum(self):
        # zero motion, perfect appearance: every attenuation factor at its
        # optimum, so no same-geometry perturbation can score higher
        frames = [[cand(f, 100.0, 100.0)] for f in range(3)]
        batch = make_batch(frames)
        params = AffinityProviderParams()
        bundle = compute_affinity(batch, generate_hypotheses(
            batch, ConnectionGateConfig()), params)
        best = bundle.values[0, 0, 0]

        rng = np.random.default_rng(23)
        for _ in range(30):
            shifted = [[cand(f, 100.0 + rng.uniform(-15, 15),
                             100.0 + rng.uniform(-15, 15),
                             appearance=rng.normal(size=8))] for f in range(3)]
            b2 = make_batch(shifted)
            v = compute_affinity(b2, generate_hypotheses(
                b2, ConnectionGateConfig()), params).values[0, 0, 0]
            assert v <= best + 1e-12

    def test_values_zero_outside_hypothesis_set(self):
        frames = [[cand(f, 50.0, 50.0), cand(f, 400.0, 300.0)]
                  for f in range(3)]
        batch = make_batch(frames)
        hyps = generate_hypotheses(batch, ConnectionGateConfig(max_relaxations=0))
        bundle = compute_affinity(batch, hyps, AffinityProviderParams())
        assert np.all(bundle.values[~bundle.valid_mask] == 0.0)
        assert np.all(bundle.values >= 0.0)

    def test_empty_hypotheses_rejected(self):
        frames = [[cand(f, 50.0, 50.0)] for f in range(3)]
        with pytest.raises(ContractError):
            compute_affinity(make_batch(frames), [], AffinityProviderParams())

    def test_non_finite_descriptor_rejected(self):
        bad = np.ones(8)
        bad[3] = np.inf
        frames = [[cand(0, 1, 1)], [cand(1, 1, 1, appearance=bad)],
                  [cand(2, 1, 1)]]
        batch = make_batch(frames)
        hyps = generate_hypotheses(batch, ConnectionGateConfig())
        with pytest.raises(InputValidationError):
            compute_affinity(batch, hyps, AffinityProviderParams())

    def test_appearance_weight_derivative_matches_finite_differences(self):
        rng = np.random.default_rng(29)
        frames = [[cand(f, 100.0 + 3 * f, 100.0,
                        appearance=rng.normal(size=8))] for f in range(3)]
        batch = make_batch(frames)
        hyps = generate_hypotheses(batch, ConnectionGateConfig())
        base = AffinityProviderParams()

        def c_of_aw(aw):
            p = AffinityProviderParams(
                appearance_weight=float(aw[0]),
                motion_weight=base.motion_weight,
                position_scale=base.position_scale,
                size_weight=base.size_weight,
                long_term_weight=base.long_term_weight)
            return compute_affinity(batch, hyps, p).values[0, 0, 0]

        numeric = finite_diff_grad(c_of_aw, np.array([base.appearance_weight]))
        bundle = compute_affinity(batch, hyps, base)
        d_pairwise = np.zeros_like(bundle.pairwise)
        d_pairwise[0, 0] = 1.0
        grads = backprop_affinity(bundle, d_pairwise)
        assert abs(grads.appearance_weight - numeric[0]) <= 1e-5 * abs(numeric[0])


class TestBackpropAffinity:
    def test_zero_gradient_in_zero_gradient_out(self):
        frames = [[cand(f, 100.0, 100.0)] for f in range(3)]
        batch = make_batch(frames)
        bundle = compute_affinity(batch, generate_hypotheses(
            batch, ConnectionGateConfig()), AffinityProviderParams())
        grads = backprop_affinity(bundle, np.zeros_like(bundle.pairwise))
        assert np.all(grads.as_vector() == 0.0)

    def test_single_hypothesis_closed_form(self):
        # one hypothesis: the parameter gradient is the analytic derivative
        # of that single score
        app = np.array([1.0, 0.0, 0.0, 0.0])
        frames = [[cand(0, 100.0, 100.0, appearance=app)],
                  [cand(1, 104.0, 100.0, appearance=app)],
                  [cand(2, 108.0, 100.0, appearance=app)]]
        batch = make_batch(frames)
        hyps = generate_hypotheses(batch, ConnectionGateConfig())
        params = AffinityProviderParams(position_scale=25.0)
        bundle = compute_affinity(batch, hyps, params)

        d_pairwise = np.zeros_like(bundle.pairwise)
        d_pairwise[0, 0] = 1.0
        grads = backprop_affinity(bundle, d_pairwise)

        # hand derivative: same appearance (sim 1 per edge), equal boxes
        # (size sim 1), distance 4 per edge, zero acceleration
        sigma = 25.0
        gauss = math.exp(-16.0 / (2 * sigma * sigma))
        assert grads.appearance_weight == pytest.approx(2 * gauss)
        assert grads.size_weight == pytest.approx(2.0)
        assert grads.motion_weight == pytest.approx(2 * gauss)
        assert grads.long_term_weight == pytest.approx(1.0)
        expected_sigma = ((params.motion_weight + params.appearance_weight)
                          * 2 * gauss * 16.0 / sigma ** 3
                          + params.long_term_weight * 1.0 * 0.0 / sigma ** 2)
        assert grads.position_scale == pytest.approx(expected_sigma)

    @pytest.mark.parametrize("seed", range(6))
    def test_full_chain_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        frames = [[cand(f, 100.0 + 30 * i + rng.uniform(-5, 5),
                        100.0 + 30 * f + rng.uniform(-5, 5),
                        w=rng.uniform(16, 24), h=rng.uniform(16, 24),
                        appearance=rng.normal(size=8))
                   for i in range(2)] for f in range(3)]
        batch = make_batch(frames)
        hyps = generate_hypotheses(batch, ConnectionGateConfig(
            base_distance_factor=3.0, max_relaxations=0))
        assert hyps
        params = AffinityProviderParams(position_scale=22.0)
        w = rng.normal(size=(4, 4))

        bundle = compute_affinity(batch, hyps, params)
        d_pairwise = w.copy()
        grads = backprop_affinity(bundle, d_pairwise).as_vector()

        def loss(vec):
            p = AffinityProviderParams.from_vector(vec)
            b = compute_affinity(batch, hyps, p)
            return float(np.sum(w * b.pairwise))

        numeric = finite_diff_grad(loss, params.as_vector())
        assert np.all(np.abs(grads - numeric) <= 1e-8 + 1e-5 * np.abs(numeric))

    def test_shape_mismatch_rejected(self):
        frames = [[cand(f, 100.0, 100.0)] for f in range(3)]
        batch = make_batch(frames)
        bundle = compute_affinity(batch, generate_hypotheses(
            batch, ConnectionGateConfig()), AffinityProviderParams())
        with pytest.raises(ContractError):
            backprop_affinity(bundle, np.zeros((5, 5)))


class TestReshape:
    def test_single_entry(self):
        values = np.array([[[0.6]]])
        pairwise = reshape_to_pairwise(values, np.ones((1, 1, 1), bool))
        assert pairwise.shape == (1, 1)
        assert pairwise[0, 0] == 0.6

    def test_agreement_pattern_all_sizes_two(self):
        values = np.arange(1.0, 9.0).reshape(2, 2, 2)
        pairwise = reshape_to_pairwise(values, np.ones((2, 2, 2), bool))
        assert pairwise.shape == (4, 4)
        # enumerate all 16 entries and check middle-index agreement
        nonzero = 0
        for j1 in range(4):
            for j2 in range(4):
                i0, i1 = divmod(j1, 2)
                i1b, i2 = divmod(j2, 2)
                if i1 == i1b:
                    assert pairwise[j1, j2] == values[i0, i1, i2]
                    nonzero += 1
                else:
                    assert pairwise[j1, j2] == 0.0
        assert nonzero == 8

    def test_hand_flattened_coordinate(self):
        values = np.zeros((2, 2, 2))
        values[1, 0, 1] = 0.7    # c_{212} in 1-based indexing
        pairwise = reshape_to_pairwise(values, values > 0)
        j1 = flatten_pair(2, 1, 2)   # = 3
        j2 = flatten_pair(1, 2, 2)   # = 2
        assert (j1, j2) == (3, 2)
        assert pairwise[j1 - 1, j2 - 1] == 0.7
        assert np.count_nonzero(pairwise) == 1

    @pytest.mark.parametrize("seed", range(8))
    def test_energy_identity(self, seed):
        # the multilinear objective is preserved across the reshape
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        values = rng.uniform(size=(n, n, n))
        mask = rng.uniform(size=(n, n, n)) > 0.3
        values = values * mask
        pairwise = reshape_to_pairwise(values, mask)
        xs = [rng.uniform(size=n * n), rng.uniform(size=n * n)]
        lhs = pairwise_objective(pairwise, xs)
        rhs = assignment_objective(values, [x.reshape(n, n) for x in xs])
        assert abs(lhs - rhs) <= 1e-12


class TestParamsFile:
    def test_round_trip_is_bit_exact(self, tmp_path):
        params = AffinityProviderParams(
            motion_weight=0.1234567890123456789,
            position_scale=np.pi * 10,
            size_weight=1e-9,
            appearance_weight=2.0 / 3.0,
            long_term_weight=1.0)
        path = tmp_path / "params.txt"
        save_params(params, path)
        loaded = load_params(path)
        assert loaded == params
        save_params(loaded, path)
        assert load_params(path) == params

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "params.txt"
        path.write_text("motion_weight = 1.0\n")
        with pytest.raises(ContractError):
            load_params(path)
