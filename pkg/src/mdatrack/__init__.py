"""Trainable multi-object tracking via differentiable multi-dimensional
assignment: affinity tensors over hypothesis trajectories, a rank-1
power-iteration solver with analytic gradients, alternating l1
normalization, an online tracking loop with virtual candidates, and CLEAR
MOT evaluation."""

from .affinity import (
    AffinityParamGradient,
    AffinityProviderParams,
    AffinityTensorBundle,
    ConnectionGateConfig,
    backprop_affinity,
    compute_affinity,
    generate_hypotheses,
    load_params,
    reshape_to_pairwise,
    save_params,
)
from .evalio import (
    ClearMotReport,
    MotRecord,
    Scenario,
    ScenarioSpec,
    clear_mot,
    generate_scenario,
    load_mot,
    load_mot_records,
    records_to_tracks,
    save_mot,
    save_mot_records,
    tracks_to_records,
)
from .oracle import BruteForceResult, brute_force_mda, finite_diff_grad
from .pipeline import (
    ConfidenceQuality,
    GroundTruthQuality,
    PipelineConfig,
    TrackRecord,
    TrackState,
    resolve_virtuals,
    run_sequence,
    track_batch,
)
from .solver import (
    AssignmentState,
    PartialNormMask,
    assignment_objective,
    bce_loss,
    discretize,
    dump_state,
    l1_normalize_backward,
    l1_normalize_forward,
    pairwise_objective,
    power_iteration_backward,
    power_iteration_forward,
)
from .training import train_provider
from .types import (
    AssociationBatch,
    Candidate,
    HypothesisTrajectory,
    PairIndex,
    batch_windows,
    flatten_pair,
    unflatten_pair,
)

__version__ = "0.1.0"
