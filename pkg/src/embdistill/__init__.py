"""Embedding-distillation training for toy sequence transducers and attention decoders.

The package is organized around:

- ``lattice``: exact log-space forward/backward over the transducer
  alignment lattice, node occupancies, frame-consumption posteriors, and
  the lattice loss gradient;
- ``distill``: the auxiliary embedding-regression losses (per-token,
  posterior-expectation, token-synchronous) and multitask combination;
- ``oracle``: brute-force enumeration ground truth for small lattices;
- ``model``: minimal transducer/attention models with manual backprop,
  Adam, parameter EMA, greedy decoding, and edit-distance scoring;
- ``teacher``: the frozen contextual embedding teacher and target store;
- ``corpus``: the deterministic synthetic corpus generator;
- ``train``: the training loop, evaluation, sweeps, and oracle checks;
- ``cli``: the ``embdistill`` command-line tool.
"""

from .distill import (
    AuxLossResult,
    DistanceKind,
    RegressionNet,
    attention_embedding_loss,
    distance,
    joint_regression_loss,
    l2_joint_token_sync_gap,
    multitask_combine,
    token_sync_loss,
)
from .lattice import (
    AlignmentPosterior,
    AlphaBetaLattice,
    EmissionLattice,
    NonFiniteLossError,
    alignment_posterior,
    compute_backward,
    compute_forward,
    forward_backward,
    lattice_dump,
    log_likelihood,
    node_occupancy,
    transducer_loss_and_logit_grads,
)
from .model import (
    Dims,
    ModelParams,
    OptimizerState,
    adam_step,
    attention_step,
    blank_removal,
    edit_distance,
    ema_params,
    ema_update,
    encode,
    greedy_decode,
    greedy_decode_attention,
    greedy_decode_transducer,
    init_optimizer,
    init_params,
    joint_emissions,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .teacher import TeacherConfig, base_embedding, cache_targets, contextual_embed, load_targets
from .train import (
    GenDataConfig,
    TrainConfig,
    evaluate_split,
    generate_data,
    inspect_lattice,
    oracle_check,
    sweep_run,
    train_run,
)

__version__ = "0.1.0"
