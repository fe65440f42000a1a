"""Auxiliary embedding-regression losses and multitask combination.

Three loss variants share one regression head R (a single affine map, no
nonlinearity):

- per-token regression against decoder states (attention models),
- a posterior-weighted expectation of distances over all (frame, token)
  pairs (transducer models), and
- its token-synchronous approximation, which regresses once per token from
  posterior-averaged acoustic vectors and shrinks the number of regression
  activations from T*N to N.

Gradients are closed-form; the alignment posterior is always treated as a
constant, so no gradient component for it exists anywhere in the results.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .lattice import AlignmentPosterior

Q_NORMALIZATION_TOL = 1e-9


class DistanceKind(Enum):
    """Supported distance functions between predicted and target embeddings."""

    L1_NORMALIZED = "l1_norm"
    L2_SQUARED = "l2_sq"


def distance(kind: DistanceKind, u: np.ndarray, v: np.ndarray):
    """Distance d(u, v) and its gradient with respect to u.

    L1_NORMALIZED divides the absolute-difference sum by the embedding
    dimensionality; L2_SQUARED is the plain squared Euclidean distance.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    diff = u - v
    if kind is DistanceKind.L1_NORMALIZED:
        dim = u.shape[-1]
        return float(np.sum(np.abs(diff))) / dim, np.sign(diff) / dim
    if kind is DistanceKind.L2_SQUARED:
        return float(np.sum(diff * diff)), 2.0 * diff
    raise ValueError(f"unknown distance kind: {kind}")


def _distance_grid(kind: DistanceKind, pred: np.ndarray, target: np.ndarray):
    """Vectorized distances plus d(d)/d(pred) over ...xD stacks."""
    diff = pred - target
    if kind is DistanceKind.L1_NORMALIZED:
        dim = pred.shape[-1]
        return np.sum(np.abs(diff), axis=-1) / dim, np.sign(diff) / dim
    if kind is DistanceKind.L2_SQUARED:
        return np.sum(diff * diff, axis=-1), 2.0 * diff
    raise ValueError(f"unknown distance kind: {kind}")


@dataclass(frozen=True)
class RegressionNet:
    """Affine regression head R(x) = W x + b.

    ``pair_split`` is None for the one-vector (attention) form.  For the
    two-vector (transducer) form it holds the acoustic dimensionality, so
    W splits into blocks acting on phi (first) and psi (second).
    """

    weights: np.ndarray
    bias: np.ndarray
    pair_split: int | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError("regression net needs W (D_out x D_in) and b (D_out)")
        if self.pair_split is not None and not 0 < self.pair_split < w.shape[1]:
            raise ValueError("pair_split must cut W into two nonempty blocks")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def phi_block(self) -> np.ndarray:
        if self.pair_split is None:
            raise ValueError("regression net is in one-vector mode")
        return self.weights[:, : self.pair_split]

    def psi_block(self) -> np.ndarray:
        if self.pair_split is None:
            raise ValueError("regression net is in one-vector mode")
        return self.weights[:, self.pair_split :]


@dataclass(frozen=True)
class AuxLossResult:
    """Value and exact gradients of one auxiliary loss evaluation.

    grad_phi / grad_psi are gradients w.r.t. the stacked input vectors
    (grad_psi is None in one-vector mode).  There is deliberately no slot
    for an alignment-posterior gradient: the posterior is a constant.
    ``n_regression_activations`` counts the regression outputs materialized,
    which is what separates the joint (T*N) and token-synchronous (N) costs.
    """

    value: float
    grad_phi: np.ndarray
    grad_psi: np.ndarray | None
    grad_reg_weights: np.ndarray
    grad_reg_bias: np.ndarray
    n_regression_activations: int


def _select_weights(q: AlignmentPosterior, use_raw: bool) -> np.ndarray:
    if use_raw:
        return q.raw
    weights = q.normalized
    sums = weights.sum(axis=1)
    if weights.size and np.max(np.abs(sums - 1.0)) > Q_NORMALIZATION_TOL:
        raise ValueError("normalized posterior rows do not sum to 1")
    return weights


def attention_embedding_loss(
    states: np.ndarray,
    targets: np.ndarray,
    reg: RegressionNet,
    kind: DistanceKind,
) -> AuxLossResult:
    """Sum over tokens of d(R(state_i), e_i) for attention-style decoders."""
    states = np.asarray(states, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if reg.pair_split is not None:
        raise ValueError("attention mode needs a one-vector regression net")
    if states.shape[0] != targets.shape[0]:
        raise ValueError(
            f"{states.shape[0]} states vs {targets.shape[0]} target embeddings"
        )
    if states.ndim != 2 or states.shape[1] != reg.in_dim:
        raise ValueError("state dimensionality does not match the regression net")
    pred = states @ reg.weights.T + reg.bias
    values, dpred = _distance_grid(kind, pred, targets)
    return AuxLossResult(
        value=float(values.sum()),
        grad_phi=dpred @ reg.weights,
        grad_psi=None,
        grad_reg_weights=dpred.T @ states,
        grad_reg_bias=dpred.sum(axis=0),
        n_regression_activations=states.shape[0],
    )


def _check_transducer_inputs(phi, psi, weights, targets, reg):
    if reg.pair_split is None:
        raise ValueError("transducer mode needs a two-vector regression net")
    n_tokens, n_frames = weights.shape
    if phi.shape != (n_frames, reg.pair_split):
        raise ValueError(f"phi shape {phi.shape} vs posterior frames {n_frames}")
    if psi.shape != (n_tokens, reg.in_dim - reg.pair_split):
        raise ValueError(f"psi shape {psi.shape} vs posterior tokens {n_tokens}")
    if targets.shape != (n_tokens, reg.out_dim):
        raise ValueError(f"targets shape {targets.shape} vs ({n_tokens}, {reg.out_dim})")


def joint_regression_loss(
    phi: np.ndarray,
    psi: np.ndarray,
    q: AlignmentPosterior,
    targets: np.ndarray,
    reg: RegressionNet,
    kind: DistanceKind,
    use_raw: bool = False,
) -> AuxLossResult:
    """Posterior-weighted expectation of distances over all (token, frame) pairs.

    value = sum_i sum_t q_i(t) * d(R(phi_t, psi_i), e_i).  The posterior is a
    constant: gradients flow to phi, psi, and R only.
    """
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    weights = _select_weights(q, use_raw)
    _check_transducer_inputs(phi, psi, weights, targets, reg)
    w_phi, w_psi = reg.phi_block(), reg.psi_block()
    # pred[i, t, :] = W_phi phi_t + W_psi psi_i + b
    pred = phi[None, :, :] @ w_phi.T + (psi @ w_psi.T + reg.bias)[:, None, :]
    values, dpred = _distance_grid(kind, pred, targets[:, None, :])
    g = weights[:, :, None] * dpred
    return AuxLossResult(
        value=float(np.sum(weights * values)),
        grad_phi=np.einsum("itd,df->tf", g, w_phi),
        grad_psi=np.einsum("itd,df->if", g, w_psi),
        grad_reg_weights=np.concatenate(
            [np.einsum("itd,tf->df", g, phi), np.einsum("itd,if->df", g, psi)], axis=1
        ),
        grad_reg_bias=g.sum(axis=(0, 1)),
        n_regression_activations=pred.shape[0] * pred.shape[1],
    )


def token_sync_loss(
    phi: np.ndarray,
    psi: np.ndarray,
    q: AlignmentPosterior,
    targets: np.ndarray,
    reg: RegressionNet,
    kind: DistanceKind,
    use_raw: bool = False,
) -> AuxLossResult:
    """Token-synchronous approximation: one regression per token.

    Each token's acoustic input is the posterior-weighted average
    phi_bar_i = sum_t q_i(t) phi_t, so only N regression activations are
    materialized instead of T*N.  With an affine R and convex distance this
    lower-bounds the joint expectation (Jensen) whenever the posterior rows
    are normalized.
    """
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    weights = _select_weights(q, use_raw)
    _check_transducer_inputs(phi, psi, weights, targets, reg)
    w_phi, w_psi = reg.phi_block(), reg.psi_block()
    phi_bar = weights @ phi
    pred = phi_bar @ w_phi.T + psi @ w_psi.T + reg.bias
    values, dpred = _distance_grid(kind, pred, targets)
    grad_phi_bar = dpred @ w_phi
    return AuxLossResult(
        value=float(values.sum()),
        grad_phi=weights.T @ grad_phi_bar,
        grad_psi=dpred @ w_psi,
        grad_reg_weights=np.concatenate([dpred.T @ phi_bar, dpred.T @ psi], axis=1),
        grad_reg_bias=dpred.sum(axis=0),
        n_regression_activations=pred.shape[0],
    )


def l2_joint_token_sync_gap(
    phi: np.ndarray, psi: np.ndarray, q: AlignmentPosterior, reg: RegressionNet
) -> float:
    """Exact gap between the joint and token-sync losses for squared L2.

    joint = token_sync + sum_i sum_t q_i(t) ||W_phi (phi_t - phi_bar_i)||^2
    whenever the posterior rows are normalized; the gap is the posterior-
    weighted variance of the projected acoustic vectors and is nonnegative.
    """
    phi = np.asarray(phi, dtype=np.float64)
    weights = _select_weights(q, use_raw=False)
    w_phi = reg.phi_block()
    phi_bar = weights @ phi
    proj = phi @ w_phi.T
    proj_bar = phi_bar @ w_phi.T
    dev = proj[None, :, :] - proj_bar[:, None, :]
    return float(np.sum(weights * np.sum(dev * dev, axis=-1)))


def multitask_combine(
    main_value: float,
    main_grads: dict[str, np.ndarray],
    aux_fn: Callable[[], tuple[float, dict[str, np.ndarray]]],
    sigma: float,
):
    """main + sigma * aux with linear gradient combination.

    sigma = 0 skips the auxiliary computation entirely and returns the main
    loss objects unchanged, so baseline runs are bit-identical to runs of a
    build without any auxiliary machinery.
    """
    if sigma < 0:
        raise ValueError(f"auxiliary weight must be nonnegative, got {sigma}")
    if sigma == 0:
        return main_value, main_grads, 0.0
    aux_value, aux_grads = aux_fn()
    combined = {name: g.copy() for name, g in main_grads.items()}
    for name, g in aux_grads.items():
        if name in combined:
            combined[name] = combined[name] + sigma * g
        else:
            combined[name] = sigma * g
    return main_value + sigma * aux_value, combined, aux_value
