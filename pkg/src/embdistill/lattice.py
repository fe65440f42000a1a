"""Exact log-space dynamic programming over the transducer alignment lattice.

The lattice has nodes (t, u) for frames t = 1..T and emitted-prefix lengths
u = 0..N.  From node (t, u) the model either emits the blank symbol (move to
(t+1, u)) or the next target token y_{u+1} (move to (t, u+1)).  Every valid
alignment ends with the blank emitted from node (T, N), so label emissions
never happen after the last frame has been consumed.  Under this convention
there are exactly C(T+N-1, N) alignments.

All arrays here are 0-indexed: node (t, u) of the description above lives at
index [t-1, u].  Arithmetic is performed in natural-log space with float64
accumulators; path probabilities underflow even at toy sizes otherwise.
"""

from dataclasses import dataclass, field

import numpy as np

NEG_INF = -np.inf


class NonFiniteLossError(ValueError):
    """Raised when the target sequence has zero probability under the lattice."""


def logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    """Stable logsumexp that maps all -inf inputs to -inf without warnings."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True) if a.size else NEG_INF
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class EmissionLattice:
    """Per-node emission log-probabilities over the K = |V|+1 output symbols.

    log_probs[t, u, k] is the log-probability of emitting symbol k from node
    (t+1, u); k = 0 is blank, k >= 1 are vocabulary tokens.  ``tokens`` holds
    the N target token ids (each in 1..K-1) the lattice is conditioned on.
    Each node's distribution must be normalized and free of NaNs.
    """

    log_probs: np.ndarray
    tokens: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        toks = np.asarray(self.tokens, dtype=np.int64)
        object.__setattr__(self, "log_probs", lp)
        object.__setattr__(self, "tokens", toks)
        if lp.ndim != 3:
            raise ValueError(f"log_probs must be T x (N+1) x K, got shape {lp.shape}")
        T, n_rows, K = lp.shape
        if T < 1:
            raise ValueError("frame count T must be >= 1")
        if K < 2:
            raise ValueError("symbol count K must be >= 2 (blank plus vocabulary)")
        if toks.ndim != 1 or toks.shape[0] != n_rows - 1:
            raise ValueError(
                f"tokens must have length N = {n_rows - 1}, got shape {toks.shape}"
            )
        if toks.size and (toks.min() < 1 or toks.max() >= K):
            raise ValueError("token ids must lie in 1..K-1 (0 is reserved for blank)")
        if np.isnan(lp).any():
            raise ValueError("log_probs contains NaN")
        if np.any(lp == np.inf):
            raise ValueError("log_probs contains +inf")
        node_mass = logsumexp(lp, axis=2)
        if not np.all(np.abs(node_mass) < 1e-9):
            worst = float(np.max(np.abs(node_mass)))
            raise ValueError(
                f"emission distributions are not normalized (max |logsumexp| = {worst:.3e})"
            )

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def N(self) -> int:
        return self.log_probs.shape[1] - 1

    @property
    def K(self) -> int:
        return self.log_probs.shape[2]

    def blank_scores(self) -> np.ndarray:
        """(T, N+1) log-probs of emitting blank at each node."""
        return self.log_probs[:, :, 0]

    def token_scores(self) -> np.ndarray:
        """(T, N) log-probs of emitting the level's target token y_{u+1} at (t, u)."""
        if self.N == 0:
            return np.zeros((self.T, 0))
        return np.take_along_axis(
            self.log_probs[:, : self.N, :], self.tokens[None, :, None], axis=2
        )[:, :, 0]


@dataclass(frozen=True)
class AlphaBetaLattice:
    """Forward/backward log-score tables plus the total log-likelihood."""

    alpha: np.ndarray
    beta: np.ndarray
    log_Z: float


@dataclass(frozen=True)
class AlignmentPosterior:
    """Per-token frame-consumption posterior.

    raw[i-1, t-1] is the probability that frame t is consumed while the
    emitted prefix is y_{1:i-1}, i.e. the occupancy of lattice node (t, i-1).
    Rows of ``raw`` sum to at least 1 (a path makes at least one emission per
    token level); ``normalized`` rescales each row to sum to exactly 1.
    """

    raw: np.ndarray
    normalized: np.ndarray = field(default=None)

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        object.__setattr__(self, "raw", raw)
        if raw.ndim != 2:
            raise ValueError(f"posterior must be N x T, got shape {raw.shape}")
        if np.any(raw < 0) or np.isnan(raw).any():
            raise ValueError("posterior entries must be finite and nonnegative")
        sums = raw.sum(axis=1)
        if np.any(sums <= 0):
            raise ValueError("posterior has an all-zero row (zero-likelihood lattice?)")
        if self.normalized is None:
            object.__setattr__(self, "normalized", raw / sums[:, None])
        else:
            object.__setattr__(
                self, "normalized", np.asarray(self.normalized, dtype=np.float64)
            )

    @property
    def N(self) -> int:
        return self.raw.shape[0]

    @property
    def T(self) -> int:
        return self.raw.shape[1]


def _diagonal_indices(s: int, T: int, N: int):
    """Node indices (arrays t, u) on the anti-diagonal t + u = s, 0-indexed."""
    t_lo = max(0, s - N)
    t_hi = min(T - 1, s)
    ts = np.arange(t_lo, t_hi + 1)
    return ts, s - ts


def compute_forward(emissions: EmissionLattice) -> np.ndarray:
    """Forward table: alpha[t, u] = log-prob of all partial alignments reaching (t, u).

    Recursion over anti-diagonals (both predecessors of a node lie on the
    previous diagonal), vectorized per diagonal.
    """
    T, N = emissions.T, emissions.N
    blank = emissions.blank_scores()
    token = emissions.token_scores()
    alpha = np.full((T, N + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for s in range(1, T + N):
        ts, us = _diagonal_indices(s, T, N)
        tm1 = np.maximum(ts - 1, 0)
        um1 = np.maximum(us - 1, 0)
        from_blank = np.where(ts > 0, alpha[tm1, us] + blank[tm1, us], NEG_INF)
        if N > 0:
            from_token = np.where(us > 0, alpha[ts, um1] + token[ts, um1], NEG_INF)
        else:
            from_token = NEG_INF
        alpha[ts, us] = np.logaddexp(from_blank, from_token)
    return alpha


def compute_backward(emissions: EmissionLattice) -> np.ndarray:
    """Backward table: beta[t, u] = log-prob of completing a path from (t, u).

    Termination is the blank emitted from (T, N), so beta[T, N] equals that
    blank's log-probability.
    """
    T, N = emissions.T, emissions.N
    blank = emissions.blank_scores()
    token = emissions.token_scores()
    beta = np.full((T, N + 1), NEG_INF)
    beta[T - 1, N] = blank[T - 1, N]
    for s in range(T + N - 2, -1, -1):
        ts, us = _diagonal_indices(s, T, N)
        tp1 = np.minimum(ts + 1, T - 1)
        up1 = np.minimum(us + 1, N)
        via_blank = np.where(ts < T - 1, blank[ts, us] + beta[tp1, us], NEG_INF)
        if N > 0:
            via_token = np.where(
                us < N, token[ts, np.minimum(us, N - 1)] + beta[ts, up1], NEG_INF
            )
        else:
            via_token = NEG_INF
        beta[ts, us] = np.logaddexp(via_blank, via_token)
    return beta


def forward_backward(emissions: EmissionLattice) -> AlphaBetaLattice:
    alpha = compute_forward(emissions)
    beta = compute_backward(emissions)
    return AlphaBetaLattice(alpha=alpha, beta=beta, log_Z=log_likelihood(alpha, emissions))


def log_likelihood(alpha: np.ndarray, emissions: EmissionLattice) -> float:
    """log p(y | X): forward score at (T, N) plus the terminating blank.

    Returns -inf (not an error) when no alignment has nonzero probability.
    """
    T, N = emissions.T, emissions.N
    if alpha.shape != (T, N + 1):
        raise ValueError(f"alpha shape {alpha.shape} does not match lattice ({T}, {N + 1})")
    return float(alpha[T - 1, N] + emissions.log_probs[T - 1, N, 0])


def node_occupancy(
    alpha: np.ndarray, beta: np.ndarray, log_Z: float, emissions: EmissionLattice
) -> np.ndarray:
    """gamma[t, u] = probability that a random complete alignment emits from (t, u)."""
    T, N = emissions.T, emissions.N
    if alpha.shape != (T, N + 1) or beta.shape != (T, N + 1):
        raise ValueError("alpha/beta shapes do not match the lattice")
    if log_Z == NEG_INF:
        raise NonFiniteLossError("occupancy undefined: lattice log-likelihood is -inf")
    return np.exp(alpha + beta - log_Z)


def alignment_posterior(gamma: np.ndarray) -> AlignmentPosterior:
    """Extract q from node occupancies: q_i(t) = gamma(t, i-1) for i = 1..N.

    The empty prefix counts (node column u = 0 maps to token i = 1); column
    u = N is the beyond-last-token level and does not appear in q.
    """
    T = gamma.shape[0]
    N = gamma.shape[1] - 1
    raw = gamma[:, :N].T.copy()
    if N > 0 and np.any(raw.sum(axis=1) <= 0):
        raise ValueError("occupancy has an all-zero token level")
    return AlignmentPosterior(raw=raw.reshape(N, T))


def transducer_loss_and_logit_grads(emissions: EmissionLattice):
    """Negative log-likelihood and its exact gradient w.r.t. pre-softmax logits.

    With edge posteriors w_k(t, u) (the probability that a random alignment
    emits symbol k from node (t, u)), the gradient is

        dNLL / dlogit[t, u, k] = gamma(t, u) * softmax[t, u, k] - w_k(t, u),

    where gamma = sum_k w_k.  Only blank and the level's target token carry
    nonzero w; all other symbols receive the softmax-mass term alone.
    """
    alpha = compute_forward(emissions)
    beta = compute_backward(emissions)
    log_Z = log_likelihood(alpha, emissions)
    return -log_Z, loss_grads_from_tables(emissions, alpha, beta, log_Z)


def loss_grads_from_tables(
    emissions: EmissionLattice, alpha: np.ndarray, beta: np.ndarray, log_Z: float
) -> np.ndarray:
    """NLL logit gradient from precomputed forward/backward tables."""
    T, N = emissions.T, emissions.N
    if not np.isfinite(log_Z):
        raise NonFiniteLossError("transducer loss is non-finite: no feasible alignment")

    blank = emissions.blank_scores()
    token = emissions.token_scores()

    with np.errstate(invalid="ignore"):
        w_blank = np.full((T, N + 1), NEG_INF)
        if T > 1:
            w_blank[: T - 1, :] = alpha[: T - 1, :] + blank[: T - 1, :] + beta[1:, :]
        w_blank[T - 1, N] = alpha[T - 1, N] + blank[T - 1, N]
        w_tok = np.full((T, N + 1), NEG_INF)
        if N > 0:
            w_tok[:, :N] = alpha[:, :N] + token + beta[:, 1:]
    w_blank = np.exp(w_blank - log_Z)
    w_tok = np.exp(w_tok - log_Z)

    occupancy = w_blank + w_tok
    grad = occupancy[:, :, None] * np.exp(emissions.log_probs)
    grad[:, :, 0] -= w_blank
    if N > 0:
        u_idx, t_idx = np.meshgrid(np.arange(N), np.arange(T))
        grad[t_idx, u_idx, emissions.tokens[u_idx]] -= w_tok[:, :N]
    return grad


def lattice_dump(emissions: EmissionLattice) -> dict:
    """Debug view of a full lattice computation as plain JSON-serializable data."""
    ab = forward_backward(emissions)
    gamma = node_occupancy(ab.alpha, ab.beta, ab.log_Z, emissions)
    doc = {
        "T": emissions.T,
        "N": emissions.N,
        "K": emissions.K,
        "tokens": emissions.tokens.tolist(),
        "log_probs": emissions.log_probs.tolist(),
        "alpha": ab.alpha.tolist(),
        "beta": ab.beta.tolist(),
        "log_Z": ab.log_Z,
        "gamma": gamma.tolist(),
    }
    if emissions.N > 0:
        q = alignment_posterior(gamma)
        doc["q_raw"] = q.raw.tolist()
        doc["q_normalized"] = q.normalized.tolist()
    else:
        doc["q_raw"] = []
        doc["q_normalized"] = []
    return doc
