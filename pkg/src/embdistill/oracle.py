"""Brute-force enumeration over all valid alignments of small lattices.

Ground truth for likelihoods, posteriors, and expectation losses.  Nothing
here is used during training; every function recomputes from first
principles so the dynamic-programming and vectorized code paths can be
checked against an independent implementation.
"""

from math import comb

import numpy as np

from .lattice import NEG_INF, AlignmentPosterior, EmissionLattice, logsumexp

ENUMERATION_GUARD = 10**6

BLANK = 0


def enumerate_alignments(T: int, N: int) -> list[tuple[int, ...]]:
    """All interleavings of T blanks and N token emissions that end in a blank.

    Symbols are positional: 0 marks a blank, i in 1..N marks the emission of
    the i-th target token.  The count is exactly C(T+N-1, N).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if N < 0:
        raise ValueError("N must be >= 0")
    if comb(T + N - 1, N) > ENUMERATION_GUARD:
        raise ValueError(
            f"refusing to enumerate {comb(T + N - 1, N)} alignments "
            f"(guard {ENUMERATION_GUARD})"
        )
    out: list[tuple[int, ...]] = []

    def extend(prefix: list[int], blanks: int, toks: int):
        if blanks == T - 1 and toks == N:
            out.append(tuple(prefix) + (BLANK,))
            return
        if blanks < T - 1:
            prefix.append(BLANK)
            extend(prefix, blanks + 1, toks)
            prefix.pop()
        if toks < N:
            prefix.append(toks + 1)
            extend(prefix, blanks, toks + 1)
            prefix.pop()

    extend([], 0, 0)
    return out


def path_log_prob(emissions: EmissionLattice, alignment: tuple[int, ...]) -> float:
    """Log-probability of one alignment: product of per-node emission probs."""
    t, u = 0, 0
    total = 0.0
    for sym in alignment:
        if sym == BLANK:
            total += emissions.log_probs[t, u, 0]
            t += 1
        else:
            total += emissions.log_probs[t, u, emissions.tokens[u]]
            u += 1
    return total


def exact_log_likelihood(emissions: EmissionLattice) -> float:
    """logsumexp of path log-probs over the enumerated alignment set."""
    paths = enumerate_alignments(emissions.T, emissions.N)
    scores = np.array([path_log_prob(emissions, z) for z in paths])
    return logsumexp(scores)


def exact_posterior(emissions: EmissionLattice):
    """Literal evaluation of the frame-consumption posterior.

    For every alignment z and every prefix length n = 0..T+N-1 (the empty
    prefix included), the path posterior p(z | X, y) is accumulated at
    (i, t) = (tokens-so-far + 1, blanks-so-far + 1).  Returns the same
    raw/normalized pair as the lattice route.
    """
    T, N = emissions.T, emissions.N
    log_Z = exact_log_likelihood(emissions)
    if log_Z == NEG_INF:
        raise ValueError("posterior undefined: total likelihood is zero")
    raw = np.zeros((N, T))
    for z in enumerate_alignments(T, N):
        p = np.exp(path_log_prob(emissions, z) - log_Z)
        t, u = 0, 0
        for sym in z:
            if u < N:
                raw[u, t] += p
            if sym == BLANK:
                t += 1
            else:
                u += 1
    return AlignmentPosterior(raw=raw)


def exact_joint_loss(phi, psi, q_hat, targets, reg_weights, reg_bias, kind: str) -> float:
    """Direct double sum of posterior-weighted regression distances.

    The regression output for (frame t, token i) is
    W @ concat(phi_t, psi_i) + b; distances are either the dimension-
    normalized L1 or squared L2.  Pure-Python loops on purpose.
    """
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n_tokens, n_frames = q_hat.shape
    if phi.shape[0] != n_frames or psi.shape[0] != n_tokens or targets.shape[0] != n_tokens:
        raise ValueError("phi/psi/q/targets shapes are inconsistent")
    dim = targets.shape[1]
    total = 0.0
    for i in range(n_tokens):
        for t in range(n_frames):
            r = reg_weights @ np.concatenate([phi[t], psi[i]]) + reg_bias
            diff = r - targets[i]
            if kind == "l1_norm":
                d = float(np.sum(np.abs(diff))) / dim
            elif kind == "l2_sq":
                d = float(np.sum(diff * diff))
            else:
                raise ValueError(f"unknown distance kind {kind!r}")
            total += q_hat[i, t] * d
    return total
