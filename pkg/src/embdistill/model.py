"""Minimal sequence models with hand-written backpropagation.

Two decoders over a shared windowed-affine encoder:

- transducer: recurrent prediction net + one-hidden-layer tanh joint net
  producing a full emission lattice, trained with the exact lattice loss;
- attention decoder: recurrent cell + dot-product attention + affine/tanh
  output producing a pre-softmax activation per step, trained with
  teacher-forced cross-entropy.

Both carry an affine regression head for the embedding-distillation
auxiliary losses.  Everything is float64 and gradients are closed-form, so
every composite loss is checkable against central finite differences.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import distill
from .distill import AuxLossResult, DistanceKind, RegressionNet, multitask_combine
from .lattice import (
    EmissionLattice,
    alignment_posterior,
    compute_backward,
    compute_forward,
    log_likelihood,
    loss_grads_from_tables,
    node_occupancy,
)
from .rng import stream

CHECKPOINT_VERSION = "1"

TRANSDUCER = "transducer"
ATTENTION = "attention"


@dataclass(frozen=True)
class Dims:
    """Shape configuration shared by both decoder variants."""

    n_symbols: int          # K: blank + sentinels + vocabulary
    feature_dim: int
    d_emb_in: int = 16
    d_enc: int = 32
    d_pred: int = 32
    d_joint: int = 32
    d_dec: int = 32
    emb_dim: int = 32       # regression target dimensionality
    context_frames: int = 3
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if self.context_frames < 1 or self.context_frames % 2 == 0:
            raise ValueError("context_frames must be odd and >= 1")
        if self.n_symbols < 2:
            raise ValueError("need at least blank plus one token")


def param_shapes(dims: Dims, decoder: str) -> dict[str, tuple[int, ...]]:
    """Name -> shape map for every trainable tensor of the chosen decoder."""
    k, c = dims.n_symbols, dims.context_frames
    shapes: dict[str, tuple[int, ...]] = {
        "emb": (k, dims.d_emb_in),
        "enc_w": (dims.d_enc, c * dims.feature_dim),
        "enc_b": (dims.d_enc,),
    }
    if decoder == TRANSDUCER:
        shapes.update(
            pred_w=(dims.d_pred, dims.d_emb_in),
            pred_u=(dims.d_pred, dims.d_pred),
            pred_b=(dims.d_pred,),
            joint_w_phi=(dims.d_joint, dims.d_enc),
            joint_w_psi=(dims.d_joint, dims.d_pred),
            joint_b=(dims.d_joint,),
            joint_out_w=(k, dims.d_joint),
            joint_out_b=(k,),
            reg_w=(dims.emb_dim, dims.d_enc + dims.d_pred),
            reg_b=(dims.emb_dim,),
        )
    elif decoder == ATTENTION:
        shapes.update(
            dec_w=(dims.d_dec, dims.d_emb_in),
            dec_u=(dims.d_dec, dims.d_dec),
            dec_b=(dims.d_dec,),
            att_w=(dims.d_enc, dims.d_dec),
            comb_w=(dims.d_dec, dims.d_dec + dims.d_enc),
            comb_b=(dims.d_dec,),
            lam=(k - 1, dims.d_dec),
            reg_w=(dims.emb_dim, dims.d_dec),
            reg_b=(dims.emb_dim,),
        )
    else:
        raise ValueError(f"unknown decoder kind {decoder!r}")
    return shapes


@dataclass
class ModelParams:
    dims: Dims
    decoder: str
    seed: int
    tensors: dict[str, np.ndarray]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def regression_net(self) -> RegressionNet:
        split = self.dims.d_enc if self.decoder == TRANSDUCER else None
        return RegressionNet(
            weights=self.tensors["reg_w"], bias=self.tensors["reg_b"], pair_split=split
        )


def init_params(seed: int, dims: Dims, decoder: str = TRANSDUCER) -> ModelParams:
    """Deterministic init: matrices uniform in +-1/sqrt(fan_in), biases zero."""
    tensors = {}
    for name, shape in param_shapes(dims, decoder).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[-1])
            tensors[name] = stream(seed, "init", name).uniform(-bound, bound, size=shape)
    return ModelParams(dims=dims, decoder=decoder, seed=seed, tensors=tensors)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.tensors.items()}


# ---------------------------------------------------------------------------
# encoder


def _frame_windows(features: np.ndarray, c: int) -> np.ndarray:
    half = c // 2
    padded = np.pad(features, ((half, half), (0, 0)))
    t, f = features.shape
    return np.stack([padded[i : i + t] for i in range(c)], axis=1).reshape(t, c * f)


def encode(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Per-frame acoustic vectors: tanh(W . window_of_c_frames + b)."""
    phi, _ = _encode_fwd(params, features)
    return phi


def _encode_fwd(params: ModelParams, features: np.ndarray):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError("features must be a nonempty T x F matrix")
    if features.shape[1] != params.dims.feature_dim:
        raise ValueError(
            f"feature dim {features.shape[1]} != configured {params.dims.feature_dim}"
        )
    windows = _frame_windows(features, params.dims.context_frames)
    phi = np.tanh(windows @ params.tensors["enc_w"].T + params.tensors["enc_b"])
    return phi, windows


def _encode_bwd(params, windows, phi, d_phi, grads):
    d_pre = d_phi * (1.0 - phi * phi)
    grads["enc_w"] += d_pre.T @ windows
    grads["enc_b"] += d_pre.sum(axis=0)


# ---------------------------------------------------------------------------
# prediction network (transducer language side)


def _check_token_ids(params: ModelParams, tokens: np.ndarray):
    if tokens.size and (tokens.min() < 1 or tokens.max() >= params.dims.n_symbols):
        raise ValueError("token id out of vocabulary (ids are 1..K-1)")


def predict(params: ModelParams, tokens) -> np.ndarray:
    """Prefix outputs psi_1..psi_{N+1} under teacher forcing.

    psi_1 is the empty-prefix output (the recurrent cell applied to the BOS
    embedding from a zero state); psi_{i+1} conditions on y_{1:i}.
    """
    psi, _ = _predict_fwd(params, tokens)
    return psi


def _predict_fwd(params: ModelParams, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_token_ids(params, tokens)
    ids = np.concatenate([[params.dims.bos_id], tokens])
    xs = params.tensors["emb"][ids]
    w, u, b = params.tensors["pred_w"], params.tensors["pred_u"], params.tensors["pred_b"]
    states = np.empty((len(ids), params.dims.d_pred))
    h = np.zeros(params.dims.d_pred)
    for i in range(len(ids)):
        h = np.tanh(w @ xs[i] + u @ h + b)
        states[i] = h
    return states, ids


def _predict_bwd(params, ids, states, d_psi, grads):
    w, u = params.tensors["pred_w"], params.tensors["pred_u"]
    xs = params.tensors["emb"][ids]
    carry = np.zeros(params.dims.d_pred)
    for i in range(len(ids) - 1, -1, -1):
        d_pre = (d_psi[i] + carry) * (1.0 - states[i] * states[i])
        prev = states[i - 1] if i > 0 else np.zeros(params.dims.d_pred)
        grads["pred_w"] += np.outer(d_pre, xs[i])
        grads["pred_u"] += np.outer(d_pre, prev)
        grads["pred_b"] += d_pre
        grads["emb"][ids[i]] += w.T @ d_pre
        carry = u.T @ d_pre


def prediction_step(params: ModelParams, state: np.ndarray, token_id: int) -> np.ndarray:
    """One recurrent update of the prediction net (used by greedy decoding)."""
    t = params.tensors
    return np.tanh(t["pred_w"] @ t["emb"][token_id] + t["pred_u"] @ state + t["pred_b"])


# ---------------------------------------------------------------------------
# joint network


def joint_emissions(params: ModelParams, phi: np.ndarray, psi: np.ndarray, tokens) -> EmissionLattice:
    """Emission lattice: log-softmax of the joint net at every node (t, u)."""
    lattice, _ = _joint_fwd(params, phi, psi, tokens)
    return lattice


def _joint_fwd(params: ModelParams, phi, psi, tokens):
    t = params.tensors
    pre = phi @ t["joint_w_phi"].T
    pre = pre[:, None, :] + (psi @ t["joint_w_psi"].T + t["joint_b"])[None, :, :]
    hidden = np.tanh(pre)
    logits = hidden @ t["joint_out_w"].T + t["joint_out_b"]
    log_probs = logits - _logsumexp_lastaxis(logits)
    return EmissionLattice(log_probs=log_probs, tokens=np.asarray(tokens)), hidden


def _logsumexp_lastaxis(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m


def _joint_bwd(params, phi, psi, hidden, d_logits, grads):
    t = params.tensors
    grads["joint_out_w"] += np.einsum("tuk,tuj->kj", d_logits, hidden)
    grads["joint_out_b"] += d_logits.sum(axis=(0, 1))
    d_pre = np.einsum("tuk,kj->tuj", d_logits, t["joint_out_w"]) * (1.0 - hidden * hidden)
    grads["joint_w_phi"] += np.einsum("tuj,tf->jf", d_pre, phi)
    grads["joint_w_psi"] += np.einsum("tuj,uf->jf", d_pre, psi)
    grads["joint_b"] += d_pre.sum(axis=(0, 1))
    d_phi = np.einsum("tuj,jf->tf", d_pre, t["joint_w_phi"])
    d_psi = np.einsum("tuj,jf->uf", d_pre, t["joint_w_psi"])
    return d_phi, d_psi


def joint_logits_single(params: ModelParams, phi_t: np.ndarray, psi_u: np.ndarray) -> np.ndarray:
    t = params.tensors
    hidden = np.tanh(t["joint_w_phi"] @ phi_t + t["joint_w_psi"] @ psi_u + t["joint_b"])
    return t["joint_out_w"] @ hidden + t["joint_out_b"]


# ---------------------------------------------------------------------------
# attention decoder


def attention_step(params: ModelParams, encoder_states: np.ndarray, prev_token: int, decoder_state: np.ndarray):
    """One decoding step: (pre-softmax activation, next state, token log-probs).

    Token log-probs cover ids 1..K-1 (index j corresponds to id j+1); the
    blank symbol does not exist on the attention side.
    """
    phi_i, state, _ = _attention_step_full(params, encoder_states, prev_token, decoder_state)
    logits = params.tensors["lam"] @ phi_i
    return phi_i, state, logits - _logsumexp_lastaxis(logits)


def _attention_step_full(params, enc, prev_token, state):
    t = params.tensors
    x = t["emb"][prev_token]
    s = np.tanh(t["dec_w"] @ x + t["dec_u"] @ state + t["dec_b"])
    scores = enc @ (t["att_w"] @ s)
    scores = scores - scores.max()
    att = np.exp(scores)
    att /= att.sum()
    ctx = att @ enc
    cat = np.concatenate([s, ctx])
    phi_i = np.tanh(t["comb_w"] @ cat + t["comb_b"])
    return phi_i, s, (x, s, att, ctx, cat, phi_i)


def _attention_fwd(params: ModelParams, enc: np.ndarray, tokens: np.ndarray):
    """Teacher-forced pass; returns stacked activations and per-step caches."""
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_token_ids(params, tokens)
    if tokens.size == 0:
        raise ValueError("attention decoding needs at least one target token")
    prev_ids = np.concatenate([[params.dims.bos_id], tokens[:-1]])
    state = np.zeros(params.dims.d_dec)
    caches = []
    phis = np.empty((len(tokens), params.dims.d_dec))
    for i, prev in enumerate(prev_ids):
        phi_i, state, cache = _attention_step_full(params, enc, int(prev), state)
        caches.append(cache)
        phis[i] = phi_i
    logits = phis @ params.tensors["lam"].T
    log_probs = logits - _logsumexp_lastaxis(logits)
    return phis, log_probs, prev_ids, caches


def _attention_bwd(params, enc, prev_ids, caches, d_logits, d_phi_states, grads):
    """BPTT through the decoder; returns the encoder-state gradient.

    d_logits is (N, K-1) (zeros for aux-only passes); d_phi_states is the
    direct gradient on the stacked pre-softmax activations (zeros for the
    cross-entropy pass).
    """
    t = params.tensors
    n = len(caches)
    d_enc = np.zeros_like(enc)
    carry = np.zeros(params.dims.d_dec)
    d_dec_split = params.dims.d_dec
    for i in range(n - 1, -1, -1):
        x, s, att, ctx, cat, phi_i = caches[i]
        d_phi = t["lam"].T @ d_logits[i] + d_phi_states[i]
        grads["lam"] += np.outer(d_logits[i], phi_i)
        d_cat_pre = d_phi * (1.0 - phi_i * phi_i)
        grads["comb_w"] += np.outer(d_cat_pre, cat)
        grads["comb_b"] += d_cat_pre
        d_cat = t["comb_w"].T @ d_cat_pre
        d_s = d_cat[:d_dec_split] + carry
        d_ctx = d_cat[d_dec_split:]
        # context and attention weights
        d_att = enc @ d_ctx
        d_enc += np.outer(att, d_ctx)
        d_scores = att * (d_att - att @ d_att)
        key = t["att_w"] @ s
        d_enc += np.outer(d_scores, key)
        d_key = enc.T @ d_scores
        grads["att_w"] += np.outer(d_key, s)
        d_s = d_s + t["att_w"].T @ d_key
        # recurrent cell
        d_s_pre = d_s * (1.0 - s * s)
        grads["dec_w"] += np.outer(d_s_pre, x)
        prev_state = caches[i - 1][1] if i > 0 else np.zeros(params.dims.d_dec)
        grads["dec_u"] += np.outer(d_s_pre, prev_state)
        grads["dec_b"] += d_s_pre
        grads["emb"][prev_ids[i]] += t["dec_w"].T @ d_s_pre
        carry = t["dec_u"].T @ d_s_pre
    return d_enc


# ---------------------------------------------------------------------------
# composite per-utterance losses


@dataclass(frozen=True)
class StepLoss:
    """One utterance's losses and full parameter gradients."""

    main: float
    aux: float
    combined: float
    grads: dict[str, np.ndarray]
    aux_result: AuxLossResult | None = None


def transducer_step_loss(
    params: ModelParams,
    features: np.ndarray,
    tokens,
    targets: np.ndarray | None = None,
    aux_variant: str = "none",
    sigma: float = 0.0,
    kind: DistanceKind = DistanceKind.L1_NORMALIZED,
    use_raw_posterior: bool = False,
    posterior_override=None,
) -> StepLoss:
    """Transducer negative log-likelihood plus optional lattice-posterior aux loss.

    The posterior used by the auxiliary loss is taken from the same
    forward/backward tables as the main loss and treated as a constant;
    ``posterior_override`` substitutes a fixed posterior (finite-difference
    checks of the stop-gradient objective need q held at its base value
    while parameters are perturbed).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    phi, windows = _encode_fwd(params, features)
    psi, pred_ids = _predict_fwd(params, tokens)
    lattice, hidden = _joint_fwd(params, phi, psi, tokens)
    alpha = compute_forward(lattice)
    beta = compute_backward(lattice)
    log_z = log_likelihood(alpha, lattice)
    nll = -log_z
    d_logits = loss_grads_from_tables(lattice, alpha, beta, log_z)

    grads = zero_grads(params)
    d_phi, d_psi = _joint_bwd(params, phi, psi, hidden, d_logits, grads)
    _predict_bwd(params, pred_ids, psi, d_psi, grads)
    _encode_bwd(params, windows, phi, d_phi, grads)

    aux_holder: list[AuxLossResult] = []

    def aux_fn():
        if posterior_override is not None:
            q = posterior_override
        else:
            gamma = node_occupancy(alpha, beta, log_z, lattice)
            q = alignment_posterior(gamma)
        reg = params.regression_net()
        loss_fn = {"joint": distill.joint_regression_loss, "token_sync": distill.token_sync_loss}[aux_variant]
        res = loss_fn(phi, psi[: len(tokens)], q, targets, reg, kind, use_raw=use_raw_posterior)
        aux_holder.append(res)
        a_grads = zero_grads(params)
        a_grads["reg_w"] += res.grad_reg_weights
        a_grads["reg_b"] += res.grad_reg_bias
        d_psi_aux = np.vstack([res.grad_psi, np.zeros((1, params.dims.d_pred))])
        _predict_bwd(params, pred_ids, psi, d_psi_aux, a_grads)
        _encode_bwd(params, windows, phi, res.grad_phi, a_grads)
        return res.value, a_grads

    effective_sigma = 0.0 if aux_variant == "none" else sigma
    combined, grads, aux_value = multitask_combine(nll, grads, aux_fn, effective_sigma)
    return StepLoss(
        main=nll,
        aux=aux_value,
        combined=combined,
        grads=grads,
        aux_result=aux_holder[0] if aux_holder else None,
    )


def attention_step_loss(
    params: ModelParams,
    features: np.ndarray,
    tokens,
    targets: np.ndarray | None = None,
    aux_variant: str = "none",
    sigma: float = 0.0,
    kind: DistanceKind = DistanceKind.L1_NORMALIZED,
) -> StepLoss:
    """Teacher-forced cross-entropy plus optional per-token regression loss."""
    tokens = np.asarray(tokens, dtype=np.int64)
    phi_enc, windows = _encode_fwd(params, features)
    phis, log_probs, prev_ids, caches = _attention_fwd(params, phi_enc, tokens)

    n = len(tokens)
    xent = -float(log_probs[np.arange(n), tokens - 1].sum())
    d_logits = np.exp(log_probs)
    d_logits[np.arange(n), tokens - 1] -= 1.0

    grads = zero_grads(params)
    d_enc = _attention_bwd(
        params, phi_enc, prev_ids, caches, d_logits, np.zeros_like(phis), grads
    )
    _encode_bwd(params, windows, phi_enc, d_enc, grads)

    aux_holder: list[AuxLossResult] = []

    def aux_fn():
        res = distill.attention_embedding_loss(phis, targets, params.regression_net(), kind)
        aux_holder.append(res)
        a_grads = zero_grads(params)
        a_grads["reg_w"] += res.grad_reg_weights
        a_grads["reg_b"] += res.grad_reg_bias
        d_enc_aux = _attention_bwd(
            params, phi_enc, prev_ids, caches, np.zeros_like(d_logits), res.grad_phi, a_grads
        )
        _encode_bwd(params, windows, phi_enc, d_enc_aux, a_grads)
        return res.value, a_grads

    effective_sigma = 0.0 if aux_variant == "none" else sigma
    combined, grads, aux_value = multitask_combine(xent, grads, aux_fn, effective_sigma)
    return StepLoss(
        main=xent,
        aux=aux_value,
        combined=combined,
        grads=grads,
        aux_result=aux_holder[0] if aux_holder else None,
    )


def utterance_loss(params: ModelParams, features, tokens, **kwargs) -> StepLoss:
    if params.decoder == TRANSDUCER:
        return transducer_step_loss(params, features, tokens, **kwargs)
    return attention_step_loss(params, features, tokens, **kwargs)


# ---------------------------------------------------------------------------
# decoding and error counting


def blank_removal(symbols) -> list[int]:
    """Strip blanks (id 0) from an alignment, keeping token order."""
    return [int(s) for s in symbols if int(s) != 0]


def greedy_decode_transducer(
    params: ModelParams, features: np.ndarray, max_symbols_per_frame: int = 8
) -> list[int]:
    """Frame-synchronous greedy decoding.

    At each frame the argmax symbol is emitted (ties break toward the lowest
    index); tokens advance the prediction net and stay on the frame, blanks
    move to the next frame.  The per-frame cap bounds the output length.
    """
    phi = encode(params, features)
    state = np.zeros(params.dims.d_pred)
    psi = prediction_step(params, state, params.dims.bos_id)
    out: list[int] = []
    for t in range(phi.shape[0]):
        for _ in range(max_symbols_per_frame):
            k = int(np.argmax(joint_logits_single(params, phi[t], psi)))
            if k == 0:
                break
            out.append(k)
            psi = prediction_step(params, psi, k)
    return out


def greedy_decode_attention(
    params: ModelParams, features: np.ndarray, max_len: int | None = None
) -> list[int]:
    """Greedy auto-regressive decoding; stops at EOS or the length cap."""
    enc = encode(params, features)
    if max_len is None:
        max_len = enc.shape[0] + 8
    state = np.zeros(params.dims.d_dec)
    prev = params.dims.bos_id
    out: list[int] = []
    for _ in range(max_len):
        _, state, log_probs = attention_step(params, enc, prev, state)
        tok = int(np.argmax(log_probs)) + 1
        out.append(tok)
        if tok == params.dims.eos_id:
            break
        prev = tok
    return out


def greedy_decode(params: ModelParams, features, max_symbols_per_frame: int = 8) -> list[int]:
    if params.decoder == TRANSDUCER:
        return greedy_decode_transducer(params, features, max_symbols_per_frame)
    return greedy_decode_attention(params, features)


def edit_distance(hyp, ref):
    """Levenshtein distance with unit costs plus an S/I/D breakdown.

    Traceback is deterministic, preferring substitution over insertion over
    deletion on cost ties.  Insertions are hypothesis tokens with no
    reference counterpart; deletions are missed reference tokens.
    """
    hyp = list(hyp)
    ref = list(ref)
    nh, nr = len(hyp), len(ref)
    dist = np.zeros((nh + 1, nr + 1), dtype=np.int64)
    dist[:, 0] = np.arange(nh + 1)
    dist[0, :] = np.arange(nr + 1)
    for i in range(1, nh + 1):
        for j in range(1, nr + 1):
            sub = dist[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    subs = ins = dels = 0
    i, j = nh, nr
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            subs += int(hyp[i - 1] != ref[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            ins += 1
            i -= 1
        else:
            dels += 1
            j -= 1
    return int(dist[nh, nr]), subs, ins, dels


# ---------------------------------------------------------------------------
# optimizer and parameter averaging


@dataclass
class OptimizerState:
    """Adam moments plus the EMA shadow of the parameter trajectory."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float
    ema_shadow: dict[str, np.ndarray]
    ema_decay: float


def init_optimizer(
    params: ModelParams,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    ema_decay: float = 0.99,
) -> OptimizerState:
    if not 0.0 <= ema_decay < 1.0:
        raise ValueError("EMA decay must lie in [0, 1)")
    return OptimizerState(
        m={k: np.zeros_like(t) for k, t in params.tensors.items()},
        v={k: np.zeros_like(t) for k, t in params.tensors.items()},
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        ema_shadow={k: t.copy() for k, t in params.tensors.items()},
        ema_decay=ema_decay,
    )


def adam_step(opt: OptimizerState, params: ModelParams, grads: dict[str, np.ndarray]):
    """One Adam update with bias correction; returns (new params, new state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for tensor {name!r}")
    step = opt.step + 1
    new_tensors = {}
    new_m, new_v = {}, {}
    bc1 = 1.0 - opt.beta1**step
    bc2 = 1.0 - opt.beta2**step
    for name, t in params.tensors.items():
        g = grads[name]
        m = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        new_m[name], new_v[name] = m, v
        new_tensors[name] = t - opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    new_params = replace(params, tensors=new_tensors)
    new_opt = replace(opt, m=new_m, v=new_v, step=step)
    return new_params, new_opt


def ema_update(opt: OptimizerState, params: ModelParams) -> OptimizerState:
    """shadow <- decay * shadow + (1 - decay) * params."""
    d = opt.ema_decay
    shadow = {
        k: d * opt.ema_shadow[k] + (1.0 - d) * params.tensors[k]
        for k in params.tensors
    }
    return replace(opt, ema_shadow=shadow)


def ema_params(opt: OptimizerState, params: ModelParams) -> ModelParams:
    """A params view holding the EMA shadow tensors (for evaluation)."""
    return replace(params, tensors={k: v.copy() for k, v in opt.ema_shadow.items()})


# ---------------------------------------------------------------------------
# checkpoint serialization


def checkpoint_payload(params: ModelParams, opt: OptimizerState, extra: dict | None = None) -> dict:
    from dataclasses import asdict

    doc = {
        "version": CHECKPOINT_VERSION,
        "decoder": params.decoder,
        "seed": params.seed,
        "step": opt.step,
        "dims": asdict(params.dims),
        "params": {k: v.tolist() for k, v in params.tensors.items()},
        "adam": {
            "m": {k: v.tolist() for k, v in opt.m.items()},
            "v": {k: v.tolist() for k, v in opt.v.items()},
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
        },
        "ema": {
            "decay": opt.ema_decay,
            "shadow": {k: v.tolist() for k, v in opt.ema_shadow.items()},
        },
    }
    if extra:
        doc.update(extra)
    return doc


def save_checkpoint(path, params: ModelParams, opt: OptimizerState, extra: dict | None = None):
    import json

    with open(path, "w") as fh:
        json.dump(checkpoint_payload(params, opt, extra), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (params, optimizer state, full document). Rejects version drift."""
    import json

    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {doc.get('version')!r} != supported {CHECKPOINT_VERSION!r}"
        )
    dims = Dims(**doc["dims"])
    params = ModelParams(
        dims=dims,
        decoder=doc["decoder"],
        seed=doc["seed"],
        tensors={k: np.array(v, dtype=np.float64) for k, v in doc["params"].items()},
    )
    expected = param_shapes(dims, params.decoder)
    if set(expected) != set(params.tensors) or any(
        params.tensors[k].shape != expected[k] for k in expected
    ):
        raise ValueError("checkpoint tensor inventory does not match its dims")
    adam = doc["adam"]
    opt = OptimizerState(
        m={k: np.array(v) for k, v in adam["m"].items()},
        v={k: np.array(v) for k, v in adam["v"].items()},
        step=doc["step"],
        lr=adam["lr"],
        beta1=adam["beta1"],
        beta2=adam["beta2"],
        eps=adam["eps"],
        ema_shadow={k: np.array(v) for k, v in doc["ema"]["shadow"].items()},
        ema_decay=doc["ema"]["decay"],
    )
    return params, opt, doc
