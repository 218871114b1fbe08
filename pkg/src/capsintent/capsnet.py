"""Capsule network core: encoder readout -> primary capsules -> dynamic
routing -> output capsules, with margin loss, norm-based label decoding, and
analytic backward passes for every stage.

Shapes use P primary capsules of dimension d_p, K output capsules (one per
task label) of dimension n, and per-pair transform matrices stored as a
(P, K, d_p, n) tensor. ``votes[i, j]`` is primary capsule i's prediction of
output capsule j.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional

import numpy as np

from . import encoder as enc
from .errors import ContractError, DataError, ShapeError
from .numeric import Params, softmax, softmax_grad

if TYPE_CHECKING:
    from .datasets import LabelVocabulary

NORM_GUARD = 1e-12


@dataclass
class ModelConfig:
    """Architecture and objective settings for one model instance."""

    feat_dim: int
    num_labels: int            # K: one output capsule per task label
    speaker_count: int         # M
    encoder_hidden: int = 128
    encoder_layers: int = 2
    num_primary: int = 64      # P
    primary_dim: int = 8       # d_p
    output_dim: int = 8        # n
    routing_iters: int = 3
    speaker_weight: float = 1.0
    margin_present: float = 0.9
    margin_absent: float = 0.1
    absent_loss_scale: float = 1.0   # multiplier on the absent-label hinge term
    speaker_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.output_dim < 2:
            raise ShapeError(f"output_dim must be >= 2, got {self.output_dim}")
        if self.routing_iters < 1:
            raise ShapeError(f"routing_iters must be >= 1, got {self.routing_iters}")
        if not self.margin_present > self.margin_absent:
            raise ShapeError("margin_present must exceed margin_absent")

    def with_seed(self, seed: int) -> "ModelConfig":
        return replace(self, seed=seed)


@dataclass
class PrimaryCapsuleSet:
    vectors: np.ndarray  # (P, d_p), each row post-squash so norm < 1


@dataclass
class OutputCapsuleSet:
    vectors: np.ndarray  # (K, n)
    norms: np.ndarray    # (K,)


@dataclass
class RoutingState:
    logits: np.ndarray        # (P, K)
    coefficients: np.ndarray  # (P, K), rows sum to 1 over the K axis


@dataclass
class RoutingTrace:
    votes: np.ndarray
    coefficients: list[np.ndarray] = field(default_factory=list)  # per iteration
    pooled: list[np.ndarray] = field(default_factory=list)        # pre-squash s, per iteration
    outputs: list[np.ndarray] = field(default_factory=list)       # post-squash v, per iteration


@dataclass
class ForwardTrace:
    """Every intermediate needed to replay the forward pass exactly."""

    features: np.ndarray
    encoder_cache: dict
    readout: np.ndarray
    primary_pre: np.ndarray       # (P, d_p) pre-squash
    primary: np.ndarray           # (P, d_p) post-squash
    votes: np.ndarray             # (P, K, n)
    routing: RoutingTrace = None
    output: OutputCapsuleSet = None
    config: ModelConfig = None


def squash(s: np.ndarray, axis: int = -1) -> np.ndarray:
    """Norm-compressing nonlinearity: maps s to (|s|^2/(1+|s|^2)) * s/|s|.

    Output is parallel to the input with norm in [0, 1); the zero vector maps
    to exactly zero (computed as s * |s|/(1+|s|^2), so no division occurs).
    """
    s = np.asarray(s, dtype=np.float64)
    sq = np.sum(s * s, axis=axis, keepdims=True)
    return s * (np.sqrt(sq) / (1.0 + sq))


def squash_grad(upstream: np.ndarray, s: np.ndarray, axis: int = -1) -> np.ndarray:
    """Backprop through squash given the pre-squash input ``s``."""
    sq = np.sum(s * s, axis=axis, keepdims=True)
    nrm = np.sqrt(sq)
    scale = nrm / (1.0 + sq)
    proj = np.sum(upstream * s, axis=axis, keepdims=True)
    radial = (1.0 - sq) / ((1.0 + sq) ** 2 * (nrm + NORM_GUARD))
    return upstream * scale + s * (proj * radial)


def predict_capsules(primary: PrimaryCapsuleSet | np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Per-pair linear predictions: votes[i, j] = transforms[i, j].T @ u_i."""
    u = primary.vectors if isinstance(primary, PrimaryCapsuleSet) else np.asarray(primary)
    if transforms.ndim != 4 or u.ndim != 2 or transforms.shape[0] != u.shape[0] \
            or transforms.shape[2] != u.shape[1]:
        raise ShapeError(
            f"transforms {transforms.shape} incompatible with primary capsules {u.shape}"
        )
    return np.einsum("pkdn,pd->pkn", transforms, u)


def predict_capsules_backward(d_votes: np.ndarray, primary: np.ndarray, transforms: np.ndarray):
    d_transforms = np.einsum("pkn,pd->pkdn", d_votes, primary)
    d_primary = np.einsum("pkdn,pkn->pd", transforms, d_votes)
    return d_transforms, d_primary


def dynamic_routing(votes: np.ndarray, iters: int, want_trace: bool = False):
    """Iterative routing by agreement.

    Logits start at zero. Each iteration: coefficients = softmax of logits
    over the output axis, pooled input s_j = sum_i c_ij * votes[i, j],
    v_j = squash(s_j), then logits[i, j] += votes[i, j] . v_j (the update is
    skipped after the final iteration).

    Returns (OutputCapsuleSet, RoutingState) or, with ``want_trace``, a third
    RoutingTrace element recording per-iteration state for the backward pass.
    """
    if iters < 1:
        raise ShapeError(f"routing needs at least one iteration, got {iters}")
    P, K, n = votes.shape
    logits = np.zeros((P, K))
    trace = RoutingTrace(votes=votes) if want_trace else None
    coeff = None
    for it in range(iters):
        coeff = softmax(logits, axis=1)
        pooled = np.einsum("pk,pkn->kn", coeff, votes)
        out = squash(pooled, axis=1)
        if want_trace:
            trace.coefficients.append(coeff)
            trace.pooled.append(pooled)
            trace.outputs.append(out)
        if it < iters - 1:
            logits = logits + np.einsum("pkn,kn->pk", votes, out)
    caps = OutputCapsuleSet(vectors=out, norms=np.linalg.norm(out, axis=1))
    state = RoutingState(logits=logits, coefficients=coeff)
    if want_trace:
        return caps, state, trace
    return caps, state


def routing_backward(trace: RoutingTrace, d_out: np.ndarray) -> np.ndarray:
    """Backprop through the full routing unroll; returns gradient on votes.

    Coefficients are *not* treated as constants: gradient flows through every
    softmax and every logit update of every iteration.
    """
    votes = trace.votes
    iters = len(trace.outputs)
    d_votes = np.zeros_like(votes)
    d_logits = np.zeros((votes.shape[0], votes.shape[1]))
    d_v = np.asarray(d_out, dtype=np.float64)
    for it in range(iters - 1, -1, -1):
        coeff = trace.coefficients[it]
        pooled = trace.pooled[it]
        out = trace.outputs[it]
        if it < iters - 1:
            # logits' = logits + votes . v  contributed d_logits; split it
            d_votes += np.einsum("pk,kn->pkn", d_logits, out)
            d_v = np.einsum("pk,pkn->kn", d_logits, votes)
            d_logits_carry = d_logits
        else:
            d_logits_carry = np.zeros_like(d_logits)
        d_pooled = squash_grad(d_v, pooled, axis=1)
        d_coeff = np.einsum("kn,pkn->pk", d_pooled, votes)
        d_votes += np.einsum("pk,kn->pkn", coeff, d_pooled)
        d_logits = d_logits_carry + softmax_grad(d_coeff, coeff, axis=1)
    return d_votes


def margin_loss(caps: OutputCapsuleSet, target: np.ndarray, config: ModelConfig) -> float:
    """Hinge loss on output-capsule norms.

    Present labels (target 1) pay max(0, margin_present - |v_k|); absent
    labels pay max(0, |v_k| - margin_absent), scaled by absent_loss_scale
    (1.0 by default, i.e. no down-weighting of the absent term).
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != caps.norms.shape:
        raise ShapeError(f"target shape {target.shape} != capsule count {caps.norms.shape}")
    present = np.maximum(0.0, config.margin_present - caps.norms)
    absent = np.maximum(0.0, caps.norms - config.margin_absent)
    return float(np.sum(target * present + config.absent_loss_scale * (1.0 - target) * absent))


def margin_loss_grad(caps: OutputCapsuleSet, target: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Gradient of margin_loss with respect to the output capsule vectors."""
    target = np.asarray(target, dtype=np.float64)
    norms = caps.norms
    d_norm = np.where((target > 0) & (norms < config.margin_present), -1.0, 0.0)
    d_norm = d_norm + np.where(
        (target == 0) & (norms > config.margin_absent), config.absent_loss_scale, 0.0
    )
    unit = caps.vectors / (norms[:, None] + NORM_GUARD)
    return d_norm[:, None] * unit


def decode_labels(caps: OutputCapsuleSet, vocab: "LabelVocabulary") -> list[str]:
    """Norm-based decoding against a slotted vocabulary.

    Within each slot group the argmax-norm label wins; optional groups emit
    their argmax only when its norm exceeds 0.5. Labels outside any group are
    emitted independently when their norm exceeds 0.5.
    """
    norms = caps.norms
    if len(vocab.labels) != norms.shape[0]:
        raise ShapeError(f"vocabulary size {len(vocab.labels)} != capsule count {norms.shape[0]}")
    chosen: list[str] = []
    grouped = set()
    for group in vocab.slot_groups:
        idxs = [vocab.index_of(name) for name in group.labels]
        grouped.update(idxs)
        best = max(idxs, key=lambda i: (norms[i], -i))
        if group.required or norms[best] > 0.5:
            chosen.append(vocab.labels[best])
    for i, name in enumerate(vocab.labels):
        if i not in grouped and norms[i] > 0.5:
            chosen.append(name)
    return sorted(chosen, key=vocab.index_of)


# Initialization scales. Recurrent states at uniform +-1/sqrt(fan) init sit
# around |h| ~ 0.1, which would leave capsule norms ~1e-6 where squash kills
# all margin-loss gradient; the projection gain puts pre-squash primary norms
# near 2 (squashed ~0.8) and the transform sigma puts initial output norms in
# the hinge-sensitive range for any (P, K, d_p, n).
PROJ_INIT_GAIN = 13.0
TRANSFORM_INIT_SIGMA = 2.0


def init_core_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    """Encoder weights uniform in +-1/sqrt(fan_in); projection uniform with
    the gain above; capsule transforms Gaussian with sigma 2/sqrt(d_p)."""
    params = enc.init_encoder_params(
        rng, config.feat_dim, config.encoder_hidden, config.encoder_layers
    )
    readout_dim = 2 * config.encoder_hidden
    proj_out = config.num_primary * config.primary_dim
    bound = PROJ_INIT_GAIN / np.sqrt(readout_dim)
    params["proj.W"] = rng.uniform(-bound, bound, size=(readout_dim, proj_out))
    params["proj.b"] = np.zeros(proj_out)
    sigma = TRANSFORM_INIT_SIGMA / np.sqrt(config.primary_dim)
    params["caps.W"] = rng.normal(
        0.0, sigma,
        size=(config.num_primary, config.num_labels, config.primary_dim, config.output_dim),
    )
    return params


def encode(feats: np.ndarray, params: Params, config: ModelConfig, want_cache: bool = False):
    """Frames -> bidirectional final states -> affine projection -> squashed
    primary capsules."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise DataError(f"expected a non-empty (frames, dim) matrix, got {feats.shape}")
    if feats.shape[1] != config.feat_dim:
        raise ShapeError(f"feature dim {feats.shape[1]} != configured {config.feat_dim}")
    readout, cache = enc.encoder_forward(
        params, feats, config.encoder_hidden, config.encoder_layers
    )
    primary_pre = (readout @ params["proj.W"] + params["proj.b"]).reshape(
        config.num_primary, config.primary_dim
    )
    primary = squash(primary_pre, axis=1)
    caps = PrimaryCapsuleSet(vectors=primary)
    if want_cache:
        return caps, {"encoder": cache, "readout": readout, "primary_pre": primary_pre}
    return caps


def forward(feats: np.ndarray, params: Params, config: ModelConfig, want_trace: bool = True):
    """Full core forward pass; the trace is sufficient to replay backward()."""
    from .errors import DivergenceError

    primary, cache = encode(feats, params, config, want_cache=True)
    votes = predict_capsules(primary, params["caps.W"])
    if not np.all(np.isfinite(votes)):
        raise DivergenceError("non-finite capsule predictions")
    if want_trace:
        caps, _, routing_trace = dynamic_routing(votes, config.routing_iters, want_trace=True)
        trace = ForwardTrace(
            features=np.asarray(feats, dtype=np.float64),
            encoder_cache=cache["encoder"],
            readout=cache["readout"],
            primary_pre=cache["primary_pre"],
            primary=primary.vectors,
            votes=votes,
            routing=routing_trace,
            output=caps,
            config=config,
        )
        return caps, trace
    caps, _ = dynamic_routing(votes, config.routing_iters)
    return caps, None


def backward(trace: ForwardTrace, d_out: np.ndarray, params: Params) -> Params:
    """Analytic gradients of a loss with upstream gradient ``d_out`` on the
    output capsule vectors, for every core parameter."""
    config = trace.config
    if params["caps.W"].shape != trace.votes.shape[:2] + (config.primary_dim, config.output_dim):
        raise ContractError("trace does not match the supplied parameters")
    d_votes = routing_backward(trace.routing, d_out)
    d_transforms, d_primary = predict_capsules_backward(d_votes, trace.primary, params["caps.W"])
    d_primary_pre = squash_grad(d_primary, trace.primary_pre, axis=1)
    flat = d_primary_pre.reshape(-1)
    d_readout = params["proj.W"] @ flat
    grads = enc.encoder_backward(params, trace.encoder_cache, d_readout)
    grads["proj.W"] = np.outer(trace.readout, flat)
    grads["proj.b"] = flat
    grads["caps.W"] = d_transforms
    return grads
