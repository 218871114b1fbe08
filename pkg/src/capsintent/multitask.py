"""Speaker-identification head regularising the output-capsule orientations.

The head averages the output capsules into a single vector
z = sum_k v_k / sum_k |v_k|, projects it through an n x M matrix (plus an
optional bias) and a softmax to per-speaker probabilities, and scores the
true speaker with cross entropy. The total training objective is
label_loss + speaker_weight * speaker_loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capsnet import OutputCapsuleSet
from .errors import ShapeError
from .numeric import Params, softmax

PROB_FLOOR = 1e-12
NORM_GUARD = 1e-12


@dataclass
class AverageCapsule:
    vector: np.ndarray     # (n,)
    degenerate: bool       # all capsule norms were zero; vector is zeros


@dataclass
class SpeakerDistribution:
    probs: np.ndarray      # (M,), positive, sums to 1


@dataclass
class LossBreakdown:
    label_loss: float
    speaker_loss: float
    total: float


@dataclass
class HeadTrace:
    capsules: np.ndarray          # (K, n)
    norms: np.ndarray             # (K,)
    average: AverageCapsule
    probs: np.ndarray             # (M,)


# The average capsule has norm <= 1, so unit-bound weights keep initial
# logits well under softmax saturation while giving the head a usable
# gradient from the first step.
SPEAKER_INIT_BOUND = 1.0


def init_head_params(rng: np.random.Generator, output_dim: int, speaker_count: int) -> Params:
    return {
        "spk.W": rng.uniform(-SPEAKER_INIT_BOUND, SPEAKER_INIT_BOUND,
                             size=(output_dim, speaker_count)),
        "spk.b": np.zeros(speaker_count),
    }


def average_capsule(caps: OutputCapsuleSet) -> AverageCapsule:
    """Norm-weighted mean of the output capsules: sum(v) / sum(|v|).

    All-zero capsules make the ratio undefined; that case returns the zero
    vector with the degenerate flag set instead of raising.
    """
    denom = float(np.sum(caps.norms))
    if denom <= 0.0:
        return AverageCapsule(vector=np.zeros(caps.vectors.shape[1]), degenerate=True)
    return AverageCapsule(vector=np.sum(caps.vectors, axis=0) / denom, degenerate=False)


def speaker_distribution(avg: AverageCapsule, params: Params) -> SpeakerDistribution:
    """Softmax over the linear projection of the average capsule."""
    w = params["spk.W"]
    if avg.vector.shape[0] != w.shape[0]:
        raise ShapeError(f"average capsule dim {avg.vector.shape[0]} != projection rows {w.shape[0]}")
    logits = avg.vector @ w + params["spk.b"]
    return SpeakerDistribution(probs=softmax(logits))


def speaker_loss(dist: SpeakerDistribution, speaker_index: int) -> float:
    """Cross entropy against the one-hot true speaker: -log P[speaker]."""
    if not 0 <= speaker_index < dist.probs.shape[0]:
        raise ShapeError(f"speaker index {speaker_index} out of range {dist.probs.shape[0]}")
    return float(-np.log(max(dist.probs[speaker_index], PROB_FLOOR)))


def total_loss(label_loss: float, spk_loss: float, speaker_weight: float) -> LossBreakdown:
    """Weighted sum of the two objectives."""
    return LossBreakdown(
        label_loss=label_loss,
        speaker_loss=spk_loss,
        total=label_loss + speaker_weight * spk_loss,
    )


def decode_speaker(dist: SpeakerDistribution) -> int:
    """Most probable speaker; ties resolve to the lowest index."""
    return int(np.argmax(dist.probs))


def head_forward(caps: OutputCapsuleSet, params: Params, speaker_index: int):
    """Run the full head; returns (loss value, trace for head_backward)."""
    avg = average_capsule(caps)
    dist = speaker_distribution(avg, params)
    loss = speaker_loss(dist, speaker_index)
    trace = HeadTrace(capsules=caps.vectors, norms=caps.norms, average=avg, probs=dist.probs)
    return loss, trace


def head_backward(trace: HeadTrace, speaker_index: int, speaker_weight: float, params: Params):
    """Gradients of speaker_weight * speaker_loss.

    Returns (head param grads, gradient on the output capsule vectors). The
    capsule gradient applies the quotient rule of the average:
    d z / d v_k goes through both sum(v) and sum(|v|). A degenerate average
    (all-zero capsules) contributes zero gradient everywhere.
    """
    K, n = trace.capsules.shape
    if trace.average.degenerate:
        zeros = {"spk.W": np.zeros_like(params["spk.W"]), "spk.b": np.zeros_like(params["spk.b"])}
        return zeros, np.zeros((K, n))
    onehot = np.zeros_like(trace.probs)
    onehot[speaker_index] = 1.0
    d_logits = speaker_weight * (trace.probs - onehot)
    z = trace.average.vector
    grads = {
        "spk.W": np.outer(z, d_logits),
        "spk.b": d_logits.copy(),
    }
    d_z = params["spk.W"] @ d_logits
    denom = float(np.sum(trace.norms))
    unit = trace.capsules / (trace.norms[:, None] + NORM_GUARD)
    d_caps = (d_z[None, :] - float(d_z @ z) * unit) / denom
    return grads, d_caps
