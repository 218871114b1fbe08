"""Composition of the capsule core and the speaker head into one trainable
model: parameter initialization, loss + gradient evaluation, and prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from . import capsnet, multitask
from .capsnet import ModelConfig, OutputCapsuleSet
from .errors import DivergenceError
from .multitask import LossBreakdown
from .numeric import Params

if TYPE_CHECKING:
    from .datasets import LabelVocabulary, Utterance


def init_params(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> Params:
    """Draw all parameters in a fixed order from one RNG stream.

    The speaker head is always initialized, even when speaker_weight is zero,
    so a run with the head disabled consumes the identical RNG sequence and
    stays bit-compatible with a multitask run of the same seed.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    params = capsnet.init_core_params(config, rng)
    params.update(multitask.init_head_params(rng, config.output_dim, config.speaker_count))
    return params


def zero_grads_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass
class EvalOutput:
    capsules: OutputCapsuleSet
    speaker_probs: Optional[np.ndarray]


def evaluate(feats: np.ndarray, params: Params, config: ModelConfig,
             with_speaker: bool = True) -> EvalOutput:
    """Inference-only forward pass (no trace kept)."""
    caps, _ = capsnet.forward(feats, params, config, want_trace=False)
    probs = None
    if with_speaker:
        avg = multitask.average_capsule(caps)
        probs = multitask.speaker_distribution(avg, params).probs
    return EvalOutput(capsules=caps, speaker_probs=probs)


def loss_and_grads(feats: np.ndarray, target: np.ndarray, speaker_index: int,
                   params: Params, config: ModelConfig,
                   force_speaker_path: bool = False):
    """One utterance's total loss and the gradient of every parameter.

    With speaker_weight == 0 the speaker path is skipped entirely (the
    baseline model); ``force_speaker_path`` evaluates it anyway, which must
    produce bit-identical label-path gradients since the head contribution
    scales by exactly 0.0.
    """
    caps, trace = capsnet.forward(feats, params, config, want_trace=True)
    if not np.all(np.isfinite(caps.vectors)):
        raise DivergenceError("non-finite output capsules")
    label_loss = capsnet.margin_loss(caps, target, config)
    d_caps = capsnet.margin_loss_grad(caps, target, config)

    spk_loss = 0.0
    head_grads = None
    if config.speaker_weight != 0.0 or force_speaker_path:
        spk_loss, head_trace = multitask.head_forward(caps, params, speaker_index)
        head_grads, d_caps_head = multitask.head_backward(
            head_trace, speaker_index, config.speaker_weight, params
        )
        d_caps = d_caps + d_caps_head

    grads = capsnet.backward(trace, d_caps, params)
    if head_grads is None:
        grads["spk.W"] = np.zeros_like(params["spk.W"])
        grads["spk.b"] = np.zeros_like(params["spk.b"])
    else:
        grads.update(head_grads)
    if not config.speaker_bias:
        grads["spk.b"] = np.zeros_like(params["spk.b"])
    breakdown = multitask.total_loss(label_loss, spk_loss, config.speaker_weight)
    return breakdown, grads


def predict(feats: np.ndarray, params: Params, config: ModelConfig,
            vocab: "LabelVocabulary"):
    """Decode the label set and the most probable speaker for one utterance."""
    out = evaluate(feats, params, config, with_speaker=True)
    labels = capsnet.decode_labels(out.capsules, vocab)
    speaker = int(np.argmax(out.speaker_probs))
    return labels, speaker
