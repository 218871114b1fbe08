"""Cross-validation learning curves, parameter sweeps, metrics, and training.

Training is plain mini-batch Adam (lr 1e-3, batch 32, epoch budget 60) with
early stopping once the epoch-mean total loss stops improving by 1e-4 for 5
consecutive epochs. Utterances pass through the recurrent encoder one at a
time; batch gradients are accumulated means. Everything is deterministic
from the config seed; curve points derive per-(point, repeat) seeds from it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import model
from .capsnet import ModelConfig
from .datasets import BlockSplit, Corpus, LabelVocabulary, Utterance
from .errors import ContractError, DivergenceError, UsageError
from .numeric import Params

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (1, 2, 3, 5, 8, 12, 20, 35, 60, 100, 149)

# published accuracies for the train/test protocol on the smart-home corpus,
# reported alongside our numbers for comparison
REFERENCE_ACCURACY = {
    "multitask_reference": {"partial": 0.978, "full": 0.981},
    "baseline_reference": {"partial": 0.889, "full": 0.966},
}


# ---------------------------------------------------------------------------
# metrics


def _as_sets(collections: Iterable) -> list[frozenset]:
    return [frozenset(c) for c in collections]


def f1_score(predicted: Sequence, reference: Sequence) -> float:
    """Micro-averaged F1 over individual label decisions pooled across
    utterances: 2TP / (2TP + FP + FN); defined as 1.0 when both sides are
    entirely empty."""
    if len(predicted) != len(reference):
        raise UsageError(f"got {len(predicted)} predictions for {len(reference)} references")
    tp = fp = fn = 0
    for pred, ref in zip(_as_sets(predicted), _as_sets(reference)):
        tp += len(pred & ref)
        fp += len(pred - ref)
        fn += len(ref - pred)
    if tp == fp == fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def speaker_accuracy(predicted: Sequence[int], reference: Sequence[int]) -> float:
    """Fraction of exactly matching speaker indices."""
    if len(predicted) != len(reference):
        raise UsageError(f"got {len(predicted)} predictions for {len(reference)} references")
    if not reference:
        raise UsageError("speaker accuracy of zero utterances is undefined")
    return float(np.mean([int(p == r) for p, r in zip(predicted, reference)]))


def intent_accuracy(predicted: Sequence, reference: Sequence, vocab: LabelVocabulary) -> float:
    """Fraction of utterances whose grouped labels all match exactly."""
    if not vocab.slot_groups:
        raise UsageError("intent accuracy needs a vocabulary with slot groups")
    if len(predicted) != len(reference):
        raise UsageError(f"got {len(predicted)} predictions for {len(reference)} references")
    if not reference:
        raise UsageError("intent accuracy of an empty corpus is undefined")
    grouped = {vocab.labels[i] for i in vocab.grouped_indices()}
    hits = 0
    for pred, ref in zip(_as_sets(predicted), _as_sets(reference)):
        hits += int((pred & grouped) == (ref & grouped))
    return hits / len(reference)


# ---------------------------------------------------------------------------
# optimizer and fitting


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for key in sorted(params):
            g = grads[key]
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[key] / correct1
            v_hat = self.v[key] / correct2
            params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EpochStats:
    label_loss: float
    speaker_loss: float
    total_loss: float


@dataclass
class FitResult:
    params: Params
    history: list[EpochStats]
    stopped_early: bool
    best_epoch: Optional[int] = None   # set when validation selection is used


def fit(train: Sequence[Utterance], config: ModelConfig, *,
        epochs: int = 60, lr: float = 1e-3, batch_size: int = 32,
        early_stop_delta: float = 1e-4, early_stop_patience: int = 5,
        force_speaker_path: bool = False,
        valid: Optional[Sequence[Utterance]] = None,
        vocab: Optional[LabelVocabulary] = None,
        select_metric: Optional[str] = None) -> FitResult:
    """Train a fresh model on ``train``.

    With ``valid``/``vocab``/``select_metric`` ("intent_accuracy" or "f1")
    the epoch checkpoint scoring best on the validation set is returned
    instead of the final one.
    """
    if not train:
        raise UsageError("cannot fit on an empty training set")
    params = model.init_params(config)
    opt = Adam(params, lr=lr)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    history: list[EpochStats] = []
    stopped_early = False
    streak = 0
    prev_total = None
    best_score, best_epoch, best_params = -np.inf, None, None
    n = len(train)
    for epoch in range(epochs):
        perm = order_rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, batch_size):
            batch = perm[start:start + batch_size]
            acc = model.zero_grads_like(params)
            for idx in batch:
                utt = train[idx]
                breakdown, grads = model.loss_and_grads(
                    utt.features, utt.target, utt.speaker_index, params, config,
                    force_speaker_path=force_speaker_path,
                )
                if not np.isfinite(breakdown.total):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, utterance {utt.id}"
                    )
                for key in acc:
                    acc[key] += grads[key]
                sums += (breakdown.label_loss, breakdown.speaker_loss, breakdown.total)
            scale = 1.0 / len(batch)
            opt.step(params, {k: v * scale for k, v in acc.items()})
        stats = EpochStats(*(sums / n))
        history.append(stats)
        if select_metric is not None:
            if valid is None or vocab is None:
                raise UsageError("validation selection needs valid utterances and a vocabulary")
            scores = evaluate_model(valid, params, config, vocab)
            score = scores[select_metric]
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_params = {k: v.copy() for k, v in params.items()}
        if prev_total is not None and prev_total - stats.total_loss < early_stop_delta:
            streak += 1
            if streak >= early_stop_patience:
                stopped_early = True
                break
        else:
            streak = 0
        prev_total = stats.total_loss
    if best_params is not None:
        return FitResult(params=best_params, history=history,
                         stopped_early=stopped_early, best_epoch=best_epoch)
    return FitResult(params=params, history=history, stopped_early=stopped_early)


def predict_corpus(utts: Sequence[Utterance], params: Params, config: ModelConfig,
                   vocab: LabelVocabulary):
    """Decode labels and speakers for a list of utterances."""
    label_sets, speakers = [], []
    for utt in utts:
        labels, speaker = model.predict(utt.features, params, config, vocab)
        label_sets.append(labels)
        speakers.append(speaker)
    return label_sets, speakers


def evaluate_model(utts: Sequence[Utterance], params: Params, config: ModelConfig,
                   vocab: LabelVocabulary) -> dict[str, float]:
    preds, speakers = predict_corpus(utts, params, config, vocab)
    refs = [vocab.names_of(u.target) for u in utts]
    out = {
        "f1": f1_score(preds, refs),
        "speaker_accuracy": speaker_accuracy(speakers, [u.speaker_index for u in utts]),
    }
    if vocab.slot_groups:
        out["intent_accuracy"] = intent_accuracy(preds, refs, vocab)
    return out


# ---------------------------------------------------------------------------
# learning curves


@dataclass
class LearningCurvePoint:
    train_utterances: int
    f1: float
    stddev_f1: float
    speaker_acc: float
    repeats: int
    failed: bool = False


@dataclass
class SweepSpec:
    axis: str                 # "output_dim" | "speaker_weight"
    values: list

    def __post_init__(self):
        if self.axis not in ("output_dim", "speaker_weight"):
            raise UsageError(f"unknown sweep axis {self.axis!r}")
        if not self.values:
            raise UsageError("sweep needs at least one value")


def default_schedule(num_blocks: int) -> list[int]:
    return [k for k in DEFAULT_SCHEDULE if k < num_blocks]


def validate_schedule(schedule: Sequence[int], num_blocks: int) -> list[int]:
    schedule = list(schedule)
    if not schedule:
        raise UsageError("schedule is empty")
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise UsageError(f"schedule must be strictly increasing, got {schedule}")
    if schedule[-1] >= num_blocks:
        raise UsageError(f"largest schedule point {schedule[-1]} must be < {num_blocks} blocks")
    return schedule


def derive_seed(base: int, *components: int) -> int:
    ss = np.random.SeedSequence([int(base), *[int(c) for c in components]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFF)


def point_repeats(train_blocks: int, repeats: Optional[int]) -> int:
    if repeats is not None:
        return repeats
    return 3 if train_blocks < 10 else 1


def _blocks_train_test(blocks: list[list[str]], k: int):
    train = [i for block in blocks[:k] for i in block]
    test = [i for block in blocks[k:] for i in block]
    if set(train) & set(test):
        raise ContractError("train and test blocks intersect")
    return train, test


def learning_curve(corpus: Corpus, split: BlockSplit, schedule: Sequence[int],
                   config: ModelConfig, repeats: Optional[int] = None,
                   fit_options: Optional[dict] = None) -> list[LearningCurvePoint]:
    """Train on the first k blocks and test on the rest, for each k.

    Speaker-dependent splits run the protocol per speaker and average the
    metrics over speakers. Each (point, repeat) trains a fresh model with a
    seed derived from (config seed, point index, repeat). Diverging points
    are flagged failed and the run continues.
    """
    schedule = validate_schedule(schedule, split.num_blocks)
    fit_options = fit_options or {}
    points = []
    for p_idx, k in enumerate(schedule):
        n_rep = point_repeats(k, repeats)
        f1s, spk_accs, train_sizes = [], [], []
        failed = False
        for rep in range(n_rep):
            try:
                if split.mode == "speaker_independent":
                    train_ids, test_ids = _blocks_train_test(split.blocks, k)
                    cfg = config.with_seed(derive_seed(config.seed, p_idx, rep))
                    result = fit(corpus.subset(train_ids), cfg, **fit_options)
                    scores = evaluate_model(corpus.subset(test_ids), result.params, cfg,
                                            corpus.vocab)
                    f1s.append(scores["f1"])
                    spk_accs.append(scores["speaker_accuracy"])
                    train_sizes.append(len(train_ids))
                else:
                    spk_f1, spk_acc, sizes = [], [], []
                    for spk in sorted(split.per_speaker):
                        train_ids, test_ids = _blocks_train_test(split.per_speaker[spk], k)
                        cfg = config.with_seed(derive_seed(config.seed, p_idx, rep, spk))
                        result = fit(corpus.subset(train_ids), cfg, **fit_options)
                        scores = evaluate_model(corpus.subset(test_ids), result.params, cfg,
                                                corpus.vocab)
                        spk_f1.append(scores["f1"])
                        spk_acc.append(scores["speaker_accuracy"])
                        sizes.append(len(train_ids))
                    f1s.append(float(np.mean(spk_f1)))
                    spk_accs.append(float(np.mean(spk_acc)))
                    train_sizes.append(int(round(np.mean(sizes))))
            except DivergenceError as exc:
                log.warning("curve point %d blocks, repeat %d diverged: %s", k, rep, exc)
                failed = True
        if f1s:
            stddev = float(np.std(f1s, ddof=1)) if len(f1s) > 1 else 0.0
            points.append(LearningCurvePoint(
                train_utterances=int(round(np.mean(train_sizes))),
                f1=float(np.mean(f1s)),
                stddev_f1=stddev,
                speaker_acc=float(np.mean(spk_accs)),
                repeats=len(f1s),
                failed=failed,
            ))
        else:
            points.append(LearningCurvePoint(
                train_utterances=0, f1=float("nan"), stddev_f1=float("nan"),
                speaker_acc=float("nan"), repeats=0, failed=True,
            ))
    return points


def run_sweep(corpus: Corpus, split: BlockSplit, schedule: Sequence[int],
              config: ModelConfig, sweep: SweepSpec, repeats: Optional[int] = None,
              fit_options: Optional[dict] = None) -> dict:
    """One learning curve per sweep value, everything else held fixed."""
    curves = {}
    for value in sweep.values:
        if sweep.axis == "output_dim":
            cfg = dataclasses.replace(config, output_dim=int(value))
        else:
            cfg = dataclasses.replace(config, speaker_weight=float(value))
        curves[value] = learning_curve(corpus, split, schedule, cfg,
                                       repeats=repeats, fit_options=fit_options)
    return curves


def train_test_replication(corpus: Corpus, config: ModelConfig,
                           fit_options: Optional[dict] = None) -> dict:
    """Train on the reduced and the full training split, select the epoch by
    validation intent accuracy, and report test intent accuracy for both,
    alongside the published reference numbers."""
    from .datasets import fluent_partial_ids

    if corpus.splits is None or not all(s in corpus.splits for s in ("train", "valid", "test")):
        raise UsageError("corpus has no train/valid/test split tables")
    fit_options = dict(fit_options or {})
    valid = corpus.subset(corpus.splits["valid"])
    test = corpus.subset(corpus.splits["test"])
    report = {"reference": REFERENCE_ACCURACY}
    for tag, ids in (("partial", fluent_partial_ids(corpus)), ("full", corpus.splits["train"])):
        result = fit(corpus.subset(ids), config, valid=valid, vocab=corpus.vocab,
                     select_metric="intent_accuracy", **fit_options)
        preds, _ = predict_corpus(test, result.params, config, corpus.vocab)
        refs = [corpus.vocab.names_of(u.target) for u in test]
        report[f"accuracy_{tag}"] = intent_accuracy(preds, refs, corpus.vocab)
        report[f"train_size_{tag}"] = len(ids)
    return report


# ---------------------------------------------------------------------------
# result files


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


CURVE_CSV_HEADER = "train_utterances,f1,stddev_f1,speaker_acc,repeats"


def write_curve_csv(path: str, points: Sequence[LearningCurvePoint]) -> None:
    """Failed points are omitted, leaving gaps rather than interpolations."""
    lines = [CURVE_CSV_HEADER]
    for pt in points:
        if pt.failed and pt.repeats == 0:
            continue
        lines.append(f"{pt.train_utterances},{pt.f1:.6f},{pt.stddev_f1:.6f},"
                     f"{pt.speaker_acc:.6f},{pt.repeats}")
    _atomic_write(path, "\n".join(lines) + "\n")


def points_payload(points: Sequence[LearningCurvePoint]) -> list[dict]:
    return [
        {
            "train_utterances": pt.train_utterances,
            "f1": None if np.isnan(pt.f1) else pt.f1,
            "stddev_f1": None if np.isnan(pt.stddev_f1) else pt.stddev_f1,
            "speaker_acc": None if np.isnan(pt.speaker_acc) else pt.speaker_acc,
            "repeats": pt.repeats,
            "failed": pt.failed,
        }
        for pt in points
    ]


def write_summary_json(path: str, payload: dict) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def git_blob_hash(content: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def write_run_manifest(path: str, config_payload: dict, corpus_name: str,
                       seeds: dict) -> str:
    """Persist the run description; the stored content hash covers the
    manifest body so readers can verify integrity."""
    body = {"config": config_payload, "corpus": corpus_name, "seeds": seeds}
    canonical = json.dumps(body, sort_keys=True).encode()
    body["content_hash"] = git_blob_hash(canonical)
    _atomic_write(path, json.dumps(body, indent=2, sort_keys=True) + "\n")
    return body["content_hash"]
