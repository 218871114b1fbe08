"""Command-line entry point.

Subcommands: ``features``, ``train``, ``eval``, ``curve``,
``replicate-fluent``, ``validate-config``. Runs are described by a single
YAML config file (documented in the README); flags only override paths and
verbosity. Exit codes: 0 success, 2 usage/config errors, 3 training
divergence, 4 data errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from . import datasets, experiments, model
from .capsnet import ModelConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import Corpus, ensure_features, load_manifest
from .errors import (CapsIntentError, ContractError, DataError, DivergenceError,
                     UsageError)
from .features import FeatureRecipe

log = logging.getLogger("capsintent")

CACHE_ENV_VAR = "CAPSINTENT_CACHE_DIR"

MODEL_KEYS = {
    "feat_dim", "encoder_hidden", "encoder_layers", "num_primary", "primary_dim",
    "output_dim", "routing_iters", "speaker_weight", "margin_present",
    "margin_absent", "absent_loss_scale", "speaker_bias",
}


@dataclass
class CorpusConfig:
    kind: str
    root: Optional[str] = None
    manifest: Optional[str] = None
    preset: Optional[str] = None
    per_speaker_count: Optional[int] = None
    noise_level: Optional[float] = None
    feat_dim: Optional[int] = None
    seed: Optional[int] = None
    cache_dir: Optional[str] = None


@dataclass
class ExperimentConfig:
    mode: str = "speaker_independent"
    num_blocks: int = 150
    schedule: Optional[list[int]] = None
    repeats: Optional[int] = None
    sweep: Optional[experiments.SweepSpec] = None


@dataclass
class TrainingConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 32
    early_stop_delta: float = 1e-4
    early_stop_patience: int = 5

    def fit_options(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    corpus: CorpusConfig
    output_dir: str
    seed: int = 0
    model: dict = field(default_factory=dict)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    raw: dict = field(default_factory=dict)


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise UsageError(f"unknown {where} config keys: {sorted(unknown)}")


def load_run_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise UsageError(f"config file {path} does not exist")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise UsageError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a mapping")
    _check_keys(raw, {"corpus", "model", "experiment", "training", "output_dir", "seed"}, "top-level")
    for required in ("corpus", "output_dir"):
        if required not in raw:
            raise UsageError(f"{path}: missing required key {required!r}")

    corpus_raw = raw["corpus"] or {}
    _check_keys(corpus_raw, {f.name for f in dataclasses.fields(CorpusConfig)}, "corpus")
    if "kind" not in corpus_raw:
        raise UsageError("corpus.kind is required (synth | grabo | fluent | manifest)")
    corpus_cfg = CorpusConfig(**corpus_raw)
    if corpus_cfg.kind not in ("synth", "grabo", "fluent", "manifest"):
        raise UsageError(f"unknown corpus kind {corpus_cfg.kind!r}")
    if corpus_cfg.kind in ("grabo", "fluent") and not corpus_cfg.root:
        raise UsageError(f"corpus.root is required for kind {corpus_cfg.kind!r}")
    if corpus_cfg.kind == "manifest" and not corpus_cfg.manifest:
        raise UsageError("corpus.manifest is required for kind 'manifest'")
    if corpus_cfg.kind == "synth" and not corpus_cfg.preset:
        raise UsageError("corpus.preset is required for kind 'synth'")

    model_raw = raw.get("model") or {}
    _check_keys(model_raw, MODEL_KEYS, "model")

    exp_raw = dict(raw.get("experiment") or {})
    _check_keys(exp_raw, {f.name for f in dataclasses.fields(ExperimentConfig)}, "experiment")
    sweep = None
    if exp_raw.get("sweep") is not None:
        sweep_raw = exp_raw["sweep"]
        _check_keys(sweep_raw, {"axis", "values"}, "sweep")
        sweep = experiments.SweepSpec(**sweep_raw)
    exp_raw["sweep"] = sweep
    experiment = ExperimentConfig(**exp_raw)
    if experiment.mode not in ("speaker_independent", "speaker_dependent"):
        raise UsageError(f"unknown experiment.mode {experiment.mode!r}")

    training_raw = raw.get("training") or {}
    _check_keys(training_raw, {f.name for f in dataclasses.fields(TrainingConfig)}, "training")
    training = TrainingConfig(**training_raw)

    return RunConfig(
        corpus=corpus_cfg,
        output_dir=str(raw["output_dir"]),
        seed=int(raw.get("seed", 0)),
        model=model_raw,
        experiment=experiment,
        training=training,
        raw=raw,
    )


def cache_dir_for(run: RunConfig, override: Optional[str]) -> Optional[str]:
    return override or os.environ.get(CACHE_ENV_VAR) or run.corpus.cache_dir


def build_corpus(run: RunConfig, cache_override: Optional[str] = None,
                 with_features: bool = True) -> Corpus:
    cc = run.corpus
    if cc.kind == "synth":
        if cc.preset not in datasets.SYNTH_PRESETS:
            raise UsageError(
                f"unknown synth preset {cc.preset!r}; available: {sorted(datasets.SYNTH_PRESETS)}"
            )
        kwargs = {}
        if cc.per_speaker_count is not None:
            kwargs["per_speaker_count"] = cc.per_speaker_count
        if cc.noise_level is not None:
            kwargs["noise_level"] = cc.noise_level
        if cc.feat_dim is not None:
            kwargs["feat_dim"] = cc.feat_dim
        spec = datasets.SYNTH_PRESETS[cc.preset](**kwargs)
        return datasets.synth_generate(spec, seed=cc.seed if cc.seed is not None else run.seed)
    if cc.kind == "grabo":
        corpus = datasets.load_grabo(cc.root)
    elif cc.kind == "fluent":
        corpus = datasets.load_fluent(cc.root)
    else:
        corpus = load_manifest(cc.manifest)
    if with_features:
        ensure_features(corpus, cache_dir=cache_dir_for(run, cache_override))
    return corpus


def model_config_from(run: RunConfig, corpus: Corpus) -> ModelConfig:
    fields = dict(run.model)
    fields.setdefault("feat_dim", corpus.feat_dim())
    if fields["feat_dim"] != corpus.feat_dim():
        raise UsageError(
            f"model.feat_dim {fields['feat_dim']} != corpus feature dim {corpus.feat_dim()}"
        )
    return ModelConfig(
        num_labels=len(corpus.vocab),
        speaker_count=len(corpus.speakers),
        seed=run.seed,
        **fields,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate_config(args) -> int:
    run = load_run_config(args.config)
    print(f"OK: {args.config} (corpus={run.corpus.kind}, mode={run.experiment.mode}, "
          f"output_dir={run.output_dir})")
    return 0


def cmd_features(args) -> int:
    run = load_run_config(args.config)
    if run.corpus.kind == "synth":
        raise UsageError("synthetic corpora carry features inline; nothing to extract")
    corpus = build_corpus(run, cache_override=args.cache_dir, with_features=False)
    counts = ensure_features(corpus, cache_dir=cache_dir_for(run, args.cache_dir),
                             on_error="skip")
    total = sum(counts.values())
    print(f"features: computed={counts['computed']} skipped(cached)={counts['cached']} "
          f"skipped(inline)={counts['inline']} failed={counts['failed']} total={total}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    corpus = build_corpus(run, cache_override=args.cache_dir)
    config = model_config_from(run, corpus)
    result = experiments.fit(corpus.utterances, config, **run.training.fit_options())
    out_dir = args.output or run.output_dir
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "model.npz")
    save_checkpoint(ckpt_path, config, result.params, vocab_payload=vocab_payload(corpus))
    history_path = os.path.join(out_dir, "history.json")
    experiments.write_summary_json(history_path, {
        "epochs": [dataclasses.asdict(h) for h in result.history],
        "stopped_early": result.stopped_early,
    })
    print(f"checkpoint: {ckpt_path}")
    print(f"history: {history_path} ({len(result.history)} epochs, "
          f"final total loss {result.history[-1].total_loss:.6f})")
    return 0


def vocab_payload(corpus: Corpus) -> dict:
    return {
        "labels": list(corpus.vocab.labels),
        "slot_groups": [
            {"name": g.name, "labels": list(g.labels), "required": g.required}
            for g in corpus.vocab.slot_groups
        ],
        "speakers": list(corpus.speakers),
    }


def vocab_from_payload(payload: dict) -> tuple[datasets.LabelVocabulary, list[str]]:
    vocab = datasets.LabelVocabulary(
        labels=tuple(payload["labels"]),
        slot_groups=tuple(
            datasets.SlotGroup(name=g["name"], labels=tuple(g["labels"]), required=g["required"])
            for g in payload["slot_groups"]
        ),
    )
    return vocab, list(payload["speakers"])


def cmd_eval(args) -> int:
    config, params, payload = load_checkpoint(args.checkpoint)
    if payload is None:
        raise ContractError(f"{args.checkpoint} carries no vocabulary; cannot decode")
    vocab, speakers = vocab_from_payload(payload)
    corpus = load_manifest(args.manifest)
    unknown = set(corpus.vocab.labels) - set(vocab.labels)
    if unknown:
        raise ContractError(
            f"manifest labels not in checkpoint vocabulary: {sorted(unknown)[:5]}"
        )
    unknown_speakers = set(corpus.speakers) - set(speakers)
    if unknown_speakers:
        raise ContractError(
            f"manifest speakers not in checkpoint roster: {sorted(unknown_speakers)[:5]}"
        )
    cache = args.cache_dir or os.environ.get(CACHE_ENV_VAR)
    ensure_features(corpus, cache_dir=cache)
    spk_map = {name: i for i, name in enumerate(speakers)}
    preds, pred_speakers, refs, ref_speakers = [], [], [], []
    rows = []
    for utt in corpus.utterances:
        labels, speaker = model.predict(utt.features, params, config, vocab)
        ref_names = corpus.vocab.names_of(utt.target)
        ref_spk = spk_map[corpus.speakers[utt.speaker_index]]
        preds.append(labels)
        pred_speakers.append(speaker)
        refs.append(ref_names)
        ref_speakers.append(ref_spk)
        rows.append(f"{utt.id},{';'.join(labels)},{speakers[speaker]},"
                    f"{';'.join(ref_names)},{corpus.speakers[utt.speaker_index]}")
    metrics = {
        "f1": experiments.f1_score(preds, refs),
        "speaker_accuracy": experiments.speaker_accuracy(pred_speakers, ref_speakers),
    }
    if vocab.slot_groups:
        metrics["intent_accuracy"] = experiments.intent_accuracy(preds, refs, vocab)
    out_dir = args.output or "."
    os.makedirs(out_dir, exist_ok=True)
    pred_path = os.path.join(out_dir, "predictions.csv")
    header = "id,predicted_labels,predicted_speaker,reference_labels,reference_speaker"
    experiments._atomic_write(pred_path, "\n".join([header, *rows]) + "\n")
    experiments.write_summary_json(os.path.join(out_dir, "metrics.json"), metrics)
    for key, value in sorted(metrics.items()):
        print(f"{key}: {value:.4f}")
    print(f"predictions: {pred_path}")
    return 0


def _experiment_seeds(run: RunConfig) -> dict:
    return {"base": run.seed, "split": run.seed,
            "corpus": run.corpus.seed if run.corpus.seed is not None else run.seed}


def cmd_curve(args) -> int:
    run = load_run_config(args.config)
    corpus = build_corpus(run, cache_override=args.cache_dir)
    config = model_config_from(run, corpus)
    split = datasets.split_blocks(corpus, num_blocks=run.experiment.num_blocks,
                                  mode=run.experiment.mode, seed=run.seed)
    schedule = run.experiment.schedule or experiments.default_schedule(split.num_blocks)
    out_dir = args.output or run.output_dir
    os.makedirs(out_dir, exist_ok=True)
    experiments.write_run_manifest(os.path.join(out_dir, "run.json"),
                                   run.raw, corpus.name, _experiment_seeds(run))
    fit_options = run.training.fit_options()
    summary = {"corpus": corpus.name, "mode": run.experiment.mode,
               "num_blocks": run.experiment.num_blocks, "schedule": list(schedule)}
    if run.experiment.sweep is not None:
        curves = experiments.run_sweep(corpus, split, schedule, config,
                                       run.experiment.sweep, repeats=run.experiment.repeats,
                                       fit_options=fit_options)
        summary["sweep"] = {"axis": run.experiment.sweep.axis, "curves": {}}
        for value, points in curves.items():
            name = f"curve_{run.experiment.sweep.axis}_{value}.csv"
            experiments.write_curve_csv(os.path.join(out_dir, name), points)
            summary["sweep"]["curves"][str(value)] = experiments.points_payload(points)
            print(f"{run.experiment.sweep.axis}={value}: wrote {name}")
    else:
        points = experiments.learning_curve(corpus, split, schedule, config,
                                            repeats=run.experiment.repeats,
                                            fit_options=fit_options)
        experiments.write_curve_csv(os.path.join(out_dir, "curve.csv"), points)
        summary["points"] = experiments.points_payload(points)
        for pt in points:
            status = "FAILED" if pt.failed else f"f1={pt.f1:.4f} spk={pt.speaker_acc:.4f}"
            print(f"train={pt.train_utterances}: {status}")
    experiments.write_summary_json(os.path.join(out_dir, "summary.json"), summary)
    print(f"results: {out_dir}")
    return 0


def cmd_replicate_fluent(args) -> int:
    run = load_run_config(args.config)
    if run.corpus.kind != "fluent":
        raise UsageError("replicate-fluent needs corpus.kind == 'fluent'")
    corpus = build_corpus(run, cache_override=args.cache_dir)
    config = model_config_from(run, corpus)
    report = experiments.train_test_replication(corpus, config,
                                                fit_options=run.training.fit_options())
    out_dir = args.output or run.output_dir
    os.makedirs(out_dir, exist_ok=True)
    experiments.write_summary_json(os.path.join(out_dir, "replication.json"), report)
    print(f"{'setting':24s} {'partial':>8s} {'full':>8s}")
    print(f"{'this run':24s} {report['accuracy_partial']:8.4f} {report['accuracy_full']:8.4f}")
    for name, ref in report["reference"].items():
        print(f"{name:24s} {ref['partial']:8.4f} {ref['full']:8.4f}")
    print(f"results: {out_dir}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsintent",
        description="Speech-to-intent capsule networks with speaker identification.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        return p

    p = add("validate-config", cmd_validate_config, help="check a run config file")
    p.add_argument("config")

    p = add("features", cmd_features, help="populate the feature cache for a corpus")
    p.add_argument("config")
    p.add_argument("--cache-dir", help="override the feature cache directory")

    p = add("train", cmd_train, help="train on the configured corpus and save a checkpoint")
    p.add_argument("config")
    p.add_argument("--cache-dir")
    p.add_argument("--output", help="override the output directory")

    p = add("eval", cmd_eval, help="evaluate a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir")
    p.add_argument("--output", help="directory for predictions and metrics")

    p = add("curve", cmd_curve, help="run the cross-validation learning curve (and sweep)")
    p.add_argument("config")
    p.add_argument("--cache-dir")
    p.add_argument("--output")

    p = add("replicate-fluent", cmd_replicate_fluent,
            help="train/test replication on the smart-home corpus split tables")
    p.add_argument("config")
    p.add_argument("--cache-dir")
    p.add_argument("--output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except CapsIntentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
