"""Corpora: label vocabularies with slot structure, dataset loaders for the
two supported directory layouts, an offline synthetic corpus generator, a
manifest interchange format, and cross-validation block splitting.

Label naming convention: a label ``"<slot>:<value>"`` belongs to slot group
``<slot>``; a group is required when it appears in every utterance. Bare
label names (no colon) are ungrouped booleans.
"""

from __future__ import annotations

import csv
import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import DataError, UsageError
from .features import FeatureCache, FeatureRecipe, compute_features, load_wav

log = logging.getLogger(__name__)

EXPECTED_FLUENT_LABELS = 31

# synthetic-corpus constants
SEGMENT_FRAMES = 8
SEGMENT_TEXTURE = 0.3     # per-frame variation around each label's base vector
RATE_RANGE = (0.95, 1.05)
SPEAKER_OFFSET_SCALE = 0.5
OPTIONAL_GROUP_PRESENCE = 0.75
UNGROUPED_PRESENCE = 0.3


@dataclass(frozen=True)
class SlotGroup:
    name: str
    labels: tuple[str, ...]
    required: bool


@dataclass
class LabelVocabulary:
    labels: tuple[str, ...]
    slot_groups: tuple[SlotGroup, ...] = ()

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise DataError("duplicate label names in vocabulary")
        self._index = {name: i for i, name in enumerate(self.labels)}
        seen: set[str] = set()
        for group in self.slot_groups:
            for name in group.labels:
                if name not in self._index:
                    raise DataError(f"slot group {group.name!r} references unknown label {name!r}")
                if name in seen:
                    raise DataError(f"label {name!r} appears in more than one slot group")
                seen.add(name)

    def __len__(self) -> int:
        return len(self.labels)

    def index_of(self, name: str) -> int:
        if name not in self._index:
            raise DataError(f"unknown label {name!r}")
        return self._index[name]

    def to_multi_hot(self, names: Iterable[str]) -> np.ndarray:
        target = np.zeros(len(self.labels))
        for name in names:
            target[self.index_of(name)] = 1.0
        if not target.any():
            raise DataError("an utterance needs at least one active label")
        return target

    def names_of(self, target: np.ndarray) -> list[str]:
        return [self.labels[i] for i in np.flatnonzero(np.asarray(target) > 0)]

    def grouped_indices(self) -> set[int]:
        return {self.index_of(n) for g in self.slot_groups for n in g.labels}


def vocabulary_from_labels(per_utterance_labels: list[list[str]]) -> LabelVocabulary:
    """Build a slotted vocabulary from ``slot:value`` label name lists."""
    all_labels = sorted({name for labels in per_utterance_labels for name in labels})
    slots: dict[str, list[str]] = {}
    for name in all_labels:
        if ":" in name:
            slots.setdefault(name.split(":", 1)[0], []).append(name)
    groups = []
    for slot in sorted(slots):
        present_everywhere = all(
            any(name.startswith(slot + ":") for name in labels)
            for labels in per_utterance_labels
        )
        groups.append(SlotGroup(name=slot, labels=tuple(slots[slot]), required=present_everywhere))
    return LabelVocabulary(labels=tuple(all_labels), slot_groups=tuple(groups))


@dataclass
class Utterance:
    id: str
    target: np.ndarray                   # multi-hot over the vocabulary
    speaker_index: int
    features: Optional[np.ndarray] = None
    audio_path: Optional[str] = None


@dataclass
class Corpus:
    name: str
    utterances: list[Utterance]
    vocab: LabelVocabulary
    speakers: list[str]
    warnings: dict[str, int] = field(default_factory=dict)
    splits: Optional[dict[str, list[str]]] = None

    def __len__(self) -> int:
        return len(self.utterances)

    def by_id(self, utt_id: str) -> Utterance:
        if not hasattr(self, "_by_id"):
            self._by_id = {u.id: u for u in self.utterances}
        return self._by_id[utt_id]

    def subset(self, ids: Iterable[str]) -> list[Utterance]:
        return [self.by_id(i) for i in ids]

    def feat_dim(self) -> int:
        for utt in self.utterances:
            if utt.features is not None:
                return utt.features.shape[1]
        raise UsageError("corpus has no materialized features yet")

    def validate(self) -> None:
        K, M = len(self.vocab), len(self.speakers)
        if M < 1:
            raise DataError("corpus needs at least one speaker")
        for utt in self.utterances:
            if utt.target.shape != (K,):
                raise DataError(f"{utt.id}: target length {utt.target.shape} != {K}")
            if not utt.target.any():
                raise DataError(f"{utt.id}: no active label")
            if not 0 <= utt.speaker_index < M:
                raise DataError(f"{utt.id}: speaker index {utt.speaker_index} out of range")


def ensure_features(corpus: Corpus, cache_dir: Optional[str] = None,
                    recipe: FeatureRecipe = FeatureRecipe(),
                    on_error: str = "raise") -> dict[str, int]:
    """Materialize features for every utterance; returns counter dict."""
    cache = FeatureCache(cache_dir) if cache_dir else None
    counts = {"computed": 0, "cached": 0, "inline": 0, "failed": 0}
    kept = []
    for utt in corpus.utterances:
        if utt.features is not None:
            counts["inline"] += 1
            kept.append(utt)
            continue
        if utt.audio_path is None:
            raise DataError(f"{utt.id}: neither features nor audio available")
        try:
            if cache is not None:
                feats, was_cached = cache.get_or_compute(utt.audio_path, recipe)
            else:
                feats, was_cached = compute_features(load_wav(utt.audio_path), recipe), False
        except DataError:
            if on_error == "raise":
                raise
            counts["failed"] += 1
            continue
        utt.features = feats
        counts["cached" if was_cached else "computed"] += 1
        kept.append(utt)
    if counts["failed"]:
        corpus.utterances = kept
        corpus._by_id = {u.id: u for u in corpus.utterances}
    return counts


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthGroup:
    name: str
    size: int
    required: bool = True


@dataclass(frozen=True)
class SynthSpec:
    speaker_count: int
    num_labels: int
    groups: tuple[SynthGroup, ...]
    per_speaker_count: int
    feat_dim: int
    noise_level: float

    def __post_init__(self):
        if min(self.speaker_count, self.num_labels, self.per_speaker_count, self.feat_dim) < 1:
            raise UsageError("synthetic spec counts must all be >= 1")
        if sum(g.size for g in self.groups) > self.num_labels:
            raise UsageError("slot groups cannot exceed the label count")


def mimic_grabo_spec(per_speaker_count: int = 364, noise_level: float = 0.3,
                     feat_dim: int = 16) -> SynthSpec:
    """11 speakers, 33 labels over one required and three optional slots."""
    return SynthSpec(
        speaker_count=11,
        num_labels=33,
        groups=(
            SynthGroup("action", 9, required=True),
            SynthGroup("position", 8, required=False),
            SynthGroup("speed", 8, required=False),
            SynthGroup("direction", 8, required=False),
        ),
        per_speaker_count=per_speaker_count,
        feat_dim=feat_dim,
        noise_level=noise_level,
    )

SYNTH_PRESETS = {"mimic_grabo": mimic_grabo_spec}


def _synth_vocab(spec: SynthSpec) -> LabelVocabulary:
    labels: list[str] = []
    groups: list[SlotGroup] = []
    for group in spec.groups:
        names = tuple(f"{group.name}:{group.name}{i}" for i in range(group.size))
        labels.extend(names)
        groups.append(SlotGroup(name=group.name, labels=names, required=group.required))
    for i in range(spec.num_labels - len(labels)):
        labels.append(f"tag{i}")
    return LabelVocabulary(labels=tuple(labels), slot_groups=tuple(groups))


@dataclass
class SynthTruth:
    """Generator internals, recomputable from (spec, seed) for test oracles."""

    prototypes: np.ndarray        # (K, SEGMENT_FRAMES, feat_dim)
    speaker_offsets: np.ndarray   # (M, feat_dim)
    speaker_rates: np.ndarray     # (M,)
    segment_frames: int = SEGMENT_FRAMES


def synth_truth(spec: SynthSpec, seed: int) -> SynthTruth:
    proto_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    spk_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    # quasi-stationary segments: a constant per-label base with light
    # per-frame texture, like short phone-sized stretches of speech
    bases = proto_rng.normal(size=(spec.num_labels, 1, spec.feat_dim))
    texture = proto_rng.normal(0.0, SEGMENT_TEXTURE,
                               size=(spec.num_labels, SEGMENT_FRAMES, spec.feat_dim))
    return SynthTruth(
        prototypes=bases + texture,
        speaker_offsets=spk_rng.normal(0.0, SPEAKER_OFFSET_SCALE,
                                       size=(spec.speaker_count, spec.feat_dim)),
        speaker_rates=spk_rng.uniform(*RATE_RANGE, size=spec.speaker_count),
    )


def _resample_frames(mat: np.ndarray, n_out: int) -> np.ndarray:
    if n_out == mat.shape[0]:
        return mat
    pos = np.linspace(0.0, mat.shape[0] - 1.0, n_out)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, mat.shape[0] - 1)
    frac = (pos - lo)[:, None]
    return mat[lo] * (1.0 - frac) + mat[hi] * frac


def synth_generate(spec: SynthSpec, seed: int = 0, name: str = "synth") -> Corpus:
    """Deterministic synthetic corpus.

    Every label owns a prototype feature segment; an utterance concatenates
    the segments of its active labels (in label order), applies its speaker's
    additive offset and speaking-rate time warp, and adds Gaussian noise.
    """
    vocab = _synth_vocab(spec)
    truth = synth_truth(spec, seed)
    sample_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    grouped = vocab.grouped_indices()
    ungrouped = [i for i in range(len(vocab)) if i not in grouped]
    utterances = []
    for s in range(spec.speaker_count):
        for u in range(spec.per_speaker_count):
            active: list[int] = []
            for group in vocab.slot_groups:
                if group.required or sample_rng.random() < OPTIONAL_GROUP_PRESENCE:
                    pick = sample_rng.integers(len(group.labels))
                    active.append(vocab.index_of(group.labels[pick]))
            for i in ungrouped:
                if sample_rng.random() < UNGROUPED_PRESENCE:
                    active.append(i)
            if not active:
                active.append(int(sample_rng.integers(len(vocab))))
            active = sorted(active)
            order = sample_rng.permutation(len(active))  # slots speak in any order
            feats = np.concatenate([truth.prototypes[active[i]] for i in order], axis=0)
            n_out = int(round(truth.speaker_rates[s] * feats.shape[0]))
            feats = _resample_frames(feats, max(n_out, 1))
            feats = feats + truth.speaker_offsets[s]
            if spec.noise_level > 0:
                feats = feats + sample_rng.normal(0.0, spec.noise_level, size=feats.shape)
            target = np.zeros(len(vocab))
            target[active] = 1.0
            utterances.append(Utterance(
                id=f"{name}-s{s:02d}-u{u:04d}",
                target=target,
                speaker_index=s,
                features=feats,
            ))
    corpus = Corpus(
        name=name,
        utterances=utterances,
        vocab=vocab,
        speakers=[f"spk{s:02d}" for s in range(spec.speaker_count)],
    )
    corpus.validate()
    return corpus


# ---------------------------------------------------------------------------
# manifest interchange format

MANIFEST_HEADER = ["id", "audio", "speaker", "labels"]


def write_manifest(corpus: Corpus, path: str) -> None:
    """One CSV row per utterance: id, audio path, speaker, ';'-joined labels."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for utt in corpus.utterances:
            if utt.audio_path is None:
                raise UsageError(f"{utt.id}: manifests need audio-backed utterances")
            writer.writerow([
                utt.id,
                utt.audio_path,
                corpus.speakers[utt.speaker_index],
                ";".join(corpus.vocab.names_of(utt.target)),
            ])


def load_manifest(path: str, name: Optional[str] = None) -> Corpus:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest {path} does not exist")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"{path}: expected header {MANIFEST_HEADER}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            utt_id, audio, speaker, labels = row
            rows.append((utt_id, audio, speaker, [x for x in labels.split(";") if x]))
    if not rows:
        raise UsageError(f"manifest {path} lists no utterances")
    vocab = vocabulary_from_labels([labels for *_, labels in rows])
    speakers = sorted({speaker for _, _, speaker, _ in rows})
    spk_index = {s: i for i, s in enumerate(speakers)}
    base = path.parent
    utterances = [
        Utterance(
            id=utt_id,
            target=vocab.to_multi_hot(labels),
            speaker_index=spk_index[speaker],
            audio_path=str(audio if os.path.isabs(audio) else base / audio),
        )
        for utt_id, audio, speaker, labels in rows
    ]
    corpus = Corpus(name=name or path.stem, utterances=utterances, vocab=vocab, speakers=speakers)
    corpus.validate()
    return corpus


# ---------------------------------------------------------------------------
# directory loaders


def _parse_frame_xml(path: Path) -> list[str]:
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise DataError(f"{path}: malformed frame annotation ({exc})") from exc
    labels = []
    for child in root:
        value = (child.text or "").strip()
        if not value:
            raise DataError(f"{path}: slot {child.tag!r} has no value")
        labels.append(f"{child.tag}:{value}")
    if not labels:
        raise DataError(f"{path}: frame annotation defines no slots")
    return labels


def load_grabo(root: str) -> Corpus:
    """Per-speaker directories of WAV recordings with per-utterance XML
    semantic frames (same stem, ``.xml`` extension). Speakers are indexed by
    lexicographic directory order; recordings lacking an annotation are
    skipped and counted."""
    base = Path(root)
    if not base.is_dir():
        raise UsageError(f"corpus root {root} does not exist")
    if (base / "speakers").is_dir():
        base = base / "speakers"
    speaker_dirs = sorted(d for d in base.iterdir() if d.is_dir())
    if not speaker_dirs:
        raise DataError(f"{root}: no per-speaker directories found")
    rows = []
    warnings = {"missing_annotation": 0}
    for spk_idx, spk_dir in enumerate(speaker_dirs):
        for wav in sorted(spk_dir.rglob("*.wav")):
            ann = wav.with_suffix(".xml")
            if not ann.is_file():
                warnings["missing_annotation"] += 1
                continue
            labels = _parse_frame_xml(ann)
            rows.append((f"{spk_dir.name}/{wav.stem}", str(wav), spk_idx, labels))
    if not rows:
        raise DataError(f"{root}: no annotated recordings found")
    vocab = vocabulary_from_labels([labels for *_, labels in rows])
    utterances = [
        Utterance(id=utt_id, target=vocab.to_multi_hot(labels),
                  speaker_index=spk_idx, audio_path=wav)
        for utt_id, wav, spk_idx, labels in rows
    ]
    corpus = Corpus(
        name="grabo",
        utterances=utterances,
        vocab=vocab,
        speakers=[d.name for d in speaker_dirs],
        warnings=warnings,
    )
    corpus.validate()
    return corpus


FLUENT_TABLES = {"train": "train_data.csv", "valid": "valid_data.csv", "test": "test_data.csv"}
FLUENT_SLOTS = ("action", "object", "location")


def load_fluent(root: str) -> Corpus:
    """Smart-home command corpus layout: ``data/{train,valid,test}_data.csv``
    index tables with action/object/location columns and audio paths relative
    to the root. The three slots become three required label groups."""
    base = Path(root)
    data_dir = base / "data"
    if not base.is_dir():
        raise UsageError(f"corpus root {root} does not exist")
    for table in FLUENT_TABLES.values():
        if not (data_dir / table).is_file():
            raise DataError(f"{root}: missing index table data/{table}")
    rows = []
    splits: dict[str, list[str]] = {}
    warnings = {"missing_audio": 0}
    for split, table in FLUENT_TABLES.items():
        ids: list[str] = []
        with open(data_dir / table, newline="") as fh:
            reader = csv.DictReader(fh)
            for lineno, rec in enumerate(reader, start=2):
                missing = [c for c in ("path", "speakerId", *FLUENT_SLOTS) if c not in rec]
                if missing:
                    raise DataError(f"{table}:{lineno}: missing columns {missing}")
                wav = base / rec["path"]
                if not wav.is_file():
                    warnings["missing_audio"] += 1
                    continue
                labels = [f"{slot}:{rec[slot].strip()}" for slot in FLUENT_SLOTS]
                utt_id = rec["path"]
                rows.append((utt_id, str(wav), rec["speakerId"], labels))
                ids.append(utt_id)
        splits[split] = ids
    partial = data_dir / "train_partial_data.csv"
    if partial.is_file():
        with open(partial, newline="") as fh:
            splits["train_partial"] = [rec["path"] for rec in csv.DictReader(fh)]
    if not rows:
        raise DataError(f"{root}: index tables reference no existing audio")
    vocab = vocabulary_from_labels([labels for *_, labels in rows])
    if len(vocab) != EXPECTED_FLUENT_LABELS:
        log.warning("fluent slot-value union has %d labels, expected %d",
                    len(vocab), EXPECTED_FLUENT_LABELS)
    speakers = sorted({spk for _, _, spk, _ in rows})
    spk_index = {s: i for i, s in enumerate(speakers)}
    utterances = [
        Utterance(id=utt_id, target=vocab.to_multi_hot(labels),
                  speaker_index=spk_index[spk], audio_path=wav)
        for utt_id, wav, spk, labels in rows
    ]
    corpus = Corpus(name="fluent", utterances=utterances, vocab=vocab,
                    speakers=speakers, warnings=warnings, splits=splits)
    if len(vocab) != EXPECTED_FLUENT_LABELS:
        corpus.warnings["unexpected_label_count"] = len(vocab)
    corpus.validate()
    return corpus


def fluent_partial_ids(corpus: Corpus, fraction: float = 0.1, seed: int = 0) -> list[str]:
    """The reduced training split: the published table when present,
    otherwise a pinned speaker-stratified subsample of the training split."""
    if corpus.splits is None or "train" not in corpus.splits:
        raise UsageError("corpus has no train split")
    if "train_partial" in corpus.splits:
        return list(corpus.splits["train_partial"])
    rng = np.random.default_rng(seed)
    by_speaker: dict[int, list[str]] = {}
    for utt_id in corpus.splits["train"]:
        by_speaker.setdefault(corpus.by_id(utt_id).speaker_index, []).append(utt_id)
    chosen: list[str] = []
    for spk in sorted(by_speaker):
        ids = by_speaker[spk]
        take = max(1, int(round(fraction * len(ids))))
        picks = rng.choice(len(ids), size=take, replace=False)
        chosen.extend(ids[i] for i in sorted(picks))
    return chosen


# ---------------------------------------------------------------------------
# cross-validation blocks


@dataclass
class BlockSplit:
    mode: str                        # "speaker_independent" | "speaker_dependent"
    seed: int
    num_blocks: int
    blocks: Optional[list[list[str]]] = None                 # independent mode
    per_speaker: Optional[dict[int, list[list[str]]]] = None  # dependent mode


def _round_robin(ids: list[str], num_blocks: int) -> list[list[str]]:
    return [ids[b::num_blocks] for b in range(num_blocks)]


def split_blocks(corpus: Corpus, num_blocks: int = 150,
                 mode: str = "speaker_independent", seed: int = 0) -> BlockSplit:
    """Shuffle-then-round-robin partition into ``num_blocks`` blocks.

    Independent mode shuffles the whole corpus; dependent mode partitions
    each speaker's utterances separately (every speaker gets its own
    ``num_blocks`` blocks).
    """
    if mode not in ("speaker_independent", "speaker_dependent"):
        raise UsageError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng(seed)
    if mode == "speaker_independent":
        if num_blocks > len(corpus):
            raise UsageError(f"{num_blocks} blocks > {len(corpus)} utterances")
        ids = [u.id for u in corpus.utterances]
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        return BlockSplit(mode=mode, seed=seed, num_blocks=num_blocks,
                          blocks=_round_robin(shuffled, num_blocks))
    per_speaker: dict[int, list[list[str]]] = {}
    for spk in range(len(corpus.speakers)):
        ids = [u.id for u in corpus.utterances if u.speaker_index == spk]
        if num_blocks > len(ids):
            raise UsageError(
                f"speaker {corpus.speakers[spk]} has {len(ids)} utterances < {num_blocks} blocks"
            )
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        per_speaker[spk] = _round_robin(shuffled, num_blocks)
    return BlockSplit(mode=mode, seed=seed, num_blocks=num_blocks, per_speaker=per_speaker)
