"""Contrastive negatives sampled from the base generator.

Two sources mirror the two sampling schemes: rejection sampling keeps
generated responses whose final answer is correct but whose text differs
from the reference (hard negatives that force the energy to judge the
reasoning, not the answer), and suboutput sampling continues from the first
k reference sentences so negatives share prefixes with the reference.  An
unfiltered source (no correctness filter) is available for ablations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError, InvalidTrainingSetError, TransportError
from .textmodel import (
    Example,
    GeneratorModel,
    TokenSequence,
    Vocabulary,
    sample_response,
    split_sentences,
)

Checker = Callable[[Example, str], bool]

SOURCES = ("rejection", "suboutput", "unfiltered")


@dataclass(frozen=True)
class NoiseConfig:
    samples_per_instruction: int = 8
    max_segment_tokens: int = 32
    k_min: int = 1
    k_max: int = 2
    temperature: float = 1.0
    max_sentences: int = 16

    def __post_init__(self) -> None:
        if self.samples_per_instruction < 1 or self.max_segment_tokens < 1:
            raise InvalidInputError("counts must be at least 1")
        if self.k_min < 1 or self.k_max < self.k_min:
            raise InvalidInputError("need 1 <= k_min <= k_max")
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be positive")
        if self.max_sentences < 1:
            raise InvalidInputError("max_sentences must be at least 1")


@dataclass(frozen=True)
class NoiseSample:
    instruction: TokenSequence
    response: TokenSequence
    source: str
    label: str = "negative"
    k: int | None = None


@dataclass(frozen=True)
class PoolProvenance:
    model_id: str
    seed: int | None
    config: NoiseConfig


@dataclass
class NoisePool:
    samples: list[NoiseSample]
    provenance: PoolProvenance
    errors: list[str] = field(default_factory=list)
    skipped_instructions: int = 0

    def content_hash(self, vocab: Vocabulary) -> str:
        rows = [
            (vocab.decode(s.instruction), vocab.decode(s.response), s.source, s.k)
            for s in self.samples
        ]
        payload = json.dumps(rows, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _normalize_rng(rng: np.random.Generator | int) -> tuple[np.random.Generator, int | None]:
    if isinstance(rng, (int, np.integer)):
        return np.random.default_rng(int(rng)), int(rng)
    return rng, None


def rejection_sample(
    lm: GeneratorModel,
    dataset: Sequence[Example],
    cfg: NoiseConfig,
    checker: Checker,
    rng: np.random.Generator | int,
) -> NoisePool:
    """Keep sampled responses with a correct final answer that differ from gold.

    Each instruction draws ``samples_per_instruction`` responses from its own
    sub-generator, so pools are reproducible and instructions independent.
    Generator failures are recorded, never silently dropped.
    """
    master, seed = _normalize_rng(rng)
    subs = master.spawn(len(dataset))
    vocab = lm.vocab
    samples: list[NoiseSample] = []
    errors: list[str] = []
    seen: set[tuple[tuple[int, ...], tuple[int, ...]]] = set()
    for idx, ex in enumerate(dataset):
        if not ex.gold_answer:
            raise InvalidInputError(f"example {idx} has no gold answer for the checker")
        sub = subs[idx]
        for _ in range(cfg.samples_per_instruction):
            try:
                drawn = sample_response(
                    lm, ex.instruction, sub,
                    max_sentences=cfg.max_sentences,
                    max_segment_tokens=cfg.max_segment_tokens,
                    temperature=cfg.temperature,
                )
            except TransportError as exc:
                errors.append(f"instruction {idx}: {exc}")
                break
            if not checker(ex, vocab.decode(drawn.response)):
                continue
            if ex.response is not None and drawn.response.ids == ex.response.ids:
                continue
            key = (ex.instruction.ids, drawn.response.ids)
            if key in seen:
                continue
            seen.add(key)
            samples.append(NoiseSample(ex.instruction, drawn.response, source="rejection"))
    return NoisePool(samples, PoolProvenance(lm.fingerprint(), seed, cfg), errors=errors)


def suboutput_sample(
    lm: GeneratorModel,
    dataset: Sequence[Example],
    cfg: NoiseConfig,
    rng: np.random.Generator | int,
) -> NoisePool:
    """Continue from the first k gold sentences (k uniform per sample).

    Instructions whose gold response has a single sentence are skipped and
    counted; gold-identical continuations are discarded.
    """
    master, seed = _normalize_rng(rng)
    subs = master.spawn(len(dataset))
    vocab = lm.vocab
    samples: list[NoiseSample] = []
    errors: list[str] = []
    skipped = 0
    seen: set[tuple[tuple[int, ...], tuple[int, ...]]] = set()
    for idx, ex in enumerate(dataset):
        if ex.response is None:
            raise InvalidInputError(f"example {idx} has no gold response")
        sentences = split_sentences(vocab, ex.response)
        if len(sentences) - 1 < cfg.k_min:
            skipped += 1
            continue
        hi = min(cfg.k_max, len(sentences) - 1)
        sub = subs[idx]
        for _ in range(cfg.samples_per_instruction):
            k = int(sub.integers(cfg.k_min, hi + 1))
            prefix_ids: list[int] = []
            for sent in sentences[:k]:
                prefix_ids.extend(sent.ids)
            try:
                continuation = sample_response(
                    lm, TokenSequence(ex.instruction.ids + tuple(prefix_ids)), sub,
                    max_sentences=cfg.max_sentences,
                    max_segment_tokens=cfg.max_segment_tokens,
                    temperature=cfg.temperature,
                )
            except TransportError as exc:
                errors.append(f"instruction {idx}: {exc}")
                break
            response = TokenSequence(tuple(prefix_ids) + continuation.response.ids)
            if response.ids == ex.response.ids:
                continue
            key = (ex.instruction.ids, response.ids)
            if key in seen:
                continue
            seen.add(key)
            samples.append(NoiseSample(ex.instruction, response, source="suboutput", k=k))
    return NoisePool(
        samples, PoolProvenance(lm.fingerprint(), seed, cfg), errors=errors,
        skipped_instructions=skipped,
    )


def unfiltered_sample(
    lm: GeneratorModel,
    dataset: Sequence[Example],
    cfg: NoiseConfig,
    rng: np.random.Generator | int,
) -> NoisePool:
    """Plain generator samples with no correctness filter (ablation source)."""
    master, seed = _normalize_rng(rng)
    subs = master.spawn(len(dataset))
    samples: list[NoiseSample] = []
    errors: list[str] = []
    seen: set[tuple[tuple[int, ...], tuple[int, ...]]] = set()
    for idx, ex in enumerate(dataset):
        sub = subs[idx]
        for _ in range(cfg.samples_per_instruction):
            try:
                drawn = sample_response(
                    lm, ex.instruction, sub,
                    max_sentences=cfg.max_sentences,
                    max_segment_tokens=cfg.max_segment_tokens,
                    temperature=cfg.temperature,
                )
            except TransportError as exc:
                errors.append(f"instruction {idx}: {exc}")
                break
            if ex.response is not None and drawn.response.ids == ex.response.ids:
                continue
            key = (ex.instruction.ids, drawn.response.ids)
            if key in seen:
                continue
            seen.add(key)
            samples.append(NoiseSample(ex.instruction, drawn.response, source="unfiltered"))
    return NoisePool(samples, PoolProvenance(lm.fingerprint(), seed, cfg), errors=errors)


@dataclass(frozen=True)
class TrainingSet:
    positives: tuple[Example, ...]
    negatives: tuple[NoiseSample, ...]
    dropped_gold_conflicts: int

    @property
    def class_counts(self) -> tuple[int, int]:
        return len(self.positives), len(self.negatives)


def build_training_set(dataset: Sequence[Example], pools: Sequence[NoisePool]) -> TrainingSet:
    """Gold pairs as positives, pool samples as negatives, conflicts dropped."""
    if not pools:
        raise InvalidInputError("at least one noise pool is required")
    positives = tuple(ex for ex in dataset if ex.response is not None)
    if not positives:
        raise InvalidInputError("dataset contributes no gold (instruction, response) pairs")
    gold: dict[tuple[int, ...], set[tuple[int, ...]]] = {}
    for ex in positives:
        gold.setdefault(ex.instruction.ids, set()).add(ex.response.ids)
    negatives: list[NoiseSample] = []
    seen: set[tuple[tuple[int, ...], tuple[int, ...]]] = set()
    dropped = 0
    for pool in pools:
        for sample in pool.samples:
            if sample.response.ids in gold.get(sample.instruction.ids, ()):
                dropped += 1
                continue
            key = (sample.instruction.ids, sample.response.ids)
            if key in seen:
                continue
            seen.add(key)
            negatives.append(sample)
    if not negatives:
        raise InvalidTrainingSetError("no negatives survived gold-conflict filtering")
    return TrainingSet(positives, tuple(negatives), dropped)


def save_pool(pool: NoisePool, path, vocab: Vocabulary) -> None:
    """JSON-lines rows {instruction, response, source, seed}."""
    seed = pool.provenance.seed if pool.provenance.seed is not None else 0
    with open(path, "w") as fh:
        for s in pool.samples:
            row = {
                "instruction": vocab.decode(s.instruction),
                "response": vocab.decode(s.response),
                "source": s.source,
                "seed": seed,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_pool(path, vocab: Vocabulary, cfg: NoiseConfig | None = None) -> NoisePool:
    samples: list[NoiseSample] = []
    seed: int | None = None
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if row["source"] not in SOURCES:
                raise InvalidInputError(f"unknown noise source {row['source']!r}")
            seed = int(row["seed"])
            samples.append(
                NoiseSample(
                    vocab.encode(row["instruction"]),
                    vocab.encode(row["response"], append_eos=True),
                    source=row["source"],
                )
            )
    return NoisePool(samples, PoolProvenance("", seed, cfg or NoiseConfig()))
