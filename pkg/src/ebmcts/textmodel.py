"""Token vocabularies, sequences, and the base generator distributions.

Two concrete generators live here: an exact tabular model (explicit joint
table over terminated sequences) and a smoothed n-gram model trained on an
example corpus.  A third, remote kind speaks an HTTP wire protocol and is
implemented in remote.py.

All sampling is driven by caller-owned numpy generators, so every draw is
reproducible from (model, prefix, seed).  Models are immutable after
construction; internal per-context caches are filled lazily but never
change a distribution once computed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CapacityError, InvalidInputError

DEFAULT_EOS = "<eos>"
DEFAULT_MARKER = "####"

# Context padding id for n-gram models; never a real token.
BOS_ID = -1

ENUMERATION_LIMIT = 10**6


@dataclass(frozen=True)
class Vocabulary:
    """Ordered, closed token set with designated special tokens.

    ``delimiters`` mark sentence boundaries for segment sampling, ``eos``
    terminates sequences, and ``marker`` introduces the final answer.  The
    marker is optional so tiny test vocabularies stay tiny.
    """

    tokens: tuple[str, ...]
    eos: str = DEFAULT_EOS
    delimiters: frozenset[str] = frozenset({"."})
    marker: str = DEFAULT_MARKER

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise InvalidInputError("vocabulary tokens must be unique")
        if self.eos not in self.tokens:
            raise InvalidInputError(f"end-of-sequence token {self.eos!r} missing")
        missing = [d for d in self.delimiters if d not in self.tokens]
        if missing:
            raise InvalidInputError(f"delimiter tokens missing from vocabulary: {missing}")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_delimiter_ids", frozenset(index[d] for d in self.delimiters))

    @classmethod
    def build(
        cls,
        base_tokens: Iterable[str],
        eos: str = DEFAULT_EOS,
        delimiters: Iterable[str] = (".",),
        marker: str = DEFAULT_MARKER,
    ) -> "Vocabulary":
        """Assemble a vocabulary, appending any special tokens not already present."""
        toks = list(dict.fromkeys(base_tokens))
        for special in (*delimiters, marker, eos):
            if special and special not in toks:
                toks.append(special)
        return cls(tokens=tuple(toks), eos=eos, delimiters=frozenset(delimiters), marker=marker)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self._index[self.eos]

    @property
    def delimiter_ids(self) -> frozenset[int]:
        return self._delimiter_ids

    @property
    def marker_id(self) -> int | None:
        return self._index.get(self.marker)

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise InvalidInputError(f"unknown token {token!r}") from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise InvalidInputError(f"token id {token_id} out of range")
        return self.tokens[token_id]

    def encode(self, text: str, append_eos: bool = False) -> "TokenSequence":
        """Whitespace-tokenize ``text`` into ids; unknown tokens are an error."""
        ids = [self.id_of(tok) for tok in text.split()]
        if append_eos:
            ids.append(self.eos_id)
        return TokenSequence(tuple(ids))

    def decode(self, seq: "TokenSequence | Sequence[int]", drop_eos: bool = True) -> str:
        ids = seq.ids if isinstance(seq, TokenSequence) else tuple(seq)
        if drop_eos:
            ids = tuple(i for i in ids if i != self.eos_id)
        return " ".join(self.token_of(i) for i in ids)


@dataclass(frozen=True)
class TokenSequence:
    """An immutable run of token ids."""

    ids: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, item):
        got = self.ids[item]
        return TokenSequence(got) if isinstance(item, slice) else got

    def concat(self, other: "TokenSequence") -> "TokenSequence":
        return TokenSequence(self.ids + other.ids)

    def append(self, token_id: int) -> "TokenSequence":
        return TokenSequence(self.ids + (token_id,))

    @classmethod
    def of(cls, *ids: int) -> "TokenSequence":
        return cls(tuple(ids))


def vocab_to_json(vocab: Vocabulary) -> dict:
    return {
        "tokens": list(vocab.tokens),
        "eos": vocab.eos,
        "delimiters": sorted(vocab.delimiters),
        "marker": vocab.marker,
    }


def vocab_from_json(payload: dict) -> Vocabulary:
    return Vocabulary(
        tokens=tuple(payload["tokens"]),
        eos=payload["eos"],
        delimiters=frozenset(payload["delimiters"]),
        marker=payload["marker"],
    )


def validate_sequence(vocab: Vocabulary, seq: TokenSequence) -> None:
    """Check id range and the single-final-EOS rule."""
    eos = vocab.eos_id
    for pos, token_id in enumerate(seq.ids):
        if not 0 <= token_id < vocab.size:
            raise InvalidInputError(f"token id {token_id} outside vocabulary of size {vocab.size}")
        if token_id == eos and pos != len(seq.ids) - 1:
            raise InvalidInputError("end-of-sequence token before final position")


def is_terminated(vocab: Vocabulary, seq: TokenSequence) -> bool:
    return len(seq) > 0 and seq.ids[-1] == vocab.eos_id


@dataclass(frozen=True)
class Example:
    """An (instruction, response, gold answer) triple.

    The response is optional (decoding starts from a bare instruction) and,
    when present, must be terminated.
    """

    instruction: TokenSequence
    response: TokenSequence | None = None
    gold_answer: str = ""

    def __post_init__(self) -> None:
        if len(self.instruction) == 0:
            raise InvalidInputError("instruction must be non-empty")


def validate_example(vocab: Vocabulary, ex: Example) -> None:
    validate_sequence(vocab, ex.instruction)
    if ex.response is not None:
        validate_sequence(vocab, ex.response)
        if not is_terminated(vocab, ex.response):
            raise InvalidInputError("response present but not terminated")


def split_sentences(vocab: Vocabulary, seq: TokenSequence) -> list[TokenSequence]:
    """Split a sequence at delimiter tokens; delimiters stay with their sentence.

    A trailing run without a delimiter (typically the "#### answer <eos>"
    tail) forms the final sentence.
    """
    out: list[TokenSequence] = []
    current: list[int] = []
    boundary = vocab.delimiter_ids
    for token_id in seq.ids:
        current.append(token_id)
        if token_id in boundary:
            out.append(TokenSequence(tuple(current)))
            current = []
    if current:
        out.append(TokenSequence(tuple(current)))
    return out


@dataclass(frozen=True)
class SegmentSample:
    """One sampled sentence plus its chain-rule log probability."""

    segment: TokenSequence
    log_prob: float
    truncated: bool = False


@dataclass(frozen=True)
class ResponseSample:
    """A full sampled response; ``forced`` marks an out-of-budget termination."""

    response: TokenSequence
    log_prob: float
    forced: bool = False


class GeneratorModel:
    """Base distribution over token sequences, fixed during training and search.

    Subclasses provide ``next_token_distribution``; chain-rule scoring and
    segment sampling are shared.
    """

    kind = "abstract"

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def next_token_distribution(self, prefix: TokenSequence) -> np.ndarray:
        raise NotImplementedError

    def token_prob(self, prefix_ids: tuple[int, ...], token_id: int) -> float:
        """P(token | prefix); returns 0.0 rather than raising on dead prefixes."""
        try:
            return float(self.next_token_distribution(TokenSequence(prefix_ids))[token_id])
        except InvalidInputError:
            return 0.0

    def _sampling_dist(self, prefix_ids: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        dist = self.next_token_distribution(TokenSequence(prefix_ids))
        return dist, np.cumsum(dist)

    def sequence_log_prob(self, instruction: TokenSequence, response: TokenSequence) -> float:
        """Natural-log probability of ``response`` given ``instruction``.

        Zero-probability steps yield ``-inf`` instead of raising, so callers
        can rank impossible continuations without special cases.
        """
        validate_sequence(self.vocab, instruction)
        validate_sequence(self.vocab, response)
        if len(response) == 0:
            raise InvalidInputError("response must be non-empty")
        if not is_terminated(self.vocab, response):
            raise InvalidInputError("response must end with the end-of-sequence token")
        prefix = list(instruction.ids)
        total = 0.0
        for token_id in response.ids:
            p = self.token_prob(tuple(prefix), token_id)
            if p <= 0.0:
                return -math.inf
            total += math.log(p)
            prefix.append(token_id)
        return total

    def sample_segment(
        self,
        prefix: TokenSequence,
        rng: np.random.Generator | int,
        max_tokens: int,
        temperature: float = 1.0,
    ) -> SegmentSample:
        """Sample tokens until a sentence delimiter or EOS, or ``max_tokens``.

        The returned log probability is always under the untempered model;
        ``temperature`` only reshapes the sampling distribution.
        """
        if max_tokens < 1:
            raise InvalidInputError("max_tokens must be at least 1")
        validate_sequence(self.vocab, prefix)
        rng = np.random.default_rng(rng)
        if temperature < 0:
            raise InvalidInputError("temperature must be non-negative")
        stop_ids = self.vocab.delimiter_ids | {self.vocab.eos_id}
        ids: list[int] = []
        current = list(prefix.ids)
        log_prob = 0.0
        truncated = True
        for _ in range(max_tokens):
            dist, cum = self._sampling_dist(tuple(current))
            if temperature == 0.0:
                token_id = int(np.argmax(dist))
            else:
                if temperature != 1.0:
                    tempered = np.power(dist, 1.0 / temperature)
                    tempered /= tempered.sum()
                    cum = np.cumsum(tempered)
                draw = rng.random()
                token_id = int(min(np.searchsorted(cum, draw, side="right"), len(dist) - 1))
            p = float(dist[token_id])
            log_prob += math.log(p) if p > 0.0 else -math.inf
            ids.append(token_id)
            current.append(token_id)
            if token_id in stop_ids:
                truncated = False
                break
        return SegmentSample(TokenSequence(tuple(ids)), log_prob, truncated=truncated)

    def fingerprint(self) -> str:
        """Stable content hash used for artifact provenance."""
        payload = json.dumps(self._state(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def _state(self) -> dict:
        raise NotImplementedError


class TabularModel(GeneratorModel):
    """Exact distribution given by an explicit joint table over terminated sequences.

    Conditionals come from prefix-mass ratios, so the model is normalized by
    construction at every reachable prefix.
    """

    kind = "tabular"

    def __init__(
        self,
        vocab: Vocabulary,
        table: Mapping[tuple[int, ...], float],
        normalize: bool = True,
    ):
        super().__init__(vocab)
        cleaned: dict[tuple[int, ...], float] = {}
        for raw_seq, prob in table.items():
            seq = TokenSequence(tuple(raw_seq))
            validate_sequence(vocab, seq)
            if not is_terminated(vocab, seq):
                raise InvalidInputError("tabular entries must be terminated sequences")
            if prob < 0:
                raise InvalidInputError("tabular probabilities must be non-negative")
            if prob > 0:
                cleaned[seq.ids] = cleaned.get(seq.ids, 0.0) + float(prob)
        if not cleaned:
            raise InvalidInputError("tabular model needs at least one positive-mass sequence")
        total = sum(cleaned.values())
        if normalize:
            cleaned = {seq: p / total for seq, p in cleaned.items()}
        elif abs(total - 1.0) > 1e-9:
            raise InvalidInputError(f"table mass {total} is not 1")
        self.table = cleaned
        mass: dict[tuple[int, ...], float] = {}
        for seq, prob in cleaned.items():
            for cut in range(len(seq) + 1):
                key = seq[:cut]
                mass[key] = mass.get(key, 0.0) + prob
        self._mass = mass
        self._dist_cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}

    @classmethod
    def uniform(cls, vocab: Vocabulary, max_len: int) -> "TabularModel":
        """Uniform next-token choice at every depth below ``max_len``.

        At depth ``max_len`` the EOS is forced, which keeps the joint table
        finite and exactly normalized while every interior conditional stays
        uniform over the full vocabulary.
        """
        if vocab.size ** max_len > ENUMERATION_LIMIT:
            raise CapacityError("uniform table would exceed the enumeration limit")
        eos = vocab.eos_id
        non_eos = [i for i in range(vocab.size) if i != eos]
        table: dict[tuple[int, ...], float] = {}
        frontier: list[tuple[tuple[int, ...], float]] = [((), 1.0)]
        step = 1.0 / vocab.size
        for depth in range(max_len):
            nxt = []
            for seq, p in frontier:
                table[seq + (eos,)] = p * step
                for tok in non_eos:
                    nxt.append((seq + (tok,), p * step))
            frontier = nxt
        for seq, p in frontier:
            table[seq + (eos,)] = p
        return cls(vocab, table, normalize=False)

    @classmethod
    def random(cls, vocab: Vocabulary, max_len: int, rng: np.random.Generator | int) -> "TabularModel":
        """Random positive mass on every terminated sequence of length <= max_len."""
        rng = np.random.default_rng(rng)
        seqs = enumerate_terminated(vocab, max_len)
        weights = rng.random(len(seqs)) + 1e-3
        return cls(vocab, {s.ids: float(w) for s, w in zip(seqs, weights)})

    def next_token_distribution(self, prefix: TokenSequence) -> np.ndarray:
        validate_sequence(self.vocab, prefix)
        prefix_mass = self._mass.get(prefix.ids, 0.0)
        if prefix_mass <= 0.0:
            raise InvalidInputError("prefix is unreachable under the joint table")
        if is_terminated(self.vocab, prefix):
            raise InvalidInputError("prefix is already terminated")
        out = np.zeros(self.vocab.size)
        for token_id in range(self.vocab.size):
            out[token_id] = self._mass.get(prefix.ids + (token_id,), 0.0) / prefix_mass
        return out

    def token_prob(self, prefix_ids: tuple[int, ...], token_id: int) -> float:
        prefix_mass = self._mass.get(prefix_ids, 0.0)
        if prefix_mass <= 0.0:
            return 0.0
        return self._mass.get(prefix_ids + (token_id,), 0.0) / prefix_mass

    def _sampling_dist(self, prefix_ids: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        hit = self._dist_cache.get(prefix_ids)
        if hit is None:
            dist = self.next_token_distribution(TokenSequence(prefix_ids))
            hit = (dist, np.cumsum(dist))
            self._dist_cache[prefix_ids] = hit
        return hit

    def _state(self) -> dict:
        return {
            "kind": self.kind,
            "tokens": self.vocab.tokens,
            "table": {" ".join(map(str, k)): v for k, v in sorted(self.table.items())},
        }


class NgramModel(GeneratorModel):
    """Add-alpha smoothed n-gram model over the closed vocabulary."""

    kind = "ngram"

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        alpha: float,
        counts: Mapping[tuple[int, ...], np.ndarray] | None = None,
    ):
        if order < 1:
            raise InvalidInputError("order must be at least 1")
        if alpha < 0:
            raise InvalidInputError("alpha must be non-negative")
        super().__init__(vocab)
        self.order = order
        self.alpha = float(alpha)
        self.counts: dict[tuple[int, ...], np.ndarray] = (
            {k: np.asarray(v, dtype=float) for k, v in counts.items()} if counts else {}
        )
        self._dist_cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}

    def context_of(self, prefix_ids: tuple[int, ...]) -> tuple[int, ...]:
        width = self.order - 1
        if width == 0:
            return ()
        padded = (BOS_ID,) * max(0, width - len(prefix_ids)) + prefix_ids[-width:]
        return padded

    def _raw_counts(self, ctx: tuple[int, ...]) -> np.ndarray:
        got = self.counts.get(ctx)
        return got if got is not None else np.zeros(self.vocab.size)

    def next_token_distribution(self, prefix: TokenSequence) -> np.ndarray:
        validate_sequence(self.vocab, prefix)
        c = self._raw_counts(self.context_of(prefix.ids))
        denom = c.sum() + self.alpha * self.vocab.size
        if denom <= 0.0:
            raise InvalidInputError("context unseen and alpha is zero: distribution undefined")
        return (c + self.alpha) / denom

    def token_prob(self, prefix_ids: tuple[int, ...], token_id: int) -> float:
        c = self._raw_counts(self.context_of(prefix_ids))
        denom = c.sum() + self.alpha * self.vocab.size
        if denom <= 0.0:
            return 0.0
        return float((c[token_id] + self.alpha) / denom)

    def _sampling_dist(self, prefix_ids: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        ctx = self.context_of(prefix_ids)
        hit = self._dist_cache.get(ctx)
        if hit is None:
            dist = self.next_token_distribution(TokenSequence(prefix_ids))
            hit = (dist, np.cumsum(dist))
            self._dist_cache[ctx] = hit
        return hit

    def _state(self) -> dict:
        return {
            "kind": self.kind,
            "tokens": self.vocab.tokens,
            "order": self.order,
            "alpha": self.alpha,
            "counts": {
                " ".join(map(str, k)): [float(x) for x in v]
                for k, v in sorted(self.counts.items())
            },
        }

    def to_json(self) -> dict:
        return {
            "vocab": vocab_to_json(self.vocab),
            "order": self.order,
            "alpha": self.alpha,
            "counts": {
                " ".join(map(str, k)): [float(x) for x in v]
                for k, v in sorted(self.counts.items())
            },
        }

    @classmethod
    def from_json(cls, payload: dict) -> "NgramModel":
        vocab = vocab_from_json(payload["vocab"])
        counts = {
            tuple(int(x) for x in key.split()) if key else (): np.asarray(vec, dtype=float)
            for key, vec in payload["counts"].items()
        }
        return cls(vocab, order=int(payload["order"]), alpha=float(payload["alpha"]), counts=counts)


def train_ngram(vocab: Vocabulary, corpus: Sequence[Example], order: int, alpha: float) -> NgramModel:
    """Count exact n-gram statistics over concatenated instruction+response."""
    if not corpus:
        raise InvalidInputError("corpus must be non-empty")
    model = NgramModel(vocab, order, alpha)
    width = order - 1
    for ex in corpus:
        validate_example(vocab, ex)
        if ex.response is None:
            raise InvalidInputError("training examples must carry responses")
        seq = (BOS_ID,) * width + ex.instruction.ids + ex.response.ids
        for i in range(width, len(seq)):
            ctx = seq[i - width : i]
            bucket = model.counts.get(ctx)
            if bucket is None:
                bucket = np.zeros(vocab.size)
                model.counts[ctx] = bucket
            bucket[seq[i]] += 1.0
    return model


def perplexity(model: GeneratorModel, corpus: Sequence[Example]) -> float:
    """Per-token perplexity of responses under the model."""
    total_lp = 0.0
    total_tokens = 0
    for ex in corpus:
        if ex.response is None:
            continue
        total_lp += model.sequence_log_prob(ex.instruction, ex.response)
        total_tokens += len(ex.response)
    if total_tokens == 0:
        raise InvalidInputError("no scored tokens")
    return math.exp(-total_lp / total_tokens)


def sample_response(
    model: GeneratorModel,
    instruction: TokenSequence,
    rng: np.random.Generator | int,
    max_sentences: int = 16,
    max_segment_tokens: int = 32,
    temperature: float = 1.0,
) -> ResponseSample:
    """Sample sentence segments until EOS; force-terminate past the budget."""
    rng = np.random.default_rng(rng)
    parts: list[int] = []
    log_prob = 0.0
    prefix = instruction
    for _ in range(max_sentences):
        seg = model.sample_segment(prefix, rng, max_segment_tokens, temperature=temperature)
        parts.extend(seg.segment.ids)
        log_prob += seg.log_prob
        prefix = prefix.concat(seg.segment)
        if parts and parts[-1] == model.vocab.eos_id:
            return ResponseSample(TokenSequence(tuple(parts)), log_prob, forced=False)
    parts.append(model.vocab.eos_id)
    return ResponseSample(TokenSequence(tuple(parts)), log_prob, forced=True)


def enumerate_terminated(vocab: Vocabulary, max_len: int) -> list[TokenSequence]:
    """All EOS-terminated sequences with at most ``max_len`` non-EOS tokens."""
    if vocab.size ** max_len > ENUMERATION_LIMIT:
        raise CapacityError(
            f"enumeration of {vocab.size}^{max_len} sequences exceeds {ENUMERATION_LIMIT}"
        )
    eos = vocab.eos_id
    non_eos = [i for i in range(vocab.size) if i != eos]
    out: list[TokenSequence] = []
    frontier: list[tuple[int, ...]] = [()]
    for _ in range(max_len + 1):
        nxt = []
        for seq in frontier:
            out.append(TokenSequence(seq + (eos,)))
            for tok in non_eos:
                nxt.append(seq + (tok,))
        frontier = nxt
        if len(out) + len(frontier) > ENUMERATION_LIMIT:
            raise CapacityError("enumeration limit exceeded")
    return out
