"""Synthetic multi-step arithmetic task, answer checking, and decoding baselines.

A problem instruction reads ``start 3 ; add 4 ; add 5`` and its reference
response walks one arithmetic sentence per step, ending with the answer
marker: ``3 + 4 = 7 . 7 + 5 = 12 . #### 12``.

Besides the task generator this module provides the four decoding methods
(greedy, self-consistency, sample-then-rank, with tree search living in
mcts.py), pass@1 evaluation, and a scripted tabular generator whose recall
slips are seeded per instruction, used to emulate a competent-but-flawed
base model at any target greedy accuracy.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .energy import EnergyFunction
from .errors import CapacityError, InvalidInputError, NoAnswerError, UnsupportedOperationError
from .textmodel import (
    Example,
    GeneratorModel,
    ResponseSample,
    TabularModel,
    TokenSequence,
    Vocabulary,
    sample_response,
)

OP_SYMBOLS = {"add": "+", "sub": "-", "mul": "*"}

TRAILING_PUNCTUATION = ".,!?;:"


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of the synthetic arithmetic task."""

    number_range: tuple[int, int] = (0, 99)
    ops: tuple[str, ...] = ("add", "sub")
    steps: tuple[int, int] = (2, 3)
    n_train: int = 2000
    n_test: int = 200
    seed: int = 0
    start_range: tuple[int, int] = (1, 9)
    operand_range: tuple[int, int] = (2, 9)
    step_weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        lo, hi = self.steps
        if not 2 <= lo <= hi <= 8:
            raise InvalidInputError("steps range must lie within [2, 8]")
        if not self.ops or any(op not in OP_SYMBOLS for op in self.ops):
            raise InvalidInputError(f"ops must be a non-empty subset of {sorted(OP_SYMBOLS)}")
        if self.number_range[0] > self.number_range[1]:
            raise InvalidInputError("empty number range")
        for name, (a, b) in (("start_range", self.start_range), ("operand_range", self.operand_range)):
            if a > b or a < self.number_range[0] or b > self.number_range[1]:
                raise InvalidInputError(f"{name} must sit inside number_range")
        if self.n_train < 1 or self.n_test < 1:
            raise InvalidInputError("train/test sizes must be positive")
        if self.step_weights is not None and len(self.step_weights) != hi - lo + 1:
            raise InvalidInputError("step_weights must cover each step count in range")


def task_vocabulary(spec: TaskSpec) -> Vocabulary:
    """Closed vocabulary covering every token the task can emit."""
    numbers = [str(n) for n in range(spec.number_range[0], spec.number_range[1] + 1)]
    words = ["start", ";", "="]
    for op in spec.ops:
        words.append(op)
        words.append(OP_SYMBOLS[op])
    return Vocabulary.build(numbers + words, delimiters=(".",))


def apply_op(op: str, value: int, operand: int) -> int:
    if op == "add":
        return value + operand
    if op == "sub":
        return value - operand
    if op == "mul":
        return value * operand
    raise InvalidInputError(f"unknown operation {op!r}")


def parse_instruction(vocab: Vocabulary, instruction: TokenSequence) -> tuple[int, list[tuple[str, int]]]:
    """Parse ``start v ; op a ; ...`` back into numbers; strict on shape."""
    toks = [vocab.token_of(i) for i in instruction.ids]
    if len(toks) < 5 or toks[0] != "start":
        raise InvalidInputError(f"malformed instruction: {' '.join(toks)}")
    try:
        start = int(toks[1])
    except ValueError:
        raise InvalidInputError(f"bad start value {toks[1]!r}") from None
    pairs: list[tuple[str, int]] = []
    i = 2
    while i < len(toks):
        if toks[i] != ";" or i + 2 > len(toks) - 1:
            raise InvalidInputError(f"malformed step list: {' '.join(toks)}")
        op = toks[i + 1]
        if op not in OP_SYMBOLS:
            raise InvalidInputError(f"unknown op word {op!r}")
        try:
            operand = int(toks[i + 2])
        except ValueError:
            raise InvalidInputError(f"bad operand {toks[i + 2]!r}") from None
        pairs.append((op, operand))
        i += 3
    if not pairs:
        raise InvalidInputError("instruction has no steps")
    return start, pairs


def oracle_answer(vocab: Vocabulary, instruction: TokenSequence) -> int:
    """Brute-force fold over the parsed step list; independent of generation."""
    start, pairs = parse_instruction(vocab, instruction)
    value = start
    for op, operand in pairs:
        value = apply_op(op, value, operand)
    return value


def render_response(start: int, pairs: Sequence[tuple[str, int]]) -> str:
    sentences = []
    value = start
    for op, operand in pairs:
        nxt = apply_op(op, value, operand)
        sentences.append(f"{value} {OP_SYMBOLS[op]} {operand} = {nxt} .")
        value = nxt
    sentences.append(f"#### {value}")
    return " ".join(sentences)


def gen_task(spec: TaskSpec, rng: np.random.Generator | int) -> tuple[list[Example], list[Example]]:
    """Generate disjoint train/test splits of verified problems."""
    rng = np.random.default_rng(rng)
    vocab = task_vocabulary(spec)
    lo, hi = spec.steps
    step_values = list(range(lo, hi + 1))
    if spec.step_weights is not None:
        weights = np.asarray(spec.step_weights, dtype=float)
        weights = weights / weights.sum()
    else:
        weights = np.full(len(step_values), 1.0 / len(step_values))
    need = spec.n_train + spec.n_test
    seen: set[tuple[int, ...]] = set()
    examples: list[Example] = []
    attempts = 0
    while len(examples) < need:
        attempts += 1
        if attempts > 200 * need:
            raise CapacityError(
                "could not draw enough distinct in-range problems; widen the task ranges"
            )
        n_steps = int(rng.choice(step_values, p=weights))
        start = int(rng.integers(spec.start_range[0], spec.start_range[1] + 1))
        value = start
        pairs: list[tuple[str, int]] = []
        ok = True
        for _ in range(n_steps):
            op = str(spec.ops[int(rng.integers(len(spec.ops)))])
            operand = int(rng.integers(spec.operand_range[0], spec.operand_range[1] + 1))
            value = apply_op(op, value, operand)
            if not spec.number_range[0] <= value <= spec.number_range[1]:
                ok = False
                break
            pairs.append((op, operand))
        if not ok:
            continue
        instr_text = "start " + str(start) + "".join(f" ; {op} {a}" for op, a in pairs)
        instruction = vocab.encode(instr_text)
        if instruction.ids in seen:
            continue
        seen.add(instruction.ids)
        if oracle_answer(vocab, instruction) != value:
            raise InvalidInputError("generated answer disagrees with the oracle")
        response = vocab.encode(render_response(start, pairs), append_eos=True)
        examples.append(Example(instruction, response, gold_answer=str(value)))
    return examples[: spec.n_train], examples[spec.n_train :]


# ---------------------------------------------------------------------------
# Answer extraction and checking
# ---------------------------------------------------------------------------


def normalize_answer(text: str) -> str:
    """Canonical numeric form: '12.' -> '12', '12.0' -> '12', else verbatim."""
    s = text.strip().rstrip(TRAILING_PUNCTUATION).strip()
    try:
        value = float(s)
    except ValueError:
        return s
    if math.isfinite(value) and value == int(value):
        return str(int(value))
    return repr(value)


def extract_answer(response_text: str) -> str:
    """The token run after the last '####' marker, numerically normalized."""
    marker = "####"
    pos = response_text.rfind(marker)
    if pos < 0:
        raise NoAnswerError("response carries no #### marker")
    tail = response_text[pos + len(marker) :].strip()
    if not tail:
        raise NoAnswerError("nothing follows the #### marker")
    return normalize_answer(tail)


def check_answer(ex: Example, response_text: str) -> bool:
    """True iff the extracted answer matches the gold answer numerically."""
    try:
        return extract_answer(response_text) == normalize_answer(ex.gold_answer)
    except NoAnswerError:
        return False


# ---------------------------------------------------------------------------
# Scripted flawed generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpertParams:
    """Behavior knobs for the scripted generator.

    ``flip_rate`` is the chance that a decision (operand recall, or the
    continue/stop choice at a sentence boundary) is systematically confused
    for a given instruction; flips are a pure function of (seed, instruction)
    so the model makes the same mistakes every time it sees a problem.
    """

    flip_rate: float = 0.15
    correct_mass: float = 0.7
    stop_mass: float = 0.1
    flipped_stop_mass: float = 0.7
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("flip_rate", "correct_mass", "stop_mass", "flipped_stop_mass"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1]")


def instruction_span(vocab: Vocabulary, prefix_ids: tuple[int, ...]) -> tuple[int, ...]:
    """The instruction part at the head of a mixed instruction+response prefix.

    The task grammar is unambiguous: ``start NUM`` followed by ``; op NUM``
    groups; the response begins at the first token that breaks the pattern.
    """
    try:
        start_id = vocab.id_of("start")
        sep_id = vocab.id_of(";")
    except InvalidInputError:
        raise InvalidInputError("vocabulary does not carry the task grammar") from None
    if len(prefix_ids) < 5 or prefix_ids[0] != start_id:
        raise InvalidInputError("prefix does not start with a task instruction")
    i = 2
    while i < len(prefix_ids) and prefix_ids[i] == sep_id:
        if i + 2 > len(prefix_ids) - 1:
            raise InvalidInputError("truncated step group in instruction")
        i += 3
    if i < 5:
        raise InvalidInputError("instruction has no steps")
    return prefix_ids[:i]


class NoisyExpertModel(GeneratorModel):
    """Tabular generator materialized lazily, one joint table per instruction.

    The model parses the instruction prefix, enumerates a small candidate
    tree (correct recalls, operand misreadings, premature stops) and exposes
    it as an exact joint table.  Arithmetic inside every candidate sentence
    is honest; errors come only from which operand is recalled and when the
    answer marker is emitted.
    """

    kind = "tabular"

    def __init__(self, vocab: Vocabulary, params: ExpertParams | None = None, cache_size: int = 256):
        super().__init__(vocab)
        self.params = params or ExpertParams()
        self._numbers = {int(t) for t in vocab.tokens if t.lstrip("-").isdigit()}
        self._cache: OrderedDict[tuple[int, ...], TabularModel] = OrderedDict()
        self._cache_size = cache_size

    def split_prefix(self, prefix_ids: tuple[int, ...]) -> tuple[int, ...]:
        return instruction_span(self.vocab, prefix_ids)

    def table_for(self, instruction_ids: tuple[int, ...]) -> TabularModel:
        got = self._cache.get(instruction_ids)
        if got is not None:
            self._cache.move_to_end(instruction_ids)
            return got
        built = self._build_table(instruction_ids)
        self._cache[instruction_ids] = built
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return built

    def _build_table(self, instruction_ids: tuple[int, ...]) -> TabularModel:
        vocab = self.vocab
        start, pairs = parse_instruction(vocab, TokenSequence(instruction_ids))
        n = len(pairs)
        rng = np.random.default_rng(np.random.SeedSequence((self.params.seed,) + instruction_ids))
        operand_flips = rng.random(n) < self.params.flip_rate
        boundary_flips = rng.random(max(n - 1, 0)) < self.params.flip_rate
        distractor_up = rng.random(n) < 0.5

        def valid(op: str, value: int, operand: int) -> bool:
            if operand not in self._numbers or operand < 0:
                return False
            result = apply_op(op, value, operand)
            return result in self._numbers

        def final_tokens(value: int) -> tuple[int, ...]:
            return (vocab.id_of("####"), vocab.id_of(str(value)), vocab.eos_id)

        def sentence_tokens(value: int, op: str, operand: int) -> tuple[tuple[int, ...], int]:
            result = apply_op(op, value, operand)
            ids = tuple(
                vocab.id_of(t)
                for t in (str(value), OP_SYMBOLS[op], str(operand), "=", str(result), ".")
            )
            return ids, result

        paths: dict[tuple[int, ...], float] = {}

        def emit(resp: tuple[int, ...], mass: float) -> None:
            paths[resp] = paths.get(resp, 0.0) + mass

        def walk(resp: tuple[int, ...], value: int, unused: tuple[int, ...], j: int, mass: float) -> None:
            if not unused:
                emit(resp + final_tokens(value), mass)
                return
            if j > 0:
                p_stop = (
                    self.params.flipped_stop_mass if boundary_flips[j - 1] else self.params.stop_mass
                )
                emit(resp + final_tokens(value), mass * p_stop)
                mass *= 1.0 - p_stop
            intended = unused[0]
            op, operand = pairs[intended]
            options: list[tuple[str, int, int | None]] = []  # (op, operand, consumed slot)
            for slot in unused:
                s_op, s_val = pairs[slot]
                if valid(s_op, value, s_val):
                    options.append((s_op, s_val, slot))
            offset = 1 if distractor_up[min(j, n - 1)] else -1
            if valid(op, value, operand + offset) and all(
                (op, operand + offset) != (o, v) for o, v, _ in options
            ):
                options.append((op, operand + offset, None))
            if not options:
                emit(resp + final_tokens(value), mass)
                return
            flipped = operand_flips[min(j, n - 1)]
            intended_pos = next(
                (k for k, (_, _, slot) in enumerate(options) if slot == intended), None
            )
            if flipped:
                # a confused recall favors the misreading, else any other option
                favored = next((k for k, (_, _, slot) in enumerate(options) if slot is None), None)
                if favored is None:
                    favored = next(
                        (k for k in range(len(options)) if k != intended_pos), intended_pos or 0
                    )
            else:
                favored = intended_pos if intended_pos is not None else 0
            if len(options) == 1:
                shares = [1.0]
            else:
                rest = (1.0 - self.params.correct_mass) / (len(options) - 1)
                shares = [rest] * len(options)
                shares[favored] = self.params.correct_mass
            for (o_op, o_val, o_slot), share in zip(options, shares):
                ids, result = sentence_tokens(value, o_op, o_val)
                consumed = o_slot if o_slot is not None else intended
                remaining = tuple(u for u in unused if u != consumed)
                walk(resp + ids, result, remaining, j + 1, mass * share)

        walk((), start, tuple(range(n)), 0, 1.0)
        table = {instruction_ids + resp: mass for resp, mass in paths.items()}
        return TabularModel(vocab, table, normalize=True)

    # -- GeneratorModel surface ----------------------------------------------

    def next_token_distribution(self, prefix: TokenSequence) -> np.ndarray:
        instr = self.split_prefix(prefix.ids)
        return self.table_for(instr).next_token_distribution(prefix)

    def token_prob(self, prefix_ids: tuple[int, ...], token_id: int) -> float:
        instr = self.split_prefix(prefix_ids)
        return self.table_for(instr).token_prob(prefix_ids, token_id)

    def _sampling_dist(self, prefix_ids: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        instr = self.split_prefix(prefix_ids)
        return self.table_for(instr)._sampling_dist(prefix_ids)

    def _state(self) -> dict:
        return {
            "kind": "expert",
            "tokens": self.vocab.tokens,
            "flip_rate": self.params.flip_rate,
            "correct_mass": self.params.correct_mass,
            "stop_mass": self.params.stop_mass,
            "flipped_stop_mass": self.params.flipped_stop_mass,
            "seed": self.params.seed,
        }


# ---------------------------------------------------------------------------
# Decoding baselines
# ---------------------------------------------------------------------------


def decode_greedy(lm: GeneratorModel, instruction: TokenSequence, max_tokens: int = 96) -> ResponseSample:
    """Argmax token at every step; force-terminates (flagged) past the budget.

    Generators that cannot expose full distributions (the remote kind) are
    decoded by temperature-0 sampling instead, which is the same path.
    """
    try:
        return _decode_greedy_local(lm, instruction, max_tokens)
    except UnsupportedOperationError:
        return sample_response(
            lm, instruction, np.random.default_rng(0),
            max_sentences=max(max_tokens // 4, 1), temperature=0.0,
        )


def _decode_greedy_local(lm: GeneratorModel, instruction: TokenSequence, max_tokens: int) -> ResponseSample:
    prefix = instruction
    ids: list[int] = []
    log_prob = 0.0
    eos = lm.vocab.eos_id
    for _ in range(max_tokens):
        dist = lm.next_token_distribution(prefix)
        token_id = int(np.argmax(dist))
        log_prob += math.log(dist[token_id]) if dist[token_id] > 0 else -math.inf
        ids.append(token_id)
        prefix = prefix.append(token_id)
        if token_id == eos:
            return ResponseSample(TokenSequence(tuple(ids)), log_prob, forced=False)
    ids.append(eos)
    return ResponseSample(TokenSequence(tuple(ids)), log_prob, forced=True)


def self_consistency(
    lm: GeneratorModel,
    instruction: TokenSequence,
    n_paths: int = 10,
    rng: np.random.Generator | int = 0,
    max_sentences: int = 12,
    max_segment_tokens: int = 32,
    temperature: float = 1.0,
) -> ResponseSample:
    """Majority vote over extracted answers; log-prob tie-break; representative path."""
    if n_paths < 1:
        raise InvalidInputError("n_paths must be at least 1")
    rng = np.random.default_rng(rng)
    vocab = lm.vocab
    by_answer: dict[str, list[ResponseSample]] = {}
    for _ in range(n_paths):
        sample = sample_response(
            lm, instruction, rng, max_sentences=max_sentences,
            max_segment_tokens=max_segment_tokens, temperature=temperature,
        )
        try:
            answer = extract_answer(vocab.decode(sample.response))
        except NoAnswerError:
            continue
        by_answer.setdefault(answer, []).append(sample)
    if not by_answer:
        raise NoAnswerError("no sampled path produced an extractable answer")
    best_count = max(len(v) for v in by_answer.values())
    tied = [ans for ans, v in by_answer.items() if len(v) == best_count]
    winner = max(tied, key=lambda ans: max(s.log_prob for s in by_answer[ans]))
    return max(by_answer[winner], key=lambda s: s.log_prob)


def sample_then_rank(
    lm: GeneratorModel,
    ef: EnergyFunction,
    instruction: TokenSequence,
    n_paths: int = 10,
    rng: np.random.Generator | int = 0,
    max_sentences: int = 12,
    max_segment_tokens: int = 32,
    temperature: float = 1.0,
) -> ResponseSample:
    """Sample paths and return the minimum-energy one (ties: higher log prob)."""
    if n_paths < 1:
        raise InvalidInputError("n_paths must be at least 1")
    rng = np.random.default_rng(rng)
    scored: list[tuple[float, ResponseSample]] = []
    for _ in range(n_paths):
        sample = sample_response(
            lm, instruction, rng, max_sentences=max_sentences,
            max_segment_tokens=max_segment_tokens, temperature=temperature,
        )
        scored.append((ef.energy(instruction, sample.response), sample))
    best_energy = min(e for e, _ in scored)
    contenders = [s for e, s in scored if e == best_energy]
    return max(contenders, key=lambda s: s.log_prob)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transcript:
    problem_index: int
    response_text: str
    answer: str | None
    correct: bool


@dataclass(frozen=True)
class EvalReport:
    method: str
    pass1: float
    path_num: int
    n_problems: int
    seed: int
    transcripts: tuple[Transcript, ...] = field(repr=False, default=())

    def __post_init__(self) -> None:
        if not 0.0 <= self.pass1 <= 1.0:
            raise InvalidInputError("pass1 must lie in [0, 1]")
        if self.path_num < 1:
            raise InvalidInputError("path_num must be at least 1")

    def to_json(self, transcript_path: str = "") -> dict:
        return {
            "method": self.method,
            "pass1": self.pass1,
            "path_num": self.path_num,
            "n_problems": self.n_problems,
            "seed": self.seed,
            "transcript_path": transcript_path,
        }


MethodFn = Callable[[Example, np.random.Generator], ResponseSample]


def evaluate(
    method: MethodFn,
    dataset: Sequence[Example],
    vocab: Vocabulary,
    method_name: str,
    path_num: int = 1,
    seed: int = 0,
    index_offset: int = 0,
) -> EvalReport:
    """pass@1 of one final response per problem, with per-problem derived seeds.

    ``index_offset`` keeps derived seeds stable when a dataset is evaluated
    in chunks (parallel fan-out) so chunked and serial runs agree.
    """
    if not dataset:
        raise InvalidInputError("dataset must be non-empty")
    transcripts: list[Transcript] = []
    correct = 0
    for local_idx, ex in enumerate(dataset):
        idx = index_offset + local_idx
        rng = np.random.default_rng(np.random.SeedSequence((seed, idx)))
        sample = method(ex, rng)
        text = vocab.decode(sample.response)
        try:
            answer: str | None = extract_answer(text)
        except NoAnswerError:
            answer = None
        ok = answer is not None and check_answer(ex, text)
        correct += int(ok)
        transcripts.append(Transcript(idx, text, answer, ok))
    return EvalReport(
        method=method_name,
        pass1=correct / len(dataset),
        path_num=path_num,
        n_problems=len(dataset),
        seed=seed,
        transcripts=tuple(transcripts),
    )


def save_dataset(path, vocab: Vocabulary, examples: Sequence[Example]) -> None:
    """JSON-lines rows {instruction, response, answer}."""
    with open(path, "w") as fh:
        for ex in examples:
            row = {
                "instruction": vocab.decode(ex.instruction),
                "response": vocab.decode(ex.response) if ex.response is not None else "",
                "answer": ex.gold_answer,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path, vocab: Vocabulary) -> list[Example]:
    out: list[Example] = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            response = vocab.encode(row["response"], append_eos=True) if row["response"] else None
            out.append(Example(vocab.encode(row["instruction"]), response, row["answer"]))
    return out
