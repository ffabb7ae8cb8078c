"""Energy functions and the residual reweighting of a base generator.

The joint (unnormalized) score of a response is ``log P_base - E``; on tiny
vocabularies the partition constant is computed by exact enumeration so the
reweighted distribution can be checked against oracles.

Two energy parameterizations are provided: a one-hidden-layer network over
hashed bag-of-n-gram features (instruction and response hashed under
separate field tags, plus a reserved slot for the relative position of the
answer marker), and an explicit per-sequence table for enumerable domains.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import CapacityError, EnergyDomainError, InvalidInputError
from .textmodel import (
    ENUMERATION_LIMIT,
    Example,
    GeneratorModel,
    TokenSequence,
    Vocabulary,
    is_terminated,
    validate_sequence,
)

REWARD_MODES = ("sigmoid", "raw-exp")

_FIELD_INSTRUCTION = b"i"
_FIELD_RESPONSE = b"r"
_SEP = b"\x1f"


@dataclass(frozen=True)
class FeatureMap:
    """Hashed bag-of-n-grams over (instruction, response) token strings.

    The last feature slot is reserved for the relative position of the
    answer marker inside the response (0 when absent); all n-grams hash into
    the remaining ``dim - 1`` slots.  Hashing is keyed on ``seed`` and stable
    across processes.
    """

    ngram_order: int = 3
    dim: int = 4096
    seed: int = 0

    def __post_init__(self) -> None:
        if self.ngram_order < 1:
            raise InvalidInputError("ngram_order must be at least 1")
        if self.dim < 2:
            raise InvalidInputError("dim must be at least 2")

    def _bucket(self, field: bytes, gram: tuple[str, ...]) -> int:
        payload = field + _SEP + _SEP.join(tok.encode() for tok in gram)
        digest = hashlib.blake2b(
            payload, digest_size=8, key=self.seed.to_bytes(8, "little", signed=False)
        ).digest()
        return int.from_bytes(digest, "little") % (self.dim - 1)

    def features(
        self, vocab: Vocabulary, instruction: TokenSequence, response: TokenSequence
    ) -> tuple[np.ndarray, np.ndarray]:
        """Sparse feature vector as (sorted indices, values)."""
        acc: dict[int, float] = {}
        for field, seq in ((_FIELD_INSTRUCTION, instruction), (_FIELD_RESPONSE, response)):
            toks = [vocab.token_of(i) for i in seq.ids]
            for n in range(1, self.ngram_order + 1):
                for start in range(len(toks) - n + 1):
                    idx = self._bucket(field, tuple(toks[start : start + n]))
                    acc[idx] = acc.get(idx, 0.0) + 1.0
        marker_id = vocab.marker_id
        if marker_id is not None and len(response) > 0 and marker_id in response.ids:
            pos = response.ids.index(marker_id)
            acc[self.dim - 1] = (pos + 1) / len(response)
        if not acc:
            return np.empty(0, dtype=np.intp), np.empty(0)
        idx = np.array(sorted(acc), dtype=np.intp)
        val = np.array([acc[i] for i in idx])
        return idx, val


class FeedForwardEnergy:
    """tanh-MLP energy: E = w2 . tanh(W1' phi + b1) + b2."""

    mode = "feedforward"

    def __init__(
        self,
        vocab: Vocabulary,
        feature_map: FeatureMap,
        w1: np.ndarray,
        b1: np.ndarray,
        w2: np.ndarray,
        b2: float,
    ):
        self.vocab = vocab
        self.feature_map = feature_map
        self.w1 = np.asarray(w1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.w2 = np.asarray(w2, dtype=float)
        self.b2 = float(b2)
        if self.w1.shape != (feature_map.dim, self.b1.shape[0]):
            raise InvalidInputError("w1 shape does not match (dim, hidden)")
        if self.w2.shape != self.b1.shape:
            raise InvalidInputError("w2 shape does not match hidden size")

    @classmethod
    def init_random(
        cls,
        vocab: Vocabulary,
        feature_map: FeatureMap | None = None,
        hidden: int = 32,
        seed: int = 0,
        init_scale: float = 0.05,
    ) -> "FeedForwardEnergy":
        fm = feature_map or FeatureMap()
        rng = np.random.default_rng(seed)
        w1 = rng.uniform(-init_scale, init_scale, size=(fm.dim, hidden))
        b1 = rng.uniform(-init_scale, init_scale, size=hidden)
        w2 = rng.uniform(-init_scale, init_scale, size=hidden)
        b2 = float(rng.uniform(-init_scale, init_scale))
        return cls(vocab, fm, w1, b1, w2, b2)

    @property
    def hidden(self) -> int:
        return self.b1.shape[0]

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + 1

    def features_of(self, instruction: TokenSequence, response: TokenSequence):
        return self.feature_map.features(self.vocab, instruction, response)

    def forward(self, feats) -> tuple[float, tuple]:
        """Energy plus the context needed to accumulate its gradient later."""
        idx, val = feats
        pre = val @ self.w1[idx] + self.b1 if idx.size else self.b1.copy()
        h = np.tanh(pre)
        e = float(h @ self.w2 + self.b2)
        return e, (idx, val, h)

    def add_grad(self, ctx: tuple, coef: float, out: np.ndarray) -> None:
        """Add ``coef * dE/dtheta`` into the flat vector ``out``."""
        idx, val, h = ctx
        dpre = self.w2 * (1.0 - h * h)
        d, hdim = self.w1.shape
        w1_flat = out[: d * hdim].reshape(d, hdim)
        if idx.size:
            np.add.at(w1_flat, idx, coef * np.outer(val, dpre))
        out[d * hdim : d * hdim + hdim] += coef * dpre
        out[d * hdim + hdim : d * hdim + 2 * hdim] += coef * h
        out[-1] += coef

    def energy(self, instruction: TokenSequence, response: TokenSequence) -> float:
        e, _ = self.forward(self.features_of(instruction, response))
        return e

    def accumulate_grad(
        self,
        instruction: TokenSequence,
        response: TokenSequence,
        coef: float,
        out: np.ndarray,
    ) -> float:
        e, ctx = self.forward(self.features_of(instruction, response))
        self.add_grad(ctx, coef, out)
        return e

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def load_param_vector(self, vec: np.ndarray) -> None:
        if vec.shape != (self.n_params,):
            raise InvalidInputError("parameter vector has the wrong length")
        d, hdim = self.w1.shape
        self.w1 = vec[: d * hdim].reshape(d, hdim).copy()
        self.b1 = vec[d * hdim : d * hdim + hdim].copy()
        self.w2 = vec[d * hdim + hdim : d * hdim + 2 * hdim].copy()
        self.b2 = float(vec[-1])

    def clone(self) -> "FeedForwardEnergy":
        return FeedForwardEnergy(
            self.vocab, self.feature_map, self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2
        )


class TabularEnergy:
    """Energy defined by an explicit table over an enumerated response domain."""

    mode = "tabular"

    def __init__(self, vocab: Vocabulary, table: Mapping[tuple[int, ...], float]):
        self.vocab = vocab
        self.table: dict[tuple[int, ...], float] = {}
        for key, value in table.items():
            ids = key.ids if isinstance(key, TokenSequence) else tuple(key)
            if not math.isfinite(value):
                raise InvalidInputError("energies must be finite")
            self.table[ids] = float(value)
        if not self.table:
            raise InvalidInputError("tabular energy needs a non-empty domain")
        self._keys = sorted(self.table)
        self._index = {k: i for i, k in enumerate(self._keys)}

    def features_of(self, instruction: TokenSequence, response: TokenSequence):
        return response.ids

    def forward(self, feats) -> tuple[float, tuple]:
        got = self.table.get(feats)
        if got is None:
            raise EnergyDomainError(f"response {feats} outside the enumerated energy domain")
        return got, (feats,)

    def add_grad(self, ctx: tuple, coef: float, out: np.ndarray) -> None:
        out[self._index[ctx[0]]] += coef

    def energy(self, instruction: TokenSequence, response: TokenSequence) -> float:
        e, _ = self.forward(self.features_of(instruction, response))
        return e

    def accumulate_grad(
        self,
        instruction: TokenSequence,
        response: TokenSequence,
        coef: float,
        out: np.ndarray,
    ) -> float:
        e, ctx = self.forward(self.features_of(instruction, response))
        self.add_grad(ctx, coef, out)
        return e

    @property
    def n_params(self) -> int:
        return len(self._keys)

    def param_vector(self) -> np.ndarray:
        return np.array([self.table[k] for k in self._keys])

    def load_param_vector(self, vec: np.ndarray) -> None:
        if vec.shape != (self.n_params,):
            raise InvalidInputError("parameter vector has the wrong length")
        for key, value in zip(self._keys, vec):
            self.table[key] = float(value)

    def clone(self) -> "TabularEnergy":
        return TabularEnergy(self.vocab, dict(self.table))


EnergyFunction = Union[FeedForwardEnergy, TabularEnergy]


def reward(ef: EnergyFunction, ex: Example, mode: str = "sigmoid") -> float:
    """Map energy to a search reward, strictly decreasing in E.

    ``raw-exp`` is exp(-E) and unbounded; ``sigmoid`` is 1/(1+exp(E)), a
    monotone transform of it that keeps node values inside (0, 1).
    """
    if mode not in REWARD_MODES:
        raise InvalidInputError(f"unknown reward mode {mode!r}")
    if ex.response is None or not is_terminated(ef.vocab, ex.response):
        raise InvalidInputError("reward requires a terminated response")
    e = ef.energy(ex.instruction, ex.response)
    if mode == "raw-exp":
        return math.inf if -e > 709 else math.exp(-e)
    if e >= 0:
        z = math.exp(-e)
        return z / (1.0 + z)
    return 1.0 / (1.0 + math.exp(e))


def joint_unnormalized_log_score(lm: GeneratorModel, ef: EnergyFunction, ex: Example) -> float:
    """log of the residual numerator: log P_base(response|instruction) - E."""
    if ex.response is None:
        raise InvalidInputError("example has no response to score")
    base = lm.sequence_log_prob(ex.instruction, ex.response)
    if base == -math.inf:
        return -math.inf
    return base - ef.energy(ex.instruction, ex.response)


@dataclass(frozen=True)
class ResidualEntry:
    response: TokenSequence
    base_prob: float
    energy: float
    residual_prob: float


@dataclass(frozen=True)
class ResidualDistributionTable:
    """Exact reweighted distribution over every terminated response."""

    instruction: TokenSequence
    entries: tuple[ResidualEntry, ...]
    partition_value: float

    def residual_dict(self) -> dict[tuple[int, ...], float]:
        return {e.response.ids: e.residual_prob for e in self.entries}

    def base_dict(self) -> dict[tuple[int, ...], float]:
        return {e.response.ids: e.base_prob for e in self.entries}

    def max_residual_responses(self, rel_tol: float = 1e-12) -> list[TokenSequence]:
        top = max(e.residual_prob for e in self.entries)
        return [e.response for e in self.entries if e.residual_prob >= top * (1.0 - rel_tol)]


def exact_residual_distribution(
    lm: GeneratorModel,
    ef: EnergyFunction,
    instruction: TokenSequence,
    max_len: int,
) -> ResidualDistributionTable:
    """Enumerate terminated responses of length <= max_len and renormalize.

    Length counts non-EOS tokens.  Responses with zero base probability are
    omitted; they carry no residual mass.
    """
    vocab = lm.vocab
    if vocab.size**max_len > ENUMERATION_LIMIT:
        raise CapacityError(
            f"enumeration of {vocab.size}^{max_len} responses exceeds {ENUMERATION_LIMIT}"
        )
    validate_sequence(vocab, instruction)
    eos = vocab.eos_id
    found: list[tuple[TokenSequence, float]] = []

    def walk(response_ids: tuple[int, ...], log_p: float) -> None:
        prefix = instruction.ids + response_ids
        for token_id in range(vocab.size):
            p = lm.token_prob(prefix, token_id)
            if p <= 0.0:
                continue
            lp = log_p + math.log(p)
            if token_id == eos:
                found.append((TokenSequence(response_ids + (token_id,)), lp))
            elif len(response_ids) + 1 <= max_len:
                walk(response_ids + (token_id,), lp)

    walk((), 0.0)
    if not found:
        raise InvalidInputError("no terminated responses reachable within max_len")
    energies = np.array([ef.energy(instruction, resp) for resp, _ in found])
    base = np.exp(np.array([lp for _, lp in found]))
    unnorm = base * np.exp(-energies)
    partition = float(unnorm.sum())
    if partition <= 0.0:
        raise InvalidInputError("partition value is not positive")
    residual = unnorm / partition
    entries = tuple(
        ResidualEntry(resp, float(b), float(e), float(r))
        for (resp, _), b, e, r in zip(found, base, energies, residual)
    )
    return ResidualDistributionTable(instruction, entries, partition)


def tv_distance(p: Mapping, q: Mapping) -> float:
    """Total variation distance between two distributions given as dicts."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def save_energy(ef: FeedForwardEnergy, path) -> None:
    """Write the self-describing text checkpoint (repr floats round-trip exactly)."""
    lines = [
        "feature-mode bag-of-ngrams",
        f"ngram-order {ef.feature_map.ngram_order}",
        f"dim {ef.feature_map.dim}",
        f"hidden {ef.hidden}",
        f"hash-seed {ef.feature_map.seed}",
        " ".join(repr(x) for x in ef.w1.ravel().tolist()),
        " ".join(repr(x) for x in ef.b1.tolist()),
        " ".join(repr(x) for x in ef.w2.tolist()),
        repr(ef.b2),
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_energy(path, vocab: Vocabulary) -> FeedForwardEnergy:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    header: dict[str, str] = {}
    for line in lines[:5]:
        key, _, value = line.partition(" ")
        header[key] = value
    if header.get("feature-mode") != "bag-of-ngrams":
        raise InvalidInputError(f"unsupported feature mode in checkpoint: {header}")
    fm = FeatureMap(
        ngram_order=int(header["ngram-order"]),
        dim=int(header["dim"]),
        seed=int(header["hash-seed"]),
    )
    hidden = int(header["hidden"])
    w1 = np.array([float(x) for x in lines[5].split()]).reshape(fm.dim, hidden)
    b1 = np.array([float(x) for x in lines[6].split()])
    w2 = np.array([float(x) for x in lines[7].split()])
    b2 = float(lines[8])
    return FeedForwardEnergy(vocab, fm, w1, b1, w2, b2)
