"""HTTP client for a remote completion generator.

Wire protocol: ``POST {endpoint}/v1/complete`` with a JSON body
``{prompt, max_tokens, temperature, stop, seed}``; the server answers
``{text, token_logprobs}``.  The returned text includes the stop token when
generation halted at one, and ends with the literal end-of-sequence token
string when the model finished on its own; ``token_logprobs`` are natural
logs, one per emitted token.

The protocol exposes sampled completions only, so distribution queries and
forced scoring of arbitrary sequences raise UnsupportedOperationError.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import requests

from .errors import TransportError, UnsupportedOperationError
from .textmodel import GeneratorModel, SegmentSample, TokenSequence, Vocabulary, validate_sequence

PROMPT_TEMPLATE = (
    "Below is an instruction that describes a task. "
    "Write a response that appropriately completes the request."
    "\n\n### Instruction:\n{instruction}\n\n### Response:"
)

COMPLETE_PATH = "/v1/complete"


class RemoteModel(GeneratorModel):
    """Generator backed by a completion endpoint.

    ``split_prefix`` maps a prefix to the length of its instruction part so
    the prompt template can separate instruction from partial response; by
    default the whole prefix is treated as the instruction.
    """

    kind = "remote"

    def __init__(
        self,
        vocab: Vocabulary,
        endpoint: str,
        timeout: float = 10.0,
        split_prefix: Callable[[tuple[int, ...]], tuple[int, ...]] | None = None,
        session: requests.Session | None = None,
    ):
        super().__init__(vocab)
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.split_prefix = split_prefix
        self.session = session or requests.Session()

    def next_token_distribution(self, prefix: TokenSequence) -> np.ndarray:
        raise UnsupportedOperationError(
            "the completion wire protocol does not expose next-token distributions"
        )

    def sequence_log_prob(self, instruction: TokenSequence, response: TokenSequence) -> float:
        raise UnsupportedOperationError(
            "the completion wire protocol cannot force-score a given response"
        )

    def _prompt_for(self, prefix: TokenSequence) -> str:
        if self.split_prefix is not None:
            instr_ids = self.split_prefix(prefix.ids)
            instr = TokenSequence(instr_ids)
            partial = TokenSequence(prefix.ids[len(instr_ids):])
        else:
            instr, partial = prefix, TokenSequence()
        prompt = PROMPT_TEMPLATE.format(instruction=self.vocab.decode(instr))
        if len(partial) > 0:
            prompt += "\n" + self.vocab.decode(partial)
        return prompt

    def sample_segment(
        self,
        prefix: TokenSequence,
        rng: np.random.Generator | int,
        max_tokens: int,
        temperature: float = 1.0,
    ) -> SegmentSample:
        validate_sequence(self.vocab, prefix)
        rng = np.random.default_rng(rng)
        body = {
            "prompt": self._prompt_for(prefix),
            "max_tokens": int(max_tokens),
            "temperature": float(temperature),
            "stop": sorted(self.vocab.delimiters),
            "seed": int(rng.integers(0, 2**31 - 1)),
        }
        try:
            resp = self.session.post(
                self.endpoint + COMPLETE_PATH, json=body, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"completion request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"completion endpoint returned HTTP {resp.status_code}")
        try:
            payload = resp.json()
            text = payload["text"]
            logprobs = [float(x) for x in payload["token_logprobs"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc
        try:
            segment = self.vocab.encode(text)
        except Exception as exc:
            raise TransportError(f"completion text outside the vocabulary: {exc}") from exc
        if len(logprobs) != len(segment):
            raise TransportError(
                f"token_logprobs length {len(logprobs)} does not match {len(segment)} tokens"
            )
        stop_ids = self.vocab.delimiter_ids | {self.vocab.eos_id}
        truncated = not (len(segment) > 0 and segment.ids[-1] in stop_ids)
        log_prob = math.fsum(logprobs) if logprobs else 0.0
        return SegmentSample(segment, log_prob, truncated=truncated)

    def _state(self) -> dict:
        return {"kind": self.kind, "tokens": self.vocab.tokens, "endpoint": self.endpoint}
