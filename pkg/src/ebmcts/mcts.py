"""Sentence-level Monte Carlo Tree Search guided by the energy reward.

Nodes hold one sampled sentence each.  A search commits one sentence at a
time: run a fixed number of select/expand/rollout/backpropagate iterations,
commit the child with the most visits, re-root on it (keeping its subtree),
and repeat until the committed sentence is terminal or the sentence budget
runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .energy import EnergyFunction, reward
from .errors import InvalidInputError, SearchFailureError, TreeLogicError
from .textmodel import Example, GeneratorModel, TokenSequence

SELECTION_MODES = ("uct", "puct")


@dataclass(frozen=True)
class MCTSConfig:
    exploration_c: float = 1.0
    root_branch: int = 10
    branch: int = 2
    max_iterations: int = 20
    max_rollout_sentences: int = 12
    max_segment_tokens: int = 32
    reward_mode: str = "sigmoid"
    selection: str = "uct"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.exploration_c < 0:
            raise InvalidInputError("exploration constant must be non-negative")
        if self.root_branch < 1 or self.branch < 1:
            raise InvalidInputError("branch limits must be at least 1")
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be at least 1")
        if self.max_rollout_sentences < 1:
            raise InvalidInputError("max_rollout_sentences must be at least 1")
        if self.selection not in SELECTION_MODES:
            raise InvalidInputError(f"selection must be one of {SELECTION_MODES}")


@dataclass
class TreeNode:
    """One sentence of search state with running visit statistics."""

    segment: TokenSequence
    prior_log_prob: float
    creation_index: int
    terminal: bool = False
    truncated: bool = False
    duplicate: bool = False
    n: int = 0
    q: float = 0.0
    creation_offset: int = 1  # 1 for expanded nodes, 0 for fresh roots
    parent: "TreeNode | None" = field(default=None, repr=False)
    children: list["TreeNode"] = field(default_factory=list)

    @property
    def is_root(self) -> bool:
        return self.parent is None


def uct_score(parent: TreeNode, child: TreeNode, c: float) -> float:
    """Mean reward plus the visit-ratio exploration bonus."""
    return child.q + c * math.sqrt(math.log(max(parent.n, 1)) / child.n)


def puct_score(parent: TreeNode, child: TreeNode, c: float) -> float:
    """Alternate prior-weighted bonus, kept behind the selection-mode switch."""
    prior = math.exp(min(child.prior_log_prob, 0.0))
    return child.q + c * prior * math.sqrt(parent.n) / (1.0 + child.n)


def _pick_child(node: TreeNode, cfg: MCTSConfig) -> TreeNode:
    unvisited = [ch for ch in node.children if ch.n == 0]
    if unvisited:
        return max(unvisited, key=lambda ch: (ch.prior_log_prob, -ch.creation_index))
    scorer = uct_score if cfg.selection == "uct" else puct_score
    return max(node.children, key=lambda ch: (scorer(node, ch, cfg.exploration_c), -ch.creation_index))


def select(root: TreeNode, cfg: MCTSConfig) -> list[TreeNode]:
    """Descend by the selection rule until a node that can expand (or is terminal).

    Unvisited children take absolute priority, ordered by prior log
    probability; visited children compete on the exploration score.
    """
    path = [root]
    node = root
    while True:
        limit = cfg.root_branch if node.is_root else cfg.branch
        if node.terminal or len(node.children) < limit:
            return path
        node = _pick_child(node, cfg)
        path.append(node)


def backpropagate(path: Sequence[TreeNode], r: float) -> None:
    """Running-mean update of every node on the root-to-leaf path."""
    for node in path:
        node.n += 1
        node.q += (r - node.q) / node.n


def choose_child(root: TreeNode) -> TreeNode:
    """Inference rule: most visits, then highest mean reward, then creation order."""
    visited = [ch for ch in root.children if ch.n > 0]
    if not visited:
        raise SearchFailureError("root has no visited child to commit")
    return max(visited, key=lambda ch: (ch.n, ch.q, -ch.creation_index))


@dataclass(frozen=True)
class IterationStats:
    reward_value: float
    depth: int
    rollout_forced: bool


@dataclass(frozen=True)
class RolloutResult:
    """A completed response with its model log probability given the instruction."""

    response: TokenSequence
    log_prob: float
    forced: bool


@dataclass(frozen=True)
class SearchStep:
    """Outcome of one committed sentence: the chosen child and the tree behind it."""

    chosen_segment: TokenSequence
    committed_response: TokenSequence
    tree: dict
    iterations: int
    chosen_visits: int
    chosen_q: float


@dataclass(frozen=True)
class DecodeResult:
    example: Example
    steps: tuple[SearchStep, ...]
    forced: bool

    @property
    def response(self) -> TokenSequence:
        assert self.example.response is not None
        return self.example.response


class SearchTree:
    """Single-writer search state for one instruction."""

    def __init__(
        self,
        lm: GeneratorModel,
        ef: EnergyFunction,
        instruction: TokenSequence,
        cfg: MCTSConfig,
        rng: np.random.Generator | int,
    ):
        self.lm = lm
        self.ef = ef
        self.cfg = cfg
        self.instruction = instruction
        self.rng = np.random.default_rng(rng)
        self.committed: list[TokenSequence] = []
        self.committed_log_prob = 0.0
        self.root = TreeNode(
            segment=TokenSequence(), prior_log_prob=0.0, creation_index=0, creation_offset=0
        )
        self._next_index = 1
        self.iterations_run = 0

    # -- prefix assembly ------------------------------------------------------

    def committed_ids(self) -> tuple[int, ...]:
        out: list[int] = []
        for seg in self.committed:
            out.extend(seg.ids)
        return tuple(out)

    def node_response_ids(self, node: TreeNode) -> tuple[int, ...]:
        """Response tokens up to ``node``: committed segments plus the path below root."""
        chain: list[TokenSequence] = []
        cur: TreeNode | None = node
        while cur is not None and cur.parent is not None:
            chain.append(cur.segment)
            cur = cur.parent
        out = list(self.committed_ids())
        for seg in reversed(chain):
            out.extend(seg.ids)
        return tuple(out)

    def node_prefix(self, node: TreeNode) -> TokenSequence:
        return TokenSequence(self.instruction.ids + self.node_response_ids(node))

    # -- phases ---------------------------------------------------------------

    def expand(self, leaf: TreeNode) -> TreeNode:
        """Sample a new child sentence; sibling duplicates are resampled up to 5 times."""
        if leaf.terminal:
            raise TreeLogicError("cannot expand a terminal node")
        limit = self.cfg.root_branch if leaf.is_root else self.cfg.branch
        if len(leaf.children) >= limit:
            raise TreeLogicError("node is already at its branch limit")
        prefix = self.node_prefix(leaf)
        existing = {ch.segment.ids for ch in leaf.children}
        sample = None
        duplicate = True
        for _ in range(6):
            sample = self.lm.sample_segment(
                prefix, self.rng, self.cfg.max_segment_tokens
            )
            if sample.segment.ids not in existing:
                duplicate = False
                break
        assert sample is not None
        terminal = len(sample.segment) > 0 and sample.segment.ids[-1] == self.lm.vocab.eos_id
        child = TreeNode(
            segment=sample.segment,
            prior_log_prob=sample.log_prob,
            creation_index=self._next_index,
            terminal=terminal,
            truncated=sample.truncated,
            duplicate=duplicate,
            parent=leaf,
        )
        self._next_index += 1
        leaf.children.append(child)
        return child

    def _path_log_prob(self, node: TreeNode) -> float:
        total = self.committed_log_prob
        cur: TreeNode | None = node
        while cur is not None and cur.parent is not None:
            total += cur.prior_log_prob
            cur = cur.parent
        return total

    def rollout(self, node: TreeNode) -> RolloutResult:
        """Complete the response from ``node``; force-terminate past the budget.

        A terminal node's own path is returned unchanged.  The log
        probability covers the whole response (committed prefix, path
        segments, sampled continuation) under the base model.
        """
        resp = list(self.node_response_ids(node))
        log_prob = self._path_log_prob(node)
        eos = self.lm.vocab.eos_id
        if node.terminal or (resp and resp[-1] == eos):
            return RolloutResult(TokenSequence(tuple(resp)), log_prob, forced=False)
        prefix = self.node_prefix(node)
        for _ in range(self.cfg.max_rollout_sentences):
            seg = self.lm.sample_segment(prefix, self.rng, self.cfg.max_segment_tokens)
            resp.extend(seg.segment.ids)
            log_prob += seg.log_prob
            prefix = prefix.concat(seg.segment)
            if resp[-1] == eos:
                return RolloutResult(TokenSequence(tuple(resp)), log_prob, forced=False)
        resp.append(eos)
        return RolloutResult(TokenSequence(tuple(resp)), log_prob, forced=True)

    def run_iteration(self) -> IterationStats:
        path = select(self.root, self.cfg)
        leaf = path[-1]
        if not leaf.terminal:
            child = self.expand(leaf)
            path.append(child)
            leaf = child
        rolled = self.rollout(leaf)
        r = reward(self.ef, Example(self.instruction, rolled.response), self.cfg.reward_mode)
        backpropagate(path, r)
        self.iterations_run += 1
        return IterationStats(reward_value=r, depth=len(path), rollout_forced=rolled.forced)

    def reroot(self, child: TreeNode) -> None:
        if child not in self.root.children:
            raise TreeLogicError("can only re-root on a child of the current root")
        self.committed.append(child.segment)
        self.committed_log_prob += child.prior_log_prob
        child.parent = None
        self.root = child

    # -- introspection ---------------------------------------------------------

    def snapshot(self, vocab=None) -> dict:
        vocab = vocab or self.lm.vocab

        def render(node: TreeNode) -> dict:
            return {
                "segment": vocab.decode(node.segment, drop_eos=False),
                "prior_log_prob": node.prior_log_prob,
                "N": node.n,
                "Q": node.q,
                "terminal": node.terminal,
                "children": [render(ch) for ch in node.children],
            }

        return render(self.root)

    def check_visit_conservation(self) -> None:
        """Raise if any node with children breaks N = creation_offset + sum(child N)."""

        def walk(node: TreeNode) -> None:
            if node.children:
                expected = node.creation_offset + sum(ch.n for ch in node.children)
                if node.n != expected:
                    raise TreeLogicError(
                        f"visit conservation violated: N={node.n}, expected {expected}"
                    )
            for ch in node.children:
                walk(ch)

        walk(self.root)


def mcts_decode(
    lm: GeneratorModel,
    ef: EnergyFunction,
    instruction: TokenSequence,
    cfg: MCTSConfig,
    rng: np.random.Generator | int,
) -> DecodeResult:
    """Commit one sentence per search round until terminal or out of budget."""
    tree = SearchTree(lm, ef, instruction, cfg, rng)
    steps: list[SearchStep] = []
    forced = True
    for _ in range(cfg.max_rollout_sentences):
        for _ in range(cfg.max_iterations):
            tree.run_iteration()
        best = choose_child(tree.root)
        snapshot = tree.snapshot()
        tree.reroot(best)
        steps.append(
            SearchStep(
                chosen_segment=best.segment,
                committed_response=TokenSequence(tree.committed_ids()),
                tree=snapshot,
                iterations=cfg.max_iterations,
                chosen_visits=best.n,
                chosen_q=best.q,
            )
        )
        if best.terminal:
            forced = False
            break
    resp = list(tree.committed_ids())
    if forced:
        resp.append(lm.vocab.eos_id)
    example = Example(instruction, TokenSequence(tuple(resp)))
    return DecodeResult(example=example, steps=tuple(steps), forced=forced)
