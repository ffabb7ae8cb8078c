"""A small decoding-method grid on the synthetic task.

Runs the whole pipeline at reduced scale and prints pass@1 for greedy,
self-consistency majority voting, sample-then-rank and energy-guided tree
search, with the reward trained on rejection-only versus combined noise.

Run:  python demos/04_decoding_benchmark.py
"""

import time

import numpy as np

from ebmcts import (
    ExpertParams,
    MCTSConfig,
    NoisyExpertModel,
    OptimizerConfig,
    TaskSpec,
    check_answer,
    decode_greedy,
    evaluate,
    gen_task,
    mcts_decode,
    sample_then_rank,
    self_consistency,
    task_vocabulary,
)
from ebmcts.energy import FeatureMap, FeedForwardEnergy
from ebmcts.nce import train_energy
from ebmcts.noise import NoiseConfig, build_training_set, rejection_sample, suboutput_sample
from ebmcts.textmodel import ResponseSample

SEED = 0
t0 = time.time()

# below ~1000 problems the energy overfits its pools and misguides the search
spec = TaskSpec(n_train=1200, n_test=100, seed=SEED, step_weights=(0.6, 0.4))
vocab = task_vocabulary(spec)
train, test = gen_task(spec, np.random.default_rng(SEED))
lm = NoisyExpertModel(vocab, ExpertParams(flip_rate=0.15, seed=SEED))

print("sampling noise pools ...")
rej = rejection_sample(lm, train, NoiseConfig(samples_per_instruction=16), check_answer, SEED)
sub = suboutput_sample(lm, train, NoiseConfig(samples_per_instruction=8), SEED + 1)
print(f"  rejection {len(rej.samples)} samples, suboutput {len(sub.samples)} samples")

print("training the two energy variants ...")
fm = FeatureMap(ngram_order=3, dim=2048)
opt = OptimizerConfig(learning_rate=0.01, epochs=6, seed=SEED)
energies = {}
for variant, pools in (("reject", [rej]), ("both", [rej, sub])):
    data = build_training_set(train, pools)
    ef0 = FeedForwardEnergy.init_random(vocab, fm, hidden=64, seed=SEED)
    energies[variant], _ = train_energy(ef0, data, opt)

mcts_cfg = MCTSConfig(exploration_c=1.0, max_iterations=20, seed=SEED)


def mcts_method(ef):
    def run(ex, rng):
        out = mcts_decode(lm, ef, ex.instruction, mcts_cfg, rng)
        return ResponseSample(out.response, 0.0, forced=out.forced)

    return run


grid = [
    ("greedy-decoding", lambda ex, rng: decode_greedy(lm, ex.instruction), 1),
    ("self-consistency-majority", lambda ex, rng: self_consistency(lm, ex.instruction, 10, rng), 10),
    ("sample-then-rank-reject", lambda ex, rng: sample_then_rank(lm, energies["reject"], ex.instruction, 10, rng), 10),
    ("sample-then-rank-both", lambda ex, rng: sample_then_rank(lm, energies["both"], ex.instruction, 10, rng), 10),
    ("tree-search-reject", mcts_method(energies["reject"]), 1),
    ("tree-search-both", mcts_method(energies["both"]), 1),
]

print(f"\n{'decoding method':30s} {'pass@1':>7s} {'paths':>6s}")
for name, fn, paths in grid:
    report = evaluate(fn, test, vocab, name, path_num=paths, seed=SEED)
    print(f"{name:30s} {report.pass1:7.3f} {paths:6d}")
print(f"\ntotal {time.time() - t0:.0f}s")
