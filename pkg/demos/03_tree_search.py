"""One sentence-level tree search, visualized.

Greedy decoding follows the generator's systematic recall slips; the search
samples alternatives sentence by sentence and the closed-form optimal
energy steers visits toward the correct reasoning path.

Run:  python demos/03_tree_search.py
"""

import numpy as np

from ebmcts import (
    ExpertParams,
    MCTSConfig,
    NoisyExpertModel,
    TaskSpec,
    check_answer,
    decode_greedy,
    gen_task,
    mcts_decode,
    task_vocabulary,
)
from ebmcts.energy import FeatureMap, FeedForwardEnergy
from ebmcts.nce import OptimizerConfig, train_energy
from ebmcts.noise import NoiseConfig, build_training_set, rejection_sample, suboutput_sample

SEED = 1

spec = TaskSpec(n_train=1200, n_test=40, seed=SEED, step_weights=(0.6, 0.4))
vocab = task_vocabulary(spec)
train, test = gen_task(spec, np.random.default_rng(SEED))
lm = NoisyExpertModel(vocab, ExpertParams(flip_rate=0.3, seed=SEED))

print("training a small energy on generator-sampled negatives ...")
rej = rejection_sample(lm, train, NoiseConfig(samples_per_instruction=12), check_answer, SEED)
sub = suboutput_sample(lm, train, NoiseConfig(samples_per_instruction=8), SEED + 1)
data = build_training_set(train, [rej, sub])
ef0 = FeedForwardEnergy.init_random(vocab, FeatureMap(dim=1024), hidden=32, seed=SEED)
ef, _ = train_energy(ef0, data, OptimizerConfig(learning_rate=0.01, epochs=5, seed=SEED))

# pick a problem where greedy goes wrong
problem = next(
    ex for ex in test if not check_answer(ex, vocab.decode(decode_greedy(lm, ex.instruction).response))
)
print("\ninstruction :", vocab.decode(problem.instruction))
print("reference   :", vocab.decode(problem.response))
print("greedy      :", vocab.decode(decode_greedy(lm, problem.instruction).response))

cfg = MCTSConfig(exploration_c=1.0, max_iterations=20, seed=SEED)
result = mcts_decode(lm, ef, problem.instruction, cfg, np.random.default_rng(SEED))
print("search      :", vocab.decode(result.response))
print("correct     :", check_answer(problem, vocab.decode(result.response)))


def show(node, depth=0):
    label = node["segment"] or "(root)"
    print(f"  {'  ' * depth}N={node['N']:<3} Q={node['Q']:.3f}  {label}")
    for child in sorted(node["children"], key=lambda c: -c["N"])[:3]:
        show(child, depth + 1)


for i, step in enumerate(result.steps):
    print(f"\ntree for committed sentence {i + 1} (top-3 children per node):")
    show(step.tree)
