"""What the two negative-sampling schemes actually produce.

Rejection sampling keeps generated responses whose final answer is correct
but whose text differs from the reference: on this task those are mostly
operand-order permutations, which force the energy to judge the reasoning
steps rather than the answer.  Suboutput sampling continues from the first
k reference sentences, yielding negatives that share a prefix with the
reference and then go wrong, which is exactly the shape of the decisions a
sentence-level search faces.

Run:  python demos/05_noise_pools.py
"""

import numpy as np

from ebmcts import (
    ExpertParams,
    NoiseConfig,
    NoisyExpertModel,
    TaskSpec,
    check_answer,
    gen_task,
    task_vocabulary,
)
from ebmcts.noise import build_training_set, rejection_sample, suboutput_sample

SEED = 0

spec = TaskSpec(n_train=200, n_test=10, seed=SEED, step_weights=(0.6, 0.4))
vocab = task_vocabulary(spec)
train, _ = gen_task(spec, np.random.default_rng(SEED))
lm = NoisyExpertModel(vocab, ExpertParams(flip_rate=0.3, seed=SEED))

rej = rejection_sample(lm, train, NoiseConfig(samples_per_instruction=16), check_answer, SEED)
sub = suboutput_sample(lm, train, NoiseConfig(samples_per_instruction=8), SEED + 1)
gold = {ex.instruction.ids: ex for ex in train}

print(f"rejection pool: {len(rej.samples)} samples (correct answer, different text)")
for s in rej.samples[:4]:
    ex = gold[s.instruction.ids]
    print(f"  instruction : {vocab.decode(s.instruction)}")
    print(f"  reference   : {vocab.decode(ex.response)}")
    print(f"  negative    : {vocab.decode(s.response)}")
    assert check_answer(ex, vocab.decode(s.response))
    print()

print(f"suboutput pool: {len(sub.samples)} samples (reference prefix, divergent tail)")
for s in sub.samples[:4]:
    ex = gold[s.instruction.ids]
    print(f"  instruction : {vocab.decode(s.instruction)}")
    print(f"  reference   : {vocab.decode(ex.response)}")
    print(f"  negative    : {vocab.decode(s.response)}   (shares {s.k} sentence(s))")
    print()

both = build_training_set(train, [rej, sub])
only = build_training_set(train, [rej])
print(f"labeled sets: reject-only {only.class_counts[0]}+/{only.class_counts[1]}-, "
      f"combined {both.class_counts[0]}+/{both.class_counts[1]}- "
      f"({both.dropped_gold_conflicts} reference duplicates dropped)")
