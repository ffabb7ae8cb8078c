"""How an energy function reshapes a base generator, computed exactly.

A tabular generator puts 75% of its mass on the response "a" and 25% on
"b".  An energy that penalizes "a" by ln 3 tilts the reweighted
distribution back to 50/50, and the partition constant is computable by
enumerating every terminated response.

Run:  python demos/01_residual_reweighting.py
"""

import math

from ebmcts import TabularEnergy, TabularModel, TokenSequence, Vocabulary
from ebmcts.energy import exact_residual_distribution

vocab = Vocabulary.build(["a", "b"], delimiters=(), marker="")
a, b, eos = vocab.id_of("a"), vocab.id_of("b"), vocab.eos_id

base = TabularModel(vocab, {(a, eos): 0.75, (b, eos): 0.25})
energy = TabularEnergy(vocab, {(a, eos): math.log(3.0), (b, eos): 0.0})

table = exact_residual_distribution(base, energy, TokenSequence(), max_len=1)

print("response   base prob   energy   reweighted")
for entry in table.entries:
    print(
        f"{vocab.decode(entry.response):>8}   {entry.base_prob:9.4f}   "
        f"{entry.energy:6.3f}   {entry.residual_prob:10.4f}"
    )
print(f"\npartition constant Z = {table.partition_value:.6f}")
print("The ln 3 penalty exactly cancels the 3x base preference for 'a'.")

# With zero energy the reweighted distribution is the base distribution.
flat = TabularEnergy(vocab, {(a, eos): 0.0, (b, eos): 0.0})
identity = exact_residual_distribution(base, flat, TokenSequence(), max_len=1)
print("\nzero energy:", {vocab.decode(e.response): round(e.residual_prob, 4) for e in identity.entries})
