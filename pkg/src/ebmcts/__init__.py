"""Energy-guided decoding for multi-step reasoning at desk scale.

A frozen base generator is reweighted by a learned energy into a residual
distribution; the energy is trained with noise-contrastive estimation on
generator-sampled negatives; decoding searches sentence by sentence with
UCT tree search using the energy as reward.
"""

__version__ = "0.1.0"

from .energy import (
    EnergyFunction,
    FeatureMap,
    FeedForwardEnergy,
    ResidualDistributionTable,
    TabularEnergy,
    exact_residual_distribution,
    joint_unnormalized_log_score,
    load_energy,
    reward,
    save_energy,
    tv_distance,
)
from .harness import (
    EvalReport,
    ExpertParams,
    NoisyExpertModel,
    TaskSpec,
    check_answer,
    decode_greedy,
    evaluate,
    extract_answer,
    gen_task,
    sample_then_rank,
    self_consistency,
    task_vocabulary,
)
from .mcts import (
    MCTSConfig,
    SearchTree,
    TreeNode,
    backpropagate,
    choose_child,
    mcts_decode,
    select,
)
from .nce import (
    LabeledBatch,
    OptimizerConfig,
    bayes_optimal_energy,
    kl_divergence,
    nce_gradient,
    nce_loss,
    train_energy,
)
from .noise import (
    NoiseConfig,
    NoisePool,
    NoiseSample,
    build_training_set,
    rejection_sample,
    suboutput_sample,
    unfiltered_sample,
)
from .remote import RemoteModel
from .textmodel import (
    Example,
    GeneratorModel,
    NgramModel,
    TabularModel,
    TokenSequence,
    Vocabulary,
    sample_response,
    train_ngram,
)
