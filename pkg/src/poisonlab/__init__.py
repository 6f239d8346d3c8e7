"""poisonlab: a desk-scale laboratory for covert memory-poisoning attacks.

Victims (a cooperative multi-agent TD learner with a shared replay buffer,
and a retrieval-augmented generator with a vector knowledge base) retrain on
a perturbed memory; attacks solve the resulting bilevel problem with
verified implicit-differentiation hypergradients under covertness budgets.
"""

from .memory import (
    CovertnessBudget,
    Document,
    Edit,
    KnowledgeData,
    MemoryStore,
    Perturbation,
    ReplayData,
    apply,
    covertness_cost,
    load_perturbation,
    load_store,
    poison_rate,
    project,
    save_perturbation,
    save_store,
)
from .diffnum import (
    DiffLoss,
    OptimizerConfig,
    OracleFailureError,
    TrainingDivergedError,
    finite_diff_grad,
    train_inner,
)
from .bilevel import (
    AttackResult,
    BilevelProblem,
    HypergradConfig,
    cg_solve,
    hypergrad_attack,
    implicit_hypergradient,
    pbgd_attack,
)

__version__ = "0.1.0"
