"""Exact finite-space study of dual reconstruction objectives for semi-supervised translation."""
from .estimator import DualTranslator
from .mi_estimator import CorpusPerturber, MIEstimate, PerturbationParams, estimate_mi, perturb_corpus
from .models import (
    AutoregressiveModel,
    BigramLanguageModel,
    TabularModel,
    decode,
    fit_lm,
    grad_log_prob,
    log_prob,
    model_marginal,
)
from .objectives import (
    MIConstraint,
    ObjectiveReport,
    dual_objective_exact,
    dual_upper_bound,
    elbo,
    j1_decomposition,
    lm_augmented_reward,
    log_evidence,
    marginal_log_likelihood,
    mi_constraint_check,
    supervised_objective,
)
from .space import (
    Categorical,
    ConditionalTable,
    JointTable,
    SentenceSpace,
    entropy,
    enumerate_space,
    kl,
    marginal_and_posterior,
    mutual_information_exact,
)
from .synth import (
    Corpora,
    GroundTruth,
    TaskSpec,
    build_ground_truth,
    cipher_task,
    oracle_eval,
    sample_corpora,
    sample_preset,
)
from .theory import check_lemma1, construct_optimum, verify_optimum
from .trainers import (
    RunResult,
    TrainConfig,
    back_translate,
    dual_learning_update,
    exact_dual_ascent,
    ibt_batch_update,
    pretrain_supervised,
    run_strategy,
)

__version__ = "0.1.0"
