"""Metrics and experiment runners."""

from .metrics import ScoredExample, auroc, auroc_scores, eer, eer_scores, error_curve, scored_examples
from .experiments import (
    ClientResult,
    ExperimentReport,
    evaluate_clients,
    execute,
    prepare,
    run_ablation,
    run_ablation_sweep,
    run_classifier_swap,
    run_one_vs_rest,
    run_scalability,
    select_joiners,
    train_global,
)
