"""Metrics, judges, evaluation and the experiment harness."""

from .judge import CORE_TEMPLATES, Judge, JudgeError, SubprocessJudge, TemplateJudge, invert_template
from .metrics import detect_accuracy, f_beta, lcs_length, rouge_l, token_f1
from .runner import MetricsReport, RoundPoint, evaluate_results, run_eval
from .experiments import (
    DEFAULT_SEEDS,
    RATIOS,
    VARIANTS,
    Campaign,
    CellResult,
    cells_from,
    inference_for,
    run_ablations,
    run_campaign,
    campaign_to_dict,
    run_ratio_sweep,
    summarize,
)
