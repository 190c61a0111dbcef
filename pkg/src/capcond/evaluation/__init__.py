from .diversity import diversity_report, entropy
from .generation import bleu, cider_d, rouge_l
from .language import (caption_perplexity, corpus_perplexity, geometric_mean,
                       rank_images, recall_summary, retrieval_report)
from .report import EvaluationReport, aggregate_runs

__all__ = [
    "EvaluationReport", "aggregate_runs", "bleu", "caption_perplexity", "cider_d",
    "corpus_perplexity", "diversity_report", "entropy", "geometric_mean", "rank_images",
    "recall_summary", "retrieval_report", "rouge_l",
]
