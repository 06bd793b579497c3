"""Weakly supervised temporal action localization with a discriminability-driven snippet graph."""
from .corpus import CorpusSpec, GroundTruthSegment, Video, generate_corpus
from .estimator import DDGNetLocalizer
from .evaluator import ActionProposal, EvalReport, EvalSettings, evaluate
from .graph import DdgHyper, GraphOptions, SnippetPartition
from .trainer import ABLATIONS, TrainConfig, apply_ablation, grad_check, train

__all__ = [
    "ABLATIONS", "ActionProposal", "CorpusSpec", "DDGNetLocalizer", "DdgHyper", "EvalReport",
    "EvalSettings", "GraphOptions", "GroundTruthSegment", "SnippetPartition", "TrainConfig", "Video",
    "apply_ablation", "evaluate", "generate_corpus", "grad_check", "train",
]
