"""Evidence-anchored reasoning-trajectory synthesis for planner/executor RAG agents."""

from .agent import AnswerTrace, DenseIndex, RunLimits, run_agent
from .dataset_io import QaSample, SupportingFact, load_samples
from .metrics import evaluate, exact_match, f1, normalize
from .pipeline import SynthesisSettings, synthesize
from .tags import ParsedTurn, SearchCall, parse_turn, render_turn
from .trajectory import Trajectory, format_executor, format_planner

__version__ = "0.1.0"

__all__ = [
    "AnswerTrace", "DenseIndex", "ParsedTurn", "QaSample", "RunLimits", "SearchCall",
    "SupportingFact", "SynthesisSettings", "Trajectory", "evaluate", "exact_match", "f1",
    "format_executor", "format_planner", "load_samples", "normalize", "parse_turn",
    "render_turn", "run_agent", "synthesize",
]
