"""Packet classification with a learned tuple predictor over a tuple space search index."""

from .classifier import Classifier, ClassifyStats
from .model import ModelConfig, ResidualMlp, TrainingConfig, load_model, save_model, train
from .pipeline import PipelineConfig, UpdateDecision, UpdateEngine, decide_update, run_pipeline
from .ruleset import FIVE_TUPLE, FieldKind, Rule, Ruleset, linear_scan, matches, parse_ruleset
from .tss import InsertionError, MatchResult, TssIndex

__version__ = "0.1.0"
