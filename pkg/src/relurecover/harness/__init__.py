"""Evaluation oracles, lemma checks, experiment orchestration and the CLI."""

from .config import load_config, stage_seed, validate
from .lemmas import verify_lemmas
from .matching import MatchReport, match_units
from .oracles import mc_hermite_coeff, quadrature_hermite_coeff
from .pipeline import run_pipeline

__all__ = [
    "MatchReport",
    "load_config",
    "match_units",
    "mc_hermite_coeff",
    "quadrature_hermite_coeff",
    "run_pipeline",
    "stage_seed",
    "validate",
    "verify_lemmas",
]
