"""Quantity-aware text-prompted object counting at desk scale."""
from .estimator import QuantityCounter
from .prompts import DeltaPolicy, PromptSet, Vocabulary, generate_prompt_set, select_delta, tokenize

__version__ = "0.1.0"

__all__ = [
    "DeltaPolicy",
    "PromptSet",
    "QuantityCounter",
    "Vocabulary",
    "generate_prompt_set",
    "select_delta",
    "tokenize",
]
