"""Weak labels from a text-completion labeler under four prompt strategies."""
from .clients import (LabelerClient, LabelerError, MockLabeler, PromptCache, RemoteLabeler,
                      prompt_hash)
from .generate import WeakLabelStats, evaluate_prompt_strategy, generate_weak_labels
from .parse import ParseFailure, parse_labels
from .prompts import (KINDS, POLARITIES, TEMPLATE_VERSION, DemonstrationPool, PromptStrategy,
                      build_prompt, fixed_demonstrations, format_response, hashed_embedder,
                      load_templates, model_embedder, read_prompt, retrieve_demonstrations,
                      table_embedder)

__all__ = [
    "DemonstrationPool", "KINDS", "LabelerClient", "LabelerError", "MockLabeler", "POLARITIES",
    "ParseFailure", "PromptCache", "PromptStrategy", "RemoteLabeler", "TEMPLATE_VERSION",
    "WeakLabelStats", "build_prompt", "evaluate_prompt_strategy", "fixed_demonstrations",
    "format_response", "generate_weak_labels", "hashed_embedder", "load_templates",
    "model_embedder", "parse_labels", "prompt_hash", "read_prompt", "retrieve_demonstrations",
    "table_embedder",
]
