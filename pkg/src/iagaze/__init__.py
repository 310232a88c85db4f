"""Interaction-oriented attention prediction: data tooling, the IA model,
saliency metrics and attention alignment for HOI models."""

__version__ = "0.1.0"
