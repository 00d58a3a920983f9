"""Attention-sink laboratory: task generator, softmax/ReLU attention models, training and lemma checks."""

__version__ = "0.1.0"
