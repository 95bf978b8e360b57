"""Sequential diagnosis engine.

Fits per-disease joint symptom models by maximum-entropy estimation, derives
question-asking policies (exact, energy-based, and deep Q-learning variants)
on per-symptom conditioned tasks, and serves interactive consultations over
HTTP with ontology-aware evidence handling.
"""

__version__ = "0.1.0"
