"""Closed-loop movement-intention detection from EEG.

Train a readiness-potential classifier from labeled sessions, run it as
a causal 10 Hz streaming engine gating a stimulation actuator, and
evaluate outcomes against a synthetic generator with exact ground truth.
"""

__version__ = "0.1.0"
