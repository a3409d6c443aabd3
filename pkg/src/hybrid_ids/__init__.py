"""Hybrid ANN + DCNN + Bi-LSTM + RNN stacking detector for UNSW-NB15-style flow records.

Everything runs on numpy: a small reverse-mode autodiff engine
(:mod:`hybrid_ids.tensor`), layers with hand-written backward passes
(:mod:`hybrid_ids.layers`), optimizers, the data pipeline, models, metrics and
a command-line harness (:mod:`hybrid_ids.cli`).
"""

__version__ = "0.1.0"
