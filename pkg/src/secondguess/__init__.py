"""Selective question decomposition for zero-shot VQA.

Orchestrates a two-step answer/second-guess protocol against pluggable
generation backends, and provides the evaluation metrics (error correction
and induction rates, threshold sweeps, surprisal) plus a Monte-Carlo
simulator of the second-guessing tradeoff.
"""

__version__ = "0.1.0"
