"""Monte-Carlo and closed-form model of the second-guessing tradeoff.

Each synthetic trial is one question: correctness is assigned from the base
accuracy, a confidence is drawn from the matching calibration distribution,
and a decompose-all flip outcome is drawn once (correction with the
configured rate if wrong, induction if correct). Gating at any threshold is
then pure post-processing over the same trials, which is exactly the
semantics of the evaluation module's offline sweep; the two computations
serve as independent oracles for each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np


@dataclass(frozen=True)
class SimConfig:
    base_accuracy: float
    e_cr: float
    e_ic: float
    conf_correct: tuple = (8.0, 2.0)  # Beta shape pair, concentrated high
    conf_incorrect: tuple = (2.0, 8.0)  # concentrated low
    trials: int = 100_000
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("base_accuracy", "e_cr", "e_ic"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("conf_correct", "conf_incorrect"):
            a, b = getattr(self, name)
            if a <= 0 or b <= 0:
                raise ValueError(f"{name} shape parameters must be positive")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class SimTrials:
    """Frozen per-trial draws: confidence, initial correctness, and the
    decompose-all (post-flip) correctness."""

    confidence: np.ndarray
    correct_before: np.ndarray
    correct_after: np.ndarray


@dataclass
class SimPoint:
    tau: float
    accuracy: float
    eta: float
    stderr: float


@dataclass
class SimCurve:
    points: List[SimPoint]
    decompose_all_accuracy: float
    optimal_tau: float
    optimal_accuracy: float


def closed_form_decompose_all(cfg: SimConfig) -> float:
    """Expected accuracy when every question is decomposed:
    Acc + (1 - Acc) * E_CR - Acc * E_IC."""
    acc = cfg.base_accuracy
    return acc + (1.0 - acc) * cfg.e_cr - acc * cfg.e_ic


def generate_trials(cfg: SimConfig) -> SimTrials:
    """Draw the synthetic population once, deterministically from the seed.

    Correctness is stratified (exactly round(Acc * trials) correct trials)
    rather than Bernoulli, so the closed-gate endpoint reproduces the base
    accuracy with zero variance.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.trials
    n_correct = int(round(cfg.base_accuracy * n))
    correct_before = np.zeros(n, dtype=bool)
    correct_before[:n_correct] = True

    conf_c = rng.beta(*cfg.conf_correct, size=n)
    conf_i = rng.beta(*cfg.conf_incorrect, size=n)
    confidence = np.where(correct_before, conf_c, conf_i)
    # Beta draws live in (0, 1); nudge exact zeros into the open interval.
    confidence = np.maximum(confidence, np.finfo(float).tiny)

    flip = rng.random(n)
    corrected = ~correct_before & (flip < cfg.e_cr)
    induced = correct_before & (flip < cfg.e_ic)
    correct_after = (correct_before | corrected) & ~induced
    return SimTrials(confidence, correct_before, correct_after)


def accuracy_at_tau(trials: SimTrials, tau: float) -> tuple:
    """(accuracy, eta, stderr) when gating the frozen trials at tau."""
    gated = trials.confidence <= tau
    outcome = np.where(gated, trials.correct_after, trials.correct_before)
    n = outcome.size
    acc = float(outcome.mean())
    stderr = math.sqrt(acc * (1.0 - acc) / n)
    return acc, float(gated.mean()), stderr


def simulate(cfg: SimConfig, taus: Sequence[float]) -> SimCurve:
    """Evaluate the accuracy-vs-threshold curve on one synthetic population.

    Ties at the maximum accuracy break toward the smaller tau (fewer
    second-guesses).
    """
    if not taus:
        raise ValueError("tau grid must be non-empty")
    trials = generate_trials(cfg)
    points = []
    for tau in taus:
        acc, eta, stderr = accuracy_at_tau(trials, tau)
        points.append(SimPoint(tau=tau, accuracy=acc, eta=eta, stderr=stderr))
    decompose_all_acc, _, _ = accuracy_at_tau(trials, 1.0)
    best = max(points, key=lambda p: (p.accuracy, -p.tau))
    return SimCurve(
        points=points,
        decompose_all_accuracy=decompose_all_acc,
        optimal_tau=best.tau,
        optimal_accuracy=best.accuracy,
    )


def predicted_optimal_tau(cfg: SimConfig, taus: Sequence[float]) -> tuple:
    """(tau, accuracy) maximizing simulated accuracy over the grid."""
    curve = simulate(cfg, taus)
    return curve.optimal_tau, curve.optimal_accuracy


def trials_to_episodes(trials: SimTrials) -> List[dict]:
    """Express the synthetic population as a decompose-all episode log so
    the evaluation module can replay the gate independently."""
    episodes = []
    for i in range(trials.confidence.size):
        before = bool(trials.correct_before[i])
        after = bool(trials.correct_after[i])
        episodes.append(
            {
                "id": f"sim{i:07d}",
                "initial": {"text": "", "confidence": float(trials.confidence[i])},
                "gate": "second_guessed",
                "subquestion": None,
                "subanswer": None,
                "subanswer_provenance": None,
                "final": {"text": "", "confidence": float(trials.confidence[i])},
                "correct_before": before,
                "correct_after": after,
                "malformed_subquestion": False,
                "retries": 0,
            }
        )
    return episodes
