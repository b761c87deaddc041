"""scikit-learn style front end for the run-jump stopping rule.

The rule has nothing to learn, so ``fit`` only validates hyperparameters.
Inputs are collections of step-answer sequences; each sequence may hold raw
strings (normalized here), :class:`~escot.answers.StepAnswer` objects, or
``None`` for a step whose probe produced no answer.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from escot.answers import NO_ANSWER, Answer, StepAnswer, answers_equal, normalize_answer
from escot.runjump import EscotConfig, TrajectoryResult, process_trajectory


def check_answer_sequence(seq) -> list[StepAnswer]:
    """Coerce one trajectory into ordered :class:`StepAnswer` objects."""
    if isinstance(seq, (str, bytes)):
        raise TypeError("a trajectory must be a sequence of answers, not a string")
    out = []
    for i, item in enumerate(seq, 1):
        if isinstance(item, StepAnswer):
            if item.step_index != i:
                raise ValueError(f"step answers out of order at position {i}")
            out.append(item)
        elif item is None or item is NO_ANSWER:
            out.append(StepAnswer(i, "", NO_ANSWER))
        else:
            raw = str(item)
            out.append(StepAnswer(i, raw, normalize_answer(raw)))
    return out


def check_trajectories(X) -> list[list[StepAnswer]]:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [check_answer_sequence(row.tolist()) for row in X]
    try:
        return [check_answer_sequence(seq) for seq in X]
    except TypeError as exc:
        raise TypeError(f"expected a collection of answer sequences: {exc}") from None


class RunJumpStopper(BaseEstimator):
    """Early-stopping decision for a batch of step-answer trajectories.

    ``predict`` returns the 1-based stop step of every trajectory, or ``-1``
    when the trajectory runs to completion.
    """

    def __init__(self, d_min=10, alpha=0.05, min_prior_diffs=2):
        self.d_min = d_min
        self.alpha = alpha
        self.min_prior_diffs = min_prior_diffs

    def fit(self, X=None, y=None):
        self.config_ = EscotConfig(self.d_min, self.alpha, self.min_prior_diffs)
        return self

    def _check_fitted(self) -> EscotConfig:
        if not hasattr(self, "config_"):
            raise NotFittedError("call fit before using this RunJumpStopper")
        return self.config_

    def decide(self, X) -> list[TrajectoryResult]:
        cfg = self._check_fitted()
        return [process_trajectory(seq, cfg) for seq in check_trajectories(X)]

    def predict(self, X) -> np.ndarray:
        return np.array([r.stop_step if r.stopped else -1 for r in self.decide(X)], dtype=int)

    def predict_answers(self, X) -> list[Optional[Answer]]:
        """Output answer per trajectory: the stopped answer, else the last parsed one."""
        seqs = check_trajectories(X)
        cfg = self._check_fitted()
        out = []
        for seq in seqs:
            res = process_trajectory(seq, cfg)
            out.append(res.stopped_answer if res.stopped else last_answer(seq))
        return out

    def score(self, X, y=None) -> float:
        """Fraction of trajectories whose output matches their own final answer."""
        seqs = check_trajectories(X)
        if not seqs:
            return 1.0
        answers = self.predict_answers(seqs)
        hits = sum(
            1 for seq, a in zip(seqs, answers)
            if a == last_answer(seq) or answers_equal(a, last_answer(seq))
        )
        return hits / len(seqs)

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).predict(X)


def last_answer(seq: Sequence[StepAnswer]) -> Answer:
    for a in reversed(seq):
        if a.normalized is not NO_ANSWER:
            return a.normalized
    return NO_ANSWER


def stop_steps(X: Iterable, **params) -> np.ndarray:
    return RunJumpStopper(**params).fit_predict(list(X))
