"""Reference predictors the attack is compared against."""

from __future__ import annotations

import numpy as np

from ..datasets import LabelDistribution
from ..errors import ValidationError


def baseline_uniform(n_classes) -> LabelDistribution:
    if n_classes < 2:
        raise ValidationError("need at least 2 classes")
    return LabelDistribution.uniform(n_classes)


def output_bias_name(layout) -> str:
    """Name of the last bias block of an MLP layout."""
    names = [n for n, _ in layout if n.startswith("b")]
    if not names:
        raise ValidationError("model has no output bias")
    return names[-1]


def baseline_lastlayer(uploads, history) -> LabelDistribution:
    """Score classes by how much each round pushed their output bias up.

    The upload's ``grad_update`` is ``before - after``; a class the client
    holds many samples of gets a negative accumulated bias gradient, so its
    score is the summed positive part of ``-grad_update``. ``history`` is the
    federation history (or a list of broadcast ParameterVectors) the uploads
    are measured against.
    """
    uploads = sorted(uploads, key=lambda u: u.round)
    if not uploads:
        raise ValidationError("no uploads")
    name = output_bias_name(uploads[0].params.layout)
    score = None
    for u in uploads:
        if history is not None:
            before = (history.global_params(u.round) if hasattr(history, "global_params")
                      else history[u.round - 1])
            delta = before.unflatten()[name] - u.params.unflatten()[name]
        else:
            delta = u.grad_update.unflatten()[name]
        step = np.maximum(0.0, -delta)
        score = step if score is None else score + step
    total = score.sum()
    if not total > 0:
        return LabelDistribution.uniform(score.size)
    return LabelDistribution(score / total)
