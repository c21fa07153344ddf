from __future__ import annotations

import numpy as np

from flsim import nn
from flsim.data import Dataset


def evaluate(spec: nn.MlpSpec, params: np.ndarray, eval_set: Dataset) -> tuple[float, float]:
    """Mean cross-entropy and misclassification rate on ``eval_set``."""
    loss, pred = nn.forward_loss(spec, params, eval_set.batch())
    return loss, float(np.mean(pred != eval_set.labels))
