"""One client's local pass: train from the seed model, report the pseudo-gradient."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from flsim import nn, optim
from flsim.data import Dataset
from flsim.errors import ConfigurationError, NumericalError

log = logging.getLogger(__name__)


class ClientFailure(NumericalError):
    def __init__(self, client_id: int, slot: int, reason: str):
        super().__init__(f"client {client_id} (slot {slot}) failed: {reason}")
        self.client_id = client_id
        self.slot = slot


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    pseudo_gradient: np.ndarray
    mean_local_loss: float
    grad_mag_mean: float
    grad_mag_var: float
    n_samples: int
    local_steps_run: int
    final_params: np.ndarray
    slot: int = 0


def minibatches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    # A batch covering the whole shard keeps natural row order, so a full-batch
    # client step reproduces a centralized step bit for bit.
    if batch_size >= n:
        rows = np.arange(n)
        for _ in range(steps):
            yield rows
        return
    emitted = 0
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]
            emitted += 1
            if emitted == steps:
                return


def local_train(spec: nn.MlpSpec, seed_params: np.ndarray, shard: Dataset,
                local_opt: optim.OptimizerState, steps: int | None, batch_size: int,
                seed: int, client_id: int = 0, slot: int = 0) -> ClientUpdate:
    """Run ``steps`` minibatch updates starting at ``seed_params``.

    ``steps=None`` means one epoch over the shard. The pseudo-gradient is
    ``seed_params - final_params``, accumulated from the per-step updates.

    Raises:
        ClientFailure: if the loss or the gradient turns non-finite.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    n = len(shard)
    if steps is None:
        steps = math.ceil(n / batch_size)
    if steps < 1:
        raise ConfigurationError(f"local steps must be >= 1, got {steps}")

    state = optim.reset(local_opt)
    rng = np.random.default_rng(seed)
    params = np.array(seed_params, dtype=np.float64, copy=True)
    moved = np.zeros_like(params)
    losses = []
    for rows in minibatches(n, batch_size, steps, rng):
        loss, grad = nn.backward(spec, params, shard.batch(rows))
        if not math.isfinite(loss):
            raise ClientFailure(client_id, slot, f"loss became {loss}")
        try:
            state, delta = optim.update(state, grad)
        except NumericalError as exc:
            raise ClientFailure(client_id, slot, str(exc)) from exc
        params = params - delta
        moved += delta
        losses.append(loss)

    magnitudes = np.abs(moved)
    return ClientUpdate(
        client_id=client_id,
        pseudo_gradient=moved,
        mean_local_loss=float(np.mean(losses)),
        grad_mag_mean=float(magnitudes.mean()),
        grad_mag_var=float(magnitudes.var()),
        n_samples=n,
        local_steps_run=len(losses),
        final_params=params,
        slot=slot,
    )


def client_features(update: ClientUpdate) -> np.ndarray:
    """(mean local loss, mean |pseudo-gradient|, population variance of |pseudo-gradient|)."""
    return np.array([update.mean_local_loss, update.grad_mag_mean, update.grad_mag_var])
