"""Reinforcement-learned aggregation weights.

The policy maps standardized per-slot features (loss, |pseudo-gradient| mean and
variance) to one logit per slot. During exploration Gaussian noise is added to the
logits, so the policy is a Gaussian over logits and its score function is available
in closed form. Training is REINFORCE with a running-mean reward baseline over
minibatches drawn from a bounded replay memory.
"""
from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from flsim import nn, optim
from flsim.aggregation import AggregationWeights, WeightStrategy, aggregate, normalize
from flsim.data import Dataset
from flsim.errors import ConfigurationError
from flsim.metrics import evaluate

log = logging.getLogger(__name__)

MEMORY_CAPACITY = 1000
N_FEATURES = 3


@dataclass
class PolicyNet:
    spec: nn.MlpSpec
    params: np.ndarray
    sigma: float = 0.5

    @property
    def n_slots(self) -> int:
        return self.spec.output_dim


def policy_layer_sizes(n_slots: int) -> list[int]:
    """3N -> 4N -> 2N -> max(N, 2) -> bottleneck -> N, five weight layers."""
    wide = max(n_slots, 2)
    bottleneck = min(max(4, n_slots // 4), wide - 1)
    return [N_FEATURES * n_slots, 4 * n_slots, 2 * n_slots, wide, bottleneck, n_slots]


def make_policy_net(n_slots: int, seed: int, sigma: float = 0.5) -> PolicyNet:
    if n_slots < 1:
        raise ConfigurationError(f"policy needs at least one slot, got {n_slots}")
    if sigma < 0:
        raise ConfigurationError(f"exploration sigma must be >= 0, got {sigma}")
    spec = nn.MlpSpec(policy_layer_sizes(n_slots), nn.Activation.RELU, nn.Head.LINEAR)
    return PolicyNet(spec, nn.init_params(spec, seed), float(sigma))


def standardize_features(per_slot: np.ndarray) -> np.ndarray:
    """Z-score each feature column across slots, then flatten slot-major to length 3N."""
    f = np.asarray(per_slot, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != N_FEATURES:
        raise ConfigurationError(f"expected an (N, {N_FEATURES}) feature matrix, got {f.shape}")
    centered = f - f.mean(axis=0)
    std = f.std(axis=0)
    scaled = np.divide(centered, std, out=np.zeros_like(centered), where=std > 1e-12)
    return scaled.reshape(-1)


def policy_logits(net: PolicyNet, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64).reshape(1, -1)
    return nn.forward(net.spec, net.params, x)[0]


def infer_weights(net: PolicyNet, features: np.ndarray, explore: bool = False,
                  seed: int = 0) -> tuple[AggregationWeights, np.ndarray]:
    """Weights on the simplex plus the (possibly perturbed) logits they came from."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (net.spec.input_dim,):
        raise ConfigurationError(
            f"policy expects {net.spec.input_dim} features, got shape {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ConfigurationError("non-finite policy features")
    logits = policy_logits(net, features)
    if explore and net.sigma > 0:
        logits = logits + net.sigma * np.random.default_rng(seed).standard_normal(logits.size)
    w = normalize(nn.softmax(logits))
    return AggregationWeights(w, WeightStrategy.RL), logits


@dataclass(frozen=True)
class ReplayEntry:
    features: np.ndarray
    action: np.ndarray
    reward: float
    logits: np.ndarray | None = None


class ReplayMemory:
    """FIFO ring buffer of (features, action, reward) entries."""

    def __init__(self, capacity: int = MEMORY_CAPACITY):
        self.capacity = capacity
        self._entries: deque[ReplayEntry] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def push(self, entry: ReplayEntry) -> None:
        self._entries.append(entry)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[ReplayEntry]:
        idx = rng.choice(len(self._entries), size=batch_size, replace=False)
        return [self._entries[i] for i in idx]


@dataclass(frozen=True)
class RewardPolicy:
    theta: float = 0.001
    reward: float = 1.0

    def __post_init__(self):
        if self.theta < 0 or not self.reward > 0:
            raise ConfigurationError(f"need theta >= 0 and R > 0, got {self.theta}, {self.reward}")


class Selection(str, enum.Enum):
    RL_MODEL = "rl"
    SM_MODEL = "sm"


def compute_reward(err_rl: float, err_sm: float,
                   policy: RewardPolicy) -> tuple[float, Selection]:
    """Lower error is better: reward the RL weights when they beat softmax by more than theta."""
    gain = err_sm - err_rl
    if gain > policy.theta:
        return policy.reward, Selection.RL_MODEL
    if abs(gain) <= policy.theta:
        return 0.1 * policy.reward, Selection.RL_MODEL
    return -policy.reward, Selection.SM_MODEL


def _centered_logits(entry: ReplayEntry) -> np.ndarray:
    if entry.logits is not None:
        z = np.asarray(entry.logits, dtype=np.float64)
    else:
        z = np.log(np.maximum(entry.action, np.finfo(np.float64).tiny))
    return z - z.mean()


def policy_gradient(net: PolicyNet, batch: Sequence[ReplayEntry], baseline: float) -> np.ndarray:
    """Ascent direction of mean (r - b) * log p(action | features) over ``batch``.

    Logits are compared after centering, since softmax ignores a common shift.
    """
    if net.sigma <= 0:
        raise ConfigurationError("policy gradient needs exploration noise (sigma > 0)")
    x = np.stack([e.features for e in batch])
    mean_logits = nn.forward(net.spec, net.params, x)
    mean_logits = mean_logits - mean_logits.mean(axis=1, keepdims=True)
    taken = np.stack([_centered_logits(e) for e in batch])
    advantage = np.array([e.reward for e in batch]) - baseline
    score = (taken - mean_logits) / net.sigma ** 2
    d_logits = advantage[:, None] * score / len(batch)
    return nn.vjp(net.spec, net.params, x, d_logits)


def update_policy(net: PolicyNet, memory: ReplayMemory, opt_state: optim.OptimizerState,
                  baseline: float, rng: np.random.Generator,
                  batch_size: int = 32) -> tuple[PolicyNet, optim.OptimizerState]:
    """One REINFORCE step on a uniform replay minibatch; no-op while memory is short."""
    if len(memory) < batch_size:
        log.debug("replay memory holds %d < %d entries; skipping policy update",
                  len(memory), batch_size)
        return net, opt_state
    if net.sigma <= 0:
        log.warning("exploration sigma is 0; policy update skipped")
        return net, opt_state
    ascent = policy_gradient(net, memory.sample(batch_size, rng), baseline)
    opt_state, params = optim.step(opt_state, net.params, -ascent)
    return PolicyNet(net.spec, params, net.sigma), opt_state


@dataclass
class RLAgent:
    """Policy net, replay memory and reward baseline, owned by the server loop."""

    net: PolicyNet
    opt_state: optim.OptimizerState
    policy: RewardPolicy = field(default_factory=RewardPolicy)
    memory: ReplayMemory = field(default_factory=ReplayMemory)
    batch_size: int = 32
    baseline: float = 0.0
    n_rewards: int = 0

    @classmethod
    def create(cls, n_slots: int, seed: int, sigma: float = 0.5, lr: float = 1e-3,
               policy: RewardPolicy | None = None, batch_size: int = 32) -> "RLAgent":
        return cls(net=make_policy_net(n_slots, seed, sigma),
                   opt_state=optim.make_optimizer("adam", lr),
                   policy=policy or RewardPolicy(), batch_size=batch_size)

    def observe(self, entry: ReplayEntry) -> None:
        self.memory.push(entry)
        self.n_rewards += 1
        self.baseline += (entry.reward - self.baseline) / self.n_rewards

    def learn(self, rng: np.random.Generator) -> None:
        self.net, self.opt_state = update_policy(
            self.net, self.memory, self.opt_state, self.baseline, rng, self.batch_size)


@dataclass(frozen=True)
class DualCandidateResult:
    params: np.ndarray
    opt_state: optim.OptimizerState
    reward: float
    selection: Selection
    err_rl: float
    err_sm: float
    loss_rl: float
    loss_sm: float
    weights: AggregationWeights
    entry: ReplayEntry

    @property
    def chosen_error(self) -> float:
        return self.err_rl if self.selection is Selection.RL_MODEL else self.err_sm


def dual_candidate_step(spec: nn.MlpSpec, params: np.ndarray, server_opt: optim.OptimizerState,
                        pseudo_gradients: Sequence[np.ndarray], sm_weights: AggregationWeights,
                        rl_weights: AggregationWeights, eval_set: Dataset,
                        policy: RewardPolicy, features: np.ndarray,
                        rl_logits: np.ndarray | None = None) -> DualCandidateResult:
    """Build the softmax- and RL-weighted candidates, keep the one the reward rule selects.

    Both candidates start from the same optimizer state, so they differ only
    through their aggregated pseudo-gradient.
    """
    opt_rl, cand_rl = optim.step(server_opt, params, aggregate(pseudo_gradients, rl_weights))
    opt_sm, cand_sm = optim.step(server_opt, params, aggregate(pseudo_gradients, sm_weights))
    loss_rl, err_rl = evaluate(spec, cand_rl, eval_set)
    loss_sm, err_sm = evaluate(spec, cand_sm, eval_set)
    reward, selection = compute_reward(err_rl, err_sm, policy)
    entry = ReplayEntry(np.asarray(features, dtype=np.float64), rl_weights.weights.copy(),
                        reward, None if rl_logits is None else np.asarray(rl_logits))
    if selection is Selection.RL_MODEL:
        chosen = (cand_rl, opt_rl, rl_weights)
    else:
        chosen = (cand_sm, opt_sm, sm_weights)
    return DualCandidateResult(chosen[0], chosen[1], reward, selection, err_rl, err_sm,
                               loss_rl, loss_sm, chosen[2], entry)
