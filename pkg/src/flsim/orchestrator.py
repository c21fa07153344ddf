"""Server loop: sample clients, train locally, aggregate, step, rehearse, evaluate."""
from __future__ import annotations

import enum
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from flsim import aggregation, nn, optim
from flsim.client import ClientFailure, ClientUpdate, minibatches, client_features, local_train
from flsim.data import Dataset, FederatedTask
from flsim.errors import ConfigurationError, NumericalError
from flsim.metrics import evaluate
from flsim.rl import RewardPolicy, RLAgent, dual_candidate_step, infer_weights, standardize_features
from flsim.seeding import derive_seed

log = logging.getLogger(__name__)

# independent RNG streams derived from (master seed, round, ...)
_MODEL_STREAM = 11
_SAMPLING_STREAM = 12
_CLIENT_STREAM = 13
_EXPLORE_STREAM = 14
_REPLAY_STREAM = 15
_REHEARSAL_STREAM = 16
_POLICY_INIT_STREAM = 17
_REPLAY_SEEN_STREAM = 18


class Aggregator(str, enum.Enum):
    FEDAVG = "fedavg"
    HIER_UNIFORM = "hier_uniform"
    HIER_SOFTMAX = "hier_softmax"
    HIER_RL = "hier_rl"
    HIER_SAMPLE_SIZE = "hier_sample_size"


class RehearsalSource(str, enum.Enum):
    HELD_OUT = "held_out"
    REPLAY_SEEN = "replay_seen"


@dataclass(frozen=True)
class FLConfig:
    pool_size: int = 100
    clients_per_round: int = 10
    max_rounds: int = 300
    target_error: float = 0.055
    aggregator: Aggregator = Aggregator.HIER_SOFTMAX
    beta: float = 1.0
    hidden: tuple[int, ...] = (32,)
    activation: nn.Activation = nn.Activation.RELU
    local_steps: int | None = None
    batch_size: int = 32
    client_optimizer: optim.OptimizerKind = optim.OptimizerKind.SGD
    server_optimizer: optim.OptimizerKind = optim.OptimizerKind.ADAM
    lr_client: float = 0.015
    lr_server: float = 0.02
    lr_rehearsal: float = 0.05
    lr_rl: float = 1e-3
    rehearsal_steps: int = 0
    rehearsal_batch_size: int = 32
    rehearsal_source: RehearsalSource = RehearsalSource.HELD_OUT
    theta: float = 0.001
    reward: float = 1.0
    sigma: float = 0.5
    rl_batch_size: int = 32
    stop_at_target: bool = True
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "aggregator", Aggregator(self.aggregator))
        object.__setattr__(self, "rehearsal_source", RehearsalSource(self.rehearsal_source))
        object.__setattr__(self, "client_optimizer", optim.OptimizerKind(self.client_optimizer))
        object.__setattr__(self, "server_optimizer", optim.OptimizerKind(self.server_optimizer))
        object.__setattr__(self, "activation", nn.Activation(self.activation))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.clients_per_round < 1:
            raise ConfigurationError(f"clients_per_round must be >= 1, got {self.clients_per_round}")
        if self.pool_size < 1:
            raise ConfigurationError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.clients_per_round > self.pool_size:
            log.warning("N=%d exceeds K=%d; sampling with replacement will repeat clients",
                        self.clients_per_round, self.pool_size)
        if self.max_rounds < 0:
            raise ConfigurationError(f"max_rounds must be >= 0, got {self.max_rounds}")
        for name in ("lr_client", "lr_server", "lr_rehearsal", "lr_rl", "beta", "theta", "sigma"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.rehearsal_steps < 0:
            raise ConfigurationError("rehearsal_steps must be >= 0")

    def model_spec(self, dim: int, n_classes: int) -> nn.MlpSpec:
        return nn.MlpSpec([dim, *self.hidden, n_classes], self.activation, nn.Head.SOFTMAX_CE)


@dataclass
class RoundRecord:
    round: int
    aggregator: str
    weights: tuple[float, ...]
    eval_loss: float
    eval_error: float
    reward: float | None = None
    wall_seconds: float = 0.0
    clients: tuple[int, ...] = ()
    model_transfers: int = 0
    err_rl: float | None = None
    err_sm: float | None = None
    selection: str | None = None

    @property
    def weight_entropy(self) -> float:
        w = np.asarray(self.weights)
        w = w[w > 0]
        return float(-(w * np.log(w)).sum())


class RoundAborted(NumericalError):
    """Every client in the round failed; the global model was left unchanged."""


def sample_clients(pool_size: int, n: int, rng: np.random.Generator) -> list[int]:
    """``n`` independent uniform draws from ``range(pool_size)``, with replacement."""
    if n < 1:
        raise ConfigurationError(f"must sample at least one client, got {n}")
    if pool_size < 1:
        raise ConfigurationError(f"pool_size must be >= 1, got {pool_size}")
    if n > pool_size:
        log.warning("sampling %d slots from a pool of %d", n, pool_size)
    return [int(c) for c in rng.integers(0, pool_size, size=n)]


def rehearsal_step(spec: nn.MlpSpec, params: np.ndarray, rehearsal_set: Dataset | None,
                   lr: float, steps: int, batch_size: int = 32, seed: int = 0) -> np.ndarray:
    """``steps`` plain SGD minibatch updates on server-side data."""
    if steps < 0:
        raise ConfigurationError(f"rehearsal steps must be >= 0, got {steps}")
    if steps == 0:
        return params
    if rehearsal_set is None or len(rehearsal_set) == 0:
        raise ConfigurationError("rehearsal requested but the rehearsal set is empty")
    state = optim.make_optimizer(optim.OptimizerKind.SGD, lr)
    rng = np.random.default_rng(seed)
    for rows in minibatches(len(rehearsal_set), batch_size, steps, rng):
        _, grad = nn.backward(spec, params, rehearsal_set.batch(rows))
        state, params = optim.step(state, params, grad)
    return params


def resolve_threads(config: FLConfig) -> int:
    if config.threads is not None:
        return max(1, int(config.threads))
    env = os.environ.get("FLSIM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"FLSIM_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


@dataclass
class ServerState:
    params: np.ndarray
    server_opt: optim.OptimizerState
    agent: RLAgent | None = None
    rehearsal_set: Dataset | None = None


def init_state(config: FLConfig, task: FederatedTask) -> ServerState:
    if config.pool_size != task.shards.n_clients:
        raise ConfigurationError(
            f"config pool_size={config.pool_size} but the task has {task.shards.n_clients} clients")
    spec = config.model_spec(task.train.dim, task.train.n_classes)
    params = nn.init_params(spec, derive_seed(config.seed, _MODEL_STREAM))
    server_opt = optim.make_optimizer(config.server_optimizer, config.lr_server)
    agent = None
    if config.aggregator is Aggregator.HIER_RL:
        agent = RLAgent.create(config.clients_per_round,
                               derive_seed(config.seed, _POLICY_INIT_STREAM),
                               sigma=config.sigma, lr=config.lr_rl,
                               policy=RewardPolicy(config.theta, config.reward),
                               batch_size=config.rl_batch_size)
    return ServerState(params, server_opt, agent, _rehearsal_set(config, task))


def _rehearsal_set(config: FLConfig, task: FederatedTask) -> Dataset | None:
    if config.rehearsal_source is RehearsalSource.HELD_OUT:
        return task.rehearsal
    # previously seen training rows, as many as the held-out set would provide
    size = len(task.rehearsal) if task.rehearsal is not None else max(1, len(task.train) // 10)
    rng = np.random.default_rng(derive_seed(config.seed, _REPLAY_SEEN_STREAM))
    rows = np.sort(rng.choice(len(task.train), size=min(size, len(task.train)), replace=False))
    return task.train.subset(rows)


def audit_disjoint(task: FederatedTask, rehearsal_set: Dataset | None) -> None:
    """Raise if any evaluation row also appears in the training pool or the rehearsal set."""
    held = {row.tobytes() for row in task.eval_set.inputs}
    for name, ds in (("training pool", task.train), ("rehearsal set", rehearsal_set)):
        if ds is None:
            continue
        if any(row.tobytes() in held for row in ds.inputs):
            raise ConfigurationError(f"evaluation rows leak into the {name}")


def _train_slot(spec, params, task, config, round_idx, slot, client_id):
    try:
        return local_train(
            spec, params, task.client_data(client_id),
            optim.make_optimizer(config.client_optimizer, config.lr_client),
            config.local_steps, config.batch_size,
            derive_seed(config.seed, _CLIENT_STREAM, round_idx, slot),
            client_id=client_id, slot=slot)
    except ClientFailure as exc:
        log.warning("%s; excluded from aggregation", exc)
        return None


def run_round(state: ServerState, config: FLConfig, task: FederatedTask, round_idx: int,
              pool: ThreadPoolExecutor | None = None) -> RoundRecord:
    """Advance ``state`` by one round in place and return the round's metrics."""
    started = time.perf_counter()
    spec = config.model_spec(task.train.dim, task.train.n_classes)
    rng = np.random.default_rng(derive_seed(config.seed, _SAMPLING_STREAM, round_idx))
    slots = sample_clients(config.pool_size, config.clients_per_round, rng)

    seed_params = state.params
    jobs = [(slot, client) for slot, client in enumerate(slots)]
    if pool is None:
        results = [_train_slot(spec, seed_params, task, config, round_idx, s, c) for s, c in jobs]
    else:
        futures = [pool.submit(_train_slot, spec, seed_params, task, config, round_idx, s, c)
                   for s, c in jobs]
        results = [f.result() for f in futures]
    transfers = 2 * len(slots)
    log.debug("round %d: %d model transfers", round_idx, transfers)

    updates: list[ClientUpdate] = [u for u in results if u is not None]
    if not updates:
        raise RoundAborted(f"round {round_idx}: all {len(slots)} clients failed")
    alive = [u is not None for u in results]
    grads = [u.pseudo_gradient for u in updates]

    record = RoundRecord(round=round_idx, aggregator=config.aggregator.value, weights=(),
                         eval_loss=float("nan"), eval_error=float("nan"),
                         clients=tuple(slots), model_transfers=transfers)
    agg = config.aggregator
    if agg is Aggregator.FEDAVG:
        weights = aggregation.sample_size_weights([u.n_samples for u in updates])
        state.params = aggregation.fedavg_combine([u.final_params for u in updates],
                                                  [u.n_samples for u in updates])
    elif agg is Aggregator.HIER_RL:
        weights = _rl_step(state, config, task, spec, round_idx, results, alive, updates, record)
    else:
        if agg is Aggregator.HIER_UNIFORM:
            weights = aggregation.uniform_weights(len(updates))
        elif agg is Aggregator.HIER_SOFTMAX:
            weights = aggregation.softmax_weights([u.mean_local_loss for u in updates], config.beta)
        else:
            weights = aggregation.sample_size_weights([u.n_samples for u in updates])
        state.server_opt, state.params = optim.step(
            state.server_opt, state.params, aggregation.aggregate(grads, weights))

    state.params = rehearsal_step(spec, state.params, state.rehearsal_set, config.lr_rehearsal,
                                  config.rehearsal_steps, config.rehearsal_batch_size,
                                  derive_seed(config.seed, _REHEARSAL_STREAM, round_idx))
    record.eval_loss, record.eval_error = evaluate(spec, state.params, task.eval_set)
    record.weights = tuple(_expand(weights.weights, alive))
    record.wall_seconds = time.perf_counter() - started
    return record


def _expand(weights: np.ndarray, alive: list[bool]) -> list[float]:
    """Put survivor weights back into slot positions, zero for failed slots."""
    it = iter(weights)
    return [float(next(it)) if ok else 0.0 for ok in alive]


def _rl_step(state, config, task, spec, round_idx, results, alive, updates, record):
    agent = state.agent
    per_slot = np.array([client_features(u) if u is not None else np.zeros(3) for u in results])
    features = standardize_features(per_slot)
    rl_full, logits = infer_weights(agent.net, features, explore=True,
                                    seed=derive_seed(config.seed, _EXPLORE_STREAM, round_idx))
    rl_weights = aggregation.restrict(rl_full, alive) if not all(alive) else rl_full
    sm_weights = aggregation.softmax_weights([u.mean_local_loss for u in updates], config.beta)
    result = dual_candidate_step(spec, state.params, state.server_opt,
                                 [u.pseudo_gradient for u in updates], sm_weights, rl_weights,
                                 task.eval_set, agent.policy, features, logits)
    state.params, state.server_opt = result.params, result.opt_state
    agent.observe(result.entry)
    agent.learn(np.random.default_rng(derive_seed(config.seed, _REPLAY_STREAM, round_idx)))
    record.reward = result.reward
    record.err_rl, record.err_sm = result.err_rl, result.err_sm
    record.selection = result.selection.value
    log.debug("round %d: err_rl=%.4f err_sm=%.4f reward=%+.2f", round_idx,
              result.err_rl, result.err_sm, result.reward)
    return result.weights


@dataclass
class TrainingResult:
    params: np.ndarray
    records: list[RoundRecord] = field(default_factory=list)
    rounds_to_target: int | None = None
    error: Exception | None = None
    agent: RLAgent | None = None


def run_training(config: FLConfig, task: FederatedTask, on_record=None) -> TrainingResult:
    """Run rounds until the evaluation error reaches ``target_error`` or ``max_rounds``.

    A round failure stops the loop; records gathered so far are kept and the
    exception is stored on the result.
    """
    state = init_state(config, task)
    audit_disjoint(task, state.rehearsal_set)
    result = TrainingResult(state.params)
    threads = resolve_threads(config)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for round_idx in range(1, config.max_rounds + 1):
            try:
                record = run_round(state, config, task, round_idx, pool)
            except NumericalError as exc:
                log.error("round %d aborted: %s", round_idx, exc)
                result.error = exc
                break
            result.records.append(record)
            if on_record is not None:
                on_record(record)
            if result.rounds_to_target is None and record.eval_error <= config.target_error:
                result.rounds_to_target = round_idx
                if config.stop_at_target:
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    result.params = state.params
    result.agent = state.agent
    return result


def with_overrides(config: FLConfig, **changes) -> FLConfig:
    return replace(config, **changes)
