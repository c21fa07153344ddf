"""Rigged bandit: one fixed slot always carries a high loss and hurts the outcome."""
import numpy as np

from flsim import rl


def bandit_features(rng, n_slots, bad):
    per_slot = np.column_stack([
        rng.normal(1.0, 0.1, n_slots),
        rng.normal(0.5, 0.1, n_slots),
        rng.normal(0.2, 0.05, n_slots),
    ])
    per_slot[bad, 0] += 2.0
    return rl.standardize_features(per_slot)


def run_bandit(seed, n_slots=10, updates=500, base=0.1, penalty=0.5, lr=1e-3, sigma=0.5):
    """Train a fresh agent on the rigged task; return its greedy bad-slot weight afterwards.

    The environment's error is ``base + penalty * w_bad``; the reference is uniform
    weighting, so the reward favors putting less than 1/N on the bad slot.
    """
    rng = np.random.default_rng(seed)
    bad = int(rng.integers(n_slots))
    agent = rl.RLAgent.create(n_slots, seed, sigma=sigma, lr=lr)
    ref_error = base + penalty / n_slots
    for step in range(updates):
        x = bandit_features(rng, n_slots, bad)
        w, logits = rl.infer_weights(agent.net, x, explore=True, seed=int(rng.integers(2**63)))
        reward, _ = rl.compute_reward(base + penalty * w.weights[bad], ref_error, agent.policy)
        agent.observe(rl.ReplayEntry(x, w.weights, reward, logits))
        agent.learn(rng)
    probe = np.random.default_rng(seed + 10_000)
    bad_weights = []
    for _ in range(200):
        x = bandit_features(probe, n_slots, bad)
        bad_weights.append(rl.infer_weights(agent.net, x)[0].weights[bad])
    return float(np.mean(bad_weights))
