"""PPO training of the inquiry policy, with a uniform-over-mask baseline.

Rollouts hold whole episodes (each at most `budget` steps), so advantage
scans never bootstrap past the buffer end. Actions are sampled from the
masked policy distribution; the environment rejects masked actions, so a
violation here is a bug, not exploration. Gradients of the clipped
surrogate, value, and entropy terms are computed analytically and verified
against finite differences in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._core import categorical_sample, gae_scan, masked_softmax_1d
from .cohort import Cohort
from .neural import (
    ActorCritic,
    TrainingDivergedError,
    actor_critic_backward,
    actor_critic_init,
    actor_critic_parameters,
    adam_init,
    adam_step,
    masked_softmax,
    policy_value,
)
from .screen_env import EnvConfig, observe, reset, step, valid_action_mask


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs_per_update: int = 4
    minibatch_size: int = 256
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    n_envs: int = 8
    rollout_steps: int = 2048
    total_steps: int = 120_000
    seed: int = 0
    trunk_hidden: tuple[int, ...] = (256, 256)
    head_hidden: tuple[int, ...] = (128,)

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be positive")
        if self.n_envs < 1 or self.rollout_steps < 1 or self.total_steps < 1:
            raise ValueError("n_envs, rollout_steps, total_steps must be >= 1")


@dataclass
class RolloutBuffer:
    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    values: np.ndarray  # (T,)
    dones: np.ndarray  # (T,)
    masks: np.ndarray  # (T, M) bool
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return self.observations.shape[0]


def random_policy(mask: np.ndarray, rng: np.random.Generator) -> int:
    """Uniform draw over the set mask bits."""
    choices = np.flatnonzero(mask)
    if choices.size == 0:
        raise ValueError("random_policy: empty action mask")
    return int(choices[rng.integers(choices.size)])


def _greedy_action(logits: np.ndarray, mask: np.ndarray) -> int:
    masked = np.where(mask, logits, -np.inf)
    return int(np.argmax(masked))


def run_episode(
    policy: ActorCritic | None,
    record,
    ontology,
    env_config: EnvConfig,
    rng: np.random.Generator,
    greedy: bool = True,
    state_log: list | None = None,
):
    """One full episode; policy=None plays the uniform random baseline.

    Returns (final_state, total_reward, n_steps); state_log, when given,
    captures the state after reset and after every step.
    """
    state = reset(record, ontology, env_config, rng)
    if state_log is not None:
        state_log.append(state)
    total = 0.0
    steps = 0
    done = False
    while not done:
        mask = valid_action_mask(state, ontology)
        if not mask.any():
            break
        if policy is None:
            action = random_policy(mask, rng)
        else:
            logits, _, _ = policy_value(policy, observe(state)[None, :])
            if greedy:
                action = _greedy_action(logits[0], mask)
            else:
                probs = masked_softmax_1d(logits[0], mask)
                action = categorical_sample(probs, rng.random())
        state, reward, done = step(state, action, record, ontology, env_config)
        if state_log is not None:
            state_log.append(state)
        total += reward
        steps += 1
    return state, total, steps


def collect_rollouts(
    policy: ActorCritic,
    cohort_train: Cohort,
    env_config: EnvConfig,
    n_steps: int,
    rng: np.random.Generator,
    n_envs: int = 1,
) -> RolloutBuffer:
    """Sample whole episodes until at least n_steps are stored.

    Each episode draws a uniformly random training record and an independent
    RNG stream, so the buffer content is deterministic for a given seed and
    episode count regardless of how many environments run in lockstep.
    """
    records = cohort_train.records
    if not records:
        raise ValueError("empty training split")
    ontology = cohort_train.ontology
    n_episodes = max(1, math.ceil(n_steps / env_config.budget))
    streams = rng.spawn(n_episodes)

    episodes: list[dict] = [None] * n_episodes
    next_episode = 0
    slots = []

    def start(ep_idx):
        ep_rng = streams[ep_idx]
        record = records[int(ep_rng.integers(len(records)))]
        state = reset(record, ontology, env_config, ep_rng)
        return {
            "idx": ep_idx,
            "rng": ep_rng,
            "record": record,
            "state": state,
            "obs": [],
            "actions": [],
            "log_probs": [],
            "rewards": [],
            "values": [],
            "dones": [],
            "masks": [],
        }

    while next_episode < n_envs and next_episode < n_episodes:
        slots.append(start(next_episode))
        next_episode += 1

    while slots:
        obs_batch = np.stack([observe(slot["state"]) for slot in slots])
        logits, values, _ = policy_value(policy, obs_batch)
        finished = []
        for i, slot in enumerate(slots):
            mask = valid_action_mask(slot["state"], ontology)
            probs = masked_softmax_1d(logits[i], mask)
            action = categorical_sample(probs, slot["rng"].random())
            if not mask[action]:
                raise AssertionError("sampled action escaped the mask")
            new_state, reward, done = step(
                slot["state"], action, slot["record"], ontology, env_config
            )
            slot["obs"].append(obs_batch[i])
            slot["actions"].append(action)
            slot["log_probs"].append(float(np.log(probs[action])))
            slot["rewards"].append(reward)
            slot["values"].append(float(values[i]))
            slot["dones"].append(float(done))
            slot["masks"].append(mask)
            slot["state"] = new_state
            if done:
                finished.append(i)
        for i in reversed(finished):
            slot = slots.pop(i)
            episodes[slot["idx"]] = slot
            if next_episode < n_episodes:
                slots.append(start(next_episode))
                next_episode += 1

    obs = np.concatenate([np.stack(ep["obs"]) for ep in episodes])
    buffer = RolloutBuffer(
        observations=obs,
        actions=np.concatenate([np.array(ep["actions"], dtype=np.int64) for ep in episodes]),
        log_probs=np.concatenate([np.array(ep["log_probs"]) for ep in episodes]),
        rewards=np.concatenate([np.array(ep["rewards"]) for ep in episodes]),
        values=np.concatenate([np.array(ep["values"]) for ep in episodes]),
        dones=np.concatenate([np.array(ep["dones"]) for ep in episodes]),
        masks=np.concatenate([np.stack(ep["masks"]) for ep in episodes]),
        episode_returns=[float(sum(ep["rewards"])) for ep in episodes],
    )
    return buffer


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    """Attach advantages and returns (terminal bootstrap value is 0)."""
    adv = gae_scan(buffer.rewards, buffer.values, buffer.dones, gamma, lam)
    buffer.advantages = adv
    buffer.returns = adv + buffer.values
    return buffer


def ppo_loss_and_grads(policy: ActorCritic, batch: dict, config: PpoConfig):
    """Clipped-surrogate loss and exact parameter gradients for one minibatch.

    batch holds observations, actions, log_probs (old), advantages
    (already normalized), returns, masks. Returns (loss, grads, stats).
    """
    obs = batch["observations"]
    actions = batch["actions"]
    old_logp = batch["log_probs"]
    adv = batch["advantages"]
    rets = batch["returns"]
    masks = batch["masks"]
    n = obs.shape[0]
    eps = config.clip_eps

    logits, values, cache = policy_value(policy, obs)
    probs = masked_softmax(logits, masks)
    p_taken = probs[np.arange(n), actions]
    logp_new = np.log(np.maximum(p_taken, 1e-300))
    ratio = np.exp(logp_new - old_logp)

    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    policy_loss = -float(np.minimum(unclipped, clipped).mean())

    value_err = values - rets
    value_loss = float((value_err**2).mean())

    with np.errstate(divide="ignore", invalid="ignore"):
        logp_full = np.where(probs > 0.0, np.log(probs), 0.0)
    entropy_per = -(probs * logp_full).sum(axis=1)
    entropy = float(entropy_per.mean())

    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite PPO loss {loss}")

    # d(policy_loss)/dlogits: gradient flows only where min() picks the
    # unclipped branch; dratio/dlogits = ratio * (onehot - probs)
    flow = (unclipped <= clipped).astype(np.float64)
    coef = -(adv * flow * ratio) / n
    dlogits = coef[:, None] * (-probs)
    dlogits[np.arange(n), actions] += coef
    # entropy bonus: dH/dz_j = -p_j (log p_j + H)
    dlogits += (config.entropy_coef / n) * probs * (logp_full + entropy_per[:, None])
    dvalues = (2.0 * config.value_coef / n) * value_err

    grads = actor_critic_backward(policy, cache, dlogits, dvalues)
    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float((np.abs(ratio - 1.0) > eps).mean()),
        "loss": float(loss),
    }
    return loss, grads, stats


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = float(adv.std())
    if std < 1e-12:
        return np.zeros_like(adv)
    return (adv - adv.mean()) / std


def ppo_update(
    policy: ActorCritic,
    buffer: RolloutBuffer,
    config: PpoConfig,
    adam_state,
    rng: np.random.Generator,
) -> dict:
    """Epochs of shuffled minibatch updates over one rollout buffer."""
    if buffer.advantages is None:
        raise ValueError("compute_gae must run before ppo_update")
    adv = normalize_advantages(buffer.advantages)
    n = len(buffer)
    params = actor_critic_parameters(policy)
    agg: dict[str, float] = {}
    n_batches = 0
    for _ in range(config.epochs_per_update):
        order = rng.permutation(n)
        for lo in range(0, n, config.minibatch_size):
            idx = order[lo : lo + config.minibatch_size]
            batch = {
                "observations": buffer.observations[idx],
                "actions": buffer.actions[idx],
                "log_probs": buffer.log_probs[idx],
                "advantages": adv[idx],
                "returns": buffer.returns[idx],
                "masks": buffer.masks[idx],
            }
            _, grads, stats = ppo_loss_and_grads(policy, batch, config)
            adam_step(params, grads, adam_state)
            for key, val in stats.items():
                agg[key] = agg.get(key, 0.0) + val
            n_batches += 1
    return {key: val / n_batches for key, val in agg.items()}


def train_policy(
    train_cohort: Cohort,
    env_config: EnvConfig,
    ppo_config: PpoConfig,
) -> tuple[ActorCritic, list[dict]]:
    """Full PPO run; returns the trained policy and the training curve."""
    ontology = train_cohort.ontology
    obs_dim = train_cohort.history_dim + 3 * ontology.size
    rng = np.random.default_rng(ppo_config.seed)
    policy = actor_critic_init(
        obs_dim,
        ontology.size,
        rng,
        trunk_hidden=ppo_config.trunk_hidden,
        head_hidden=ppo_config.head_hidden,
    )
    adam_state = adam_init(actor_critic_parameters(policy), ppo_config.learning_rate)
    curve: list[dict] = []
    steps_done = 0
    update = 0
    while steps_done < ppo_config.total_steps:
        buffer = collect_rollouts(
            policy,
            train_cohort,
            env_config,
            ppo_config.rollout_steps,
            rng,
            n_envs=ppo_config.n_envs,
        )
        compute_gae(buffer, ppo_config.gamma, ppo_config.gae_lambda)
        stats = ppo_update(policy, buffer, ppo_config, adam_state, rng)
        steps_done += len(buffer)
        update += 1
        curve.append(
            {
                "update": update,
                "steps": steps_done,
                "mean_return": float(np.mean(buffer.episode_returns)),
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "entropy": stats["entropy"],
                "clip_fraction": stats["clip_fraction"],
            }
        )
    return policy, curve


def evaluate_mean_return(
    policy: ActorCritic | None,
    cohort: Cohort,
    env_config: EnvConfig,
    seed: int = 0,
    greedy: bool = True,
    records=None,
) -> float:
    """Mean episode return over the cohort (policy=None: random baseline)."""
    recs = records if records is not None else cohort.records
    total = 0.0
    for i, record in enumerate(recs):
        rng = np.random.default_rng([seed, i])
        _, ep_return, _ = run_episode(
            policy, record, cohort.ontology, env_config, rng, greedy=greedy
        )
        total += ep_return
    return total / len(recs)
