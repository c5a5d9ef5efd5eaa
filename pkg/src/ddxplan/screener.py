"""Supervised disease screening on final episode states, plus ranking metrics.

Datasets come in four provenance variants: `policy_rollout` (final states of
greedy inquiry episodes — the deployed pipeline), `full_oracle` (every
symptom revealed), `history_only` (all symptoms unknown), and
`symptoms_only` (full oracle bits, history zeroed). Comparing classifiers
across them reproduces the information-monotonicity ordering the screening
phase is built on.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort
from .neural import (
    Mlp,
    adam_init,
    adam_step,
    backward,
    forward,
    mlp_init,
    parameters,
    policy_value,
    softmax_cross_entropy,
)
from .rl_train import random_policy
from .screen_env import (
    SLOT_CONFIRMED,
    SLOT_DENIED,
    EnvConfig,
    blank_triplets,
    observe,
    reset,
    step,
    valid_action_mask,
)

VARIANTS = ("policy_rollout", "full_oracle", "history_only", "symptoms_only")


@dataclass
class ScreeningDataset:
    observations: np.ndarray  # (n, d + 3M)
    labels: np.ndarray  # (n,)
    n_classes: int
    variant: str

    def __len__(self) -> int:
        return self.observations.shape[0]


@dataclass(frozen=True)
class ScreenerConfig:
    hidden: tuple[int, ...] = (128,)
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 80
    patience: int = 10
    seed: int = 0


@dataclass
class Ranking:
    probabilities: np.ndarray
    order: np.ndarray  # disease ids, descending probability, ties by id


def _oracle_triplets(record, n_symptoms: int) -> np.ndarray:
    t = np.zeros(3 * n_symptoms)
    slots = np.where(record.oracle_symptoms, SLOT_CONFIRMED, SLOT_DENIED)
    t[3 * np.arange(n_symptoms) + slots] = 1.0
    return t


def build_dataset(
    policy,
    cohort: Cohort,
    env_config: EnvConfig,
    variant: str,
    seed: int = 0,
    chunk_size: int = 512,
) -> ScreeningDataset:
    """Observation/label rows for one provenance variant.

    policy_rollout runs one greedy episode per record (policy=None plays the
    random baseline); per-record RNG streams make rows independent of the
    batching layout. The oracle/history variants need no policy at all.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown dataset variant {variant!r}")
    onto = cohort.ontology
    n = len(cohort.records)
    labels = np.array([rec.label for rec in cohort.records], dtype=np.int64)

    if variant == "policy_rollout":
        rows = _rollout_final_observations(policy, cohort, env_config, seed, chunk_size)
    else:
        blank = blank_triplets(onto.size)
        rows = np.zeros((n, cohort.history_dim + 3 * onto.size))
        for i, rec in enumerate(cohort.records):
            if variant == "history_only":
                rows[i] = np.concatenate([rec.history, blank])
            elif variant == "full_oracle":
                rows[i] = np.concatenate([rec.history, _oracle_triplets(rec, onto.size)])
            else:  # symptoms_only
                rows[i] = np.concatenate(
                    [np.zeros(cohort.history_dim), _oracle_triplets(rec, onto.size)]
                )
    return ScreeningDataset(
        observations=rows, labels=labels, n_classes=cohort.n_diseases, variant=variant
    )


def _rollout_final_observations(policy, cohort, env_config, seed, chunk_size):
    onto = cohort.ontology
    n = len(cohort.records)
    out = np.zeros((n, cohort.history_dim + 3 * onto.size))
    for lo in range(0, n, chunk_size):
        chunk = list(range(lo, min(lo + chunk_size, n)))
        rngs = {i: np.random.default_rng([seed, i]) for i in chunk}
        states = {
            i: reset(cohort.records[i], onto, env_config, rngs[i]) for i in chunk
        }
        active = list(chunk)
        while active:
            if policy is not None:
                obs = np.stack([observe(states[i]) for i in active])
                logits, _, _ = policy_value(policy, obs)
            still = []
            for row, i in enumerate(active):
                mask = valid_action_mask(states[i], onto)
                if not mask.any():
                    continue
                if policy is None:
                    action = random_policy(mask, rngs[i])
                else:
                    action = int(np.argmax(np.where(mask, logits[row], -np.inf)))
                states[i], _, done = step(
                    states[i], action, cohort.records[i], onto, env_config
                )
                if not done:
                    still.append(i)
            active = still
        for i in chunk:
            out[i] = observe(states[i])
    return out


def train_screener(
    dataset_train: ScreeningDataset,
    dataset_val: ScreeningDataset,
    config: ScreenerConfig = ScreenerConfig(),
) -> Mlp:
    """Cross-entropy training with early stopping on validation Top-1;
    returns the best-validation snapshot."""
    if np.unique(dataset_train.labels).size < 2:
        raise ValueError("training data has a single class")
    rng = np.random.default_rng(config.seed)
    obs_dim = dataset_train.observations.shape[1]
    sizes = [obs_dim, *config.hidden, dataset_train.n_classes]
    model = mlp_init(sizes, ["relu"] * len(config.hidden) + ["identity"], rng)
    adam_state = adam_init(parameters(model), config.learning_rate)

    best_top1 = -1.0
    best_model = copy.deepcopy(model)
    stale = 0
    n = len(dataset_train)
    for _ in range(config.max_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            x = dataset_train.observations[idx]
            y = dataset_train.labels[idx]
            logits, cache = forward(model, x)
            _, dlogits = softmax_cross_entropy(logits, y)
            grads, _ = backward(model, cache, dlogits)
            flat = [g for pair in grads for g in pair]
            adam_step(parameters(model), flat, adam_state)
        top1 = _top1_accuracy(model, dataset_val)
        if top1 > best_top1 + 1e-12:
            best_top1 = top1
            best_model = copy.deepcopy(model)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best_model


def _top1_accuracy(model: Mlp, dataset: ScreeningDataset) -> float:
    logits, _ = forward(model, dataset.observations)
    return float((logits.argmax(axis=1) == dataset.labels).mean())


def predict_ranking(classifier: Mlp, observation: np.ndarray) -> Ranking:
    """Softmax probabilities with a stable, lowest-index-first tie-break."""
    obs = np.asarray(observation, dtype=np.float64)
    if obs.ndim != 1 or obs.shape[0] != classifier.input_dim:
        raise ValueError(
            f"observation width {obs.shape} does not match classifier "
            f"input {classifier.input_dim}"
        )
    logits, _ = forward(classifier, obs[None, :])
    shifted = logits[0] - logits[0].max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    return Ranking(probabilities=probs, order=order)


def rank_dataset(classifier: Mlp, dataset: ScreeningDataset) -> list[Ranking]:
    logits, _ = forward(classifier, dataset.observations)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    orders = np.argsort(-probs, axis=1, kind="stable")
    return [Ranking(probabilities=p, order=o) for p, o in zip(probs, orders)]


def top_k_hit_rate(rankings: list[Ranking], labels, k: int) -> float:
    """Fraction of cases whose true label appears in the first k entries."""
    labels = np.asarray(labels)
    if len(rankings) == 0:
        raise ValueError("no rankings to score")
    if len(rankings) != labels.shape[0]:
        raise ValueError("rankings and labels must align")
    n_classes = rankings[0].order.shape[0]
    if not 1 <= k <= n_classes:
        raise ValueError(f"k must lie in [1, {n_classes}]")
    hits = sum(1 for r, lab in zip(rankings, labels) if lab in r.order[:k])
    return hits / len(rankings)
