"""Fixed-budget symptom-inquiry environment for the screening phase.

The observation is the patient's history vector concatenated with one
tri-state triplet per symptom, laid out [denied, confirmed, unknown] so
that unknown = [0,0,1], confirmed = [0,1,0], denied = [1,0,0]. Episodes
open with the patient disclosing one positive first-layer symptom, then the
agent asks up to `budget` questions. Actions are gated: a second-layer
symptom may only be asked after its parent category is confirmed, and no
question repeats. Confirmed answers pay reward 1; under the PN variant an
explicitly denied symptom additionally pays a small reward.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._core import action_mask
from .cohort import Answer, PatientRecord, answer_symptom_query
from .ontology import Ontology

SLOT_DENIED = 0
SLOT_CONFIRMED = 1
SLOT_UNKNOWN = 2

REWARD_P = "P"
REWARD_PN = "PN"


class MaskedActionError(RuntimeError):
    """An action outside the valid-action mask reached the environment."""


@dataclass(frozen=True)
class EnvConfig:
    budget: int = 10
    reward_variant: str = REWARD_P
    pn_denial_reward: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.reward_variant not in (REWARD_P, REWARD_PN):
            raise ValueError(f"unknown reward variant {self.reward_variant!r}")


@dataclass(frozen=True)
class ScreeningState:
    history: np.ndarray  # (d,)
    triplets: np.ndarray  # (3M,) float64, one-hot per symptom
    asked: np.ndarray  # (M,) bool
    turn: int

    @property
    def n_symptoms(self) -> int:
        return self.asked.shape[0]


def blank_triplets(n_symptoms: int) -> np.ndarray:
    t = np.zeros(3 * n_symptoms, dtype=np.float64)
    t[SLOT_UNKNOWN::3] = 1.0
    return t


def reset(
    record: PatientRecord,
    ontology: Ontology,
    config: EnvConfig,
    rng: np.random.Generator,
) -> ScreeningState:
    """Start an episode: everything unknown except one disclosed positive
    first-layer symptom, chosen uniformly and marked as already asked."""
    positives = np.flatnonzero(record.oracle_symptoms[: ontology.n_first])
    if positives.size == 0:
        raise ValueError(f"record {record.id} has no positive first-layer symptom")
    disclosed = int(positives[rng.integers(positives.size)])
    triplets = blank_triplets(ontology.size)
    _set_slot(triplets, disclosed, SLOT_CONFIRMED)
    asked = np.zeros(ontology.size, dtype=bool)
    asked[disclosed] = True
    return ScreeningState(
        history=np.asarray(record.history, dtype=np.float64),
        triplets=triplets,
        asked=asked,
        turn=0,
    )


def _set_slot(triplets: np.ndarray, symptom_id: int, slot: int) -> None:
    base = 3 * symptom_id
    triplets[base : base + 3] = 0.0
    triplets[base + slot] = 1.0


def valid_action_mask(state: ScreeningState, ontology: Ontology) -> np.ndarray:
    """mask[j] = unasked and (first-layer or parent confirmed)."""
    return action_mask(state.asked, state.triplets, ontology.parent_index)


def apply_answer(state: ScreeningState, action: int, answer: Answer) -> ScreeningState:
    """Record an answer for one symptom; shared by env steps and dialogues."""
    triplets = state.triplets.copy()
    _set_slot(triplets, action, SLOT_CONFIRMED if answer is Answer.CONFIRMED else SLOT_DENIED)
    asked = state.asked.copy()
    asked[action] = True
    return replace(state, triplets=triplets, asked=asked, turn=state.turn + 1)


def step(
    state: ScreeningState,
    action: int,
    record: PatientRecord,
    ontology: Ontology,
    config: EnvConfig,
) -> tuple[ScreeningState, float, bool]:
    """Ask one symptom. Masked actions are a caller bug and raise."""
    mask = valid_action_mask(state, ontology)
    if not 0 <= action < state.n_symptoms or not mask[action]:
        raise MaskedActionError(
            f"action {action} violates the mask at turn {state.turn} "
            "(asked twice, or child before parent confirmation)"
        )
    answer = answer_symptom_query(record, action)
    next_state = apply_answer(state, action, answer)
    reward = 1.0 if answer is Answer.CONFIRMED else 0.0
    if (
        config.reward_variant == REWARD_PN
        and answer is Answer.DENIED
        and record.explicit_denials[action]
    ):
        reward = config.pn_denial_reward
    done = next_state.turn >= config.budget
    if not done and not valid_action_mask(next_state, ontology).any():
        # tiny ontologies can exhaust the action space before the budget
        done = True
    return next_state, reward, done


def observe(state: ScreeningState) -> np.ndarray:
    """Network input: [history, triplets]; pure function of the state."""
    return np.concatenate([state.history, state.triplets])
