"""Simulated consultations between a planner-driven doctor and a record-backed
patient, connected through a pluggable semantic channel.

The channel stands where natural-language generation and understanding would
sit: the exact channel is the identity, the noisy channel flips answers at
configured rates (distortion is injected after the patient evaluates and
before the doctor's state update), and the external channel speaks a minimal
chat-completion protocol over HTTP. The doctor's state is built from
*observed* answers, so noisy channels reproduce the train/deploy
distribution shift rather than corrupting the environment itself.
"""

from __future__ import annotations

import json
import os
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cohort import Answer, PatientRecord, answer_symptom_query
from .neural import ActorCritic, Mlp, policy_value
from .ontology import Ontology
from .procedure_dsl import ProcedureGraph, RunTrace, run as run_procedure
from .screen_env import EnvConfig, apply_answer, observe, reset, valid_action_mask
from .screener import Ranking, predict_ranking


class ChannelError(RuntimeError):
    """Transport failure in an external semantic channel."""


class ExactChannel:
    """Identity channel: questions and answers pass through unchanged."""

    def render_question(self, text: str) -> str:
        return text

    def deliver_answer(self, answer: bool) -> bool:
        return bool(answer)


@dataclass(frozen=True)
class NoisyChannelConfig:
    p_neg_to_pos: float = 0.1
    p_pos_to_neg: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_neg_to_pos <= 1.0 and 0.0 <= self.p_pos_to_neg <= 1.0):
            raise ValueError("flip probabilities must lie in [0, 1]")


class NoisyChannel:
    """Answer-flipping channel modelling lossy language hops: a positive
    answer is observed negative with p_pos_to_neg, a negative one positive
    with p_neg_to_pos."""

    def __init__(self, config: NoisyChannelConfig):
        self.config = config
        self._rng = np.random.default_rng(config.seed)

    def render_question(self, text: str) -> str:
        return text

    def deliver_answer(self, answer: bool) -> bool:
        answer = bool(answer)
        if answer:
            return not (self._rng.random() < self.config.p_pos_to_neg)
        return self._rng.random() < self.config.p_neg_to_pos


class ExternalLlmChannel:
    """Chat-completion client for a real language model behind the seam.

    Reads DDX_LLM_ENDPOINT / DDX_LLM_KEY unless given explicitly; each
    render or parse hop is one HTTP request with retry and exponential
    backoff, surfacing ChannelError after the final attempt. Nothing in the
    test or acceptance suites depends on this channel being reachable.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.5,
    ):
        self.endpoint = endpoint or os.environ.get("DDX_LLM_ENDPOINT")
        if not self.endpoint:
            raise ChannelError("no endpoint: set DDX_LLM_ENDPOINT or pass endpoint=")
        self.api_key = api_key if api_key is not None else os.environ.get("DDX_LLM_KEY", "")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff

    def _complete(self, prompt: str) -> str:
        body = json.dumps({"messages": [{"role": "user", "content": prompt}]}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                request = urllib.request.Request(self.endpoint, data=body, headers=headers)
                with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return payload["choices"][0]["message"]["content"]
            except (urllib.error.URLError, OSError, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff * (2**attempt))
        raise ChannelError(f"external channel failed after {self.max_retries} attempts: {last_error}")

    def render_question(self, text: str) -> str:
        return self._complete(
            "Rephrase this clinical question in plain, friendly language, "
            f"keeping it answerable with yes or no:\n{text}"
        )

    def deliver_answer(self, answer: bool) -> bool:
        utterance = self._complete(
            "You are a patient in a consultation. Answer the doctor's last "
            f"question in one natural sentence. The truthful answer is: "
            f"{'yes' if answer else 'no'}."
        )
        parsed = self._complete(
            "Does the following patient reply mean yes or no? Reply with the "
            f"single word yes or no.\n{utterance}"
        )
        return "yes" in parsed.strip().lower()


# ---------------------------------------------------------------------------
# transcripts
# ---------------------------------------------------------------------------

DOCTOR = "doctor"
PATIENT = "patient"


@dataclass
class Turn:
    index: int
    speaker: str
    kind: str  # disclosure | question | answer | ranking | diagnosis
    text: str
    action_id: int | None = None
    node_id: str | None = None
    parsed_value: object = None


@dataclass
class Transcript:
    consultation_id: str
    turns: list[Turn] = field(default_factory=list)
    phase_markers: dict[str, int] = field(default_factory=dict)

    def add(self, speaker, kind, text, action_id=None, node_id=None, parsed_value=None):
        self.turns.append(
            Turn(
                index=len(self.turns),
                speaker=speaker,
                kind=kind,
                text=text,
                action_id=action_id,
                node_id=node_id,
                parsed_value=parsed_value,
            )
        )

    def mark_phase(self, name: str):
        self.phase_markers[name] = len(self.turns)


def transcript_errors(transcript: Transcript) -> list[str]:
    """Structural invariants: ordered indices, question/answer alternation,
    at most one diagnosis turn and only at the end."""
    errors = []
    for i, turn in enumerate(transcript.turns):
        if turn.index != i:
            errors.append(f"turn {i} carries index {turn.index}")
    pending_question = False
    for turn in transcript.turns:
        if turn.kind == "question":
            if pending_question:
                errors.append(f"turn {turn.index}: question while an answer is pending")
            pending_question = True
        elif turn.kind == "answer":
            if not pending_question:
                errors.append(f"turn {turn.index}: answer without a question")
            pending_question = False
    if pending_question:
        errors.append("transcript ends with an unanswered question")
    diag_positions = [t.index for t in transcript.turns if t.kind == "diagnosis"]
    if len(diag_positions) > 1:
        errors.append(f"multiple diagnosis turns at {diag_positions}")
    elif diag_positions and diag_positions[0] != len(transcript.turns) - 1:
        errors.append("diagnosis turn is not terminal")
    return errors


def screening_mask_violations(
    transcript: Transcript, ontology: Ontology
) -> int:
    """Replay a screening phase and count mask-discipline violations
    (repeated questions, or a child asked before its parent was observed
    confirmed). Disclosure counts as an observed confirmation."""
    violations = 0
    asked: set[int] = set()
    confirmed: set[int] = set()
    pending: int | None = None
    for turn in transcript.turns:
        if turn.kind == "disclosure":
            asked.add(turn.action_id)
            confirmed.add(turn.action_id)
        elif turn.kind == "question" and turn.action_id is not None:
            action = turn.action_id
            if action in asked:
                violations += 1
            parent = ontology.nodes[action].parent
            if parent is not None and parent not in confirmed:
                violations += 1
            asked.add(action)
            pending = action
        elif turn.kind == "answer" and pending is not None:
            if turn.parsed_value:
                confirmed.add(pending)
            pending = None
    return violations


# ---------------------------------------------------------------------------
# consultation phases
# ---------------------------------------------------------------------------


def run_screening_dialogue(
    record: PatientRecord,
    policy: ActorCritic,
    screener: Mlp | None,
    channel,
    env_config: EnvConfig,
    ontology: Ontology,
    rng: np.random.Generator,
    consultation_id: str = "c0",
    transcript: Transcript | None = None,
    state_log: list | None = None,
) -> tuple[Transcript, Ranking | None]:
    """Disclosure, N greedy questions over the observed state, then a ranking.

    The doctor tracks the channel-observed state: under a noisy channel it
    drifts from the oracle, and both the action mask and the final ranking
    input use the drifted state. Pass state_log to capture the state after
    every update (used by the channel-bisimulation checks).
    """
    t = transcript if transcript is not None else Transcript(consultation_id)
    t.mark_phase("screening")
    state = reset(record, ontology, env_config, rng)
    if state_log is not None:
        state_log.append(state)
    disclosed = int(np.flatnonzero(state.asked)[0])
    t.add(
        PATIENT,
        "disclosure",
        f"I have been experiencing {ontology.nodes[disclosed].name}.",
        action_id=disclosed,
        parsed_value=True,
    )
    for _ in range(env_config.budget):
        mask = valid_action_mask(state, ontology)
        if not mask.any():
            break
        logits, _, _ = policy_value(policy, observe(state)[None, :])
        action = int(np.argmax(np.where(mask, logits[0], -np.inf)))
        name = ontology.nodes[action].name
        utterance = channel.render_question(f"Do you experience {name}?")
        t.add(DOCTOR, "question", utterance, action_id=action)
        true_answer = answer_symptom_query(record, action) is Answer.CONFIRMED
        observed = bool(channel.deliver_answer(true_answer))
        t.add(PATIENT, "answer", "Yes." if observed else "No.", action_id=action,
              parsed_value=observed)
        state = apply_answer(
            state, action, Answer.CONFIRMED if observed else Answer.DENIED
        )
        if state_log is not None:
            state_log.append(state)
    ranking = None
    if screener is not None:
        ranking = predict_ranking(screener, observe(state))
        t.add(
            DOCTOR,
            "ranking",
            "Likely conditions, most probable first: "
            + ", ".join(str(i) for i in ranking.order[:3]),
            parsed_value=ranking.order.tolist(),
        )
    return t, ranking


def run_differential_dialogue(
    record: PatientRecord,
    graph: ProcedureGraph,
    channel,
    consultation_id: str = "c0",
    max_questions: int = 20,
    transcript: Transcript | None = None,
) -> tuple[Transcript, RunTrace]:
    """Interpret one decision procedure with transcript logging."""
    t = transcript if transcript is not None else Transcript(consultation_id)
    t.mark_phase(f"differential:{graph.disease_label}")

    def on_turn(node, utterance, observed):
        t.add(DOCTOR, "question", utterance, node_id=node.id)
        t.add(PATIENT, "answer", "Yes." if observed else "No.", node_id=node.id,
              parsed_value=observed)

    trace = run_procedure(graph, record, channel, max_questions=max_questions, on_turn=on_turn)
    return t, trace


@dataclass
class ConsultationResult:
    record_id: str
    ranking_order: list[int]
    differential: list[tuple[int, str]]  # (disease, outcome) in rank order
    final_decision: str  # confirm | exclude_all | screening_only
    confirmed_disease: int | None
    screening_questions: int
    differential_questions: dict[int, int]
    skipped_no_procedure: list[int]


def run_full_consultation(
    record: PatientRecord,
    policy: ActorCritic,
    screener: Mlp,
    procedures: dict[int, ProcedureGraph],
    channel,
    env_config: EnvConfig,
    ontology: Ontology,
    rng: np.random.Generator,
    consultation_id: str = "c0",
    k_candidates: int = 1,
) -> tuple[ConsultationResult, Transcript]:
    """Screening ranking, then differential runs over the top candidates.

    The first confirming procedure decides; candidates without a procedure
    are skipped and noted; if no top-k disease has one, the consultation is
    flagged screening-only.
    """
    transcript, ranking = run_screening_dialogue(
        record, policy, screener, channel, env_config, ontology, rng,
        consultation_id=consultation_id, transcript=Transcript(consultation_id),
    )
    screening_questions = sum(
        1 for turn in transcript.turns if turn.kind == "question"
    )
    attempted: list[tuple[int, str]] = []
    questions: dict[int, int] = {}
    skipped: list[int] = []
    decision = "screening_only"
    confirmed: int | None = None
    for disease in ranking.order[:k_candidates]:
        disease = int(disease)
        graph = procedures.get(disease)
        if graph is None:
            skipped.append(disease)
            continue
        _, trace = run_differential_dialogue(
            record, graph, channel, consultation_id, transcript=transcript
        )
        attempted.append((disease, trace.outcome))
        questions[disease] = trace.questions_asked
        decision = "exclude_all"
        if trace.outcome == "confirm":
            decision = "confirm"
            confirmed = disease
            break
    if attempted:
        outcome_text = (
            f"Diagnosis confirmed: disease {confirmed}."
            if decision == "confirm"
            else "All suspected diseases excluded."
        )
        transcript.add(DOCTOR, "diagnosis", outcome_text,
                       parsed_value={"decision": decision, "disease": confirmed})
    else:
        transcript.add(
            DOCTOR,
            "diagnosis",
            "No decision procedure available for the leading candidates.",
            parsed_value={"decision": "screening_only", "disease": None},
        )
    return (
        ConsultationResult(
            record_id=record.id,
            ranking_order=[int(i) for i in ranking.order],
            differential=attempted,
            final_decision=decision,
            confirmed_disease=confirmed,
            screening_questions=screening_questions,
            differential_questions=questions,
            skipped_no_procedure=skipped,
        ),
        transcript,
    )


def consultation_rng(seed: int, record_id: str) -> np.random.Generator:
    """Per-consultation stream derived from (seed, record id): stable under
    input reordering and parallel execution."""
    return np.random.default_rng([seed, *record_id.encode("utf-8")])


def batch_run(
    records,
    policy,
    screener,
    procedures,
    channel_factory,
    env_config: EnvConfig,
    ontology: Ontology,
    seed: int = 0,
    k_candidates: int = 1,
    parallelism: int = 1,
):
    """Run full consultations over many records; results match input order.

    channel_factory(record) builds a fresh channel per consultation so noisy
    channels stay independent across records. Per-record failures are
    collected, not raised, and surface in the error list.
    """

    def one(idx_record):
        idx, record = idx_record
        try:
            result, transcript = run_full_consultation(
                record,
                policy,
                screener,
                procedures,
                channel_factory(record),
                env_config,
                ontology,
                consultation_rng(seed, record.id),
                consultation_id=f"c{idx:06d}",
                k_candidates=k_candidates,
            )
            return idx, result, transcript, None
        except Exception as exc:  # noqa: BLE001 - aggregated per record
            return idx, None, None, f"{record.id}: {exc}"

    items = list(enumerate(records))
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            rows = list(pool.map(one, items))
    else:
        rows = [one(item) for item in items]
    rows.sort(key=lambda r: r[0])
    results = [r[1] for r in rows]
    transcripts = [r[2] for r in rows]
    errors = [r[3] for r in rows if r[3] is not None]
    return results, transcripts, errors


# ---------------------------------------------------------------------------
# transcript files: one header line, then one line per turn
# ---------------------------------------------------------------------------


def write_transcripts(transcripts: list[Transcript], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in transcripts:
            fh.write(
                json.dumps(
                    {"consultation": t.consultation_id, "phases": t.phase_markers}
                )
                + "\n"
            )
            for turn in t.turns:
                fh.write(
                    json.dumps(
                        {
                            "index": turn.index,
                            "speaker": turn.speaker,
                            "kind": turn.kind,
                            "action_id": turn.action_id,
                            "node_id": turn.node_id,
                            "text": turn.text,
                            "parsed_value": turn.parsed_value,
                        }
                    )
                    + "\n"
                )


def read_transcripts(path) -> list[Transcript]:
    transcripts: list[Transcript] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            if "consultation" in row:
                transcripts.append(
                    Transcript(row["consultation"], phase_markers=row["phases"])
                )
            else:
                transcripts[-1].turns.append(
                    Turn(
                        index=row["index"],
                        speaker=row["speaker"],
                        kind=row["kind"],
                        text=row["text"],
                        action_id=row["action_id"],
                        node_id=row["node_id"],
                        parsed_value=row["parsed_value"],
                    )
                )
    return transcripts
