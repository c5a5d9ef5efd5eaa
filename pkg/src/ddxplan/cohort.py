"""Synthetic patient cohorts: records, disease profiles, and the Bayes oracle.

A cohort stands in for structured admission data. Each record carries the
ground-truth symptom bit-vector that the patient agent answers from, a
disjoint explicit-denial mask, a history feature vector that carries label
signal, named clinical findings for the differential phase, and the primary
diagnosis label. Profiles are retained so the exact Bayes posterior under
the generative model can serve as an accuracy oracle.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ontology import Ontology


class Answer(enum.Enum):
    CONFIRMED = "confirmed"
    DENIED = "denied"
    UNKNOWN = "unknown"


class CohortError(ValueError):
    pass


@dataclass(eq=False)
class PatientRecord:
    id: str
    label: int
    oracle_symptoms: np.ndarray
    explicit_denials: np.ndarray
    history: np.ndarray
    findings: dict[str, float] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and np.array_equal(self.oracle_symptoms, other.oracle_symptoms)
            and np.array_equal(self.explicit_denials, other.explicit_denials)
            and np.array_equal(self.history, other.history)
            and self.findings == other.findings
        )


@dataclass(eq=False)
class DiseaseProfile:
    """Generative parameters for one disease.

    child_cond_probs is indexed by symptom id (first-layer slots unused);
    a child disease bit can only be set when its parent's bit is set.
    finding_dists maps finding name to (mean, std); std 0 means constant.
    """

    label: int
    prior: float
    first_layer_probs: np.ndarray
    child_cond_probs: np.ndarray
    denial_prob: float
    history_mean: np.ndarray
    history_noise: float
    finding_dists: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class Cohort:
    ontology: Ontology
    records: list[PatientRecord]
    profiles: list[DiseaseProfile]
    n_diseases: int
    history_dim: int
    seed: int = 0

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class CohortConfig:
    """Cohort shape plus profile randomization bounds.

    Two generative layouts. The default ("shared categories") gives every
    disease the same first-layer presence rates — categories behave like
    coarse body systems with no class signal of their own — and plants each
    disease's signature in a handful of specific second-layer symptoms, so
    diagnostic evidence must be mined behind the hierarchy gate. Setting
    shared_category_rates=False instead gives each disease its own
    high-probability signature categories (children follow their parent's
    signature status). History vectors are class means plus isotropic
    noise either way, so history carries label signal without any text
    embedding dependency.
    """

    n_diseases: int = 60
    size: int = 10000
    history_dim: int = 16
    seed: int = 0
    shared_category_rates: bool = False
    category_presence: tuple[float, float] = (0.2, 0.45)
    n_signature_children: int = 6
    n_signature_categories: int = 3
    signature_first_prob: tuple[float, float] = (0.35, 0.65)
    background_first_prob: tuple[float, float] = (0.04, 0.12)
    signature_child_prob: tuple[float, float] = (0.55, 0.85)
    background_child_prob: tuple[float, float] = (0.005, 0.03)
    denial_prob: float = 0.1
    history_scale: float = 0.3
    history_noise: float = 1.0

    def validate(self) -> None:
        if self.n_diseases < 2:
            raise CohortError("need at least 2 diseases")
        if self.size < self.n_diseases:
            raise CohortError("cohort size must be >= number of diseases")
        if self.history_dim < 1:
            raise CohortError("history_dim must be >= 1")
        if self.n_signature_categories < 1 or self.n_signature_children < 0:
            raise CohortError("signature counts must be positive")
        for name in (
            "category_presence",
            "signature_first_prob",
            "background_first_prob",
            "signature_child_prob",
            "background_child_prob",
        ):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi <= 1.0):
                raise CohortError(f"{name} bounds must satisfy 0 <= lo <= hi <= 1")
        if not 0.0 <= self.denial_prob <= 1.0:
            raise CohortError("denial_prob must be a probability")
        if self.history_noise < 0 or self.history_scale < 0:
            raise CohortError("history scales must be non-negative")


def generate_profiles(ontology: Ontology, config: CohortConfig, rng: np.random.Generator):
    """Draw one DiseaseProfile per disease from the config bounds."""
    n_first, size = ontology.n_first, ontology.size
    priors = rng.uniform(0.5, 1.5, config.n_diseases)
    priors /= priors.sum()
    shared_first = rng.uniform(*config.category_presence, n_first)
    n_second = size - n_first
    profiles = []
    for label in range(config.n_diseases):
        child = np.zeros(size)
        if config.shared_category_rates:
            first = shared_first.copy()
            child[n_first:] = rng.uniform(*config.background_child_prob, n_second)
            if n_second:
                n_sig = min(config.n_signature_children, n_second)
                signature = rng.choice(n_second, size=n_sig, replace=False) + n_first
                child[signature] = rng.uniform(*config.signature_child_prob, n_sig)
        else:
            n_sig = min(config.n_signature_categories, n_first)
            signature = rng.choice(n_first, size=n_sig, replace=False)
            first = rng.uniform(*config.background_first_prob, n_first)
            first[signature] = rng.uniform(*config.signature_first_prob, n_sig)
            child[n_first:] = rng.uniform(*config.background_child_prob, n_second)
            sig_pool = [
                sid
                for cat in signature
                for sid in ontology.nodes[int(cat)].children
            ]
            if sig_pool and config.n_signature_children:
                n_sig_children = min(config.n_signature_children, len(sig_pool))
                chosen = rng.choice(len(sig_pool), size=n_sig_children, replace=False)
                for idx in chosen:
                    child[sig_pool[int(idx)]] = rng.uniform(*config.signature_child_prob)
        profiles.append(
            DiseaseProfile(
                label=label,
                prior=float(priors[label]),
                first_layer_probs=first,
                child_cond_probs=child,
                denial_prob=config.denial_prob,
                history_mean=rng.normal(0.0, config.history_scale, config.history_dim),
                history_noise=config.history_noise,
            )
        )
    return profiles


def _sample_record(
    ontology: Ontology, profile: DiseaseProfile, rec_id: str, rng: np.random.Generator
) -> PatientRecord:
    n_first, size = ontology.n_first, ontology.size
    first_bits = rng.random(n_first) < profile.first_layer_probs
    while not first_bits.any():
        # initial disclosure requires a positive first-layer symptom
        first_bits = rng.random(n_first) < profile.first_layer_probs
    bits = np.zeros(size, dtype=bool)
    bits[:n_first] = first_bits
    if size > n_first:
        parent_present = bits[ontology.parent_index[n_first:]]
        draws = rng.random(size - n_first)
        bits[n_first:] = parent_present & (draws < profile.child_cond_probs[n_first:])
    denials = (rng.random(size) < profile.denial_prob) & ~bits
    history = profile.history_mean + profile.history_noise * rng.standard_normal(
        profile.history_mean.shape[0]
    )
    findings = {}
    for name in sorted(profile.finding_dists):
        mean, std = profile.finding_dists[name]
        findings[name] = float(mean if std == 0 else rng.normal(mean, std))
    return PatientRecord(
        id=rec_id,
        label=profile.label,
        oracle_symptoms=bits,
        explicit_denials=denials,
        history=history,
        findings=findings,
    )


def generate_cohort_from_profiles(
    ontology: Ontology,
    profiles: list[DiseaseProfile],
    size: int,
    seed: int,
    rng: np.random.Generator | None = None,
) -> Cohort:
    """Sample `size` records from explicit profiles (labels follow priors)."""
    priors = np.array([p.prior for p in profiles])
    if abs(priors.sum() - 1.0) > 1e-9:
        raise CohortError(f"profile priors sum to {priors.sum():.6f}, expected 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    labels = rng.choice(len(profiles), size=size, p=priors)
    records = [
        _sample_record(ontology, profiles[label], f"p{i:06d}", rng)
        for i, label in enumerate(labels)
    ]
    return Cohort(
        ontology=ontology,
        records=records,
        profiles=profiles,
        n_diseases=len(profiles),
        history_dim=profiles[0].history_mean.shape[0],
        seed=seed,
    )


def generate_cohort(ontology: Ontology, config: CohortConfig) -> Cohort:
    """Deterministic synthetic cohort: profiles then records from one seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    profiles = generate_profiles(ontology, config, rng)
    return generate_cohort_from_profiles(ontology, profiles, config.size, config.seed, rng=rng)


def split(
    cohort: Cohort,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> tuple[Cohort, Cohort, Cohort]:
    """Stratified train/validation/test partition.

    Global split sizes follow largest-remainder rounding of the fractions;
    per label, each split holds within one record of its exact share.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CohortError(f"fractions must sum to 1, got {sum(fractions)}")
    if any(f < 0 for f in fractions):
        raise CohortError("fractions must be non-negative")
    n = len(cohort.records)
    if n < 3:
        raise CohortError("cohort too small to split (need >= 3 records)")

    rng = np.random.default_rng(seed)
    targets = _largest_remainder(n, fractions)

    by_label: dict[int, list[int]] = {}
    for idx, rec in enumerate(cohort.records):
        by_label.setdefault(rec.label, []).append(idx)
    labels = sorted(by_label)
    for lab in labels:
        perm = rng.permutation(len(by_label[lab]))
        by_label[lab] = [by_label[lab][i] for i in perm]

    # per-label largest-remainder allocation, then nudge to exact global sizes
    alloc = {lab: _largest_remainder(len(by_label[lab]), fractions) for lab in labels}
    _rebalance(alloc, targets, by_label, fractions)

    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for lab in labels:
        pos = 0
        for s in range(3):
            take = alloc[lab][s]
            parts[s].extend(by_label[lab][pos : pos + take])
            pos += take

    out = []
    for member_ids in parts:
        recs = [cohort.records[i] for i in sorted(member_ids)]
        out.append(
            Cohort(
                ontology=cohort.ontology,
                records=recs,
                profiles=cohort.profiles,
                n_diseases=cohort.n_diseases,
                history_dim=cohort.history_dim,
                seed=cohort.seed,
            )
        )
    return out[0], out[1], out[2]


def _largest_remainder(n: int, fractions) -> list[int]:
    exact = [n * f for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(fractions)), key=lambda s: exact[s] - counts[s], reverse=True)
    for k in range(n - sum(counts)):
        counts[order[k % len(order)]] += 1
    return counts


def _rebalance(alloc, targets, by_label, fractions) -> None:
    """Move single records between splits until global sizes match targets,
    never letting a label drift more than one record from its exact share."""
    labels = sorted(alloc)

    def surplus(s):
        return sum(alloc[lab][s] for lab in labels) - targets[s]

    for _ in range(10 * (len(labels) + 3) + 10):
        over = [s for s in range(3) if surplus(s) > 0]
        under = [s for s in range(3) if surplus(s) < 0]
        if not over:
            return
        s, s2 = over[0], under[0]
        moved = _try_move(alloc, labels, by_label, fractions, s, s2)
        if not moved:
            # route through the third split
            third = ({0, 1, 2} - {s, s2}).pop()
            if not _try_move(alloc, labels, by_label, fractions, s, third):
                raise AssertionError("split rebalancing failed to converge")
    raise AssertionError("split rebalancing failed to converge")


def _try_move(alloc, labels, by_label, fractions, src, dst) -> bool:
    for lab in labels:
        n_lab = len(by_label[lab])
        if alloc[lab][src] > 0 and alloc[lab][src] >= n_lab * fractions[src] - 1e-9:
            if alloc[lab][dst] <= n_lab * fractions[dst] + 1e-9:
                alloc[lab][src] -= 1
                alloc[lab][dst] += 1
                return True
    return False


def answer_symptom_query(record: PatientRecord, symptom_id: int) -> Answer:
    """Patient answer for one symptom: present bits confirm, all else denies."""
    if not 0 <= symptom_id < record.oracle_symptoms.shape[0]:
        raise IndexError(f"symptom id {symptom_id} out of range")
    return Answer.CONFIRMED if record.oracle_symptoms[symptom_id] else Answer.DENIED


def answer_finding_query(record: PatientRecord, finding_name: str, predicate) -> bool:
    """Evaluate a finding predicate; absent findings answer their default.

    The predicate is any object with evaluate_value(value) and a
    missing_answer attribute (a validated procedure atom qualifies). The
    default default is False: an unrecorded finding reads as normal.
    """
    if finding_name in record.findings:
        return bool(predicate.evaluate_value(record.findings[finding_name]))
    return bool(predicate.missing_answer)


def bayes_posterior(
    profiles: list[DiseaseProfile],
    evidence: dict[int, Answer],
    *,
    ontology: Ontology,
    history: np.ndarray | None = None,
) -> tuple[np.ndarray, bool]:
    """Exact posterior over diseases given tri-state symptom evidence.

    Children are handled jointly with their parent category: within each
    first-layer group the parent bit is marginalized when unobserved, so
    sibling dependence is respected. When the evidence contains a confirmed
    symptom it also implies the record passed the at-least-one-positive-
    category acceptance rule, and the per-disease acceptance probability is
    divided out. An optional history vector contributes its Gaussian
    likelihood. Returns (posterior, impossible_evidence_flag); impossible
    evidence falls back to the uniform distribution with the flag set.
    """
    observed = {
        sid: ans for sid, ans in evidence.items() if ans is not Answer.UNKNOWN
    }
    for sid in observed:
        if not 0 <= sid < ontology.size:
            raise IndexError(f"evidence symptom id {sid} out of range")

    by_parent: dict[int, list[int]] = {}
    for sid in observed:
        parent = ontology.nodes[sid].parent
        group = sid if parent is None else parent
        by_parent.setdefault(group, []).append(sid)

    any_confirmed = any(a is Answer.CONFIRMED for a in observed.values())

    n = len(profiles)
    priors = np.array([p.prior for p in profiles])
    first_probs = np.stack([p.first_layer_probs for p in profiles])
    child_probs = np.stack([p.child_cond_probs for p in profiles])

    with np.errstate(divide="ignore"):
        log_post = np.where(priors > 0.0, np.log(np.maximum(priors, 1e-300)), -np.inf)
        for group in sorted(by_parent):
            p_parent = first_probs[:, group]
            child_sids = [s for s in by_parent[group] if s != group]
            if child_sids:
                confirmed = np.array(
                    [observed[s] is Answer.CONFIRMED for s in child_sids]
                )
                q = child_probs[:, child_sids]
                given_present = np.prod(np.where(confirmed, q, 1.0 - q), axis=1)
                given_absent = 0.0 if confirmed.any() else 1.0
            else:
                given_present = np.ones(n)
                given_absent = 1.0
            parent_state = observed.get(group)
            weight = np.zeros(n)
            if parent_state is not Answer.CONFIRMED:
                weight += (1.0 - p_parent) * given_absent
            if parent_state is not Answer.DENIED:
                weight += p_parent * given_present
            log_post += np.where(weight > 0.0, np.log(np.maximum(weight, 1e-300)), -np.inf)
        if any_confirmed:
            # evidence with a confirmed symptom implies the record passed the
            # at-least-one-positive-category acceptance rule
            accept = 1.0 - np.prod(1.0 - first_probs, axis=1)
            log_post = np.where(
                accept > 0.0, log_post - np.log(np.maximum(accept, 1e-300)), -np.inf
            )
    if history is not None:
        sigmas = np.array([p.history_noise for p in profiles])
        if (sigmas <= 0.0).any():
            raise CohortError("history likelihood needs positive history_noise")
        h = np.asarray(history, dtype=np.float64)
        means = np.stack([p.history_mean for p in profiles])
        resid = (h[None, :] - means) / sigmas[:, None]
        log_post += -0.5 * (resid**2).sum(axis=1) - h.shape[0] * np.log(sigmas)

    if not np.isfinite(log_post).any():
        return np.full(n, 1.0 / n), True
    log_post -= log_post[np.isfinite(log_post)].max()
    post = np.where(np.isfinite(log_post), np.exp(log_post), 0.0)
    post /= post.sum()
    return post, False


# ---------------------------------------------------------------------------
# serialization: line-delimited records with a JSON header, profiles sibling
# ---------------------------------------------------------------------------


def profiles_path_for(path) -> str:
    return f"{path}.profiles"


def save_cohort(cohort: Cohort, path, include_profiles: bool = True) -> None:
    header = {
        "M": cohort.ontology.size,
        "F": cohort.ontology.n_first,
        "D": cohort.n_diseases,
        "d": cohort.history_dim,
        "seed": cohort.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in cohort.records:
            row = {
                "id": rec.id,
                "label": rec.label,
                "symptoms": np.flatnonzero(rec.oracle_symptoms).tolist(),
                "denials": np.flatnonzero(rec.explicit_denials).tolist(),
                "history": rec.history.tolist(),
                "findings": {k: rec.findings[k] for k in sorted(rec.findings)},
            }
            fh.write(json.dumps(row) + "\n")
    if include_profiles and cohort.profiles:
        save_profiles(cohort.profiles, profiles_path_for(path))


def save_profiles(profiles: list[DiseaseProfile], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for prof in profiles:
            row = {
                "label": prof.label,
                "prior": prof.prior,
                "first_layer_probs": prof.first_layer_probs.tolist(),
                "child_cond_probs": prof.child_cond_probs.tolist(),
                "denial_prob": prof.denial_prob,
                "history_mean": prof.history_mean.tolist(),
                "history_noise": prof.history_noise,
                "finding_dists": {
                    k: list(prof.finding_dists[k]) for k in sorted(prof.finding_dists)
                },
            }
            fh.write(json.dumps(row) + "\n")


def load_profiles(path) -> list[DiseaseProfile]:
    profiles = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            profiles.append(
                DiseaseProfile(
                    label=row["label"],
                    prior=row["prior"],
                    first_layer_probs=np.array(row["first_layer_probs"]),
                    child_cond_probs=np.array(row["child_cond_probs"]),
                    denial_prob=row["denial_prob"],
                    history_mean=np.array(row["history_mean"]),
                    history_noise=row["history_noise"],
                    finding_dists={k: tuple(v) for k, v in row["finding_dists"].items()},
                )
            )
    return profiles


def load_cohort(path, ontology: Ontology, profiles_path=None) -> Cohort:
    """Read a cohort file back; hierarchy violations warn rather than fail
    (externally supplied data may not mark parents of confirmed children)."""
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header["M"] != ontology.size or header["F"] != ontology.n_first:
            raise CohortError(
                f"cohort was built for M={header['M']}, F={header['F']}; "
                f"ontology has M={ontology.size}, F={ontology.n_first}"
            )
        records = []
        violations = 0
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            bits = np.zeros(ontology.size, dtype=bool)
            bits[row["symptoms"]] = True
            denials = np.zeros(ontology.size, dtype=bool)
            denials[row["denials"]] = True
            if (bits & denials).any():
                raise CohortError(f"record {row['id']}: denial overlaps confirmed symptom")
            child_ok = bits[ontology.parent_index[ontology.n_first :]]
            if (bits[ontology.n_first :] & ~child_ok).any():
                violations += 1
            records.append(
                PatientRecord(
                    id=row["id"],
                    label=row["label"],
                    oracle_symptoms=bits,
                    explicit_denials=denials,
                    history=np.array(row["history"], dtype=np.float64),
                    findings=dict(row["findings"]),
                )
            )
    if violations:
        warnings.warn(
            f"{violations} record(s) violate hierarchy consistency "
            "(confirmed child under absent parent); loaded as-is",
            stacklevel=2,
        )
    profiles = []
    candidate = profiles_path or profiles_path_for(path)
    try:
        profiles = load_profiles(candidate)
    except FileNotFoundError:
        if profiles_path is not None:
            raise
    return Cohort(
        ontology=ontology,
        records=records,
        profiles=profiles,
        n_diseases=header["D"],
        history_dim=header["d"],
        seed=header["seed"],
    )
