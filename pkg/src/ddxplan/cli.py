"""Command-line surface: generation, training, evaluation, and reporting.

Every run prints a run-log header (resolved config with provenance, seed,
artifact version) as its first stdout line; all randomness flows from the
seeds written there, so re-running a pipeline with the same header
reproduces its output files byte for byte at parallelism 1.

Exit codes: 0 success, 1 validation or diagnostic failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .cohort import (
    CohortConfig,
    CohortError,
    generate_cohort,
    load_cohort,
    save_cohort,
    split,
)
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .dialogue import (
    ChannelError,
    ExactChannel,
    ExternalLlmChannel,
    NoisyChannel,
    NoisyChannelConfig,
    run_full_consultation,
    run_screening_dialogue,
    write_transcripts,
)
from .metrics import build_error_report, differential_metrics, render_metrics_table
from .neural import WeightsFormatError, load_weights, save_weights
from .ontology import (
    OntologyError,
    generate_synthetic_ontology,
    load_ontology,
    save_ontology,
)
from .procedure_dsl import (
    ParseError,
    is_valid,
    load_procedure,
    run as run_procedure,
    validate,
)
from .rl_train import PpoConfig, train_policy
from .screen_env import EnvConfig
from .screener import (
    ScreenerConfig,
    build_dataset,
    top_k_hit_rate,
    train_screener,
)

USAGE_ERROR = 2
FAILURE = 1


def _channel_factory(args, config: ExperimentConfig):
    kind = args.channel if args.channel is not None else config.get("channel.kind")
    if kind == "exact":
        return lambda record: ExactChannel()
    if kind == "noisy":
        neg = args.noise_neg_pos if args.noise_neg_pos is not None else config.get(
            "channel.p_neg_to_pos"
        )
        pos = args.noise_pos_neg if args.noise_pos_neg is not None else config.get(
            "channel.p_pos_to_neg"
        )
        base_seed = config.get("channel.seed")
        return lambda record: NoisyChannel(
            NoisyChannelConfig(
                p_neg_to_pos=neg,
                p_pos_to_neg=pos,
                seed=int(
                    np.random.default_rng([base_seed, *record.id.encode()]).integers(2**31)
                ),
            )
        )
    if kind == "external":
        channel = ExternalLlmChannel()
        return lambda record: channel
    raise ConfigError(f"unknown channel kind {kind!r}")


def _resolved_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else default_config()
    for dotted, attr in getattr(args, "_flag_map", {}).items():
        value = getattr(args, attr)
        if value is not None:
            config.set_flag(dotted, value)
    return config


def _emit_header(command: str, config: ExperimentConfig, seed, extra=None) -> None:
    header = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config.values,
        "provenance": config.provenance,
    }
    if extra:
        header.update(extra)
    print(json.dumps(header, sort_keys=True))


def _flag(parser, flag, dotted, type_, helptext):
    """Register a flag that overrides one config key (flag > file > default)."""
    attr = flag.lstrip("-").replace("-", "_")
    parser.add_argument(flag, type=type_, default=None, help=helptext, dest=attr)
    flag_map = getattr(parser, "_ddx_flag_map", {})
    flag_map[dotted] = attr
    parser._ddx_flag_map = flag_map
    parser.set_defaults(_flag_map=flag_map)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddxplan",
        description="conversational-diagnosis planners and simulation harness",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-ontology", help="generate a synthetic symptom hierarchy")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _flag(p, "--first", "ontology.n_first", int, "first-layer categories")
    _flag(p, "--children", "ontology.children_per_first", int, "children per category")
    _flag(p, "--seed", "ontology.seed", int, "generator seed")

    p = sub.add_parser("gen-cohort", help="generate a synthetic patient cohort")
    p.add_argument("--ontology", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _flag(p, "--diseases", "cohort.n_diseases", int, "number of diseases")
    _flag(p, "--size", "cohort.size", int, "number of records")
    _flag(p, "--dim", "cohort.history_dim", int, "history vector width")
    _flag(p, "--seed", "cohort.seed", int, "cohort seed")
    _flag(p, "--denial-prob", "cohort.denial_prob", float, "explicit denial rate")

    p = sub.add_parser("train-policy", help="PPO-train the inquiry policy")
    p.add_argument("--ontology", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None, help="training-curve jsonl path")
    p.add_argument("--config", default=None)
    _flag(p, "--budget", "env.budget", int, "questions per episode")
    _flag(p, "--reward", "env.reward_variant", str, "reward variant P or PN")
    _flag(p, "--steps", "ppo.total_steps", int, "total environment steps")
    _flag(p, "--seed", "ppo.seed", int, "training seed")

    p = sub.add_parser("train-screener", help="train the screening classifier")
    p.add_argument("--ontology", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--policy", default=None, help="policy weights (omit for random inquiry)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _flag(p, "--variant", "screener.variant", str, "dataset provenance variant")
    _flag(p, "--budget", "env.budget", int, "questions per episode")
    _flag(p, "--seed", "screener.seed", int, "training seed")

    p = sub.add_parser("eval-screening", help="top-k hit rates over simulated dialogues")
    p.add_argument("--ontology", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--screener", required=True)
    p.add_argument("--out", default=None, help="metrics jsonl path (default stdout)")
    p.add_argument("--ks", default="1,3,5,10")
    p.add_argument("--channel", choices=["exact", "noisy", "external"], default=None)
    p.add_argument("--noise-neg-pos", type=float, default=None)
    p.add_argument("--noise-pos-neg", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--limit", type=int, default=None, help="evaluate at most N records")
    _flag(p, "--budget", "env.budget", int, "questions per episode")
    _flag(p, "--seed", "channel.seed", int, "channel seed")

    p = sub.add_parser("procedure-check", help="parse and validate a procedure file")
    p.add_argument("file")
    p.add_argument("--ontology", default=None)
    p.add_argument("--findings", default=None, help="comma-separated finding vocabulary")
    p.add_argument("--config", default=None)

    p = sub.add_parser("eval-differential", help="run one procedure over a cohort")
    p.add_argument("--ontology", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--procedure", required=True)
    p.add_argument("--disease", type=int, required=True, help="positive label")
    p.add_argument("--out", default=None, help="metrics jsonl path (default stdout)")
    p.add_argument("--report", default=None, help="error-report text path")
    p.add_argument("--channel", choices=["exact", "noisy", "external"], default=None)
    p.add_argument("--noise-neg-pos", type=float, default=None)
    p.add_argument("--noise-pos-neg", type=float, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--config", default=None)
    _flag(p, "--seed", "channel.seed", int, "channel seed")

    p = sub.add_parser("consult", help="full two-phase consultation for one record")
    p.add_argument("--ontology", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--screener", required=True)
    p.add_argument("--procedures", required=True, help="directory of .dproc files")
    p.add_argument("--record-id", required=True)
    p.add_argument("--out", default=None, help="transcript jsonl path")
    p.add_argument("--channel", choices=["exact", "noisy", "external"], default=None)
    p.add_argument("--noise-neg-pos", type=float, default=None)
    p.add_argument("--noise-pos-neg", type=float, default=None)
    p.add_argument("--config", default=None)
    _flag(p, "--k", "consultation.k_candidates", int, "candidates to test")
    _flag(p, "--budget", "env.budget", int, "questions per episode")
    _flag(p, "--seed", "channel.seed", int, "consultation seed")

    p = sub.add_parser("report", help="render line-delimited metrics")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--format", choices=["table", "jsonl"], default="table")
    p.add_argument("--config", default=None)
    return parser


def _env_config(config: ExperimentConfig) -> EnvConfig:
    env = config.section("env")
    return EnvConfig(
        budget=env["budget"],
        reward_variant=env["reward_variant"],
        pn_denial_reward=env["pn_denial_reward"],
    )


def _split_cohort(cohort, config: ExperimentConfig):
    fractions = tuple(config.get("split.fractions"))
    return split(cohort, fractions, seed=config.get("split.seed"))


def cmd_gen_ontology(args) -> int:
    config = _resolved_config(args)
    onto = generate_synthetic_ontology(
        config.get("ontology.n_first"),
        config.get("ontology.children_per_first"),
        config.get("ontology.seed"),
    )
    _emit_header("gen-ontology", config, config.get("ontology.seed"))
    save_ontology(onto, args.out)
    print(f"wrote ontology with {onto.n_first} categories, {onto.size} symptoms to {args.out}")
    return 0


def cmd_gen_cohort(args) -> int:
    config = _resolved_config(args)
    onto = load_ontology(args.ontology)
    section = config.section("cohort")
    cohort_config = CohortConfig(
        n_diseases=section["n_diseases"],
        size=section["size"],
        history_dim=section["history_dim"],
        seed=section["seed"],
        shared_category_rates=section["shared_category_rates"],
        category_presence=tuple(section["category_presence"]),
        n_signature_children=section["n_signature_children"],
        n_signature_categories=section["n_signature_categories"],
        signature_first_prob=tuple(section["signature_first_prob"]),
        background_first_prob=tuple(section["background_first_prob"]),
        signature_child_prob=tuple(section["signature_child_prob"]),
        background_child_prob=tuple(section["background_child_prob"]),
        denial_prob=section["denial_prob"],
        history_scale=section["history_scale"],
        history_noise=section["history_noise"],
    )
    _emit_header("gen-cohort", config, section["seed"])
    cohort = generate_cohort(onto, cohort_config)
    save_cohort(cohort, args.out)
    print(f"wrote {len(cohort)} records over {cohort.n_diseases} diseases to {args.out}")
    return 0


def cmd_train_policy(args) -> int:
    config = _resolved_config(args)
    onto = load_ontology(args.ontology)
    cohort = load_cohort(args.cohort, onto)
    train, _, _ = _split_cohort(cohort, config)
    ppo_section = config.section("ppo")
    ppo_config = PpoConfig(
        gamma=ppo_section["gamma"],
        gae_lambda=ppo_section["gae_lambda"],
        clip_eps=ppo_section["clip_eps"],
        epochs_per_update=ppo_section["epochs_per_update"],
        minibatch_size=ppo_section["minibatch_size"],
        learning_rate=ppo_section["learning_rate"],
        entropy_coef=ppo_section["entropy_coef"],
        value_coef=ppo_section["value_coef"],
        n_envs=ppo_section["n_envs"],
        rollout_steps=ppo_section["rollout_steps"],
        total_steps=ppo_section["total_steps"],
        seed=ppo_section["seed"],
        trunk_hidden=tuple(ppo_section["trunk_hidden"]),
        head_hidden=tuple(ppo_section["head_hidden"]),
    )
    _emit_header("train-policy", config, ppo_config.seed)
    policy, curve = train_policy(train, _env_config(config), ppo_config)
    save_weights(policy, args.out)
    if args.curve:
        with open(args.curve, "w", encoding="utf-8") as fh:
            for row in curve:
                fh.write(json.dumps(row) + "\n")
    print(
        f"trained policy for {curve[-1]['steps']} steps, "
        f"final mean return {curve[-1]['mean_return']:.3f}; weights at {args.out}"
    )
    return 0


def cmd_train_screener(args) -> int:
    config = _resolved_config(args)
    onto = load_ontology(args.ontology)
    cohort = load_cohort(args.cohort, onto)
    train, val, _ = _split_cohort(cohort, config)
    policy = load_weights(args.policy) if args.policy else None
    section = config.section("screener")
    variant = section["variant"]
    env_config = _env_config(config)
    _emit_header("train-screener", config, section["seed"], {"variant": variant})
    ds_train = build_dataset(policy, train, env_config, variant, seed=section["seed"])
    ds_val = build_dataset(policy, val, env_config, variant, seed=section["seed"] + 1)
    model = train_screener(
        ds_train,
        ds_val,
        ScreenerConfig(
            hidden=tuple(section["hidden"]),
            learning_rate=section["learning_rate"],
            batch_size=section["batch_size"],
            max_epochs=section["max_epochs"],
            patience=section["patience"],
            seed=section["seed"],
        ),
    )
    save_weights(model, args.out)
    print(f"trained screener ({variant}) to {args.out}")
    return 0


def _write_metrics_lines(rows, out_path):
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_eval_screening(args) -> int:
    config = _resolved_config(args)
    onto = load_ontology(args.ontology)
    cohort = load_cohort(args.cohort, onto)
    _, _, test = _split_cohort(cohort, config)
    records = test.records[: args.limit] if args.limit else test.records
    policy = load_weights(args.policy)
    screener = load_weights(args.screener)
    env_config = _env_config(config)
    factory = _channel_factory(args, config)
    seed = config.get("channel.seed")
    _emit_header("eval-screening", config, seed, {"n_records": len(records)})

    rankings = []
    labels = []
    for i, record in enumerate(records):
        rng = np.random.default_rng([seed, *record.id.encode()])
        _, ranking = run_screening_dialogue(
            record, policy, screener, factory(record), env_config, onto, rng,
            consultation_id=f"c{i:06d}",
        )
        rankings.append(ranking)
        labels.append(record.label)
    ks = [int(k) for k in str(args.ks).split(",") if k]
    rows = [
        {"metric": "top_k_hit_rate", "k": k, "rate": top_k_hit_rate(rankings, labels, k)}
        for k in ks
    ]
    _write_metrics_lines(rows, args.out)
    return 0


def cmd_procedure_check(args) -> int:
    _resolved_config(args)
    try:
        graph = load_procedure(args.file)
    except ParseError as exc:
        print(f"{args.file}: parse error: {exc}", file=sys.stderr)
        return FAILURE
    onto = load_ontology(args.ontology) if args.ontology else None
    vocab = set(args.findings.split(",")) if args.findings else None
    diags = validate(graph, onto, vocab)
    for diag in diags:
        print(f"{args.file}: {diag}", file=sys.stderr)
    if not is_valid(diags):
        return FAILURE
    print(f"{args.file}: ok ({len(graph.nodes)} nodes, start {graph.start})")
    return 0


def cmd_eval_differential(args) -> int:
    config = _resolved_config(args)
    onto = load_ontology(args.ontology)
    cohort = load_cohort(args.cohort, onto)
    _, _, test = _split_cohort(cohort, config)
    records = test.records[: args.limit] if args.limit else test.records
    graph = load_procedure(args.procedure)
    diags = validate(graph, onto)
    if not is_valid(diags):
        for diag in diags:
            print(f"{args.procedure}: {diag}", file=sys.stderr)
        return FAILURE
    factory = _channel_factory(args, config)
    _emit_header(
        "eval-differential", config, config.get("channel.seed"),
        {"disease": args.disease, "n_records": len(records)},
    )
    outcomes, labels, traces, ids = [], [], [], []
    for record in records:
        trace = run_procedure(graph, record, factory(record))
        outcomes.append(trace.outcome)
        labels.append(record.label == args.disease)
        traces.append(trace)
        ids.append(record.id)
    metrics = differential_metrics(outcomes, labels)
    _write_metrics_lines([{"metric": "differential", **metrics.as_dict()}], args.out)
    if args.report:
        report = build_error_report(outcomes, labels, traces, ids)
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.render())
    if not args.out:
        sys.stdout.write(render_metrics_table(metrics))
    return 0


def cmd_consult(args) -> int:
    import os

    config = _resolved_config(args)
    onto = load_ontology(args.ontology)
    cohort = load_cohort(args.cohort, onto)
    policy = load_weights(args.policy)
    screener = load_weights(args.screener)
    procedures = {}
    for name in sorted(os.listdir(args.procedures)):
        if not name.endswith(".dproc"):
            continue
        graph = load_procedure(os.path.join(args.procedures, name))
        diags = validate(graph, onto)
        if not is_valid(diags):
            for diag in diags:
                print(f"{name}: {diag}", file=sys.stderr)
            return FAILURE
        try:
            procedures[int(graph.disease_label)] = graph
        except ValueError:
            print(
                f"{name}: disease label {graph.disease_label!r} is not an integer label",
                file=sys.stderr,
            )
            return FAILURE
    record = next((r for r in cohort.records if r.id == args.record_id), None)
    if record is None:
        print(f"record {args.record_id!r} not found in cohort", file=sys.stderr)
        return FAILURE
    factory = _channel_factory(args, config)
    seed = config.get("channel.seed")
    _emit_header("consult", config, seed, {"record": record.id})
    result, transcript = run_full_consultation(
        record,
        policy,
        screener,
        procedures,
        factory(record),
        _env_config(config),
        onto,
        np.random.default_rng([seed, *record.id.encode()]),
        consultation_id=record.id,
        k_candidates=config.get("consultation.k_candidates"),
    )
    if args.out:
        write_transcripts([transcript], args.out)
    for turn in transcript.turns:
        print(f"[{turn.speaker}] {turn.text}")
    print(
        f"decision: {result.final_decision}"
        + (f" (disease {result.confirmed_disease})" if result.confirmed_disease is not None else "")
    )
    return 0


def cmd_report(args) -> int:
    _resolved_config(args)
    with open(args.infile, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if args.format == "jsonl":
        for row in rows:
            print(json.dumps(row, sort_keys=True))
        return 0
    for row in rows:
        if row.get("metric") == "differential":
            from .metrics import DifferentialMetrics

            metrics = DifferentialMetrics(
                success_rate=row["success_rate"],
                accuracy=row["accuracy"],
                precision=row["precision"],
                recall=row["recall"],
                f1=row["f1"],
                tp=row["tp"],
                fp=row["fp"],
                tn=row["tn"],
                fn=row["fn"],
                n_failures=row["n_failures"],
            )
            sys.stdout.write(render_metrics_table(metrics))
        else:
            pairs = ", ".join(f"{k}={v}" for k, v in sorted(row.items()))
            print(pairs)
    return 0


COMMANDS = {
    "gen-ontology": cmd_gen_ontology,
    "gen-cohort": cmd_gen_cohort,
    "train-policy": cmd_train_policy,
    "train-screener": cmd_train_screener,
    "eval-screening": cmd_eval_screening,
    "procedure-check": cmd_procedure_check,
    "eval-differential": cmd_eval_differential,
    "consult": cmd_consult,
    "report": cmd_report,
}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code in (0, None) else USAGE_ERROR
    if not hasattr(args, "_flag_map"):
        args._flag_map = {}
    try:
        return COMMANDS[args.command](args)
    except (
        OntologyError,
        CohortError,
        ConfigError,
        ParseError,
        WeightsFormatError,
        ChannelError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FAILURE


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
