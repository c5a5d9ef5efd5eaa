import json

import pytest

from ddxplan.cli import cli
from ddxplan.config import ConfigError, default_config, load_config


def test_default_config_provenance():
    config = default_config()
    assert config.get("env.budget") == 10
    assert config.provenance["env.budget"] == "default"


def test_load_config_empty_file_all_defaults(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    config = load_config(path)
    assert config.values == default_config().values
    assert all(src == "default" for src in config.provenance.values())


def test_load_config_file_values_and_provenance(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"env": {"budget": 20}, "ppo": {"gamma": 0.9}}))
    config = load_config(path)
    assert config.get("env.budget") == 20
    assert config.provenance["env.budget"] == "file"
    assert config.provenance["env.reward_variant"] == "default"


def test_load_config_unknown_key_nearest(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"env": {"budgett": 20}}))
    with pytest.raises(ConfigError, match=r"budgett.*did you mean 'budget'"):
        load_config(path)
    path.write_text(json.dumps({"enw": {}}))
    with pytest.raises(ConfigError, match=r"enw.*env"):
        load_config(path)


def test_load_config_type_mismatch(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"env": {"budget": "ten"}}))
    with pytest.raises(ConfigError, match="expected int"):
        load_config(path)


def test_flag_overrides_file_overrides_default(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"env": {"budget": 20}}))
    config = load_config(path)
    config.set_flag("env.budget", 30)
    assert config.get("env.budget") == 30
    assert config.provenance["env.budget"] == "flag"
    with pytest.raises(ConfigError):
        config.set_flag("env.nosuch", 1)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def run_cli(capsys, *argv):
    code = cli(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_cli_usage_errors(capsys):
    code, _, _ = run_cli(capsys, "no-such-command")
    assert code == 2
    code, _, _ = run_cli(capsys, "gen-ontology")  # missing --out
    assert code == 2


def test_cli_gen_ontology_and_header(tmp_path, capsys):
    out = tmp_path / "onto.tsv"
    code, stdout, _ = run_cli(
        capsys, "gen-ontology", "--first", "3", "--children", "2", "--out", str(out)
    )
    assert code == 0
    header = json.loads(stdout.splitlines()[0])
    assert header["command"] == "gen-ontology"
    assert header["config"]["ontology"]["n_first"] == 3
    assert header["provenance"]["ontology.n_first"] == "flag"
    assert header["version"]
    assert out.exists()


def test_cli_gen_cohort_determinism(tmp_path, capsys):
    onto_path = tmp_path / "onto.tsv"
    run_cli(capsys, "gen-ontology", "--first", "3", "--children", "2", "--out", str(onto_path))
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        code, _, _ = run_cli(
            capsys,
            "gen-cohort",
            "--ontology", str(onto_path),
            "--diseases", "3",
            "--size", "30",
            "--dim", "4",
            "--seed", "1",
            "--out", str(out),
        )
        assert code == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.jsonl.profiles").read_bytes() == (
        tmp_path / "b.jsonl.profiles"
    ).read_bytes()


def test_cli_procedure_check(tmp_path, capsys):
    good = tmp_path / "good.dproc"
    good.write_text(
        'procedure "p" for "0" {\n  start: n1\n'
        '  node n1 { ask: "q" when: flag("x") yes -> confirm no -> exclude }\n}\n'
    )
    code, stdout, _ = run_cli(capsys, "procedure-check", str(good))
    assert code == 0
    assert "ok" in stdout

    cyclic = tmp_path / "bad.dproc"
    cyclic.write_text(
        'procedure "p" for "0" {\n  start: n1\n'
        '  node n1 { ask: "q" when: flag("x") yes -> n2 no -> exclude }\n'
        '  node n2 { ask: "r" when: flag("y") yes -> n1 no -> confirm }\n}\n'
    )
    code, _, stderr = run_cli(capsys, "procedure-check", str(cyclic))
    assert code == 1
    assert "cycle" in stderr

    unparsable = tmp_path / "ugly.dproc"
    unparsable.write_text("procedure { nope")
    code, _, stderr = run_cli(capsys, "procedure-check", str(unparsable))
    assert code == 1
    assert "parse error" in stderr


def test_cli_missing_file_fails_cleanly(tmp_path, capsys):
    code, _, stderr = run_cli(
        capsys, "gen-cohort", "--ontology", str(tmp_path / "nope.tsv"), "--out",
        str(tmp_path / "c.jsonl"),
    )
    assert code == 1
    assert "error" in stderr


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny end-to-end CLI pipeline shared by the command tests."""
    root = tmp_path_factory.mktemp("pipeline")
    capsys = None

    def run(*argv):
        return cli(list(argv))

    onto = root / "onto.tsv"
    cohort = root / "cohort.jsonl"
    policy = root / "policy.json"
    screener = root / "screener.json"
    assert run("gen-ontology", "--first", "3", "--children", "2", "--out", str(onto)) == 0
    assert (
        run(
            "gen-cohort", "--ontology", str(onto), "--diseases", "3", "--size", "60",
            "--dim", "4", "--seed", "2", "--out", str(cohort),
        )
        == 0
    )
    config = root / "exp.json"
    config.write_text(
        json.dumps(
            {
                "env": {"budget": 3},
                "ppo": {
                    "total_steps": 200,
                    "rollout_steps": 60,
                    "minibatch_size": 32,
                    "epochs_per_update": 2,
                    "n_envs": 2,
                    "trunk_hidden": [16],
                    "head_hidden": [8],
                },
                "screener": {"hidden": [8], "max_epochs": 4},
            }
        )
    )
    assert (
        run(
            "train-policy", "--ontology", str(onto), "--cohort", str(cohort),
            "--config", str(config), "--out", str(policy), "--curve", str(root / "curve.jsonl"),
        )
        == 0
    )
    assert (
        run(
            "train-screener", "--ontology", str(onto), "--cohort", str(cohort),
            "--config", str(config), "--policy", str(policy), "--out", str(screener),
        )
        == 0
    )
    return root, onto, cohort, config, policy, screener


def test_cli_full_pipeline(pipeline, tmp_path, capsys):
    root, onto, cohort, config, policy, screener = pipeline
    metrics_out = tmp_path / "screening.jsonl"
    code, stdout, _ = run_cli(
        capsys,
        "eval-screening", "--ontology", str(onto), "--cohort", str(cohort),
        "--config", str(config), "--policy", str(policy), "--screener", str(screener),
        "--ks", "1,3", "--out", str(metrics_out),
    )
    assert code == 0
    rows = [json.loads(l) for l in metrics_out.read_text().splitlines()]
    assert [r["k"] for r in rows] == [1, 3]
    assert all(0.0 <= r["rate"] <= 1.0 for r in rows)
    assert rows[0]["rate"] <= rows[1]["rate"]

    proc = tmp_path / "d0.dproc"
    proc.write_text(
        'procedure "p" for "0" {\n  start: n1\n'
        '  node n1 { ask: "q" when: symptom("cat0") yes -> confirm no -> exclude }\n}\n'
    )
    diff_out = tmp_path / "diff.jsonl"
    report_out = tmp_path / "report.txt"
    code, _, _ = run_cli(
        capsys,
        "eval-differential", "--ontology", str(onto), "--cohort", str(cohort),
        "--config", str(config), "--procedure", str(proc), "--disease", "0",
        "--out", str(diff_out), "--report", str(report_out),
    )
    assert code == 0
    row = json.loads(diff_out.read_text().splitlines()[0])
    assert row["metric"] == "differential"
    assert 0.0 <= row["accuracy"] <= 1.0
    assert report_out.exists()

    code, stdout, _ = run_cli(capsys, "report", "--in", str(diff_out), "--format", "table")
    assert code == 0
    for name in ("success_rate", "accuracy", "precision", "recall", "f1"):
        assert name in stdout

    # consult against a procedures directory keyed by disease label
    proc_dir = tmp_path / "procs"
    proc_dir.mkdir()
    (proc_dir / "d0.dproc").write_text(proc.read_text())
    import ddxplan.cohort as cohort_mod
    from ddxplan.ontology import load_ontology

    onto_obj = load_ontology(onto)
    loaded = cohort_mod.load_cohort(cohort, onto_obj)
    record_id = loaded.records[0].id
    transcript_out = tmp_path / "t.jsonl"
    code, stdout, _ = run_cli(
        capsys,
        "consult", "--ontology", str(onto), "--cohort", str(cohort),
        "--config", str(config), "--policy", str(policy), "--screener", str(screener),
        "--procedures", str(proc_dir), "--record-id", record_id,
        "--out", str(transcript_out),
    )
    assert code == 0
    assert "decision:" in stdout
    assert transcript_out.exists()


def test_cli_eval_screening_rerun_identical(pipeline, tmp_path, capsys):
    root, onto, cohort, config, policy, screener = pipeline
    outs = []
    for name in ("one.jsonl", "two.jsonl"):
        out = tmp_path / name
        code, _, _ = run_cli(
            capsys,
            "eval-screening", "--ontology", str(onto), "--cohort", str(cohort),
            "--config", str(config), "--policy", str(policy), "--screener", str(screener),
            "--ks", "1", "--out", str(out), "--channel", "noisy",
            "--noise-neg-pos", "0.2", "--noise-pos-neg", "0.2",
        )
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
