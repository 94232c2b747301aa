import json

import pytest

from taxoguide.cli import ConfigError, RunConfig, main

from conftest import ONET_PATH, read_jsonl

RECORDS = [
    {"instance_id": "a", "text": "registered nurse, mercy hospital"},
    {"instance_id": "b", "text": "software developer, acme corp"},
    {"instance_id": "c", "text": "truck driver, fedex"},
]


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "records.jsonl").write_text("".join(json.dumps(r) + "\n" for r in RECORDS))
    cfg = {
        "seed": 11,
        "taxonomy": str(ONET_PATH),
        "embedder": {"kind": "hashing", "dim": 64},
        "llm": {"kind": "mock"},
        "cache": "cache.jsonl",
        "out_dir": "runs",
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    return tmp_path


def only_run(root, prefix):
    (d,) = [p for p in (root / "runs").iterdir() if p.name.startswith(prefix)]
    return d


def test_config_paths_resolve_against_config_dir(workspace):
    cfg = RunConfig.load(workspace / "cfg.json")
    assert cfg.cache == workspace / "cache.jsonl"
    assert cfg.out_dir == workspace / "runs"


def test_config_validation(workspace):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"taxonomy": str(ONET_PATH)})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": 1, "taxonomy": "missing.txt"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": 1, "taxonomy": str(ONET_PATH), "colour": "blue"})


def test_classify_mock(workspace, capsys):
    rc = main(["classify", "--config", str(workspace / "cfg.json"), "--input", str(workspace / "records.jsonl"), "--mock"])
    assert rc == 0
    run = only_run(workspace, "classify-")
    rows = read_jsonl(run / "results.jsonl")
    assert [r["instance_id"] for r in rows] == ["a", "b", "c"]
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["complete"] and manifest["seed"] == 11
    assert (run / "usage.jsonl").exists() and (run / "timings.jsonl").exists()


def test_runs_never_overwrite_and_are_reproducible(workspace):
    args = ["classify", "--config", str(workspace / "cfg.json"), "--input", str(workspace / "records.jsonl"), "--mock"]
    assert main(args) == 0
    (workspace / "cache.jsonl").unlink()
    assert main(args) == 0
    runs = sorted(p for p in (workspace / "runs").iterdir())
    assert len(runs) == 2
    assert (runs[0] / "results.jsonl").read_bytes() == (runs[1] / "results.jsonl").read_bytes()


def test_dry_run_makes_no_calls(workspace):
    rc = main(["classify", "--config", str(workspace / "cfg.json"), "--input", str(workspace / "records.jsonl"), "--dry-run"])
    assert rc == 0
    run = only_run(workspace, "classify-")
    prompts = read_jsonl(run / "prompts.jsonl")
    assert len(prompts) == 3 and prompts[0]["prompt"].endswith("Job title and company: registered nurse, mercy hospital")
    assert not (workspace / "cache.jsonl").exists()


def test_stage_flags(workspace):
    rc = main(["classify", "--config", str(workspace / "cfg.json"), "--input", str(workspace / "records.jsonl"),
               "--mock", "--stages", "no_rerank", "--unit", "label", "--n", "3"])
    assert rc == 0
    rows = read_jsonl(only_run(workspace, "classify-") / "results.jsonl")
    assert all(r["final"] == [c["entity_id"] for c in r["retrieved"]][:3] for r in rows if r["status"] == "ok")


def test_missing_credentials_exit_3(workspace, monkeypatch):
    monkeypatch.delenv("TAXOGUIDE_NO_SUCH_KEY", raising=False)
    cfg = json.loads((workspace / "cfg.json").read_text())
    cfg["llm"] = {"kind": "openai-compatible", "api_key_env": "TAXOGUIDE_NO_SUCH_KEY"}
    (workspace / "live.json").write_text(json.dumps(cfg))
    rc = main(["classify", "--config", str(workspace / "live.json"), "--input", str(workspace / "records.jsonl")])
    assert rc == 3


def test_validation_errors_exit_1(workspace, capsys):
    assert main(["classify", "--config", str(workspace / "cfg.json"), "--input", str(workspace / "nope.jsonl"), "--mock"]) == 1
    assert main(["classify", "--config", str(workspace / "cfg.json"), "--input", str(workspace / "records.jsonl"),
                 "--mock", "--m", "3", "--n", "5"]) == 1
    assert main(["assess", "--config", str(workspace / "cfg.json"), "--mock", "--variants", "complete_recall:CT2"]) == 1
    bad = workspace / "bad.txt"
    bad.write_text("O*NET-SOC Code\tTitle\tDescription\n11-1011.00\tChief Executives\tLead.\n1-1\tX\tY\n")
    assert main(["ingest", "--taxonomy", str(bad), "--format", "onet", "--out", str(workspace / "runs")]) == 1
    assert "row 3" in capsys.readouterr().err


def test_ingest_and_index(workspace):
    assert main(["ingest", "--taxonomy", str(ONET_PATH), "--format", "onet", "--expected-count", "1016",
                 "--out", str(workspace / "runs")]) == 0
    archive = only_run(workspace, "ingest-") / "taxonomy.json"
    assert len(json.loads(archive.read_text())["entities"]) == 1016
    assert main(["index", "--taxonomy", str(archive), "--format", "archive", "--unit", "label",
                 "--out", str(workspace / "runs")]) == 0
    (index,) = only_run(workspace, "index-").glob("*.index")
    assert index.name == "onet-soc-2019.label.index"


def test_assess_judge_metrics_cost(workspace, capsys):
    cfg = str(workspace / "cfg.json")
    assert main(["assess", "--config", cfg, "--mock", "--variants", "complete_recall:TC8", "recognition:TC2"]) == 0
    row = json.loads((only_run(workspace, "assess-") / "assessment_matrix.json").read_text())["row"]
    assert set(row) == {"model", "complete_recall:TC8", "recognition:TC2", "average"}

    assert main(["classify", "--config", cfg, "--input", str(workspace / "records.jsonl"), "--mock"]) == 0
    run = only_run(workspace, "classify-")
    assert main(["judge", "--config", cfg, "--mock", "--input", str(workspace / "records.jsonl"), "--results", str(run)]) == 0
    verdicts = read_jsonl(only_run(workspace, "judge-") / "verdicts.jsonl")
    assert len(verdicts) == 3 and all(len(v["per_run_selections"]) == 3 for v in verdicts)

    truth = workspace / "truth.jsonl"
    truth.write_text('{"instance_id": "a", "labels": ["29-1141.00"]}\n{"instance_id": "b", "labels": ["15-1252.00"]}\n'
                     '{"instance_id": "c", "labels": ["53-3032.00"]}\n')
    assert main(["metrics", "--results", str(run / "results.jsonl"), "--truth", str(truth), "--taxonomy", str(ONET_PATH),
                 "--out", str(workspace / "runs")]) == 0
    rows = json.loads((only_run(workspace, "metrics-") / "metrics.json").read_text())
    assert set(rows[0]) == {"method", "model", "RP@3", "RP@5", "RP@10"}

    assert main(["cost", "--usage", str(run / "usage.jsonl"), "--n-records", "3", "--extra-seconds", "embedding=0.3",
                 "--out", str(workspace / "runs")]) == 0
    report = json.loads((only_run(workspace, "cost-") / "cost_report.json").read_text())
    assert report["n_records"] == 3 and "embedding" in report["per_stage"]



def test_metrics_on_run_dirs_without_taxonomy(workspace):
    cfg = str(workspace / "cfg.json")
    assert main(["classify", "--config", cfg, "--input", str(workspace / "records.jsonl"), "--mock"]) == 0
    run = only_run(workspace, "classify-")
    assert main(["judge", "--config", cfg, "--mock", "--input", str(workspace / "records.jsonl"), "--results", str(run)]) == 0
    verdicts = only_run(workspace, "judge-") / "verdicts.jsonl"
    judged = json.loads((only_run(workspace, "judge-") / "precision_at_1.json").read_text())

    # results hold bare ids, verdicts hold "Title (id)"; both must meet on the id
    assert main(["metrics", "--results", str(run), "--verdicts", str(verdicts), "--out", str(workspace / "runs")]) == 0
    rows = json.loads((only_run(workspace, "metrics-") / "metrics.json").read_text())
    assert rows[0]["P@1"] == pytest.approx(judged[0]["P@1"])
    assert rows[0]["P@1"] > 0


def test_all_variants_emit_eight_columns(workspace):
    assert main(["assess", "--config", str(workspace / "cfg.json"), "--mock", "--concurrency", "4"]) == 0
    run = only_run(workspace, "assess-")
    row = json.loads((run / "assessment_matrix.json").read_text())["row"]
    assert len(row) == 1 + 8 + 1
    assert len((run / "assessment_tasks.jsonl").read_text().splitlines()) == 8 * 1016
