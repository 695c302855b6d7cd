from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

from afl.cli import main
from afl.config import ConfigError, build_resources, load_config, parse_config
from afl.evalbench import recommendation_cases
from afl.recmodel import load_artifact, top_k
from afl.synthetic import make_synthetic, write_log


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    write_log(make_synthetic(n_users=40, n_items=120, cluster_size=10, min_len=8, max_len=20, seed=3), root / "data")
    cfg = {
        "datasets": {"tiny": {"interactions": str(root / "data" / "interactions.tsv"), "nouns": "music"}},
        "dataset": "tiny",
        "eval_split": "all",
        "rec_model": {"kind": "mf-pairwise", "hyperparameters": {"epochs": 5}},
        "reward_model": {"kind": "mf-pairwise", "hyperparameters": {"epochs": 5}},
        "artifacts_dir": str(root / "artifacts"),
        "output_dir": str(root / "runs"),
        "concurrency": 2,
    }
    (root / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    return root


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_writes_reloadable_deterministic_artifacts(workspace, capsys):
    cfg = str(workspace / "cfg.yaml")
    code, out, _ = _run(capsys, "train", "--config", cfg)
    assert code == 0 and "final_loss=" in out
    path = workspace / "artifacts" / "tiny" / "rec_model-mf-pairwise-seed0.json"
    first = path.read_bytes()
    load_artifact(path)
    assert _run(capsys, "train", "--config", cfg)[0] == 0
    assert path.read_bytes() == first


def test_train_missing_dataset_names_path(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"interactions_path": str(tmp_path / "nope.tsv")}))
    code, _, err = _run(capsys, "train", "--config", str(tmp_path / "c.yaml"))
    assert code == 2 and "nope.tsv" in err


@pytest.mark.parametrize(
    "doc,where",
    [({"max_epoch": 0}, "max_epoch"), ({"rec_model": {"kind": "mf-pairwise", "colour": 1}}, "rec_model.colour"),
     ({"typo_key": 1}, "typo_key"), ({"user_backend": {"kind": "http", "settings": {"port": "x"}}}, "user_backend.settings.port")],
)
def test_malformed_config_exit_2(tmp_path, capsys, doc, where):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(doc))
    code, _, err = _run(capsys, "eval-rec", "--config", str(tmp_path / "c.yaml"))
    assert code == 2 and f"config error at {where}:" in err


def test_config_semantic_errors():
    with pytest.raises(ConfigError):
        parse_config({"split_ratios": [0.5, 0.3, 0.1]})
    with pytest.raises(ConfigError):
        parse_config({"rec_backend": {"kind": "http", "settings": {"base_url": "http://x"}}})


def test_eval_rec_prints_oracle_value(workspace, capsys):
    cfg, registry = load_config(workspace / "cfg.yaml")
    res = build_resources(cfg, registry)
    cases, _ = recommendation_cases(cfg, res)
    expected = sum(c.truth in top_k(res.rec_model, c.history, c.candidates, 4) for c in cases) / len(cases)
    code, out, _ = _run(capsys, "eval-rec", "--config", str(workspace / "cfg.yaml"), "--run-id", "rec")
    assert code == 0 and f"hit_ratio_at_1={expected:.4f}" in out.splitlines()
    run_dir = workspace / "runs" / "rec"
    assert {p.name for p in run_dir.iterdir()} == {"config.json", "transcript.jsonl", "eval-rec.metrics.json", "eval-rec.report.json"}


def test_replay_reproduces_metrics(workspace, capsys):
    cfg = str(workspace / "cfg.yaml")
    assert _run(capsys, "eval-rec", "--config", cfg, "--run-id", "live")[0] == 0
    assert _run(capsys, "eval-rec", "--config", cfg, "--run-id", "again", "--replay", str(workspace / "runs" / "live"))[0] == 0
    a = (workspace / "runs" / "live" / "eval-rec.metrics.json").read_bytes()
    b = (workspace / "runs" / "again" / "eval-rec.metrics.json").read_bytes()
    assert a == b


def test_audit_position_summary(workspace, capsys):
    code, out, _ = _run(capsys, "audit-position", "--config", str(workspace / "cfg.yaml"), "--run-id", "pos")
    assert code == 0
    for line in out.splitlines():
        values = {cell.split("=")[1] for cell in line.split(": ")[1].split()}
        assert len(values) == 1


def test_other_commands_run(workspace, capsys):
    cfg = str(workspace / "cfg.yaml")
    for argv in (["eval-sim", "--k", "9", "--init-fraction", "0.5"], ["rerank"], ["rerank", "--ranker", "user-agent"],
                 ["ablate"], ["ablate", "--no-rec-model"], ["audit-popularity"]):
        code, out, err = _run(capsys, argv[0], "--config", cfg, *argv[1:])
        assert code == 0, err
        assert out.strip()


def _rank2_user(workspace):
    cfg, registry = load_config(workspace / "cfg.yaml")
    res = build_resources(cfg, registry)
    for case in recommendation_cases(cfg, res)[0]:
        if top_k(res.rec_model, case.history, case.candidates, 2)[1] == case.truth:
            return case.user
    pytest.skip("no rank-2 user in the tiny dataset")


def test_run_rank2_transcript(workspace, capsys):
    user = _rank2_user(workspace)
    cfg = str(workspace / "cfg.yaml")
    code, out, _ = _run(capsys, "run", user, "--config", cfg, "--verbose", "--run-id", "one")
    lines = out.splitlines()
    assert code == 0
    assert "  D_u: reject" in lines[lines.index("round 1"):lines.index("round 2")]
    assert "  D_u: accept" in lines[lines.index("round 2"):]
    assert lines[-1].startswith("LoopOutcome(") and "iterations_used=2" in lines[-1]
    code, replayed, _ = _run(capsys, "run", user, "--config", cfg, "--verbose", "--replay", str(workspace / "runs" / "one" / "transcript.jsonl"))
    assert code == 0 and replayed == out
    code, quiet, _ = _run(capsys, "run", user, "--config", cfg)
    assert quiet.splitlines() == [lines[-1]]


def test_run_unknown_user(workspace, capsys):
    code, _, err = _run(capsys, "run", "ghost", "--config", str(workspace / "cfg.yaml"))
    assert code == 2 and "ghost" in err


def test_replay_miss_is_runtime_failure(workspace, capsys, tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    code, _, err = _run(capsys, "eval-rec", "--config", str(workspace / "cfg.yaml"), "--replay", str(tmp_path / "empty.jsonl"))
    assert code == 1 and "error" in err


def test_make_synthetic(tmp_path, capsys):
    code, out, _ = _run(capsys, "make-synthetic", str(tmp_path / "d"), "--users", "10", "--items", "60")
    assert code == 0 and (tmp_path / "d" / "catalog.tsv").is_file()


def test_bundled_dataset_is_default():
    cfg, registry = load_config(None)
    entry = registry[cfg.dataset]
    assert Path(entry.interactions).is_file()
    lines = Path(entry.interactions).read_text().splitlines()
    assert len({l.split("\t")[0] for l in lines}) == 200
    assert len(Path(entry.catalog).read_text().splitlines()) == 500


def test_report_snapshot_has_protocol_defaults(workspace):
    doc = json.loads((workspace / "runs" / "rec" / "eval-rec.report.json").read_text())
    assert doc["config"]["split_ratios"] == [0.8, 0.1, 0.1]
    assert doc["provenance"]["split_sizes"] == {"train": 32, "validation": 4, "test": 4}
    assert set(doc["provenance"]["artifact_hashes"]) == {"rec_model", "reward_model", "fallback_scorer"}
