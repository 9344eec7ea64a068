from __future__ import annotations

import hashlib
import json
import subprocess
import sys

import pytest

from conftest import DEMO_SCOPE, DEMO_STORE
from tracellm.cli import build_parser, main, resolve_config


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os

    for key in list(os.environ):
        if key.startswith("TRACELLM_"):
            monkeypatch.delenv(key)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def replay(*argv):
    return [*argv, "--fixtures", str(DEMO_STORE)]


def test_help_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "tracellm.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "report" in proc.stdout
    for cmd in ["scope", "tree", "rank", "subgraph", "extract", "train", "eval", "report", "benchmark"]:
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0


def test_scope_requires_address(capsys):
    code, _, err = run(capsys, *replay("scope", "--from-block", "1", "--to-block", "2"))
    assert code == 2 and "--address" in err
    code, _, err = run(capsys, *replay("scope", "--address", "0x12", "--from-block", "1", "--to-block", "2"))
    assert code == 2 and "--address" in err


def test_scope_and_tree_and_subgraph(capsys, demo):
    code, out, _ = run(capsys, *replay("scope", "--scope", str(DEMO_SCOPE)))
    assert code == 0 and demo.implementation in json.loads(out)["addresses"]
    tx = demo.attack_txs[0]
    code, out, _ = run(capsys, *replay("tree", "--tx", tx))
    tree = json.loads(out)
    assert code == 0 and tree["records"][0]["method"] == "0xc0ffee01"
    leaf = tree["paths"][0]["path_key"].split(":")[1]
    code, out, _ = run(capsys, *replay("subgraph", "--tx", tx, "--leaf", leaf, "-k", "2"))
    doc = json.loads(out)
    assert code == 0 and doc["k"] == 2 and doc["stats"]["node_count"] == len(doc["nodes"])
    code, _, err = run(capsys, *replay("subgraph", "--tx", tx, "--leaf", "0"))
    assert code == 2 and "not a leaf" in err


def test_rank_cutoff(capsys, demo):
    code, out, _ = run(capsys, *replay("rank", "--scope", str(DEMO_SCOPE), "--cutoff", "1"))
    ranked = json.loads(out)["ranked"]
    assert code == 0 and len(ranked) == 1
    assert ranked[0]["path_key"].split(":")[0] == demo.attack_txs[0]


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.conf"
    cfg_file.write_text('# settings\ncutoff = 5\nk = 2\nout = "from file"\njobs = 3  # inline\n')
    parser = build_parser()
    args = parser.parse_args(["rank", "--scope", "x", "--config", str(cfg_file), "--cutoff", "7"])
    cfg = resolve_config(args, {"TRACELLM_K": "3", "TRACELLM_CUTOFF": "6"})
    assert (cfg.cutoff, cfg.k, cfg.out, cfg.jobs) == (7, 3, "from file", 3)


def test_config_errors(capsys, tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("cutof = 5\n")
    code, _, err = run(capsys, *replay("rank", "--scope", str(DEMO_SCOPE), "--config", str(bad)))
    assert code == 2 and "unknown key 'cutof'" in err
    code, _, err = run(capsys, *replay("rank", "--scope", str(DEMO_SCOPE), "--cutoff", "0"))
    assert code == 2 and "cutoff" in err


def test_no_data_source(capsys):
    code, _, err = run(capsys, "tree", "--tx", "0x" + "ab" * 32)
    assert code == 2 and "no data source" in err


def test_benchmark_train_eval(capsys, tmp_path):
    out = str(tmp_path)
    code, _, _ = run(capsys, "benchmark", "--incidents", "4", "--seed", "3", "--out", out)
    assert code == 0
    data = str(tmp_path / "benchmark.jsonl")
    digests = []
    for name in ("m1.json", "m2.json"):
        code, stdout, _ = run(capsys, "train", "--dataset", data, "--output", name, "--out", out)
        assert code == 0
        digests.append(json.loads(stdout)["sha256"])
        assert digests[-1] == hashlib.sha256((tmp_path / name).read_bytes()).hexdigest()
    assert digests[0] == digests[1]
    code, stdout, err = run(capsys, "eval", "--dataset", data, "--out", out)
    assert code == 0 and "mean recall@20" in err
    assert [r["scorer"] for r in json.loads(stdout)["results"]] == ["full", "semantic"]


def test_malformed_dataset_reports_line(capsys, tmp_path):
    data = tmp_path / "d.jsonl"
    data.write_text('{"incident_id": "a", "tx_hash": "0x1", "path_key": "k", "sig": [], "label": "attack"}\n'
                    "{oops\n")
    code, _, err = run(capsys, "train", "--dataset", str(data), "--out", str(tmp_path))
    assert code == 2 and "line 2" in err


def test_extract_replay_refine_miss_keeps_decompiled(capsys, tmp_path, demo):
    dec = tmp_path / "d.py"
    dec.write_text("import sys\nprint('pseudo', len(sys.stdin.read()))\n")
    code, out, _ = run(capsys, *replay("extract", "--address", demo.proxy, "--decompiler", f"{sys.executable} {dec}",
                                       "--refine", "replay", "--replay-dir", str(tmp_path / "r"),
                                       "--out", str(tmp_path)))
    art = json.loads(out)[0]
    assert code == 0 and art["kind"] == "decompiled" and "refine" in art["diagnostics"][0]
    # replay runs stamp provenance with the fixture recording time, not the wall clock
    assert art["provenance"][0]["at"] == json.loads((DEMO_STORE / "store.json").read_text())["recorded_at"]


def test_live_gateway_without_key(capsys, tmp_path):
    code, _, err = run(capsys, *replay("report", "--scope", str(DEMO_SCOPE), "--gateway", "live",
                                       "--out", str(tmp_path)))
    assert code == 4 and "API key" in err
    prompt = (tmp_path / "prompt.txt").read_text()
    assert "sweepToken" in prompt and (tmp_path / "context.json").is_file()


def test_replay_gateway_round_trip(capsys, tmp_path, monkeypatch, demo):
    from tracellm import gateway as gw

    answer = json.dumps({"attacker_addresses": [demo.attacker], "victim_addresses": [demo.proxy],
                         "exploitation_mechanism": "unprotected initialize", "attack_execution": ["a", "b"]})

    class Fake(gw.HttpGateway):
        def send(self, prompt, params=None):
            return answer

    monkeypatch.setattr("tracellm.cli.HttpGateway", Fake)
    base = replay("report", "--scope", str(DEMO_SCOPE), "--gateway", "replay", "--out", str(tmp_path))
    code, first, _ = run(capsys, *base, "--record")
    assert code == 0 and json.loads(first)["exploitation_mechanism"] == "unprotected initialize"
    monkeypatch.setattr("tracellm.cli.HttpGateway", gw.HttpGateway)
    code, second, _ = run(capsys, *base)
    assert code == 0 and second == first
