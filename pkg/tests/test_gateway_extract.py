from __future__ import annotations

import json
import shutil
import sys

import pytest

from helpers import addr
from tracellm.chain_access import ChainAccess, FixtureStore
from tracellm.errors import DecompileError, GatewayError
from tracellm.extract import ArtifactKind, Extractor, decompile, refine, render_refine_prompt
from tracellm.gateway import HttpGateway, MockGateway, ReplayGateway



class FakeResp:
    def __init__(self, status, body):
        self.status_code, self.body = status, body

    def raise_for_status(self):
        import requests
        if self.status_code >= 400:
            raise requests.HTTPError(str(self.status_code))

    def json(self):
        return self.body


class FakeSession:
    def __init__(self, resp):
        self.resp, self.sent = resp, []

    def post(self, url, **kw):
        self.sent.append(kw)
        return self.resp


def test_mock_gateway_records_prompts():
    g = MockGateway(lambda p: p.upper())
    assert g.send("abc") == "ABC" and g.prompts == ["abc"]


def test_replay_gateway_records_then_replays(tmp_path):
    inner = MockGateway("answer")
    rec = ReplayGateway(tmp_path, inner)
    assert rec.send("q", {"temperature": 0}) == "answer"
    replay = ReplayGateway(tmp_path)
    assert replay.send("q", {"temperature": 0}) == "answer"
    with pytest.raises(GatewayError) as exc:
        replay.send("other")
    assert exc.value.prompt == "other"


def test_http_gateway_config_errors_and_success():
    with pytest.raises(GatewayError, match="API key"):
        HttpGateway("http://x", None, "m").send("p")
    with pytest.raises(GatewayError, match="model"):
        HttpGateway("http://x", "k", None).send("p")
    s = FakeSession(FakeResp(200, {"choices": [{"message": {"content": "hi"}}]}))
    g = HttpGateway("http://x", "k", "m", session=s)
    assert g.send("p", {"temperature": 0.0}) == "hi"
    body = s.sent[0]["json"]
    assert body["model"] == "m" and body["temperature"] == 0.0 and body["max_tokens"] == 2000
    bad = HttpGateway("http://x", "k", "m", session=FakeSession(FakeResp(500, {})))
    with pytest.raises(GatewayError) as exc:
        bad.send("p")
    assert exc.value.prompt == "p"


def script(tmp_path, body: str) -> str:
    p = tmp_path / "dec.py"
    p.write_text(body)
    return f"{sys.executable} {p}"


def test_decompile_stdin_and_placeholders(tmp_path):
    echo = script(tmp_path, "import sys\nprint('got', sys.stdin.read() if len(sys.argv) < 2 else sys.argv[1])\n")
    assert decompile(b"\x60\x01", echo) == "got 0x6001\n"
    assert decompile(b"\x60\x01", echo + " {bytecode}") == "got 0x6001\n"
    cat = script(tmp_path, "import sys\nprint(open(sys.argv[1]).read())\n")
    assert decompile(b"\xff", cat + " {bytecode_file}") == "0xff\n"


def test_decompile_failures(tmp_path):
    with pytest.raises(DecompileError, match="no decompiler"):
        decompile(b"\x00", "")
    with pytest.raises(DecompileError, match="exited with 3"):
        decompile(b"\x00", script(tmp_path, "import sys\nsys.exit(3)\n"))
    with pytest.raises(DecompileError, match="timed out"):
        decompile(b"\x00", script(tmp_path, "import time\ntime.sleep(5)\n"), timeout=0.3)
    with pytest.raises(DecompileError, match="cannot run"):
        decompile(b"\x00", "/nonexistent/decompiler")


@pytest.mark.skipif(shutil.which("panoramix") is None, reason="panoramix not installed")
def test_panoramix_on_tiny_contract():
    out = decompile(bytes.fromhex("6080604052348015600f57600080fd5b50"), "panoramix {bytecode}", timeout=120)
    assert isinstance(out, str)


def test_refine_falls_back_on_gateway_error(tmp_path):
    assert refine("code", MockGateway("better")) == "better"
    assert refine("code", ReplayGateway(tmp_path)) == "code"
    assert "PSEUDO" in render_refine_prompt("PSEUDO")


def test_extractor_prefers_verified_source(demo_chain, demo):
    art = Extractor(demo_chain).extract(demo.token)
    assert art.kind is ArtifactKind.VERIFIED_SOURCE and "contract" in art.text


def test_extractor_decompiles_and_refines(demo_chain, demo, tmp_path):
    dec = script(tmp_path, "import sys\nprint('def f(): pass  #', sys.stdin.read()[:10])\n")
    clock = lambda: "2024-01-01T00:00:00Z"  # noqa: E731
    ex = Extractor(demo_chain, dec, gateway=MockGateway(lambda p: "refined"), cache_dir=tmp_path / "c", clock=clock)
    art = ex.extract(demo.proxy)
    assert art.kind is ArtifactKind.REFINED_DECOMPILED and art.text == "refined"
    assert [s["step"] for s in art.provenance] == ["bytecode", "decompile", "refine"]
    # second call comes from the cache even with a broken decompiler
    ex2 = Extractor(demo_chain, "/nonexistent", cache_dir=tmp_path / "c", clock=clock)
    assert ex2.extract(demo.proxy).to_dict() == art.to_dict()


def test_extractor_degrades_to_bytecode(demo_chain, demo, tmp_path):
    art = Extractor(demo_chain, None).extract(demo.proxy)
    assert art.kind is ArtifactKind.BYTECODE_ONLY and art.bytecode_hash
    assert any("decompile" in d for d in art.diagnostics)
    eoa = Extractor(demo_chain, None).extract(demo.attacker)
    assert eoa.kind is ArtifactKind.BYTECODE_ONLY and "externally owned" in eoa.diagnostics[-1]
    missing = Extractor(ChainAccess(store=FixtureStore(tmp_path))).extract(addr(9))
    assert missing.kind is ArtifactKind.BYTECODE_ONLY and missing.diagnostics
    assert json.loads(json.dumps(missing.to_dict()))["kind"] == "bytecode_only"
