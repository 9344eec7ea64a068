from __future__ import annotations

from pathlib import Path

import pytest
from Crypto.Hash import keccak

from tracellm.chain_access import CallType, RawTraceFrame, Status
from tracellm.errors import ParseError
from tracellm.trace_model import (
    CallRecord,
    SignatureDB,
    bare_name,
    default_signature_db,
    flatten,
    load_signature_db,
    resolve_selector,
)

A, B, C = ("0x" + f"{i:040x}" for i in (1, 2, 3))


def keccak_selector(signature: str) -> bytes:
    h = keccak.new(digest_bits=256)
    h.update(signature.encode())
    return h.digest()[:4]


def test_known_selectors():
    assert keccak_selector("transfer(address,uint256)").hex() == "a9059cbb"
    db = default_signature_db()
    assert db[bytes.fromhex("a9059cbb")] == "transfer(address,uint256)"
    assert db[bytes.fromhex("23b872dd")] == "transferFrom(address,address,uint256)"


def test_bundled_table_matches_keccak():
    db = default_signature_db()
    assert len(db) >= 50
    for selector, signature in db.items():
        assert keccak_selector(signature) == selector, signature


def test_resolve_selector_cases():
    db = default_signature_db()
    data = bytes.fromhex("a9059cbb") + b"\x00" * 64
    assert resolve_selector(data, db) == (bytes.fromhex("a9059cbb"), "transfer")
    assert resolve_selector(b"", db) == (None, "fallback")
    assert resolve_selector(b"\x01\x02\x03", db) == (None, "fallback")
    assert resolve_selector(bytes.fromhex("deadbeef"), db) == (bytes.fromhex("deadbeef"), "0xdeadbeef")
    assert resolve_selector(bytes.fromhex("a9059cbb"), None) == (bytes.fromhex("a9059cbb"), "0xa9059cbb")


def test_bare_name():
    assert bare_name("swap(uint256,uint256,address,bytes)") == "swap"
    assert bare_name("drain") == "drain"


def test_signature_db_first_entry_wins():
    db = SignatureDB()
    assert db.add(b"\x00\x00\x00\x01", "a()")
    assert not db.add(b"\x00\x00\x00\x01", "b()")
    assert db[b"\x00\x00\x00\x01"] == "a()"
    assert db.selector_for("a") == b"\x00\x00\x00\x01"
    assert db.selector_for("zzz") is None
    with pytest.raises(ValueError):
        db.add(b"\x00", "c()")


def test_load_signature_db_reports_line(tmp_path: Path):
    good = tmp_path / "good.tsv"
    good.write_text("a9059cbb\ttransfer(address,uint256)\n\n095ea7b3\tapprove(address,uint256)\n")
    assert len(load_signature_db(good)) == 2
    bad = tmp_path / "bad.tsv"
    bad.write_text("a9059cbb\ttransfer(address,uint256)\nzzzz\tx()\n")
    with pytest.raises(ParseError, match="line 2"):
        load_signature_db(bad)
    bad.write_text("a9059cbbtransfer\n")
    with pytest.raises(ParseError, match="line 1"):
        load_signature_db(bad)


def test_flatten_is_preorder_with_special_frames():
    db = default_signature_db()
    root = RawTraceFrame(CallType.CALL, A, B, 0, bytes.fromhex("a9059cbb"), children=[
        RawTraceFrame(CallType.CREATE, B, C, 0, b"\x60\x80"),
        RawTraceFrame(CallType.DELEGATECALL, B, C, 0, b"", Status.REVERT, [
            RawTraceFrame(CallType.CALL, B, A, 7, b"", opcode="SELFDESTRUCT"),
        ]),
        RawTraceFrame(CallType.STATICCALL, B, C, 0, bytes.fromhex("70a08231")),
    ])
    recs = flatten(root, db)
    assert [r.index for r in recs] == [0, 1, 2, 3, 4]
    assert [r.method for r in recs] == ["transfer", "create", "fallback", "selfdestruct", "balanceOf"]
    assert [r.call_type for r in recs] == [CallType.CALL, CallType.CREATE, CallType.DELEGATECALL,
                                          CallType.CALL, CallType.STATICCALL]
    assert recs[2].status is Status.REVERT
    assert recs[3].value == 7
    assert recs[1].selector is None and recs[0].selector == bytes.fromhex("a9059cbb")


def test_record_dict_round_trip():
    rec = CallRecord(3, A, B, b"\x01\x02\x03\x04", "x", 10**20, CallType.STATICCALL, Status.REVERT)
    assert CallRecord.from_dict(rec.to_dict()) == rec
