"""Flat call records and 4-byte selector resolution."""

from __future__ import annotations

import os
from importlib import resources
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Iterator

from .chain_access import CallType, RawTraceFrame, Status
from .errors import ParseError

FALLBACK = "fallback"


@dataclass(frozen=True)
class CallRecord:
    index: int
    sender: str
    to: str
    selector: bytes | None
    method: str
    value: int = 0
    call_type: CallType = CallType.CALL
    status: Status = Status.SUCCESS

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "from": self.sender,
            "to": self.to,
            "selector": None if self.selector is None else "0x" + self.selector.hex(),
            "method": self.method,
            "value": str(self.value),
            "call_type": self.call_type.value,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> CallRecord:
        sel = doc.get("selector")
        return cls(
            index=int(doc["index"]),
            sender=doc["from"],
            to=doc["to"],
            selector=bytes.fromhex(sel[2:]) if sel else None,
            method=doc["method"],
            value=int(doc.get("value", 0)),
            call_type=CallType(doc.get("call_type", "CALL")),
            status=Status(doc.get("status", "success")),
        )


def bare_name(signature: str) -> str:
    """``transfer(address,uint256)`` -> ``transfer``."""
    return signature.split("(", 1)[0].strip()


class SignatureDB(Mapping):
    """4-byte selector -> canonical signature text."""

    def __init__(self, entries: Mapping[bytes, str] | None = None):
        self._entries: dict[bytes, str] = {}
        for selector, signature in (entries or {}).items():
            self.add(selector, signature)

    def add(self, selector: bytes, signature: str) -> bool:
        """Insert unless the selector is already known. Returns True if inserted."""
        if len(selector) != 4:
            raise ValueError(f"selector must be 4 bytes, got {len(selector)}")
        if selector in self._entries:
            return False
        self._entries[selector] = signature
        return True

    def __getitem__(self, selector: bytes) -> str:
        return self._entries[selector]

    def get(self, selector, default=None):
        return self._entries.get(selector, default)

    def __iter__(self) -> Iterator[bytes]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def selector_for(self, name: str) -> bytes | None:
        """Reverse lookup by bare name or full signature; first match wins."""
        for selector, signature in self._entries.items():
            if signature == name or bare_name(signature) == name:
                return selector
        return None


def load_signature_db(path: str | os.PathLike) -> SignatureDB:
    """Parse ``<8 hex chars>\\t<signature>`` lines. Blank lines are skipped."""
    db = SignatureDB()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            hex_part, sep, signature = line.partition("\t")
            if not sep or not signature.strip():
                raise ParseError("expected '<selector>\\t<signature>'", lineno)
            if len(hex_part) != 8:
                raise ParseError(f"selector must be 8 hex chars, got {hex_part!r}", lineno)
            try:
                selector = bytes.fromhex(hex_part)
            except ValueError:
                raise ParseError(f"selector is not hex: {hex_part!r}", lineno) from None
            db.add(selector, signature.strip())
    return db


def default_signature_db() -> SignatureDB:
    """The signature table bundled with the package."""
    with resources.as_file(resources.files("tracellm").joinpath("data", "signatures.tsv")) as path:
        return load_signature_db(path)


def resolve_selector(data: bytes, db: Mapping[bytes, str] | None = None) -> tuple[bytes | None, str]:
    if len(data) < 4:
        return None, FALLBACK
    selector = bytes(data[:4])
    signature = db.get(selector) if db is not None else None
    if signature:
        name = bare_name(signature)
        if name:
            return selector, name
    return selector, "0x" + selector.hex()


def flatten(root: RawTraceFrame, db: Mapping[bytes, str] | None = None) -> list[CallRecord]:
    """Pre-order flattening of a nested frame tree into indexed call records."""
    records: list[CallRecord] = []
    for frame in root.iter_frames():
        if frame.frame_type is CallType.CREATE:
            selector, method = None, "create"
        elif frame.opcode == "SELFDESTRUCT":
            selector, method = None, "selfdestruct"
        else:
            selector, method = resolve_selector(frame.input, db)
        records.append(
            CallRecord(
                index=len(records),
                sender=frame.sender,
                to=frame.to,
                selector=selector,
                method=method,
                value=frame.value,
                call_type=frame.frame_type,
                status=frame.status,
            )
        )
    return records
