"""Best-available code artifact per contract: verified source, decompiled or refined pseudocode."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

from .chain_access import ChainAccess, normalize_address
from .errors import DecompileError, GatewayError, TraceLLMError
from .gateway import Gateway

log = logging.getLogger(__name__)

DEFAULT_DECOMPILER_TIMEOUT = 120.0
DECOMPILER_WORKERS = 2


class ArtifactKind(str, Enum):
    VERIFIED_SOURCE = "verified_source"
    DECOMPILED = "decompiled"
    REFINED_DECOMPILED = "refined_decompiled"
    BYTECODE_ONLY = "bytecode_only"


@dataclass
class CodeArtifact:
    address: str
    kind: ArtifactKind
    text: str | None = None
    abi: str | None = None
    provenance: list[dict] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)
    bytecode_hash: str | None = None

    def to_dict(self) -> dict:
        return {
            "address": self.address,
            "kind": self.kind.value,
            "text": self.text,
            "abi": self.abi,
            "provenance": list(self.provenance),
            "diagnostics": list(self.diagnostics),
            "bytecode_hash": self.bytecode_hash,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> CodeArtifact:
        return cls(
            address=doc["address"],
            kind=ArtifactKind(doc["kind"]),
            text=doc.get("text"),
            abi=doc.get("abi"),
            provenance=list(doc.get("provenance", [])),
            diagnostics=list(doc.get("diagnostics", [])),
            bytecode_hash=doc.get("bytecode_hash"),
        )


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def load_template(name: str) -> str:
    return resources.files("tracellm").joinpath("templates", name).read_text(encoding="utf-8")


def render_refine_prompt(pseudocode: str, template: str | None = None) -> str:
    template = template if template is not None else load_template("refine_prompt.txt")
    return template.replace("{PSEUDOCODE}", pseudocode)


_decompile_slots = threading.BoundedSemaphore(DECOMPILER_WORKERS)


def decompile(bytecode: bytes, command: str, timeout: float = DEFAULT_DECOMPILER_TIMEOUT) -> str:
    """Run an external decompiler and return its stdout verbatim.

    ``command`` is a template; ``{bytecode}`` expands to 0x-hex and
    ``{bytecode_file}`` to a temp file holding the hex.  Without either
    placeholder the hex is fed on stdin.
    """
    if not command:
        raise DecompileError("no decompiler command configured")
    hex_code = "0x" + bytecode.hex()
    with _decompile_slots, tempfile.TemporaryDirectory() as tmp:
        code_file = Path(tmp) / "bytecode.hex"
        code_file.write_text(hex_code, encoding="ascii")
        argv = [
            arg.replace("{bytecode}", hex_code).replace("{bytecode_file}", str(code_file))
            for arg in shlex.split(command)
        ]
        use_stdin = "{bytecode" not in command
        try:
            proc = subprocess.run(
                argv,
                input=hex_code if use_stdin else None,
                capture_output=True,
                text=True,
                timeout=timeout,
                check=False,
            )
        except subprocess.TimeoutExpired as exc:
            raise DecompileError(f"decompiler timed out after {timeout:g}s") from exc
        except OSError as exc:
            raise DecompileError(f"cannot run decompiler: {exc}") from exc
    if proc.returncode != 0:
        raise DecompileError(f"decompiler exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
    return proc.stdout


def refine(
    pseudocode: str,
    gateway: Gateway,
    params: Mapping[str, Any] | None = None,
    template: str | None = None,
) -> str:
    """Best effort: on gateway failure the input comes back unchanged."""
    try:
        return gateway.send(render_refine_prompt(pseudocode, template), params)
    except GatewayError as exc:
        log.warning("refinement skipped: %s", exc)
        return pseudocode


class Extractor:
    def __init__(
        self,
        chain: ChainAccess,
        decompiler_cmd: str | None = None,
        decompiler_timeout: float = DEFAULT_DECOMPILER_TIMEOUT,
        gateway: Gateway | None = None,
        gateway_params: Mapping[str, Any] | None = None,
        cache_dir: str | os.PathLike | None = None,
        clock: Callable[[], str] = utc_now,
    ):
        self.chain = chain
        self.decompiler_cmd = decompiler_cmd
        self.decompiler_timeout = decompiler_timeout
        self.gateway = gateway
        self.gateway_params = gateway_params
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.clock = clock

    def _cache_path(self, address: str, code_hash: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / address / f"{code_hash}.json"

    def _step(self, step: str, tool: str) -> dict:
        return {"step": step, "tool": tool, "at": self.clock()}

    def extract(self, address: str) -> CodeArtifact:
        address = normalize_address(address)
        diagnostics: list[str] = []
        try:
            meta = self.chain.fetch_contract_metadata(address)
        except TraceLLMError as exc:
            meta = None
            diagnostics.append(f"explorer: {exc}")
        if meta is not None and meta.verified_source:
            return CodeArtifact(address, ArtifactKind.VERIFIED_SOURCE, meta.verified_source, meta.abi,
                                [self._step("metadata", "explorer")], diagnostics)

        try:
            code = self.chain.fetch_code(address)
        except TraceLLMError as exc:
            diagnostics.append(f"bytecode: {exc}")
            return CodeArtifact(address, ArtifactKind.BYTECODE_ONLY, None, None, [], diagnostics)
        code_hash = hashlib.sha256(code).hexdigest()
        abi = meta.abi if meta is not None else None
        if not code:
            diagnostics.append("no runtime bytecode (externally owned account)")
            return CodeArtifact(address, ArtifactKind.BYTECODE_ONLY, None, abi,
                                [self._step("bytecode", "eth_getCode")], diagnostics, code_hash)

        cache_path = self._cache_path(address, code_hash)
        if cache_path is not None and cache_path.is_file():
            return CodeArtifact.from_dict(json.loads(cache_path.read_text(encoding="utf-8")))

        provenance = [self._step("bytecode", "eth_getCode")]
        try:
            text = decompile(code, self.decompiler_cmd or "", self.decompiler_timeout)
        except DecompileError as exc:
            diagnostics.append(f"decompile: {exc}")
            return CodeArtifact(address, ArtifactKind.BYTECODE_ONLY, None, abi, provenance, diagnostics, code_hash)
        tool = shlex.split(self.decompiler_cmd)[0]
        provenance.append(self._step("decompile", tool))
        artifact = CodeArtifact(address, ArtifactKind.DECOMPILED, text, abi, provenance, diagnostics, code_hash)

        if self.gateway is not None:
            try:
                refined = self.gateway.send(render_refine_prompt(text), self.gateway_params)
            except GatewayError as exc:
                artifact.diagnostics.append(f"refine: {exc}")
            else:
                artifact.kind = ArtifactKind.REFINED_DECOMPILED
                artifact.text = refined
                artifact.provenance.append(self._step("refine", type(self.gateway).__name__))

        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            cache_path.write_text(json.dumps(artifact.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
        return artifact
