"""Node RPC and block-explorer access with a record/replay fixture store.

Everything downstream talks to the chain through :class:`ChainAccess`.  In
replay mode the client never touches the network: each request is looked up
in a directory of JSON documents keyed by ``(method, canonical params)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

import requests

from .errors import (
    DecodeError,
    NotFoundError,
    RateLimitError,
    RpcError,
    ScopeError,
    TransportError,
    ValidationError,
)

log = logging.getLogger(__name__)

DEFAULT_MAX_SPAN = 50_000
DEFAULT_PARALLELISM = 8
ZERO_ADDRESS = "0x" + "00" * 20

_ADDRESS_RE = re.compile(r"^0x[0-9a-fA-F]{40}$")
_HASH_RE = re.compile(r"^0x[0-9a-fA-F]{64}$")


class CallType(str, Enum):
    CALL = "CALL"
    DELEGATECALL = "DELEGATECALL"
    STATICCALL = "STATICCALL"
    CREATE = "CREATE"


class Status(str, Enum):
    SUCCESS = "success"
    REVERT = "revert"


# callTracer frame types that are folded into the four call kinds we model
_FRAME_TYPES = {
    "CALL": CallType.CALL,
    "CALLCODE": CallType.CALL,
    "SELFDESTRUCT": CallType.CALL,
    "DELEGATECALL": CallType.DELEGATECALL,
    "STATICCALL": CallType.STATICCALL,
    "CREATE": CallType.CREATE,
    "CREATE2": CallType.CREATE,
}


def normalize_address(value: str, field_name: str = "address") -> str:
    if not isinstance(value, str) or not _ADDRESS_RE.match(value):
        raise ValidationError(f"{field_name}: malformed address {value!r}")
    return value.lower()


def is_address(value: object) -> bool:
    return isinstance(value, str) and bool(_ADDRESS_RE.match(value))


def normalize_hash(value: str, field_name: str = "tx_hash") -> str:
    if not isinstance(value, str) or not _HASH_RE.match(value):
        raise ValidationError(f"{field_name}: malformed hash {value!r}")
    return value.lower()


def hex_to_int(value: Any) -> int:
    if value is None:
        return 0
    if isinstance(value, int):
        return value
    try:
        return int(value, 16)
    except (TypeError, ValueError) as exc:
        raise DecodeError(f"not a hex quantity: {value!r}") from exc


def hex_to_bytes(value: str | None) -> bytes:
    if not value:
        return b""
    try:
        return bytes.fromhex(value[2:] if value.startswith("0x") else value)
    except ValueError as exc:
        raise DecodeError(f"not hex data: {value[:20]!r}") from exc


@dataclass(frozen=True)
class BlockRange:
    start_block: int
    end_block: int

    def __post_init__(self) -> None:
        for name in ("start_block", "end_block"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ValidationError(f"{name}: expected a non-negative integer, got {value!r}")
        if self.start_block > self.end_block:
            raise ValidationError(
                f"block_range: start {self.start_block} is after end {self.end_block}"
            )

    @property
    def span(self) -> int:
        return self.end_block - self.start_block + 1

    def blocks(self) -> range:
        return range(self.start_block, self.end_block + 1)


@dataclass(frozen=True)
class RawTransaction:
    tx_hash: str
    sender: str
    to: str | None
    value: int
    input: bytes
    block_number: int
    tx_index: int = 0
    receipt_contract_address: str | None = None

    @property
    def is_creation(self) -> bool:
        return self.to is None

    def touches(self, addresses: set[str]) -> bool:
        return (
            self.sender in addresses
            or (self.to is not None and self.to in addresses)
            or (self.receipt_contract_address is not None and self.receipt_contract_address in addresses)
        )

    def to_dict(self) -> dict:
        return {
            "tx_hash": self.tx_hash,
            "from": self.sender,
            "to": self.to,
            "value": str(self.value),
            "input": "0x" + self.input.hex(),
            "block_number": self.block_number,
            "tx_index": self.tx_index,
            "receipt_contract_address": self.receipt_contract_address,
        }


@dataclass
class RawTraceFrame:
    frame_type: CallType
    sender: str
    to: str
    value: int = 0
    input: bytes = b""
    status: Status = Status.SUCCESS
    children: list[RawTraceFrame] = field(default_factory=list)
    # original tracer opcode, e.g. CREATE2 or SELFDESTRUCT
    opcode: str = ""

    def __post_init__(self) -> None:
        if not self.opcode:
            self.opcode = self.frame_type.value

    def iter_frames(self) -> Iterable[RawTraceFrame]:
        stack = [self]
        while stack:
            frame = stack.pop()
            yield frame
            stack.extend(reversed(frame.children))

    def to_call_tracer(self) -> dict:
        doc: dict[str, Any] = {
            "type": self.opcode,
            "from": self.sender,
            "to": self.to,
            "value": hex(self.value),
            "input": "0x" + self.input.hex(),
        }
        if self.status is Status.REVERT:
            doc["error"] = "execution reverted"
        if self.children:
            doc["calls"] = [c.to_call_tracer() for c in self.children]
        return doc

    @classmethod
    def from_call_tracer(cls, doc: Any) -> RawTraceFrame:
        """Decode geth/erigon ``callTracer`` output (nested frames)."""
        if not isinstance(doc, dict):
            raise DecodeError(f"trace frame must be an object, got {type(doc).__name__}")
        opcode = str(doc.get("type", "")).upper()
        if opcode not in _FRAME_TYPES:
            raise DecodeError(f"unknown frame type {opcode!r}")
        try:
            sender = normalize_address(doc["from"], "from")
            to_raw = doc.get("to")
            to = normalize_address(to_raw, "to") if to_raw else ZERO_ADDRESS
        except (KeyError, ValidationError) as exc:
            raise DecodeError(f"bad frame addresses: {exc}") from exc
        children = [cls.from_call_tracer(c) for c in doc.get("calls") or []]
        return cls(
            frame_type=_FRAME_TYPES[opcode],
            sender=sender,
            to=to,
            value=hex_to_int(doc.get("value")),
            input=hex_to_bytes(doc.get("input")),
            status=Status.REVERT if doc.get("error") else Status.SUCCESS,
            children=children,
            opcode=opcode,
        )


@dataclass(frozen=True)
class BalanceDiff:
    address: str
    before: int
    after: int

    @property
    def delta(self) -> int:
        return self.after - self.before

    def to_dict(self) -> dict:
        return {"address": self.address, "before": str(self.before), "after": str(self.after)}


@dataclass(frozen=True)
class ContractMetadata:
    verified_source: str | None = None
    abi: str | None = None


def canonical_key(method: str, params: Any) -> str:
    blob = json.dumps([method, params], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class FixtureMissing(NotFoundError):
    pass


class FixtureStore:
    """Content-addressed directory of recorded responses.

    Layout: ``<root>/<method>/<sha256(method, params)>.json`` holding
    ``{"method", "params", "result"}``, plus ``store.json`` with the
    recording timestamp.
    """

    MANIFEST = "store.json"

    def __init__(self, root: str | os.PathLike, writable: bool = False):
        self.root = Path(root)
        self.writable = writable
        if not writable and not self.root.is_dir():
            raise ValidationError(f"fixtures: no such directory {self.root}")
        self._lock = threading.Lock()

    def _path(self, method: str, params: Any) -> Path:
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", method)
        return self.root / safe / f"{canonical_key(method, params)}.json"

    def has(self, method: str, params: Any) -> bool:
        return self._path(method, params).is_file()

    def get(self, method: str, params: Any) -> Any:
        path = self._path(method, params)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FixtureMissing(f"no fixture for {method} {json.dumps(params)[:120]}") from None
        return doc["result"]

    def put(self, method: str, params: Any, result: Any) -> None:
        if not self.writable:
            raise ValidationError("fixture store is read-only")
        path = self._path(method, params)
        doc = {"method": method, "params": params, "result": result}
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @property
    def recorded_at(self) -> str | None:
        manifest = self.root / self.MANIFEST
        if manifest.is_file():
            return json.loads(manifest.read_text(encoding="utf-8")).get("recorded_at")
        return None

    def stamp(self, recorded_at: str | None = None) -> None:
        recorded_at = recorded_at or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / self.MANIFEST).write_text(
            json.dumps({"recorded_at": recorded_at}, sort_keys=True) + "\n", encoding="utf-8"
        )


class JsonRpcTransport:
    def __init__(self, url: str, timeout: float = 30.0, session: requests.Session | None = None):
        self.url = url
        self.timeout = timeout
        self.session = session or requests.Session()
        self._ids = iter(range(1, 1 << 62))

    def call(self, method: str, params: list) -> Any:
        payload = {"jsonrpc": "2.0", "id": next(self._ids), "method": method, "params": params}
        try:
            resp = self.session.post(self.url, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"{method}: {exc}") from exc
        if resp.status_code == 429:
            raise RateLimitError(f"{method}: rate limited")
        if resp.status_code >= 500:
            raise TransportError(f"{method}: HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise DecodeError(f"{method}: response is not JSON") from exc
        if not isinstance(body, dict):
            raise DecodeError(f"{method}: unexpected response shape")
        if body.get("error"):
            err = body["error"]
            raise RpcError(int(err.get("code", -1)), str(err.get("message", "")))
        if "result" not in body:
            raise DecodeError(f"{method}: response has no result")
        return body["result"]


class ExplorerTransport:
    """Etherscan-compatible ``?module=...&action=...`` API."""

    def __init__(self, base_url: str, api_key: str | None = None, timeout: float = 30.0,
                 session: requests.Session | None = None):
        self.base_url = base_url
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    def call(self, params: dict) -> Any:
        query = dict(params)
        if self.api_key:
            query["apikey"] = self.api_key
        try:
            resp = self.session.get(self.base_url, params=query, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"explorer: {exc}") from exc
        if resp.status_code == 404:
            return None
        if resp.status_code == 429:
            raise RateLimitError("explorer: rate limited")
        if resp.status_code >= 500:
            raise TransportError(f"explorer: HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise DecodeError("explorer: response is not JSON") from exc
        result = body.get("result") if isinstance(body, dict) else None
        if isinstance(result, str) and "rate limit" in result.lower():
            raise RateLimitError(f"explorer: {result}")
        return result


def with_retries(fn, attempts: int = 3, backoff: float = 0.5):
    for attempt in range(attempts):
        try:
            return fn()
        except TransportError:
            if attempt == attempts - 1:
                raise
            time.sleep(backoff * (2 ** attempt))
    raise AssertionError("unreachable")


def _metadata_from_explorer(result: Any) -> ContractMetadata:
    if not isinstance(result, list) or not result or not isinstance(result[0], dict):
        return ContractMetadata()
    entry = result[0]
    source = entry.get("SourceCode") or None
    abi = entry.get("ABI") or None
    if abi and "not verified" in abi.lower():
        abi = None
    return ContractMetadata(verified_source=source, abi=abi)


class ChainAccess:
    """Typed chain queries over a live endpoint, a fixture store, or both (recording)."""

    def __init__(
        self,
        rpc: JsonRpcTransport | None = None,
        explorer: ExplorerTransport | None = None,
        store: FixtureStore | None = None,
        *,
        max_span: int = DEFAULT_MAX_SPAN,
        parallelism: int = DEFAULT_PARALLELISM,
        retries: int = 3,
        backoff: float = 0.5,
    ):
        if rpc is None and store is None:
            raise ValidationError("chain access needs an RPC endpoint or a fixture store")
        self.rpc = rpc
        self.explorer = explorer
        self.store = store
        self.max_span = max_span
        self.parallelism = max(1, parallelism)
        self.retries = retries
        self.backoff = backoff
        self._inflight = threading.BoundedSemaphore(self.parallelism)
        self._blocks: dict[int, list[RawTransaction]] = {}

    @classmethod
    def from_env(cls, fixtures: str | None = None, record: bool = False, **kwargs) -> ChainAccess:
        fixtures = fixtures or os.environ.get("TRACELLM_FIXTURES")
        rpc_url = os.environ.get("TRACELLM_RPC_URL")
        explorer_url = os.environ.get("TRACELLM_EXPLORER_URL", "https://api.etherscan.io/api")
        explorer_key = os.environ.get("TRACELLM_EXPLORER_KEY")
        store = FixtureStore(fixtures, writable=record) if fixtures else None
        live = store is None or record
        rpc = JsonRpcTransport(rpc_url) if (live and rpc_url) else None
        explorer = ExplorerTransport(explorer_url, explorer_key) if (live and explorer_key) else None
        return cls(rpc=rpc, explorer=explorer, store=store, **kwargs)

    @property
    def replay_only(self) -> bool:
        return self.rpc is None

    # -- raw request layer -------------------------------------------------

    def _live(self, key_method: str, params: Any, fn) -> Any:
        if self.store is not None and not self.store.writable:
            return self.store.get(key_method, params)
        if self.store is not None and self.store.has(key_method, params):
            return self.store.get(key_method, params)
        with self._inflight:
            result = with_retries(fn, self.retries, self.backoff)
        if self.store is not None:
            self.store.put(key_method, params, result)
        return result

    def request(self, method: str, params: list) -> Any:
        if self.rpc is None:
            if self.store is None:
                raise TransportError("no RPC endpoint configured")
            return self.store.get(method, params)
        return self._live(method, params, lambda: self.rpc.call(method, params))

    def explorer_request(self, params: dict) -> Any:
        method = f"explorer.{params.get('module')}.{params.get('action')}"
        if self.explorer is None:
            if self.store is not None and self.store.has(method, params):
                return self.store.get(method, params)
            return None
        return self._live(method, params, lambda: self.explorer.call(params))

    # -- typed operations --------------------------------------------------

    def check_range(self, block_range: BlockRange) -> None:
        if block_range.span > self.max_span:
            raise ScopeError(
                f"block_range: span of {block_range.span} blocks exceeds the limit of {self.max_span}"
            )

    def fetch_block(self, number: int) -> list[RawTransaction]:
        if number in self._blocks:
            return self._blocks[number]
        block = self.request("eth_getBlockByNumber", [hex(number), True])
        if block is None:
            raise NotFoundError(f"block {number} not found")
        txs = []
        for i, tx in enumerate(block.get("transactions") or []):
            if not isinstance(tx, dict):
                raise DecodeError("eth_getBlockByNumber must be called with full transactions")
            txs.append(self._decode_tx(tx, number, i))
        self._blocks[number] = txs
        return txs

    def _decode_tx(self, tx: dict, block_number: int | None = None, index: int | None = None) -> RawTransaction:
        try:
            tx_hash = normalize_hash(tx["hash"])
            sender = normalize_address(tx["from"], "from")
            to = normalize_address(tx["to"], "to") if tx.get("to") else None
        except (KeyError, ValidationError) as exc:
            raise DecodeError(f"malformed transaction: {exc}") from exc
        if block_number is None:
            block_number = hex_to_int(tx.get("blockNumber"))
        if index is None:
            index = hex_to_int(tx.get("transactionIndex"))
        created = None
        if to is None:
            receipt = self.fetch_receipt(tx_hash)
            addr = receipt.get("contractAddress") if receipt else None
            created = normalize_address(addr, "contractAddress") if addr else None
        return RawTransaction(
            tx_hash=tx_hash,
            sender=sender,
            to=to,
            value=hex_to_int(tx.get("value")),
            input=hex_to_bytes(tx.get("input")),
            block_number=block_number,
            tx_index=index,
            receipt_contract_address=created,
        )

    def fetch_blocks(self, block_range: BlockRange) -> list[RawTransaction]:
        """All transactions in the range, ordered by (block, index)."""
        self.check_range(block_range)
        numbers = list(block_range.blocks())
        if self.parallelism > 1 and len(numbers) > 1:
            with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                per_block = list(pool.map(self.fetch_block, numbers))
        else:
            per_block = [self.fetch_block(n) for n in numbers]
        txs = [tx for block in per_block for tx in block]
        txs.sort(key=lambda t: (t.block_number, t.tx_index))
        return txs

    def fetch_transactions(self, scope_addresses: Iterable[str], block_range: BlockRange) -> list[RawTransaction]:
        scope = {normalize_address(a) for a in scope_addresses}
        self.check_range(block_range)
        if not scope:
            return []
        return [tx for tx in self.fetch_blocks(block_range) if tx.touches(scope)]

    def fetch_transaction(self, tx_hash: str) -> RawTransaction:
        tx_hash = normalize_hash(tx_hash)
        tx = self.request("eth_getTransactionByHash", [tx_hash])
        if tx is None:
            raise NotFoundError(f"transaction {tx_hash} not found")
        return self._decode_tx(tx)

    def fetch_receipt(self, tx_hash: str) -> dict | None:
        return self.request("eth_getTransactionReceipt", [tx_hash])

    def fetch_trace(self, tx_hash: str) -> RawTraceFrame:
        tx_hash = normalize_hash(tx_hash)
        try:
            doc = self.request("debug_traceTransaction", [tx_hash, {"tracer": "callTracer"}])
        except FixtureMissing as exc:
            raise NotFoundError(f"no trace for {tx_hash}") from exc
        except RpcError as exc:
            raise NotFoundError(f"trace for {tx_hash}: {exc}") from exc
        if doc is None:
            raise NotFoundError(f"no trace for {tx_hash}")
        return RawTraceFrame.from_call_tracer(doc)

    def trace_call(self, to: str, data: bytes, block: str = "latest") -> RawTraceFrame:
        call = {"to": normalize_address(to), "data": "0x" + data.hex()}
        doc = self.request("debug_traceCall", [call, block, {"tracer": "callTracer"}])
        if doc is None:
            raise NotFoundError(f"no probe trace for {to}")
        return RawTraceFrame.from_call_tracer(doc)

    def fetch_code(self, address: str, block: str = "latest") -> bytes:
        return hex_to_bytes(self.request("eth_getCode", [normalize_address(address), block]))

    def fetch_balance(self, address: str, block: int | str) -> int:
        tag = hex(block) if isinstance(block, int) else block
        return hex_to_int(self.request("eth_getBalance", [normalize_address(address), tag]))

    def fetch_balance_diffs(self, tx_hash: str, addresses: Iterable[str]) -> list[BalanceDiff]:
        """Balance before (parent block) and after applying this transaction's own changes."""
        addrs = sorted({normalize_address(a) for a in addresses})
        if not addrs:
            return []
        tx = self.fetch_transaction(tx_hash)
        state = self.request(
            "debug_traceTransaction",
            [tx.tx_hash, {"tracer": "prestateTracer", "tracerConfig": {"diffMode": True}}],
        ) or {}
        pre, post = state.get("pre") or {}, state.get("post") or {}
        diffs = []
        for addr in addrs:
            before = self.fetch_balance(addr, max(tx.block_number - 1, 0))
            delta = 0
            post_entry = post.get(addr) or {}
            if "balance" in post_entry:
                delta = hex_to_int(post_entry["balance"]) - hex_to_int((pre.get(addr) or {}).get("balance"))
            diffs.append(BalanceDiff(addr, before, before + delta))
        return diffs

    def fetch_contract_metadata(self, address: str) -> ContractMetadata:
        params = {"module": "contract", "action": "getsourcecode", "address": normalize_address(address)}
        return _metadata_from_explorer(self.explorer_request(params))

    def fetch_contract_creation(self, address: str) -> tuple[str, str] | None:
        """Creator and creation tx from the explorer index, if one is configured."""
        params = {
            "module": "contract",
            "action": "getcontractcreation",
            "contractaddresses": normalize_address(address),
        }
        result = self.explorer_request(params)
        if not isinstance(result, list) or not result:
            return None
        entry = result[0]
        try:
            return (
                normalize_address(entry["contractCreator"], "contractCreator"),
                normalize_hash(entry["txHash"], "txHash"),
            )
        except (KeyError, ValidationError) as exc:
            raise DecodeError(f"explorer creation record: {exc}") from exc
