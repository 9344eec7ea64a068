"""Proxy implementation, contract creator and incident scope resolution."""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple

from .chain_access import ZERO_ADDRESS, BlockRange, CallType, ChainAccess, RawTransaction, normalize_address
from .errors import NotFoundError, RpcError, TransportError, ValidationError

log = logging.getLogger(__name__)

DELEGATECALL = 0xF4
PUSH1, PUSH4, PUSH32 = 0x60, 0x63, 0x7F
EIP1167_PREFIX = bytes.fromhex("363d3d373d3d3d363d73")
EIP1167_SUFFIX = bytes.fromhex("5af43d82803e903d91602b57fd5bf3")
PROBE_REDRAWS = 8
FACTORY_DEPTH_CAP = 8


class Instruction(NamedTuple):
    offset: int
    opcode: int
    immediate: bytes


def disassemble(code: bytes) -> list[Instruction]:
    """Linear sweep; PUSH1..PUSH32 immediates are consumed, a truncated tail is kept short."""
    out = []
    pc, n = 0, len(code)
    while pc < n:
        op = code[pc]
        width = op - PUSH1 + 1 if PUSH1 <= op <= PUSH32 else 0
        out.append(Instruction(pc, op, bytes(code[pc + 1 : pc + 1 + width])))
        pc += 1 + width
    return out


def has_delegatecall(code: bytes) -> bool:
    return any(ins.opcode == DELEGATECALL for ins in disassemble(code))


def push4_selectors(code: bytes) -> set[bytes]:
    return {ins.immediate for ins in disassemble(code) if ins.opcode == PUSH4 and len(ins.immediate) == 4}


def minimal_proxy_target(code: bytes) -> str | None:
    """Implementation hard-coded in EIP-1167 runtime bytecode, if the code is one."""
    if len(code) == 45 and code.startswith(EIP1167_PREFIX) and code.endswith(EIP1167_SUFFIX):
        return "0x" + code[10:30].hex()
    return None


def probe_selector(address: str, code: bytes) -> bytes:
    """Pseudo-random selector that no PUSH4 in the bytecode uses.

    Seeded by the address so a recorded probe replays under the same request.
    """
    known = push4_selectors(code)
    rng = random.Random(hashlib.sha256(normalize_address(address).encode()).digest())
    candidate = rng.randbytes(4)
    for _ in range(PROBE_REDRAWS):
        if candidate not in known:
            break
        candidate = rng.randbytes(4)
    return candidate


class ProxyMechanism(str, Enum):
    MINIMAL_PROXY = "minimal_proxy_hardcoded"
    TRACED = "storage_slot_traced"
    NONE = "none"


@dataclass
class ProxyResolution:
    address: str
    is_proxy: bool
    implementation: str | None = None
    mechanism: ProxyMechanism = ProxyMechanism.NONE
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "address": self.address,
            "is_proxy": self.is_proxy,
            "implementation": self.implementation,
            "mechanism": self.mechanism.value,
            "diagnostics": list(self.diagnostics),
        }


def detect_proxy(chain: ChainAccess, address: str, code: bytes | None = None) -> ProxyResolution:
    address = normalize_address(address)
    if code is None:
        code = chain.fetch_code(address)
    if not has_delegatecall(code):
        return ProxyResolution(address, False)

    target = minimal_proxy_target(code)
    if target is not None:
        if target == ZERO_ADDRESS:
            return ProxyResolution(address, True, None, ProxyMechanism.MINIMAL_PROXY,
                                   ["minimal proxy points at the zero address"])
        return ProxyResolution(address, True, target, ProxyMechanism.MINIMAL_PROXY)

    selector = probe_selector(address, code)
    try:
        trace = chain.trace_call(address, selector)
    except (NotFoundError, RpcError, TransportError) as exc:
        return ProxyResolution(address, True, None, ProxyMechanism.TRACED,
                               [f"probe trace unavailable: {exc}"])
    for frame in trace.iter_frames():
        if frame.frame_type is CallType.DELEGATECALL:
            if frame.to == ZERO_ADDRESS:
                break
            return ProxyResolution(address, True, frame.to, ProxyMechanism.TRACED)
    return ProxyResolution(address, True, None, ProxyMechanism.TRACED,
                           ["probe call produced no DELEGATECALL to a non-zero target"])


@dataclass
class CreatorInfo:
    contract: str
    creator_eoa: str | None
    creation_tx: str | None
    deployed_set: set[str] = field(default_factory=set)
    factory_chain: list[str] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return self.creator_eoa is None

    def to_dict(self) -> dict:
        return {
            "contract": self.contract,
            "creator_eoa": self.creator_eoa,
            "creation_tx": self.creation_tx,
            "deployed_set": sorted(self.deployed_set),
            "factory_chain": list(self.factory_chain),
            "diagnostics": list(self.diagnostics),
        }


def is_contract(chain: ChainAccess, address: str) -> bool:
    return len(chain.fetch_code(address)) > 0


def find_creation(chain: ChainAccess, address: str, block_range: BlockRange) -> tuple[str, str]:
    """Creator address and creation tx hash of a contract.

    Uses the explorer index when one answers, otherwise the earliest
    ``to = null`` transaction whose receipt names the address, and finally
    CREATE frames inside traced transactions of the range (factory deployments).
    """
    indexed = chain.fetch_contract_creation(address)
    if indexed is not None:
        return indexed
    txs = chain.fetch_blocks(block_range)
    for tx in txs:
        if tx.is_creation and tx.receipt_contract_address == address:
            return tx.sender, tx.tx_hash
    for tx in txs:
        if tx.is_creation:
            continue
        try:
            trace = chain.fetch_trace(tx.tx_hash)
        except NotFoundError:
            continue
        for frame in trace.iter_frames():
            if frame.frame_type is CallType.CREATE and frame.to == address:
                return frame.sender, tx.tx_hash
    raise NotFoundError(f"creation of {address} not found in blocks {block_range.start_block}-{block_range.end_block}")


def deployments_by(txs: Iterable[RawTransaction], creator: str) -> set[str]:
    return {
        tx.receipt_contract_address
        for tx in txs
        if tx.sender == creator and tx.is_creation and tx.receipt_contract_address
    }


def resolve_creator(
    chain: ChainAccess, address: str, block_range: BlockRange, max_depth: int = FACTORY_DEPTH_CAP
) -> CreatorInfo:
    address = normalize_address(address)
    creator, creation_tx = find_creation(chain, address, block_range)
    factories: list[str] = []
    while is_contract(chain, creator):
        if len(factories) >= max_depth:
            return CreatorInfo(address, None, creation_tx, {address}, factories,
                               [f"factory chain deeper than {max_depth}; stopped at {creator}"])
        factories.append(creator)
        try:
            creator, _ = find_creation(chain, creator, block_range)
        except NotFoundError as exc:
            return CreatorInfo(address, None, creation_tx, {address}, factories, [str(exc)])
    deployed = deployments_by(chain.fetch_blocks(block_range), creator) | {address}
    return CreatorInfo(address, creator, creation_tx, deployed, factories)


@dataclass
class IncidentScope:
    seeds: list[str]
    block_range: BlockRange
    addresses: set[str]
    transactions: list[RawTransaction]
    proxies: list[ProxyResolution] = field(default_factory=list)
    creators: list[CreatorInfo] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "block_range": [self.block_range.start_block, self.block_range.end_block],
            "addresses": sorted(self.addresses),
            "transactions": [tx.to_dict() for tx in self.transactions],
            "proxies": [p.to_dict() for p in self.proxies],
            "creators": [c.to_dict() for c in self.creators],
            "diagnostics": list(self.diagnostics),
        }


def build_scope(chain: ChainAccess, seeds: Iterable[str], block_range: BlockRange) -> IncidentScope:
    """One expansion round (proxy implementation, creator and its deployments), then the transactions."""
    seeds = sorted({normalize_address(s) for s in seeds})
    if not seeds:
        raise ValidationError("contracts: at least one seed address is required")
    chain.check_range(block_range)
    scope = IncidentScope(seeds, block_range, set(seeds), [])
    for seed in seeds:
        code = chain.fetch_code(seed)
        if not code:
            continue
        proxy = detect_proxy(chain, seed, code)
        if proxy.is_proxy:
            scope.proxies.append(proxy)
            scope.diagnostics.extend(f"{seed}: {d}" for d in proxy.diagnostics)
            if proxy.implementation:
                scope.addresses.add(proxy.implementation)
        try:
            info = resolve_creator(chain, seed, block_range)
        except NotFoundError as exc:
            scope.diagnostics.append(f"{seed}: {exc}")
            continue
        scope.creators.append(info)
        scope.diagnostics.extend(f"{seed}: {d}" for d in info.diagnostics)
        if info.creator_eoa:
            scope.addresses.add(info.creator_eoa)
        scope.addresses.update(info.factory_chain)
        scope.addresses.update(info.deployed_set)
    scope.transactions = chain.fetch_transactions(scope.addresses, block_range)
    return scope
