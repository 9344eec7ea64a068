"""A small in-memory chain that authors replayable fixture stores.

Nothing here executes EVM code.  Transactions carry hand-built call trees
and the chain derives everything a node would report for them: blocks,
receipts, callTracer output, prestate diffs, historical balances, code,
explorer metadata and proxy probe traces.  Gas is not modelled.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .chain_access import ZERO_ADDRESS, CallType, FixtureStore, RawTraceFrame, Status, normalize_address
from .detect import EIP1167_PREFIX, EIP1167_SUFFIX, probe_selector
from .trace_model import FALLBACK, SignatureDB, default_signature_db

DEFAULT_RECORDED_AT = "2024-01-01T00:00:00Z"


@functools.lru_cache(maxsize=1)
def _bundled_db() -> SignatureDB:
    return default_signature_db()


def derive_address(label: str) -> str:
    return "0x" + hashlib.sha256(f"address:{label}".encode()).hexdigest()[:40]


def derive_hash(label: str) -> str:
    return "0x" + hashlib.sha256(f"tx:{label}".encode()).hexdigest()


def encode_call(method: str | None, db: SignatureDB | None = None, args: bytes = b"") -> bytes:
    """Calldata for a method name, a raw ``0x????????`` selector, or empty for fallback."""
    if method is None or method == FALLBACK:
        return b""
    if method.startswith("0x") and len(method) == 10:
        return bytes.fromhex(method[2:]) + args
    selector = (db or _bundled_db()).selector_for(method)
    if selector is None:
        raise KeyError(f"no selector known for {method!r}")
    return selector + args


def frame(
    sender: str,
    to: str,
    method: str | None = None,
    *children: RawTraceFrame,
    value: int = 0,
    kind: CallType = CallType.CALL,
    revert: bool = False,
    db: SignatureDB | None = None,
    code: bytes = b"",
) -> RawTraceFrame:
    """One call frame.  ``method="create"`` and ``method="selfdestruct"`` build those frames."""
    opcode = ""
    if method == "create":
        kind, data = CallType.CREATE, code
    elif method == "selfdestruct":
        opcode, data = "SELFDESTRUCT", b""
    else:
        data = encode_call(method, db)
    return RawTraceFrame(kind, sender, to, value, data, Status.REVERT if revert else Status.SUCCESS,
                         list(children), opcode)


# -- bytecode -------------------------------------------------------------------


def dispatcher_code(selectors: Iterable[bytes], delegate_slot: bytes | None = None, salt: bytes = b"") -> bytes:
    """Runtime bytecode with a selector dispatcher, optionally forwarding via DELEGATECALL.

    With ``delegate_slot`` the implementation address is loaded from that
    storage slot, so the target is not visible in the code itself.
    """
    out = bytearray.fromhex("6080604052600035" "60e01c")
    for i, sel in enumerate(selectors):
        out += bytes([0x80, 0x63]) + sel + bytes([0x14, 0x61]) + (0x100 + 0x10 * i).to_bytes(2, "big") + bytes([0x57])
    if salt:
        out += bytes([0x7F]) + salt.ljust(32, b"\0")[:32] + bytes([0x50])
    if delegate_slot is not None:
        # calldatacopy(0, 0, calldatasize), then delegatecall(gas, sload(slot), 0, calldatasize, 0, 0)
        out += bytes.fromhex("36600060003760006000366000")
        out += bytes([0x7F]) + delegate_slot.rjust(32, b"\0") + bytes([0x54, 0x5A, 0xF4])
        out += bytes.fromhex("3d6000803e")
    out += bytes([0x00])
    return bytes(out)


def minimal_proxy_code(implementation: str) -> bytes:
    return EIP1167_PREFIX + bytes.fromhex(normalize_address(implementation)[2:]) + EIP1167_SUFFIX


# -- the chain --------------------------------------------------------------------


@dataclass
class _Tx:
    tx_hash: str
    sender: str
    to: str | None
    value: int
    input: bytes
    block: int
    index: int
    trace: RawTraceFrame
    created: str | None = None
    pre: dict[str, int] = field(default_factory=dict)
    post: dict[str, int] = field(default_factory=dict)


@dataclass
class _Account:
    code: bytes = b""
    source: str | None = None
    abi: str | None = None
    creation: tuple[str, str] | None = None
    implementation: str | None = None


class DevChain:
    def __init__(self, start_block: int = 1_000, recorded_at: str = DEFAULT_RECORDED_AT,
                 db: SignatureDB | None = None):
        self.start_block = start_block
        self.recorded_at = recorded_at
        self.db = db or _bundled_db()
        self.block = start_block
        self.accounts: dict[str, _Account] = {}
        self.balances: dict[str, int] = {}
        # balances at the end of each block; the entry before the first block is genesis
        self.history: dict[int, dict[str, int]] = {}
        self.blocks: dict[int, list[_Tx]] = {start_block: []}
        self.labels: dict[str, str] = {}
        self._counter = 0

    # -- accounts --------------------------------------------------------------

    def address(self, label: str) -> str:
        addr = derive_address(label)
        self.labels.setdefault(addr, label)
        self.accounts.setdefault(addr, _Account())
        return addr

    def fund(self, address: str, wei: int) -> None:
        if self.history or any(self.blocks.values()):
            raise RuntimeError("fund accounts before sending transactions")
        self.balances[address] = self.balances.get(address, 0) + wei

    def set_code(self, address: str, code: bytes, source: str | None = None, abi: str | None = None) -> None:
        acct = self.accounts.setdefault(address, _Account())
        acct.code, acct.source, acct.abi = code, source, abi

    def set_creation(self, address: str, creator: str, tx_hash: str) -> None:
        """Explorer index entry for a contract deployed before the recorded range."""
        self.accounts.setdefault(address, _Account()).creation = (creator, tx_hash)

    def set_proxy(self, address: str, implementation: str) -> None:
        """Storage-slot proxy: the probe call resolves to ``implementation``."""
        self.accounts.setdefault(address, _Account()).implementation = implementation

    def methods(self, *names: str) -> list[bytes]:
        return [encode_call(n, self.db)[:4] for n in names]

    # -- blocks and transactions ------------------------------------------------

    def mine(self) -> int:
        """Close the current block and open the next one."""
        self.history[self.block] = dict(self.balances)
        self.block += 1
        self.blocks[self.block] = []
        return self.block

    def _next_hash(self, hint: str) -> str:
        self._counter += 1
        return derive_hash(f"{self._counter}:{hint}")

    def send(self, trace: RawTraceFrame, hint: str = "") -> str:
        """Include a transaction whose top-level frame is ``trace``."""
        for f in trace.iter_frames():
            for addr in (f.sender, f.to):
                self.accounts.setdefault(addr, _Account())
        created = trace.to if trace.frame_type is CallType.CREATE else None
        tx = _Tx(
            tx_hash=self._next_hash(hint or trace.to),
            sender=trace.sender,
            to=None if created else trace.to,
            value=trace.value,
            input=trace.input,
            block=self.block,
            index=len(self.blocks[self.block]),
            trace=trace,
            created=created,
        )
        if self.block - 1 not in self.history:
            self.history[self.block - 1] = dict(self.balances)
        self._apply(tx)
        self.blocks[self.block].append(tx)
        return tx.tx_hash

    def deploy(self, sender: str, label: str, code: bytes, *, source: str | None = None,
               abi: str | None = None) -> tuple[str, str]:
        address = self.address(label)
        self.set_code(address, code, source, abi)
        tx_hash = self.send(frame(sender, address, "create", code=code, db=self.db), label)
        return address, tx_hash

    def _apply(self, tx: _Tx) -> None:
        before = dict(self.balances)

        def walk(f: RawTraceFrame) -> None:
            if f.status is Status.REVERT:
                return
            if f.value:
                self.balances[f.sender] = self.balances.get(f.sender, 0) - f.value
                self.balances[f.to] = self.balances.get(f.to, 0) + f.value
            for c in f.children:
                walk(c)

        walk(tx.trace)
        for addr in set(before) | set(self.balances):
            old, new = before.get(addr, 0), self.balances.get(addr, 0)
            if old != new:
                tx.pre[addr], tx.post[addr] = old, new

    def transactions(self) -> list[_Tx]:
        return [tx for n in sorted(self.blocks) for tx in self.blocks[n]]

    @property
    def end_block(self) -> int:
        return self.block

    # -- export ---------------------------------------------------------------------

    def _tx_json(self, tx: _Tx) -> dict:
        return {
            "hash": tx.tx_hash,
            "from": tx.sender,
            "to": tx.to,
            "value": hex(tx.value),
            "input": "0x" + tx.input.hex(),
            "blockNumber": hex(tx.block),
            "transactionIndex": hex(tx.index),
        }

    def _balance_at(self, address: str, block: int) -> int:
        known = [b for b in self.history if b <= block]
        if not known:
            return 0
        return self.history[max(known)].get(address, 0)

    def _probe_trace(self, address: str, implementation: str, data: bytes) -> dict:
        inner = RawTraceFrame(CallType.DELEGATECALL, address, implementation, 0, data)
        outer = RawTraceFrame(CallType.CALL, ZERO_ADDRESS, address, 0, data, Status.REVERT, [inner])
        return outer.to_call_tracer()

    def export(self, store: FixtureStore) -> None:
        """Write every response the analysis can request into ``store``."""
        if self.block not in self.history:
            self.history[self.block] = dict(self.balances)
        if self.start_block - 1 not in self.history:
            self.history[self.start_block - 1] = {}
        for number in sorted(self.blocks):
            txs = self.blocks[number]
            store.put("eth_getBlockByNumber", [hex(number), True],
                      {"number": hex(number), "transactions": [self._tx_json(t) for t in txs]})
            for tx in txs:
                self._export_tx(store, tx)

        for addr in sorted(self.accounts):
            acct = self.accounts[addr]
            store.put("eth_getCode", [addr, "latest"], "0x" + acct.code.hex())
            params = {"module": "contract", "action": "getsourcecode", "address": addr}
            store.put(f"explorer.{params['module']}.{params['action']}", params, [{
                "SourceCode": acct.source or "",
                "ABI": acct.abi or "Contract source code not verified",
            }])
            if acct.creation is not None:
                params = {"module": "contract", "action": "getcontractcreation", "contractaddresses": addr}
                store.put(f"explorer.{params['module']}.{params['action']}", params,
                          [{"contractAddress": addr, "contractCreator": acct.creation[0],
                            "txHash": acct.creation[1]}])
            if acct.implementation is not None:
                data = probe_selector(addr, acct.code)
                store.put("debug_traceCall",
                          [{"to": addr, "data": "0x" + data.hex()}, "latest", {"tracer": "callTracer"}],
                          self._probe_trace(addr, acct.implementation, data))
        store.stamp(self.recorded_at)

    def _export_tx(self, store: FixtureStore, tx: _Tx) -> None:
        store.put("eth_getTransactionByHash", [tx.tx_hash], self._tx_json(tx))
        store.put("debug_traceTransaction", [tx.tx_hash, {"tracer": "callTracer"}], tx.trace.to_call_tracer())
        store.put(
            "debug_traceTransaction",
            [tx.tx_hash, {"tracer": "prestateTracer", "tracerConfig": {"diffMode": True}}],
            {"pre": {a: {"balance": hex(v)} for a, v in sorted(tx.pre.items())},
             "post": {a: {"balance": hex(v)} for a, v in sorted(tx.post.items())}},
        )
        if tx.created is not None:
            store.put("eth_getTransactionReceipt", [tx.tx_hash],
                      {"transactionHash": tx.tx_hash, "contractAddress": tx.created, "status": "0x1"})
        touched = {a for f in tx.trace.iter_frames() for a in (f.sender, f.to)}
        for addr in sorted(touched):
            block = max(tx.block - 1, 0)
            store.put("eth_getBalance", [addr, hex(block)], hex(self._balance_at(addr, block)))


# -- demo incident ----------------------------------------------------------------


@dataclass
class DemoIncident:
    chain: DevChain
    scope: dict
    attack_txs: list[str]
    proxy: str
    implementation: str
    attacker: str
    attack_contract: str
    token: str
    # (tx hash, leaf record index) of calls injected by the attacker
    injected: list[tuple[str, int]] = field(default_factory=list)


_VAULT_SOURCE = """// SPDX-License-Identifier: MIT
pragma solidity ^0.8.17;

contract VaultImplementation {
    address public owner;
    bool private initialized;
    IERC20 public token;

    function initialize(address newOwner) external {
        // missing: require(!initialized)
        owner = newOwner;
        initialized = true;
    }

    function sweepToken(address to) external {
        require(msg.sender == owner, "not owner");
        token.transfer(to, token.balanceOf(address(this)));
    }

    function deposit(uint256 amount) external {
        token.transferFrom(msg.sender, address(this), amount);
    }

    function withdraw(uint256 amount) external {
        token.transfer(msg.sender, amount);
    }
}
"""

_TOKEN_SOURCE = """// SPDX-License-Identifier: MIT
pragma solidity ^0.8.17;

contract DemoToken is ERC20 {
    constructor() ERC20("Demo", "DMO") { _mint(msg.sender, 1e27); }
}
"""


def _preorder_index(root: RawTraceFrame, target: RawTraceFrame) -> int:
    for i, f in enumerate(root.iter_frames()):
        if f is target:
            return i
    raise ValueError("frame not in tree")


def build_demo_incident(start_block: int = 17_000_000, recorded_at: str = DEFAULT_RECORDED_AT) -> DemoIncident:
    """Upgradeable vault whose unprotected ``initialize`` lets an attacker take ownership and sweep it."""
    c = DevChain(start_block, recorded_at)
    D = c.db

    deployer = c.address("vault-deployer")
    attacker = c.address("attacker")
    users = [c.address(f"user-{i}") for i in range(6)]
    token = c.address("token")
    impl = c.address("vault-implementation")
    proxy = c.address("vault-proxy")
    router = c.address("router")
    pair = c.address("pair")

    c.set_code(token, dispatcher_code(c.methods("transfer", "transferFrom", "approve", "balanceOf")),
               _TOKEN_SOURCE, "[]")
    c.set_code(impl, dispatcher_code(c.methods("initialize", "sweepToken", "deposit", "withdraw")),
               _VAULT_SOURCE, "[]")
    c.set_code(proxy, dispatcher_code(c.methods("upgradeTo"), delegate_slot=b"\x36\x08\x94\xa1\x3b\xa1\xa3\x21"))
    c.set_code(router, dispatcher_code(c.methods("swapExactTokensForTokens")))
    c.set_code(pair, dispatcher_code(c.methods("swap", "getReserves", "sync")))
    c.set_proxy(proxy, impl)
    for contract in (token, impl, proxy, router, pair):
        c.set_creation(contract, deployer, derive_hash(f"genesis:{contract}"))
    c.fund(attacker, 10**18)
    for u in users:
        c.fund(u, 5 * 10**18)

    def vault_call(sender: str, method: str, *inner: RawTraceFrame) -> RawTraceFrame:
        return frame(sender, proxy, method,
                     frame(proxy, impl, method, *inner, kind=CallType.DELEGATECALL, db=D), db=D)

    # ordinary activity before the attack
    for i, u in enumerate(users):
        c.send(frame(u, token, "approve", db=D), f"approve-{i}")
        c.send(vault_call(u, "deposit", frame(proxy, token, "transferFrom", db=D)), f"deposit-{i}")
        if i % 2 == 0:
            c.send(frame(u, router, "swapExactTokensForTokens",
                         frame(router, token, "transferFrom", db=D),
                         frame(router, pair, "getReserves", db=D),
                         frame(router, pair, "swap", frame(pair, token, "transfer", db=D), db=D),
                         db=D), f"swap-{i}")
        c.mine()
    for i, u in enumerate(users[:3]):
        c.send(vault_call(u, "withdraw", frame(proxy, token, "transfer", db=D)), f"withdraw-{i}")
    c.mine()

    # the attacker deploys a helper contract inside the range
    attack_contract, _ = c.deploy(attacker, "attack-contract", dispatcher_code([bytes.fromhex("c0ffee01")]))
    c.mine()
    sweep = frame(proxy, token, "transfer", db=D)
    take_over = vault_call(attack_contract, "initialize")
    drain = vault_call(attack_contract, "sweepToken", frame(proxy, token, "balanceOf", db=D), sweep)
    cash_out = frame(attack_contract, attacker, "selfdestruct", value=10**17)
    root = frame(attacker, attack_contract, "0xc0ffee01", take_over, drain, cash_out, value=10**17, db=D)
    attack_tx = c.send(root, "attack")
    injected = [(attack_tx, _preorder_index(root, f)) for f in (take_over.children[0], sweep, cash_out)]
    c.mine()
    for i, u in enumerate(users[3:]):
        c.send(vault_call(u, "withdraw", frame(proxy, token, "transfer", revert=True, db=D)), f"late-{i}")

    scope = {
        "contracts": [proxy, attack_contract],
        "block_range": [start_block, c.end_block],
        "label": "vault initialize takeover (synthetic)",
    }
    return DemoIncident(c, scope, [attack_tx], proxy, impl, attacker, attack_contract, token, injected)


def write_demo_fixtures(root, recorded_at: str = DEFAULT_RECORDED_AT) -> DemoIncident:
    demo = build_demo_incident(recorded_at=recorded_at)
    demo.chain.export(FixtureStore(root, writable=True))
    return demo
