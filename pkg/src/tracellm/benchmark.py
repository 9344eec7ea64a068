"""Synthetic incident benchmark: benign traffic with injected attack motifs.

Each incident is a batch of transactions around one victim protocol.  Most
are drawn from benign templates (token transfers, router swaps, lending,
multisends, aggregator routes, MEV-style bot trades); one or more attack
motifs are injected.  A path is labeled as an attack path when it runs
through a call that belongs to an injected motif.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .call_tree import CallForest, ExecPath, build_forest, enumerate_paths
from .chain_access import CallType, RawTraceFrame
from .devchain import frame
from .features import fanout
from .model import LabeledPath, dump_dataset
from .trace_model import SignatureDB, default_signature_db, flatten

DEFAULT_INCIDENTS = 12
DEFAULT_SEED = 7
MAX_ATTACK_PATHS = 20
MOTIFS = ("reentrancy", "flash_loan", "initialize_sweep", "arbitrary_call", "rug_pull")


@dataclass
class BenchTx:
    tx_hash: str
    forest: CallForest
    paths: list[ExecPath]
    labels: list[bool]
    motif: str | None = None


@dataclass
class BenchIncident:
    incident_id: str
    motifs: list[str]
    txs: list[BenchTx] = field(default_factory=list)

    def rows(self) -> list[LabeledPath]:
        out = []
        for tx in self.txs:
            for path, label in zip(tx.paths, tx.labels):
                out.append(LabeledPath(self.incident_id, tx.tx_hash, path.key(tx.tx_hash),
                                       tuple(path.sig), label, fanout(path)))
        return out

    def paths(self) -> Iterator[tuple[BenchTx, ExecPath, bool]]:
        for tx in self.txs:
            for path, label in zip(tx.paths, tx.labels):
                yield tx, path, label

    @property
    def attack_path_count(self) -> int:
        return sum(sum(tx.labels) for tx in self.txs)


@dataclass
class Benchmark:
    incidents: list[BenchIncident]
    seed: int

    def rows(self) -> list[LabeledPath]:
        return [r for inc in self.incidents for r in inc.rows()]

    def write(self, path) -> None:
        dump_dataset(self.rows(), path)


class _Gen:
    """Frame builders for one incident, drawing addresses and amounts from ``rng``."""

    def __init__(self, rng: np.random.Generator, db: SignatureDB):
        self.rng = rng
        self.db = db
        self.marked: set[int] = set()
        c = self.addr
        self.users = [c() for _ in range(40)]
        self.token_a, self.token_b, self.weth, self.reward = c(), c(), c(), c()
        self.router, self.pair, self.pair2 = c(), c(), c()
        self.pool, self.oracle, self.farm = c(), c(), c()
        self.aggregator, self.multisend, self.lender = c(), c(), c()
        self.bots = [(c(), c()) for _ in range(2)]
        self.victim, self.victim_impl = c(), c()
        self.attacker, self.attack_contract = c(), c()

    def addr(self) -> str:
        return "0x" + self.rng.bytes(20).hex()

    def selector(self) -> str:
        return "0x" + self.rng.bytes(4).hex()

    def vm(self, name: str, p: float = 0.35) -> str:
        """A victim-side method: unresolved with probability ``p`` (unverified contract)."""
        return self.selector() if self.rng.random() < p else name

    def user(self) -> str:
        return self.users[int(self.rng.integers(len(self.users)))]

    def f(self, sender, to, method, *children, **kw) -> RawTraceFrame:
        return frame(sender, to, method, *children, db=self.db, **kw)

    def m(self, fr: RawTraceFrame) -> RawTraceFrame:
        """Mark a frame as part of the injected attack."""
        self.marked.add(id(fr))
        return fr

    # -- benign templates --------------------------------------------------------

    def b_transfer(self):
        return self.f(self.user(), self.token_a if self.rng.random() < 0.5 else self.token_b, "transfer")

    def b_approve(self):
        return self.f(self.user(), self.token_a, "approve")

    def b_swap(self):
        f, r, p = self.f, self.router, self.pair
        return f(self.user(), r, "swapExactTokensForTokens",
                 f(r, self.token_a, "transferFrom"),
                 f(r, p, "getReserves"),
                 f(r, p, "swap", f(p, self.token_b, "transfer"), f(p, self.token_a, "balanceOf"),
                   f(p, self.token_b, "balanceOf")))

    def b_swap_eth(self):
        f, r, p = self.f, self.router, self.pair2
        v = int(self.rng.integers(1, 10)) * 10**17
        return f(self.user(), r, "swapExactETHForTokens",
                 f(r, self.weth, "deposit", value=v),
                 f(r, self.weth, "transfer"),
                 f(r, p, "swap", f(p, self.token_a, "transfer")), value=v)

    def b_deposit(self):
        f, p = self.f, self.pool
        return f(self.user(), p, "deposit", f(p, self.oracle, "latestAnswer"), f(p, self.token_a, "transferFrom"))

    def b_borrow(self):
        f, p = self.f, self.pool
        return f(self.user(), p, "borrow", f(p, self.oracle, "latestAnswer"),
                 f(p, self.token_a, "balanceOf"), f(p, self.token_a, "transfer"))

    def b_repay(self):
        return self.f(self.user(), self.pool, "repay", self.f(self.pool, self.token_a, "transferFrom"))

    def b_withdraw(self):
        f, p = self.f, self.pool
        return f(self.user(), p, "withdraw", f(p, self.token_a, "transfer"))

    def b_multisend(self):
        n = int(self.rng.integers(2, 7))
        ms = self.multisend
        kids = [self.f(ms, self.user(), "fallback", value=10**16) for _ in range(n)]
        return self.f(self.user(), ms, "multisend", *kids, value=n * 10**16)

    def b_eth_send(self):
        return self.f(self.user(), self.user(), "fallback", value=10**17)

    def b_harvest(self):
        f, fm = self.f, self.farm
        return f(self.user(), fm, "harvest", f(fm, self.reward, "balanceOf"), f(fm, self.reward, "transfer"))

    def b_aggregator(self):
        f, ag, r, p = self.f, self.aggregator, self.router, self.pair
        return f(self.user(), ag, "0x12aa3caf",
                 f(ag, self.token_a, "transferFrom"),
                 f(ag, r, "swapExactTokensForTokens", f(r, p, "swap", f(p, self.token_b, "transfer"))),
                 f(ag, self.token_b, "transfer"))

    def b_bot(self):
        eoa, bc = self.bots[int(self.rng.integers(len(self.bots)))]
        f, p, p2 = self.f, self.pair, self.pair2
        return f(eoa, bc, self.selector(),
                 f(bc, p, "swap", f(p, self.token_b, "transfer")),
                 f(bc, p2, "swap", f(p2, self.token_a, "transfer")),
                 f(bc, self.token_a, "balanceOf"))

    def b_pool_init(self):
        # a factory wiring up a fresh pool clone: benign use of initialize
        factory, clone, impl = self.addr(), self.addr(), self.victim_impl
        f = self.f
        return f(self.user(), factory, "0x3d602d80",
                 f(factory, clone, "initialize", f(clone, impl, "initialize", kind=CallType.DELEGATECALL)))

    # benign look-alikes of the attack motifs

    def b_flash_arb(self):
        eoa, bc = self.bots[int(self.rng.integers(len(self.bots)))]
        f, L, p, p2 = self.f, self.lender, self.pair, self.pair2
        return f(eoa, bc, self.selector(),
                 f(bc, L, "flashLoan", f(L, self.token_a, "transfer"),
                   f(L, bc, "onFlashLoan",
                     f(bc, p, "swap", f(p, self.token_b, "transfer")),
                     f(bc, p2, "swap", f(p2, self.token_a, "transfer")),
                     f(bc, self.token_a, "approve")),
                   f(L, self.token_a, "transferFrom")))

    def b_multisig(self):
        f, safe = self.f, self.farm
        return f(self.user(), safe, "execute", f(safe, self.token_a, "transferFrom"))

    def b_remove_liquidity(self):
        f, r, p, u = self.f, self.router, self.pair, self.user()
        return f(u, r, "removeLiquidity",
                 f(r, p, "burn", f(p, self.token_a, "transfer"), f(p, self.weth, "transfer")),
                 f(r, self.weth, "withdraw", f(self.weth, r, "fallback", value=10**17)),
                 f(r, u, "fallback", value=10**17))

    def b_hook_transfer(self):
        f, u, t = self.f, self.user(), self.token_b
        return f(self.user(), t, "transfer", f(t, u, "tokensReceived"))

    def b_vault_withdraw(self):
        f, V, u = self.f, self.victim, self.user()
        return f(u, V, "withdraw", f(V, u, "fallback", value=10**17), f(V, self.token_a, "balanceOf"))

    BENIGN: dict[str, float] = {
        "b_flash_arb": 0.02, "b_multisig": 0.03, "b_remove_liquidity": 0.03, "b_hook_transfer": 0.03,
        "b_vault_withdraw": 0.04,
        "b_transfer": 0.18, "b_approve": 0.08, "b_swap": 0.16, "b_swap_eth": 0.06, "b_deposit": 0.08,
        "b_borrow": 0.05, "b_repay": 0.04, "b_withdraw": 0.05, "b_multisend": 0.05, "b_eth_send": 0.08,
        "b_harvest": 0.06, "b_aggregator": 0.05, "b_bot": 0.04, "b_pool_init": 0.02,
    }

    # -- attack motifs ---------------------------------------------------------------

    def a_reentrancy(self) -> list[RawTraceFrame]:
        f, m, X, V = self.f, self.m, self.attack_contract, self.victim
        depth = int(self.rng.integers(2, 5))
        # the victim is unverified, so its withdraw selector stays unresolved
        withdraw = self.selector()
        inner = m(f(V, X, "fallback", value=10**18))
        for _ in range(depth):
            inner = m(f(V, X, "fallback", m(f(X, V, withdraw, inner, m(f(V, self.token_a, "balanceOf")))),
                        value=10**18))
        root = f(self.attacker, X, self.selector(),
                 f(X, V, "deposit", value=10**18),
                 m(f(X, V, withdraw, inner)),
                 f(X, self.attacker, "fallback", value=depth * 10**18))
        return [root]

    def a_flash_loan(self) -> list[RawTraceFrame]:
        f, m, X, L = self.f, self.m, self.attack_contract, self.lender
        p = self.pair
        callback = m(f(L, X, "onFlashLoan",
                       m(f(X, p, "swap", f(p, self.token_b, "transfer"), m(f(p, self.token_a, "balanceOf")))),
                       m(f(X, self.victim, self.vm("borrow"), m(f(self.victim, p, "getReserves")),
                           m(f(self.victim, self.token_b, "transfer")))),
                       m(f(X, p, "swap", m(f(p, self.token_a, "transfer")), m(f(p, p, "sync")))),
                       f(X, self.token_a, "approve")))
        root = f(self.attacker, X, self.selector(),
                 m(f(X, L, "flashLoan", f(L, self.token_a, "transfer"), callback, f(L, self.token_a, "transferFrom"))),
                 f(X, self.token_b, "transfer"))
        return [root]

    def a_initialize_sweep(self) -> list[RawTraceFrame]:
        f, m, V, I, E = self.f, self.m, self.victim, self.victim_impl, self.attacker
        take = f(E, V, "initialize", m(f(V, I, self.vm("initialize"), kind=CallType.DELEGATECALL)))
        sweep = f(E, V, "sweepToken",
                  m(f(V, I, self.vm("sweepToken"), kind=CallType.DELEGATECALL)),
                  m(f(V, self.token_a, "balanceOf")), m(f(V, self.token_a, "transfer")),
                  m(f(V, self.token_b, "balanceOf")), m(f(V, self.token_b, "transfer")))
        return [take, sweep]

    def a_arbitrary_call(self) -> list[RawTraceFrame]:
        f, m, X, V = self.f, self.m, self.attack_contract, self.victim
        n = int(self.rng.integers(3, 8))
        method = self.vm("execute" if self.rng.random() < 0.3 else "call")
        calls = [m(f(X, V, method, m(f(V, self.token_a, "transferFrom")))) for _ in range(n)]
        return [f(self.attacker, X, self.selector(), *calls, f(X, self.token_a, "balanceOf"))]

    def a_rug_pull(self) -> list[RawTraceFrame]:
        f, m, E, r, p = self.f, self.m, self.attacker, self.router, self.pair
        mint = f(E, self.token_a, "mint", m(f(self.token_a, self.token_a, self.vm("updateRewards"))))
        dump = f(E, r, "removeLiquidity",
                 m(f(r, p, self.vm("burn"), m(f(p, self.token_a, "transfer")), m(f(p, self.weth, "transfer")),
                     m(f(p, p, "sync")))),
                 m(f(r, self.weth, "withdraw", m(f(self.weth, r, "fallback", value=10**19)))),
                 m(f(r, E, "fallback", value=10**19)))
        return [mint, dump]


def _label(root: RawTraceFrame, marked: set[int], db: SignatureDB) -> tuple[CallForest, list[ExecPath], list[bool]]:
    frames = list(root.iter_frames())
    marked_idx = {i for i, fr in enumerate(frames) if id(fr) in marked}
    forest = build_forest(flatten(root, db))
    paths = enumerate_paths(forest)
    labels = [any(n.index in marked_idx for n in p.nodes) for p in paths]
    return forest, paths, labels


def generate_incident(incident_id: str, motifs: list[str], rng: np.random.Generator,
                      db: SignatureDB | None = None, n_benign: int | None = None) -> BenchIncident:
    db = db or default_signature_db()
    g = _Gen(rng, db)
    names = list(_Gen.BENIGN)
    probs = np.array([_Gen.BENIGN[n] for n in names])
    probs /= probs.sum()
    n_benign = n_benign if n_benign is not None else int(rng.integers(40, 81))

    roots: list[tuple[RawTraceFrame, str | None]] = []
    for _ in range(n_benign):
        builder: Callable[[], RawTraceFrame] = getattr(g, names[int(rng.choice(len(names), p=probs))])
        roots.append((builder(), None))
    for motif in motifs:
        for root in getattr(g, f"a_{motif}")():
            pos = int(rng.integers(len(roots) + 1))
            roots.insert(pos, (root, motif))

    inc = BenchIncident(incident_id, list(motifs))
    for root, motif in roots:
        forest, paths, labels = _label(root, g.marked, db)
        inc.txs.append(BenchTx("0x" + rng.bytes(32).hex(), forest, paths, labels, motif))
    return inc


def generate_benchmark(n_incidents: int = DEFAULT_INCIDENTS, seed: int = DEFAULT_SEED,
                       db: SignatureDB | None = None) -> Benchmark:
    """Deterministic for a given seed; every motif kind appears in at least two incidents when n >= 10."""
    db = db or default_signature_db()
    rng = np.random.default_rng(seed)
    incidents = []
    for i in range(n_incidents):
        motifs = [MOTIFS[i % len(MOTIFS)]]
        if rng.random() < 0.4:
            extra = MOTIFS[int(rng.integers(len(MOTIFS)))]
            if extra not in motifs:
                motifs.append(extra)
        inc = generate_incident(f"incident-{i:02d}", motifs, rng, db)
        if inc.attack_path_count > MAX_ATTACK_PATHS:
            raise AssertionError(f"{inc.incident_id}: {inc.attack_path_count} attack paths")
        incidents.append(inc)
    return Benchmark(incidents, seed)
