"""Scope -> traces -> call trees -> ranked paths -> subgraphs -> code, then the report."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

from .call_tree import CallForest, ExecPath, build_forest, enumerate_paths
from .chain_access import BalanceDiff, BlockRange, ChainAccess, is_address, normalize_address
from .detect import CreatorInfo, IncidentScope, build_scope, is_contract, resolve_creator
from .errors import DecodeError, GatewayError, NotFoundError, TraceLLMError, ValidationError
from .extract import CodeArtifact, Extractor, load_template
from .features import PathCorpus, PathFeatures, SuspiciousMethodSet, assemble_vector, extract_features, scalar_bounds
from .gateway import Gateway
from .model import DEFAULT_CUTOFF, AnomalyModel, predict, rank_scores
from .subgraph import DEFAULT_K, EnclosingSubgraph, extract_subgraph
from .trace_model import SignatureDB, flatten

log = logging.getLogger(__name__)

CONTEXT_VERSION = "incident-context/1"
REPORT_VERSION = "incident-report/1"
_SCOPE_FIELDS = {"contracts", "block_range", "label"}


@dataclass(frozen=True)
class AnalysisScope:
    contracts: tuple[str, ...]
    block_range: BlockRange
    label: str | None = None

    def to_dict(self) -> dict:
        return {
            "contracts": list(self.contracts),
            "block_range": [self.block_range.start_block, self.block_range.end_block],
            "label": self.label,
        }


def parse_scope(document: str | Mapping) -> AnalysisScope:
    """Strictly validate ``{"contracts": [...], "block_range": [start, end], "label": ...}``."""
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"scope: not valid JSON ({exc})") from None
    if not isinstance(document, Mapping):
        raise ValidationError("scope: expected a JSON object")
    unknown = set(document) - _SCOPE_FIELDS
    if unknown:
        raise ValidationError(f"{sorted(unknown)[0]}: unknown field")
    for name in ("contracts", "block_range"):
        if name not in document:
            raise ValidationError(f"{name}: missing field")

    contracts = document["contracts"]
    if not isinstance(contracts, list) or not contracts:
        raise ValidationError("contracts: expected a non-empty list of addresses")
    normalized = []
    for i, addr in enumerate(contracts):
        normalized.append(normalize_address(addr, f"contracts[{i}]"))

    rng = document["block_range"]
    if not isinstance(rng, list) or len(rng) != 2:
        raise ValidationError("block_range: expected [start, end]")
    block_range = BlockRange(rng[0], rng[1])

    label = document.get("label")
    if label is not None and not isinstance(label, str):
        raise ValidationError("label: expected a string")
    return AnalysisScope(tuple(dict.fromkeys(normalized)), block_range, label)


@dataclass
class PipelineConfig:
    k: int = DEFAULT_K
    cutoff: int = DEFAULT_CUTOFF
    suspicious: SuspiciousMethodSet = field(default_factory=SuspiciousMethodSet)
    signature_db: SignatureDB | None = None


@dataclass
class FlaggedPath:
    summary: dict
    probability: float
    semantic: Fraction
    features: PathFeatures
    subgraph: EnclosingSubgraph

    def to_dict(self) -> dict:
        f = self.features
        return {
            "path": self.summary,
            "probability": self.probability,
            "semantic": str(self.semantic),
            "features": {
                "fanout": f.fanout,
                "depth": f.depth,
                "frequency": f.frequency,
                "semantic": str(f.semantic),
            },
            "subgraph": self.subgraph.to_dict(),
        }


@dataclass
class TxAnalysis:
    tx_hash: str
    forest: CallForest
    paths: list[ExecPath]


@dataclass
class IncidentContext:
    scope: AnalysisScope
    creation_relations: list[CreatorInfo] = field(default_factory=list)
    code: list[CodeArtifact] = field(default_factory=list)
    flagged: list[FlaggedPath] = field(default_factory=list)
    balance_diffs: dict[str, list[BalanceDiff]] = field(default_factory=dict)
    scope_detail: IncidentScope | None = None
    diagnostics: list[str] = field(default_factory=list)
    analyses: list[TxAnalysis] = field(default_factory=list, repr=False)

    def flagged_keys(self) -> set[tuple[str, str]]:
        return {(f.summary["tx_hash"], f.summary["path_key"]) for f in self.flagged}

    def to_dict(self) -> dict:
        return {
            "version": CONTEXT_VERSION,
            "scope": self.scope.to_dict(),
            "addresses": sorted(self.scope_detail.addresses) if self.scope_detail else [],
            "transactions": [tx.tx_hash for tx in self.scope_detail.transactions] if self.scope_detail else [],
            "proxies": [p.to_dict() for p in self.scope_detail.proxies] if self.scope_detail else [],
            "creation_relations": [c.to_dict() for c in self.creation_relations],
            "code": [a.to_dict() for a in self.code],
            "flagged": [f.to_dict() for f in self.flagged],
            "balance_diffs": {tx: [d.to_dict() for d in diffs] for tx, diffs in self.balance_diffs.items()},
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def analyze_transaction(chain: ChainAccess, tx_hash: str, db: SignatureDB | None = None) -> TxAnalysis:
    records = flatten(chain.fetch_trace(tx_hash), db)
    forest = build_forest(records)
    return TxAnalysis(tx_hash, forest, enumerate_paths(forest))


def score_incident(
    analyses: Sequence[TxAnalysis],
    model: AnomalyModel,
    suspicious: SuspiciousMethodSet,
) -> list[tuple[TxAnalysis, ExecPath, PathFeatures, float]]:
    """Per-incident corpus statistics and scaling, then model probabilities for every path."""
    items = [(a, p) for a in analyses for p in a.paths]
    if not items:
        return []
    corpus = PathCorpus(p.sig for _, p in items)
    feats = [extract_features(p, corpus, suspicious) for _, p in items]
    bounds = scalar_bounds(feats)
    X = np.vstack([assemble_vector(f, model.vocab, bounds) for f in feats])
    probs = np.atleast_1d(predict(model, X))
    return [(a, p, f, float(pr)) for (a, p), f, pr in zip(items, feats, probs)]


def rank_incident(
    scored: Sequence[tuple[TxAnalysis, ExecPath, PathFeatures, float]],
    cutoff: int,
    incident_id: str = "",
):
    scores = {p.key(a.tx_hash): pr for a, p, _, pr in scored}
    semantic = {p.key(a.tx_hash): f.semantic for a, p, f, _ in scored}
    return rank_scores(incident_id, scores, semantic, cutoff)


def run_pipeline(
    scope: AnalysisScope,
    chain: ChainAccess,
    model: AnomalyModel,
    extractor: Extractor,
    config: PipelineConfig | None = None,
) -> IncidentContext:
    config = config or PipelineConfig()
    ctx = IncidentContext(scope)

    try:
        detail = build_scope(chain, scope.contracts, scope.block_range)
    except TraceLLMError as exc:
        exc.args = (f"[scope] {exc}",)
        raise
    ctx.scope_detail = detail
    ctx.diagnostics.extend(f"[scope] {d}" for d in detail.diagnostics)
    creators = {c.contract: c for c in detail.creators}

    def analyze(tx_hash: str) -> TxAnalysis | str:
        try:
            return analyze_transaction(chain, tx_hash, config.signature_db)
        except (NotFoundError, ValidationError, DecodeError) as exc:
            return f"[trace] {tx_hash}: skipped ({exc})"

    hashes = [tx.tx_hash for tx in detail.transactions]
    with ThreadPoolExecutor(max_workers=chain.parallelism) as pool:
        for outcome in pool.map(analyze, hashes):
            if isinstance(outcome, str):
                ctx.diagnostics.append(outcome)
            else:
                ctx.analyses.append(outcome)

    scored = score_incident(ctx.analyses, model, config.suspicious)
    ranking = rank_incident(scored, config.cutoff, scope.label or "")
    by_key = {p.key(a.tx_hash): (a, p, f, pr) for a, p, f, pr in scored}
    for key, prob in ranking.ranked:
        analysis, path, feats, _ = by_key[key]
        sg = extract_subgraph(analysis.forest, path, config.k, key)
        ctx.flagged.append(FlaggedPath(path.summary(analysis.tx_hash), prob, feats.semantic, feats, sg))

    involved = set(detail.addresses)
    for flagged in ctx.flagged:
        involved |= flagged.subgraph.addresses()
    involved = sorted(a for a in involved if is_address(a))

    for addr in involved:
        ctx.code.append(extractor.extract(addr))
    for addr in involved:
        if addr in creators:
            continue
        try:
            if is_contract(chain, addr):
                creators[addr] = resolve_creator(chain, addr, scope.block_range)
        except NotFoundError as exc:
            ctx.diagnostics.append(f"[creator] {addr}: {exc}")
    ctx.creation_relations = [creators[a] for a in sorted(creators)]

    for analysis in ctx.analyses:
        touched = {a for n in analysis.forest.nodes() for a in (n.record.sender, n.record.to)}
        try:
            ctx.balance_diffs[analysis.tx_hash] = chain.fetch_balance_diffs(analysis.tx_hash, touched)
        except (NotFoundError, ValidationError) as exc:
            ctx.diagnostics.append(f"[balance] {analysis.tx_hash}: skipped ({exc})")
    return ctx


# -- report -----------------------------------------------------------------------


@dataclass
class IncidentReport:
    attacker_addresses: list[str] = field(default_factory=list)
    victim_addresses: list[str] = field(default_factory=list)
    exploitation_mechanism: str = ""
    attack_execution: str = ""
    evidence_refs: list[tuple[str, str]] = field(default_factory=list)
    raw_model_output: str = ""
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "attacker_addresses": list(self.attacker_addresses),
            "victim_addresses": list(self.victim_addresses),
            "exploitation_mechanism": self.exploitation_mechanism,
            "attack_execution": self.attack_execution,
            "evidence_refs": [list(r) for r in self.evidence_refs],
            "raw_model_output": self.raw_model_output,
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        lines = ["INCIDENT REPORT", ""]
        lines.append("Attacker addresses: " + (", ".join(self.attacker_addresses) or "(none identified)"))
        lines.append("Victim addresses:   " + (", ".join(self.victim_addresses) or "(none identified)"))
        lines += ["", "Exploitation mechanism:", self.exploitation_mechanism or "(not available)"]
        lines += ["", "Attack execution:", self.attack_execution or "(not available)"]
        if self.evidence_refs:
            lines += ["", "Evidence:"] + [f"  {tx}  {key}" for tx, key in self.evidence_refs]
        if not (self.attacker_addresses or self.exploitation_mechanism):
            lines += ["", "Raw model output:", self.raw_model_output]
        return "\n".join(lines) + "\n"


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def render_prompt(ctx: IncidentContext, template: str | None = None) -> str:
    template = template if template is not None else load_template("report_prompt.txt")
    sections = {
        "{CREATION_RELATIONS}": _dump([c.to_dict() for c in ctx.creation_relations]),
        "{CODE_ARTIFACTS}": _dump([
            {"address": a.address, "kind": a.kind.value, "text": a.text, "abi": a.abi} for a in ctx.code
        ]),
        "{SUBGRAPHS}": _dump([
            {"path": f.summary, "probability": round(f.probability, 6), "subgraph": f.subgraph.to_dict()}
            for f in ctx.flagged
        ]),
        "{BALANCE_DIFFS}": _dump({tx: [d.to_dict() for d in diffs] for tx, diffs in ctx.balance_diffs.items()}),
    }
    prompt = template
    for placeholder, text in sections.items():
        prompt = prompt.replace(placeholder, text)
    return prompt


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _extract_json(text: str) -> dict | None:
    candidates = [m.group(1) for m in _FENCE.finditer(text)]
    start, end = text.find("{"), text.rfind("}")
    if start != -1 and end > start:
        candidates.append(text[start : end + 1])
    for candidate in candidates:
        try:
            doc = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict):
            return doc
    return None


_REQUIRED = ("attacker_addresses", "victim_addresses", "exploitation_mechanism", "attack_execution")


def parse_report(text: str, ctx: IncidentContext) -> IncidentReport:
    report = IncidentReport(raw_model_output=text)
    doc = _extract_json(text)
    if doc is None or any(k not in doc for k in _REQUIRED):
        report.diagnostics.append("model output lacks the required JSON sections")
        return report

    def addresses(key: str) -> list[str]:
        out = []
        values = doc.get(key) or []
        for value in values if isinstance(values, list) else [values]:
            if is_address(value):
                out.append(normalize_address(value))
            else:
                report.diagnostics.append(f"{key}: dropped malformed address {value!r}")
        return list(dict.fromkeys(out))

    report.attacker_addresses = addresses("attacker_addresses")
    report.victim_addresses = addresses("victim_addresses")
    report.exploitation_mechanism = str(doc.get("exploitation_mechanism") or "")
    steps = doc.get("attack_execution") or ""
    if isinstance(steps, list):
        steps = "\n".join(f"{i}. {s}" for i, s in enumerate(steps, start=1))
    report.attack_execution = str(steps)

    flagged = ctx.flagged_keys()
    for ref in doc.get("evidence_refs") or []:
        if isinstance(ref, (list, tuple)) and len(ref) == 2 and (str(ref[0]), str(ref[1])) in flagged:
            report.evidence_refs.append((str(ref[0]), str(ref[1])))
        else:
            report.diagnostics.append(f"evidence_refs: dropped {ref!r} (not a flagged path)")
    return report


def render_report(ctx: IncidentContext, gateway: Gateway, params: Mapping[str, Any] | None = None) -> IncidentReport:
    prompt = render_prompt(ctx)
    try:
        text = gateway.send(prompt, params)
    except GatewayError as exc:
        raise GatewayError(str(exc), prompt=prompt) from exc
    return parse_report(text, ctx)


def canned_response(ctx: IncidentContext) -> str:
    """Deterministic stand-in for a model answer, built from the top flagged path."""
    if not ctx.flagged:
        return json.dumps({
            "attacker_addresses": [],
            "victim_addresses": [],
            "exploitation_mechanism": "No anomalous execution path was flagged in the analysed range.",
            "attack_execution": [],
            "evidence_refs": [],
        })
    top = ctx.flagged[0]
    path = top.summary
    attacker = path["addresses"][0]
    controlled = {attacker}
    for info in ctx.creation_relations:
        if info.creator_eoa == attacker:
            controlled |= info.deployed_set
    victims = [a for a in path["addresses"][1:] if a not in controlled][:1]
    steps = [
        f"{rec['from']} calls {rec['method']} on {rec['to']}"
        for rec in top.subgraph.to_dict()["nodes"]
        if rec["index"] in path["node_indices"]
    ]
    return json.dumps({
        "attacker_addresses": [attacker],
        "victim_addresses": victims,
        "exploitation_mechanism": (
            f"Highest-ranked path (p={top.probability:.4f}) passes through "
            + ", ".join(path["sig"] or ["a single top-level call"])
        ),
        "attack_execution": steps,
        "evidence_refs": [[path["tx_hash"], path["path_key"]]],
    }, sort_keys=True)
