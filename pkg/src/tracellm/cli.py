"""``trace-llm`` command line: one subcommand per analysis stage."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from .call_tree import path_key
from .chain_access import (
    BlockRange,
    ChainAccess,
    ExplorerTransport,
    FixtureStore,
    JsonRpcTransport,
    normalize_address,
    normalize_hash,
)
from .errors import GatewayError, TraceLLMError, ValidationError
from .extract import Extractor, utc_now
from .features import SuspiciousMethodSet
from .gateway import HttpGateway, MockGateway, ReplayGateway
from .model import (
    AnomalyModel,
    LogisticScorer,
    ScoreFileScorer,
    SemanticScorer,
    TrainConfig,
    group_by_incident,
    load_dataset,
    logo_evaluate,
    train_from_groups,
)
from .pipeline import (
    AnalysisScope,
    analyze_transaction,
    PipelineConfig,
    canned_response,
    parse_scope,
    rank_incident,
    render_report,
    run_pipeline,
    score_incident,
)
from .subgraph import extract_subgraph, subgraph_stats
from .trace_model import default_signature_db, load_signature_db

log = logging.getLogger("tracellm")


# -- configuration -------------------------------------------------------------------


@dataclass
class CliConfig:
    """Resolved settings.  Precedence: command-line flags, then TRACELLM_* env, then the config file."""

    rpc_url: str | None = None
    explorer_url: str = "https://api.etherscan.io/api"
    explorer_key: str | None = None
    fixtures: str | None = None
    record: bool = False
    gateway_url: str = "https://openrouter.ai/api/v1/chat/completions"
    gateway_key: str | None = None
    gateway_model: str | None = None
    model: str | None = None
    signatures: str | None = None
    suspicious: str | None = None
    decompiler: str | None = None
    decompiler_timeout: float = 120.0
    k: int = 1
    cutoff: int = 20
    jobs: int = 8
    out: str = "trace-llm-out"

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


_INT_KEYS = {"k", "cutoff", "jobs"}
_FLOAT_KEYS = {"decompiler_timeout"}
_BOOL_KEYS = {"record"}


def _coerce(key: str, raw: Any, origin: str) -> Any:
    if key in _INT_KEYS or key in _FLOAT_KEYS:
        try:
            value = int(raw) if key in _INT_KEYS else float(raw)
        except (TypeError, ValueError):
            raise ValidationError(f"{origin}: {key} expects a number, got {raw!r}") from None
        if key in _INT_KEYS and value < (0 if key == "k" else 1):
            raise ValidationError(f"{origin}: {key} is out of range ({value})")
        return value
    if key in _BOOL_KEYS:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text not in ("true", "false", "1", "0", "yes", "no"):
            raise ValidationError(f"{origin}: {key} expects true or false, got {raw!r}")
        return text in ("true", "1", "yes")
    return str(raw)


def parse_config_file(path: str | os.PathLike) -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment; values may be double-quoted."""
    out: dict[str, Any] = {}
    allowed = set(CliConfig.keys())
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"config: cannot read {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        if key not in allowed:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        if len(value) >= 2 and value[0] == value[-1] == '"':
            value = value[1:-1]
        elif "#" in value:
            value = value.split("#", 1)[0].strip()
        out[key] = _coerce(key, value, f"config line {lineno}")
    return out


def resolve_config(args: argparse.Namespace, environ: dict[str, str] | None = None) -> CliConfig:
    environ = os.environ if environ is None else environ
    merged: dict[str, Any] = {}
    config_path = getattr(args, "config", None) or environ.get("TRACELLM_CONFIG")
    if config_path:
        merged.update(parse_config_file(config_path))
    for key in CliConfig.keys():
        env_value = environ.get(f"TRACELLM_{key.upper()}")
        if env_value is not None and env_value != "":
            merged[key] = _coerce(key, env_value, f"TRACELLM_{key.upper()}")
    for key in CliConfig.keys():
        flag_value = getattr(args, key, None)
        if flag_value is not None and flag_value is not False:
            merged[key] = _coerce(key, flag_value, f"--{key.replace('_', '-')}")
    return CliConfig(**merged)


# -- wiring --------------------------------------------------------------------------


def make_chain(cfg: CliConfig) -> ChainAccess:
    store = FixtureStore(cfg.fixtures, writable=cfg.record) if cfg.fixtures else None
    live = store is None or cfg.record
    rpc = JsonRpcTransport(cfg.rpc_url) if (live and cfg.rpc_url) else None
    explorer = ExplorerTransport(cfg.explorer_url, cfg.explorer_key) if (live and cfg.explorer_key) else None
    if rpc is None and store is None:
        raise ValidationError("no data source: set --fixtures or --rpc-url (TRACELLM_RPC_URL)")
    return ChainAccess(rpc, explorer, store, parallelism=cfg.jobs)


def load_model(cfg: CliConfig) -> AnomalyModel:
    if cfg.model:
        try:
            return AnomalyModel.load(cfg.model)
        except OSError as exc:
            raise ValidationError(f"model: cannot read {cfg.model}: {exc.strerror}") from None
    text = resources.files("tracellm").joinpath("data", "default_model.json").read_text(encoding="utf-8")
    return AnomalyModel.from_json(text)


def pipeline_config(cfg: CliConfig) -> PipelineConfig:
    db = load_signature_db(cfg.signatures) if cfg.signatures else default_signature_db()
    suspicious = SuspiciousMethodSet.load(cfg.suspicious) if cfg.suspicious else SuspiciousMethodSet()
    return PipelineConfig(k=cfg.k, cutoff=cfg.cutoff, suspicious=suspicious, signature_db=db)


def make_extractor(cfg: CliConfig, chain: ChainAccess, gateway=None) -> Extractor:
    recorded = chain.store.recorded_at if (chain.store is not None and chain.replay_only) else None
    clock = (lambda: recorded) if recorded else utc_now
    return Extractor(chain, cfg.decompiler, cfg.decompiler_timeout, gateway,
                     cache_dir=Path(cfg.out) / "cache" if cfg.out else None, clock=clock)


def read_scope(path: str) -> AnalysisScope:
    if path == "-":
        return parse_scope(sys.stdin.read())
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"scope: cannot read {path}: {exc.strerror}") from None
    return parse_scope(text)


def emit(doc: Any) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def out_dir(cfg: CliConfig) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- commands ------------------------------------------------------------------------


def cmd_scope(args, cfg: CliConfig) -> int:
    from .detect import build_scope

    if args.scope:
        scope = read_scope(args.scope)
        seeds, rng = scope.contracts, scope.block_range
    else:
        if not args.address:
            raise ValidationError("scope: give --address (repeatable) with --from-block/--to-block, or --scope")
        if args.from_block is None or args.to_block is None:
            raise ValidationError("scope: --from-block and --to-block are required with --address")
        seeds = [normalize_address(a, "--address") for a in args.address]
        rng = BlockRange(args.from_block, args.to_block)
    emit(build_scope(make_chain(cfg), seeds, rng).to_dict())
    return 0


def cmd_tree(args, cfg: CliConfig) -> int:
    chain = make_chain(cfg)
    tx = normalize_hash(args.tx, "--tx")
    analysis = analyze_transaction(chain, tx, pipeline_config(cfg).signature_db)
    emit({
        "tx_hash": tx,
        "records": [n.record.to_dict() for n in analysis.forest.nodes()],
        "forest": analysis.forest.to_dict(),
        "paths": [p.summary(tx) for p in analysis.paths],
    })
    return 0


def cmd_rank(args, cfg: CliConfig) -> int:
    scope = read_scope(args.scope)
    chain = make_chain(cfg)
    model = load_model(cfg)
    pcfg = pipeline_config(cfg)
    from .detect import build_scope

    detail = build_scope(chain, scope.contracts, scope.block_range)
    analyses = []
    for tx in detail.transactions:
        try:
            analyses.append(analyze_transaction(chain, tx.tx_hash, pcfg.signature_db))
        except TraceLLMError as exc:
            log.warning("skipping %s: %s", tx.tx_hash, exc)
    scored = score_incident(analyses, model, pcfg.suspicious)
    ranking = rank_incident(scored, cfg.cutoff, scope.label or "")
    emit(ranking.to_dict())
    return 0


def cmd_subgraph(args, cfg: CliConfig) -> int:
    chain = make_chain(cfg)
    tx = normalize_hash(args.tx, "--tx")
    analysis = analyze_transaction(chain, tx, pipeline_config(cfg).signature_db)
    by_leaf = {p.leaf.index: p for p in analysis.paths}
    if args.leaf not in by_leaf:
        raise ValidationError(f"--leaf: {args.leaf} is not a leaf of {tx} (leaves: {sorted(by_leaf)})")
    sg = extract_subgraph(analysis.forest, by_leaf[args.leaf], cfg.k, path_key(tx, args.leaf))
    emit({**sg.to_dict(), "stats": subgraph_stats(sg)})
    return 0


def _gateway(kind: str, cfg: CliConfig, replay_dir: str | None):
    if kind == "live":
        return HttpGateway(cfg.gateway_url, cfg.gateway_key, cfg.gateway_model)
    if kind == "replay":
        directory = replay_dir or str(Path(cfg.out) / "gateway")
        inner = HttpGateway(cfg.gateway_url, cfg.gateway_key, cfg.gateway_model) if cfg.record else None
        return ReplayGateway(directory, inner)
    return None


def cmd_extract(args, cfg: CliConfig) -> int:
    chain = make_chain(cfg)
    gateway = _gateway(args.refine, cfg, args.replay_dir) if args.refine else None
    extractor = make_extractor(cfg, chain, gateway)
    emit([extractor.extract(a).to_dict() for a in args.address])
    return 0


def cmd_train(args, cfg: CliConfig) -> int:
    rows = load_dataset(args.dataset)
    config = TrainConfig(class_weighting=not args.no_class_weights)
    suspicious = SuspiciousMethodSet.load(cfg.suspicious) if cfg.suspicious else SuspiciousMethodSet()
    model = train_from_groups(group_by_incident(rows), config, suspicious)
    path = out_dir(cfg) / args.output
    model.save(path)
    emit({"model": str(path), "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
          "paths": len(rows), "vocab": len(model.vocab)})
    return 0


def cmd_eval(args, cfg: CliConfig) -> int:
    rows = load_dataset(args.dataset)
    suspicious = SuspiciousMethodSet.load(cfg.suspicious) if cfg.suspicious else SuspiciousMethodSet()
    scorers = []
    for name in args.scorer:
        if name == "full":
            scorers.append(LogisticScorer(TrainConfig(), suspicious))
        elif name == "semantic":
            scorers.append(SemanticScorer(suspicious))
        elif name.startswith("file:"):
            scorers.append(ScoreFileScorer(name[5:], name=Path(name[5:]).stem))
        else:
            raise ValidationError(f"--scorer: unknown scorer {name!r} (full, semantic, file:PATH)")
    groups = group_by_incident(rows)
    results = [logo_evaluate(groups, s, cfg.cutoff, suspicious) for s in scorers]
    for r in results:
        sys.stderr.write(f"{r.scorer:>10}  mean recall@{cfg.cutoff} = {r.mean:.4f}\n")
    emit({"cutoff": cfg.cutoff, "results": [r.to_dict() for r in results]})
    return 0


def cmd_report(args, cfg: CliConfig) -> int:
    scope = read_scope(args.scope)
    chain = make_chain(cfg)
    extractor = make_extractor(cfg, chain)
    ctx = run_pipeline(scope, chain, load_model(cfg), extractor, pipeline_config(cfg))
    out = out_dir(cfg)
    (out / "context.json").write_text(ctx.to_json(), encoding="utf-8")

    gateway = _gateway(args.gateway, cfg, args.replay_dir) or MockGateway(lambda _prompt: canned_response(ctx))
    try:
        report = render_report(ctx, gateway)
    except GatewayError as exc:
        if exc.prompt is not None:
            (out / "prompt.txt").write_text(exc.prompt, encoding="utf-8")
            sys.stderr.write(f"prompt saved to {out / 'prompt.txt'}\n")
        raise
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_json())
    return 0


def cmd_benchmark(args, cfg: CliConfig) -> int:
    from .benchmark import generate_benchmark

    bench = generate_benchmark(args.incidents, args.seed)
    path = out_dir(cfg) / args.output
    bench.write(path)
    emit({
        "dataset": str(path),
        "seed": args.seed,
        "incidents": [
            {"incident_id": inc.incident_id, "motifs": inc.motifs, "transactions": len(inc.txs),
             "paths": sum(len(t.paths) for t in inc.txs), "attack_paths": inc.attack_path_count}
            for inc in bench.incidents
        ],
    })
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("settings (flags override TRACELLM_* env, which overrides --config)")
    g.add_argument("--config", help="key = value settings file (see docs/config.md)")
    g.add_argument("--fixtures", help="recorded response directory; replay only unless --record")
    g.add_argument("--record", action="store_true", help="fetch misses live and write them into --fixtures")
    g.add_argument("--rpc-url", dest="rpc_url", help="archive node JSON-RPC endpoint with debug_* enabled")
    g.add_argument("--explorer-url", dest="explorer_url", help="Etherscan-compatible API base URL")
    g.add_argument("--model", help="anomaly model JSON (default: bundled model)")
    g.add_argument("--signatures", help="selector table, '<8 hex>\\t<signature>' per line")
    g.add_argument("--suspicious", help="suspicious method names, one per line")
    g.add_argument("--decompiler", help="decompiler command; {bytecode} or {bytecode_file} placeholders, else stdin")
    g.add_argument("--jobs", type=int, help="parallel chain requests (default 8)")
    g.add_argument("--cutoff", type=int, help="flagged paths kept per incident (default 20)")
    g.add_argument("-k", type=int, dest="k", help="hops around a flagged path (default 1)")
    g.add_argument("--out", help="output directory for files (default trace-llm-out)")
    g.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="trace-llm",
        description="Ethereum incident forensics: traces to ranked anomalous paths, subgraphs and reports.",
        epilog="Settings flags go after the subcommand, e.g. 'trace-llm rank --fixtures DIR --scope scope.json'.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("scope", parents=[common], help="expand seed contracts and list in-scope transactions")
    p.add_argument("--address", action="append", help="seed contract (repeatable)")
    p.add_argument("--from-block", type=int, dest="from_block")
    p.add_argument("--to-block", type=int, dest="to_block")
    p.add_argument("--scope", help="scope JSON file instead of --address/--from-block/--to-block")
    p.set_defaults(func=cmd_scope)

    p = sub.add_parser("tree", parents=[common], help="call forest and root-to-leaf paths of one transaction")
    p.add_argument("--tx", required=True)
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("rank", parents=[common], help="rank every path in scope with the anomaly model")
    p.add_argument("--scope", required=True, help="scope JSON file ('-' for stdin)")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("subgraph", parents=[common], help="k-hop enclosing subgraph around one path")
    p.add_argument("--tx", required=True)
    p.add_argument("--leaf", type=int, required=True, help="trace index of the path's leaf call")
    p.set_defaults(func=cmd_subgraph)

    p = sub.add_parser("extract", parents=[common], help="best available code for contracts")
    p.add_argument("--address", action="append", required=True)
    p.add_argument("--refine", choices=["replay", "live"], help="post-process decompiler output with an LLM")
    p.add_argument("--replay-dir", dest="replay_dir")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="fit the anomaly model on a labeled path dataset")
    p.add_argument("--dataset", required=True, help="JSONL of labeled paths")
    p.add_argument("--output", default="model.json", help="file name under --out")
    p.add_argument("--no-class-weights", action="store_true", dest="no_class_weights")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="leave-one-incident-out recall@cutoff")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scorer", action="append", help="full, semantic or file:PATH (repeatable; default both built-ins)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="full pipeline and incident report")
    p.add_argument("--scope", required=True, help="scope JSON file ('-' for stdin)")
    p.add_argument("--gateway", choices=["mock", "replay", "live"], default="mock")
    p.add_argument("--replay-dir", dest="replay_dir", help="recorded gateway responses (default <out>/gateway)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("benchmark", parents=[common], help="write the synthetic labeled benchmark")
    p.add_argument("--incidents", type=int, default=12)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--output", default="benchmark.jsonl", help="file name under --out")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and not args.scorer:
        args.scorer = ["full", "semantic"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    start = time.monotonic()
    try:
        cfg = resolve_config(args)
        code = args.func(args, cfg)
    except TraceLLMError as exc:
        sys.stderr.write(f"trace-llm {args.command}: {exc}\n")
        return exc.exit_code
    log.info("%s finished in %.2fs", args.command, time.monotonic() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
