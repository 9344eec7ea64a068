"""Per-path descriptors: fanout, depth, frequency, suspicious-method density, TF-IDF.

Structural scalars are exact (ints and Fractions); only
:func:`assemble_vector` turns them into floats.
"""

from __future__ import annotations

import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .call_tree import ExecPath, out_degree
from .errors import ContractViolation, ValidationError
from .trace_model import bare_name

MAX_VOCAB = 512

# method names from the suspicious-signature table, argument lists stripped
DEFAULT_SUSPICIOUS = frozenset({
    "selfdestruct", "fallback", "receive", "initialize", "transfer", "transferFrom",
    "onlyOwner", "hasRole", "ecrecover", "assert", "require", "call", "any",
    "tokensReceived", "tokensToSend", "balanceOf", "sweepToken", "drain",
    "isOperationReady", "beforeCall",
})

_UNRESOLVED = re.compile(r"^0x[0-9a-f]{8}$")


def normalize_method(name: str) -> str:
    return bare_name(name)


class SuspiciousMethodSet:
    """Membership on bare method names.

    ``any`` stands for calls into arbitrary external code: it matches edges
    whose selector could not be resolved to a name.
    """

    def __init__(self, names: Iterable[str] = DEFAULT_SUSPICIOUS):
        self.names = frozenset(normalize_method(n) for n in names if normalize_method(n))
        if not self.names:
            raise ValidationError("suspicious method set must not be empty")

    def __contains__(self, method: str) -> bool:
        name = normalize_method(method)
        if name in self.names:
            return True
        return "any" in self.names and bool(_UNRESOLVED.match(name))

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def load(cls, path: str | os.PathLike) -> SuspiciousMethodSet:
        with open(path, encoding="utf-8") as fh:
            names = [line.strip() for line in fh if line.strip() and not line.startswith("#")]
        return cls(names)


def _sig(path: ExecPath | Sequence[str]) -> tuple[str, ...]:
    return tuple(path.sig) if isinstance(path, ExecPath) else tuple(path)


class PathCorpus:
    """Signature sequences of every path in one analysis unit, with document frequencies."""

    def __init__(self, sigs: Iterable[Sequence[str]]):
        self.sigs = [tuple(s) for s in sigs]
        self.sig_counts = Counter(self.sigs)
        self.df: Counter[str] = Counter()
        for sig in self.sigs:
            self.df.update(set(sig))

    @classmethod
    def from_paths(cls, paths: Iterable[ExecPath]) -> PathCorpus:
        return cls(p.sig for p in paths)

    def __len__(self) -> int:
        return len(self.sigs)

    def idf(self, token: str) -> float:
        return math.log(len(self.sigs) / (1 + self.df[token]))


@dataclass
class PathFeatures:
    fanout: int
    depth: int
    frequency: int
    inv_frequency: Fraction
    semantic: Fraction
    tfidf: dict[str, float] = field(default_factory=dict)


def fanout(path: ExecPath) -> int:
    return sum(out_degree(n) for n in path.nodes)


def depth(path: ExecPath) -> int:
    return len(path.nodes)


def frequency(path: ExecPath | Sequence[str], corpus: PathCorpus) -> int:
    count = corpus.sig_counts.get(_sig(path), 0)
    if count == 0:
        raise ContractViolation("path signature does not occur in the corpus")
    return count


def semantic_anomaly(path: ExecPath | Sequence[str], suspicious: SuspiciousMethodSet | None = None) -> Fraction:
    """Share of path edges whose method is suspicious; 0 for a single-node path."""
    sig = _sig(path)
    if not sig:
        return Fraction(0)
    suspicious = suspicious or SuspiciousMethodSet()
    return Fraction(sum(1 for m in sig if m in suspicious), len(sig))


def tfidf(path: ExecPath | Sequence[str], corpus: PathCorpus) -> dict[str, float]:
    sig = _sig(path)
    if not sig:
        return {}
    if len(corpus) == 0:
        raise ContractViolation("tf-idf needs a non-empty corpus")
    counts = Counter(sig)
    total = len(sig)
    return {t: (c / total) * corpus.idf(t) for t, c in counts.items()}


def features_from_sig(
    sig: Sequence[str],
    fanout_value: int,
    corpus: PathCorpus,
    suspicious: SuspiciousMethodSet | None = None,
) -> PathFeatures:
    freq = frequency(sig, corpus)
    return PathFeatures(
        fanout=fanout_value,
        depth=len(sig) + 1,
        frequency=freq,
        inv_frequency=Fraction(1, freq),
        semantic=semantic_anomaly(sig, suspicious),
        tfidf=tfidf(sig, corpus),
    )


def extract_features(path: ExecPath, corpus: PathCorpus, suspicious: SuspiciousMethodSet | None = None) -> PathFeatures:
    return features_from_sig(path.sig, fanout(path), corpus, suspicious)


def build_vocab(sigs: Iterable[Sequence[str]], max_size: int = MAX_VOCAB) -> list[str]:
    """Tokens by descending document frequency (ties by name), truncated."""
    df: Counter[str] = Counter()
    for sig in sigs:
        df.update(set(sig))
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:max_size]]


Bounds = Mapping[str, tuple[float, float]]


def scalar_bounds(features: Iterable[PathFeatures]) -> dict[str, tuple[float, float]]:
    feats = list(features)
    if not feats:
        return {"fanout": (0.0, 0.0), "depth": (0.0, 0.0)}
    fo = [f.fanout for f in feats]
    de = [f.depth for f in feats]
    return {"fanout": (float(min(fo)), float(max(fo))), "depth": (float(min(de)), float(max(de)))}


def _minmax(value: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    return min(max((value - lo) / (hi - lo), 0.0), 1.0)


def assemble_vector(pf: PathFeatures, vocab: Sequence[str], bounds: Bounds | None = None) -> np.ndarray:
    """``[fanout, depth, 1/freq, semantic, tfidf...]``, fanout/depth min-max scaled when bounds are given."""
    if bounds is None:
        fo, de = float(pf.fanout), float(pf.depth)
    else:
        fo = _minmax(pf.fanout, *bounds["fanout"])
        de = _minmax(pf.depth, *bounds["depth"])
    x = np.zeros(4 + len(vocab), dtype=np.float64)
    x[0], x[1] = fo, de
    x[2], x[3] = float(pf.inv_frequency), float(pf.semantic)
    if pf.tfidf:
        for j, token in enumerate(vocab):
            w = pf.tfidf.get(token)
            if w is not None:
                x[4 + j] = w
    return x


def featurize_unit(
    items: Sequence[tuple[Sequence[str], int]],
    vocab: Sequence[str],
    suspicious: SuspiciousMethodSet | None = None,
) -> tuple[list[PathFeatures], np.ndarray]:
    """Features and design matrix for one analysis unit of ``(sig, fanout)`` pairs.

    Corpus statistics and min-max bounds are computed over the unit itself.
    """
    corpus = PathCorpus(sig for sig, _ in items)
    feats = [features_from_sig(sig, fo, corpus, suspicious) for sig, fo in items]
    bounds = scalar_bounds(feats)
    if feats:
        X = np.vstack([assemble_vector(f, vocab, bounds) for f in feats])
    else:
        X = np.zeros((0, 4 + len(vocab)))
    return feats, X
