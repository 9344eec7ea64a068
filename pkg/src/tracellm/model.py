"""Logistic path classifier, ranking and leave-one-incident-out evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import ContractViolation, ParseError, TrainingError, ValidationError
from .features import (
    MAX_VOCAB,
    SuspiciousMethodSet,
    build_vocab,
    featurize_unit,
    semantic_anomaly,
)

log = logging.getLogger(__name__)

DEFAULT_CUTOFF = 20
N_SCALARS = 4


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    l2: float = 1e-4
    tol: float = 1e-8
    max_iter: int = 10_000
    class_weighting: bool = True
    max_vocab: int = MAX_VOCAB

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class AnomalyModel:
    weights: np.ndarray
    bias: float
    vocab: list[str]
    scaler_bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    config_digest: str = ""

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (N_SCALARS + len(self.vocab),):
            raise ValidationError(
                f"weights: expected {N_SCALARS + len(self.vocab)} entries, got {self.weights.shape}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise ValidationError("model parameters must be finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def to_json(self) -> str:
        doc = {
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "vocab": list(self.vocab),
            "scaler_bounds": {k: [float(lo), float(hi)] for k, (lo, hi) in sorted(self.scaler_bounds.items())},
            "config_digest": self.config_digest,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> AnomalyModel:
        try:
            doc = json.loads(text)
            return cls(
                weights=np.array(doc["weights"], dtype=np.float64),
                bias=float(doc["bias"]),
                vocab=list(doc["vocab"]),
                scaler_bounds={k: (float(v[0]), float(v[1])) for k, v in doc.get("scaler_bounds", {}).items()},
                config_digest=doc.get("config_digest", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"model file: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> AnomalyModel:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def sigmoid(z):
    """Overflow-free logistic function (scalar or array)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def class_weights(y: np.ndarray, balanced: bool = True) -> np.ndarray:
    if not balanced:
        return np.ones_like(y, dtype=np.float64)
    n = y.shape[0]
    n_pos = float(y.sum())
    n_neg = n - n_pos
    return np.where(y > 0.5, n / (2.0 * n_pos), n / (2.0 * n_neg))


def loss_and_grad(
    w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, sample_weight: np.ndarray, l2: float
) -> tuple[float, np.ndarray, float]:
    """Weighted mean log-loss plus ``l2/2 * |w|^2`` (bias unpenalized)."""
    n = X.shape[0]
    z = X @ w + b
    # log(1 + e^z) - y z  ==  -y log s(z) - (1 - y) log(1 - s(z))
    loss = float(np.sum(sample_weight * (np.logaddexp(0.0, z) - y * z)) / n + 0.5 * l2 * (w @ w))
    r = sample_weight * (sigmoid(z) - y) / n
    return loss, X.T @ r + l2 * w, float(r.sum())


def _validate_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError(f"features/labels shape mismatch: {X.shape} vs {y.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("features contain non-finite values")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0/1")
    if y.size == 0 or y.min() == y.max():
        raise TrainingError("training data needs at least one example of each class")
    return X, y


def fit_logistic(X, y, config: TrainConfig | None = None) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent from a zero start."""
    config = config or TrainConfig()
    X, y = _validate_xy(X, y)
    sw = class_weights(y, config.class_weighting)
    w = np.zeros(X.shape[1])
    b = 0.0
    for it in range(config.max_iter):
        _, gw, gb = loss_and_grad(w, b, X, y, sw, config.l2)
        if np.sqrt(gw @ gw + gb * gb) < config.tol:
            log.debug("converged after %d iterations", it)
            break
        w -= config.learning_rate * gw
        b -= config.learning_rate * gb
    return w, b


def train(
    X,
    y,
    config: TrainConfig | None = None,
    vocab: Sequence[str] = (),
    scaler_bounds: Mapping[str, tuple[float, float]] | None = None,
) -> AnomalyModel:
    config = config or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] != N_SCALARS + len(vocab):
        raise ValidationError(f"feature dimension {X.shape[1]} does not match 4 + |vocab| = {N_SCALARS + len(vocab)}")
    w, b = fit_logistic(X, y, config)
    return AnomalyModel(w, b, list(vocab), dict(scaler_bounds or {}), config.digest())


def predict(model: AnomalyModel, x) -> float | np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ContractViolation(f"feature vector has {x.shape[-1]} entries, model expects {model.dim}")
    return sigmoid(x @ model.weights + model.bias)


# -- datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class LabeledPath:
    incident_id: str
    tx_hash: str
    path_key: str
    sig: tuple[str, ...]
    label: bool
    # sum of out-degrees along the path; not recoverable from sig alone
    fanout: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "incident_id": self.incident_id,
                "tx_hash": self.tx_hash,
                "path_key": self.path_key,
                "sig": list(self.sig),
                "label": "attack" if self.label else "benign",
                "fanout": self.fanout,
            },
            sort_keys=True,
        )

    @classmethod
    def from_dict(cls, doc: dict) -> LabeledPath:
        label = doc["label"]
        if label not in ("attack", "benign"):
            raise ValueError(f"label must be 'attack' or 'benign', got {label!r}")
        sig = doc["sig"]
        if not isinstance(sig, list) or not all(isinstance(t, str) for t in sig):
            raise ValueError("sig must be a list of strings")
        return cls(
            incident_id=str(doc["incident_id"]),
            tx_hash=str(doc["tx_hash"]),
            path_key=str(doc["path_key"]),
            sig=tuple(sig),
            label=label == "attack",
            fanout=int(doc.get("fanout", 0)),
        )


def load_dataset(path: str | os.PathLike) -> list[LabeledPath]:
    rows: list[LabeledPath] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = LabeledPath.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(str(exc), lineno) from None
            if row.path_key in seen:
                raise ParseError(f"duplicate path_key {row.path_key}", lineno)
            seen.add(row.path_key)
            rows.append(row)
    return rows


def dump_dataset(rows: Iterable[LabeledPath], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row.to_json() + "\n")


def group_by_incident(rows: Iterable[LabeledPath]) -> dict[str, list[LabeledPath]]:
    groups: dict[str, list[LabeledPath]] = {}
    for row in rows:
        groups.setdefault(row.incident_id, []).append(row)
    return dict(sorted(groups.items()))


# -- ranking ------------------------------------------------------------------


@dataclass
class RankingResult:
    incident_id: str
    ranked: list[tuple[str, float]]
    cutoff: int = DEFAULT_CUTOFF

    def top_keys(self) -> list[str]:
        return [k for k, _ in self.ranked[: self.cutoff]]

    def to_dict(self) -> dict:
        return {
            "incident_id": self.incident_id,
            "cutoff": self.cutoff,
            "ranked": [{"path_key": k, "probability": p} for k, p in self.ranked],
        }


def rank_scores(
    incident_id: str,
    scores: Mapping[str, float],
    semantic: Mapping[str, Fraction | float] | None = None,
    cutoff: int = DEFAULT_CUTOFF,
) -> RankingResult:
    """Descending score; ties by higher semantic score, then lower path key."""
    if cutoff < 1:
        raise ContractViolation("cutoff must be at least 1")
    semantic = semantic or {}
    order = sorted(scores, key=lambda k: (-scores[k], -semantic.get(k, 0), k))
    return RankingResult(incident_id, [(k, float(scores[k])) for k in order[:cutoff]], cutoff)


def rank_paths(
    model: AnomalyModel,
    paths: Sequence[tuple[str, np.ndarray, Fraction | float]],
    cutoff: int = DEFAULT_CUTOFF,
    incident_id: str = "",
) -> RankingResult:
    """Rank ``(path_key, feature_vector, semantic)`` triples by predicted probability."""
    if not paths:
        return rank_scores(incident_id, {}, cutoff=cutoff)
    X = np.vstack([x for _, x, _ in paths])
    probs = np.atleast_1d(predict(model, X))
    scores = {key: float(p) for (key, _, _), p in zip(paths, probs)}
    semantic = {key: s for key, _, s in paths}
    return rank_scores(incident_id, scores, semantic, cutoff)


def recall_at_k(ranking: RankingResult, ground_truth: Iterable[str]) -> float:
    gt = set(ground_truth)
    if not gt:
        raise ValidationError("recall is undefined for an empty ground-truth set")
    hits = gt.intersection(ranking.top_keys())
    return len(hits) / len(gt)


def baseline_semantic_score(path, suspicious: SuspiciousMethodSet | None = None) -> Fraction:
    return semantic_anomaly(path, suspicious)


# -- scorers and leave-one-group-out --------------------------------------------


class Scorer(Protocol):
    name: str

    def fit(self, incidents: Mapping[str, list[LabeledPath]]) -> None: ...

    def score(self, incident_id: str, rows: list[LabeledPath]) -> dict[str, float]: ...


class SemanticScorer:
    name = "semantic"

    def __init__(self, suspicious: SuspiciousMethodSet | None = None):
        self.suspicious = suspicious or SuspiciousMethodSet()

    def fit(self, incidents) -> None:
        pass

    def score(self, incident_id, rows):
        return {r.path_key: float(semantic_anomaly(r.sig, self.suspicious)) for r in rows}


class LogisticScorer:
    """The full five-descriptor logistic model."""

    name = "full"

    def __init__(self, config: TrainConfig | None = None, suspicious: SuspiciousMethodSet | None = None):
        self.config = config or TrainConfig()
        self.suspicious = suspicious or SuspiciousMethodSet()
        self.model: AnomalyModel | None = None

    def fit(self, incidents):
        self.model = train_from_groups(incidents, self.config, self.suspicious)

    def score(self, incident_id, rows):
        if self.model is None:
            raise TrainingError("scorer used before fit")
        _, X = featurize_rows(rows, self.model.vocab, self.suspicious)
        probs = np.atleast_1d(predict(self.model, X)) if len(rows) else []
        return {r.path_key: float(p) for r, p in zip(rows, probs)}


class ScoreFileScorer:
    """Externally computed scores, one ``{"path_key", "score"}`` JSON object per line."""

    def __init__(self, path: str | os.PathLike, name: str = "external"):
        self.name = name
        self.scores: dict[str, float] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    self.scores[str(doc["path_key"])] = float(doc["score"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(str(exc), lineno) from None

    def fit(self, incidents):
        pass

    def score(self, incident_id, rows):
        return {r.path_key: self.scores.get(r.path_key, float("-inf")) for r in rows}


def featurize_rows(rows: Sequence[LabeledPath], vocab: Sequence[str], suspicious: SuspiciousMethodSet | None = None):
    return featurize_unit([(r.sig, r.fanout) for r in rows], vocab, suspicious)


def train_from_groups(
    incidents: Mapping[str, list[LabeledPath]],
    config: TrainConfig | None = None,
    suspicious: SuspiciousMethodSet | None = None,
) -> AnomalyModel:
    """Vocabulary, per-incident featurization and training on labeled incidents."""
    config = config or TrainConfig()
    vocab = build_vocab((r.sig for rows in incidents.values() for r in rows), config.max_vocab)
    blocks, labels, all_feats = [], [], []
    for rows in incidents.values():
        feats, X = featurize_rows(rows, vocab, suspicious)
        blocks.append(X)
        labels.extend(1.0 if r.label else 0.0 for r in rows)
        all_feats.extend(feats)
    X = np.vstack(blocks) if blocks else np.zeros((0, N_SCALARS + len(vocab)))
    fo = [f.fanout for f in all_feats] or [0]
    de = [f.depth for f in all_feats] or [0]
    bounds = {"fanout": (float(min(fo)), float(max(fo))), "depth": (float(min(de)), float(max(de)))}
    return train(X, np.array(labels), config, vocab, bounds)


@dataclass
class LogoResult:
    scorer: str
    folds: dict[str, float]
    skipped: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.folds.values()))) if self.folds else float("nan")

    def to_dict(self) -> dict:
        return {
            "scorer": self.scorer,
            "folds": {k: round(v, 4) for k, v in self.folds.items()},
            "mean_recall": round(self.mean, 4),
            "skipped": self.skipped,
        }


def logo_evaluate(
    incidents: Mapping[str, list[LabeledPath]],
    scorer: Scorer,
    cutoff: int = DEFAULT_CUTOFF,
    suspicious: SuspiciousMethodSet | None = None,
) -> LogoResult:
    """Hold out each incident in turn, fit on the rest, report recall@cutoff."""
    if len(incidents) < 2:
        raise ValidationError("leave-one-group-out needs at least two incidents")
    suspicious = suspicious or SuspiciousMethodSet()
    result = LogoResult(getattr(scorer, "name", type(scorer).__name__), {})
    for held_out, rows in incidents.items():
        truth = {r.path_key for r in rows if r.label}
        if not truth:
            warnings.warn(f"incident {held_out} has no attack paths; fold skipped", stacklevel=2)
            result.skipped.append(held_out)
            continue
        scorer.fit({k: v for k, v in incidents.items() if k != held_out})
        scores = scorer.score(held_out, rows)
        semantic = {r.path_key: semantic_anomaly(r.sig, suspicious) for r in rows}
        ranking = rank_scores(held_out, scores, semantic, cutoff)
        result.folds[held_out] = recall_at_k(ranking, truth)
    return result
