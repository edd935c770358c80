"""ROC-AUC, stratified bootstrap intervals and per-domain reports."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import filter_domain, read_clip, read_manifest
from .domains import ALL_DOMAINS, DomainKey
from .errors import DataError, DegenerateInputError, EaseError, FormatError
from .models import ModelState, load_checkpoint

N_BOOTSTRAP = 2000
LEVEL = 0.95


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DegenerateInputError(f"{scores.size} scores but {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise DegenerateInputError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC needs both classes", n_pos=n_pos, n_neg=n_neg)
    if not np.all(np.isfinite(scores)):
        raise DegenerateInputError("scores must be finite")
    return scores, labels, n_pos, n_neg


def _auc_from_split(pos: np.ndarray, neg: np.ndarray) -> float:
    # Mann-Whitney U from midranks; midranks are exact halves so U is exact
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos = pos.size
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * neg.size))


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counted 1/2."""
    scores, labels, _, _ = _check_binary(scores, labels)
    return _auc_from_split(scores[labels == 1], scores[labels == 0])


def bootstrap_aucs(scores, labels, n_bootstrap: int = N_BOOTSTRAP, seed: int = 0) -> np.ndarray:
    """AUC of each stratified resample; resample b draws from ``default_rng([seed, b])``."""
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    if n_bootstrap < 1:
        raise EaseError(f"n_bootstrap must be >= 1, got {n_bootstrap}")
    pos, neg = scores[labels == 1], scores[labels == 0]
    out = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        rng = np.random.default_rng([seed, b])
        out[b] = _auc_from_split(pos[rng.integers(0, n_pos, n_pos)], neg[rng.integers(0, n_neg, n_neg)])
    return out


def bootstrap_ci(scores, labels, n_bootstrap: int = N_BOOTSTRAP, level: float = LEVEL,
                 seed: int = 0) -> tuple[float, float]:
    if not 0 < level < 1:
        raise EaseError(f"level must lie in (0, 1), got {level}")
    aucs = bootstrap_aucs(scores, labels, n_bootstrap, seed)
    tail = 100 * (1 - level) / 2
    low, high = np.percentile(aucs, [tail, 100 - tail])
    return float(low), float(high)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) at every distinct threshold, from (0, 0) to (1, 1)."""
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


@dataclass(frozen=True)
class EvalReport:
    domain: str
    auc: float
    ci_low: float
    ci_high: float
    n_pos: int
    n_neg: int
    n_bootstrap: int
    seed: int
    checkpoint: Optional[str]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        expected = set(cls.__dataclass_fields__)
        if set(d) != expected:
            raise FormatError(f"report fields {sorted(d)} do not match {sorted(expected)}")
        DomainKey.parse(d["domain"])
        return cls(**d)

    def row(self) -> str:
        return f"{self.domain}  {self.auc:.2f} [{self.ci_low:.2f}, {self.ci_high:.2f}]"


def report_from_scores(scores, labels, domain, n_bootstrap: int = N_BOOTSTRAP, seed: int = 0,
                       checkpoint: Optional[str] = None, level: float = LEVEL) -> EvalReport:
    key = domain if isinstance(domain, DomainKey) else DomainKey.parse(domain)
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    low, high = bootstrap_ci(scores, labels, n_bootstrap, level, seed)
    return EvalReport(key.canonical, roc_auc(scores, labels), low, high, n_pos, n_neg,
                      int(n_bootstrap), int(seed), checkpoint)


def write_report(report: EvalReport, path: "str | os.PathLike") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return path


def read_report(path: "str | os.PathLike") -> EvalReport:
    try:
        return EvalReport.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"cannot read report {path}: {exc}", path=str(path)) from exc


def checkpoint_id(path: "str | os.PathLike") -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def score_records(model: ModelState, records, batch_size: int = 16) -> np.ndarray:
    """Sigmoid scores for each record, preprocessed exactly as the router does."""
    from .router import RouteEntry, preprocess, score_batch

    cfg = model.config
    records = list(records)
    out = np.empty(len(records))
    entry = None
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch = []
        for rec in chunk:
            if entry is None:
                entry = RouteEntry(rec.domain, model.arch, (cfg.height, cfg.width), cfg.frames)
            try:
                batch.append(preprocess(read_clip(rec.path), entry))
            except EaseError as exc:
                exc.context.setdefault("record", f"{rec.video_id}/{rec.stitch_idx}")
                raise
        out[start:start + len(chunk)] = score_batch(model, np.stack(batch).astype(model_dtype(model)))
    return out


def model_dtype(model: ModelState):
    return next(iter(model.params.values())).dtype


def evaluate(checkpoint: "str | os.PathLike", manifest: "str | os.PathLike", domain, seed: int = 0,
             n_bootstrap: int = N_BOOTSTRAP, split: str = "test") -> tuple[EvalReport, np.ndarray, np.ndarray]:
    """Score the ``split`` records of ``domain`` and build a report; also returns (scores, labels)."""
    key = domain if isinstance(domain, DomainKey) else DomainKey.parse(domain)
    records = filter_domain(read_manifest(manifest), key, split)
    if not records:
        raise DataError(f"no {split} records for {key.canonical}", manifest=str(manifest))
    model = load_checkpoint(checkpoint)
    scores = score_records(model, records)
    labels = np.array([r.label for r in records])
    report = report_from_scores(scores, labels, key, n_bootstrap, seed, checkpoint_id(checkpoint))
    return report, scores, labels


def format_table(reports: Sequence[EvalReport], sep: str = "  ") -> str:
    """All seven domains in fixed order; domains without a report show n/a."""
    by_domain = {r.domain: r for r in reports}
    width = max(len(d.canonical) for d in ALL_DOMAINS)
    lines = []
    for d in ALL_DOMAINS:
        r = by_domain.get(d.canonical)
        cell = f"{r.auc:.2f} [{r.ci_low:.2f}, {r.ci_high:.2f}]" if r else "n/a"
        name = d.canonical if sep == "\t" else d.canonical.ljust(width)
        lines.append(f"{name}{sep}{cell}")
    return "\n".join(lines)


def format_tsv(reports: Sequence[EvalReport]) -> str:
    header = "domain\tauc\tci_low\tci_high\tn_pos\tn_neg"
    by_domain = {r.domain: r for r in reports}
    rows = [header]
    for d in ALL_DOMAINS:
        r = by_domain.get(d.canonical)
        if r is None:
            rows.append(f"{d.canonical}\t\t\t\t\t")
        else:
            rows.append(f"{r.domain}\t{r.auc!r}\t{r.ci_low!r}\t{r.ci_high!r}\t{r.n_pos}\t{r.n_neg}")
    return "\n".join(rows) + "\n"
