"""Evaluation suite: next-click hits@k, market similarity, neighbours, analogies.

Rankings break score ties by ascending hotel index so reports are
reproducible bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import EmbeddingSet, ModelParams, embed_all

MODEL_SCORE = "model_score"
RAW = "raw"
FILTERED = "filtered"
_CHUNK = 2048


@dataclass
class EvalReport:
    task: str
    ks: list
    hits: dict
    candidates: str
    vector: str
    n_pairs: int
    n_skipped: int = 0
    config_hash: str = ""
    timestamp: str = ""
    meta: dict = field(default_factory=dict)

    def rows(self) -> list:
        return [[self.task, self.candidates, self.vector, k, f"{self.hits[k]:.4f}", self.n_pairs,
                 self.n_skipped, self.config_hash] for k in self.ks]

    def to_text(self) -> str:
        head = f"{self.task} [{self.candidates}, {self.vector}] pairs={self.n_pairs} skipped={self.n_skipped}"
        cells = "  ".join(f"hits@{k}={self.hits[k]:6.2f}" for k in self.ks)
        return f"{head}\n  {cells}"


CSV_HEADER = ["task", "candidates", "vector", "k", "hits_pct", "pairs", "skipped", "config_hash"]


def reports_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerows(r.rows())
    return buf.getvalue()


def reports_table(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text table, one row per report."""
    ks = sorted({k for r in reports for k in r.ks})
    header = ["task", "candidates", "vector", "pairs"] + [f"hits@{k}" for k in ks]
    body = [[r.task, r.candidates, r.vector, str(r.n_pairs)] +
            [f"{r.hits[k]:.2f}" if k in r.hits else "-" for k in ks] for r in reports]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) if i < 3 else c.rjust(w)
                                for i, (c, w) in enumerate(zip(row, widths)))
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]) + "\n"


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _unit(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return np.where(n > 0, X / np.where(n > 0, n, 1), 0)


def _scoring_space(params: Optional[ModelParams], scorer: str, embeddings: Optional[EmbeddingSet],
                   amenities, geo) -> tuple:
    """(query matrix, candidate matrix) so that score = query[t] . cand[c]."""
    if embeddings is None:
        embeddings = embed_all(params, amenities, geo)
    if scorer == MODEL_SCORE:
        return np.asarray(embeddings.enriched, np.float64), np.asarray(params.W_nce, np.float64)
    kind = scorer.split(":", 1)[1] if scorer.startswith("cosine:") else scorer
    V = _unit(embeddings.vectors(kind))
    return V, V


def rank_of_truth(scores: np.ndarray, cand: np.ndarray, truth_col: np.ndarray) -> np.ndarray:
    """0-based rank of each row's true column: higher score first, ties by lower index."""
    rows = np.arange(scores.shape[0])
    st = scores[rows, truth_col][:, None]
    ti = cand[truth_col][:, None]
    return ((scores > st) | ((scores == st) & (cand[None, :] < ti))).sum(axis=1)


def hits_at_k(params: Optional[ModelParams], pairs, ks, market_of=None, candidates: str = RAW,
              scorer: str = MODEL_SCORE, amenities=None, geo=None,
              embeddings: Optional[EmbeddingSet] = None, task: str = "next_click") -> EvalReport:
    """Percent of (target, next) pairs whose true next hotel ranks in the top k.

    ``scorer`` is ``model_score`` (target enriched vector dotted with output
    rows) or ``cosine:<kind>`` for click/amenity/geo/concatenated/enriched
    vectors.  ``raw`` ranks every hotel but the target; ``filtered`` ranks the
    target's market minus the target.  In filtered mode pairs whose next
    hotel lies outside the target's market, or whose market has no other
    hotel, are skipped and counted in ``n_skipped``.
    """
    ks = sorted(int(k) for k in ks)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    Q, C = _scoring_space(params, scorer, embeddings, amenities, geo)
    H = C.shape[0]
    ranks = []
    skipped = {"out_of_market": 0, "empty_market": 0}
    if candidates == RAW:
        cand = np.arange(H)
        for s in range(0, len(pairs), _CHUNK):
            t, y = pairs[s:s + _CHUNK, 0], pairs[s:s + _CHUNK, 1]
            S = Q[t] @ C.T
            S[np.arange(len(t)), t] = -np.inf
            r = rank_of_truth(S, cand, y)
            r[y == t] = H
            ranks.append(r)
    elif candidates == FILTERED:
        market_of = np.asarray(market_of)
        tm, ym = market_of[pairs[:, 0]], market_of[pairs[:, 1]]
        same = tm == ym
        skipped["out_of_market"] = int((~same).sum())
        kept = pairs[same]
        order = np.argsort(market_of, kind="stable")
        for m in np.unique(market_of[kept[:, 0]]) if len(kept) else []:
            members = order[market_of[order] == m]
            sub = kept[market_of[kept[:, 0]] == m]
            if len(members) < 2:
                skipped["empty_market"] += len(sub)
                continue
            col = np.full(H, -1, dtype=np.int64)
            col[members] = np.arange(len(members))
            for s in range(0, len(sub), _CHUNK):
                t, y = sub[s:s + _CHUNK, 0], sub[s:s + _CHUNK, 1]
                S = Q[t] @ C[members].T
                S[np.arange(len(t)), col[t]] = -np.inf
                r = rank_of_truth(S, members, col[y])
                r[y == t] = len(members)
                ranks.append(r)
    else:
        raise ValueError(f"candidates must be {RAW!r} or {FILTERED!r}")
    ranks = np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)
    n = len(ranks)
    hits = {k: (100.0 * float((ranks < k).sum()) / n if n else 0.0) for k in ks}
    vector = scorer.split(":", 1)[1] if scorer.startswith("cosine:") else scorer
    return EvalReport(task, ks, hits, candidates, vector, n, sum(skipped.values()),
                      timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                      meta={"skipped": skipped, "ranks": ranks})


# -- similarity ---------------------------------------------------------------

@dataclass
class MarketSimilarityMatrix:
    markets: list
    matrix: np.ndarray

    def separation(self) -> float:
        """Mean diagonal minus mean off-diagonal entry."""
        M = self.matrix
        off = M[~np.eye(len(M), dtype=bool)]
        return float(np.mean(np.diag(M)) - (off.mean() if off.size else 0.0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["market"] + list(self.markets))
        for name, row in zip(self.markets, self.matrix):
            w.writerow([name] + [f"{x:.6f}" for x in row])
        return buf.getvalue()


def market_similarity(embeddings: EmbeddingSet, market_of, markets: Sequence[int], kind: str = "enriched",
                      per_market: int = 200, seed: int = 0, names=None) -> MarketSimilarityMatrix:
    """Mean pairwise cosine between hotels of each pair of markets.

    Up to ``per_market`` hotels are sampled per market (seeded); diagonal
    entries average over distinct pairs only.
    """
    market_of = np.asarray(market_of)
    V = _unit(embeddings.vectors(kind))
    rng = np.random.default_rng(seed)
    samples = []
    for m in markets:
        members = np.flatnonzero(market_of == m)
        if len(members) < 2:
            raise ValueError(f"market {m} has fewer than 2 hotels")
        if len(members) > per_market:
            members = np.sort(rng.choice(members, size=per_market, replace=False))
        samples.append(V[members])
    k = len(markets)
    M = np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            S = samples[i] @ samples[j].T
            if i == j:
                n = len(S)
                M[i, i] = (S.sum() - np.trace(S)) / (n * (n - 1))
            else:
                M[i, j] = M[j, i] = S.mean()
    return MarketSimilarityMatrix(list(names) if names is not None else list(markets), M)


def _topk(scores: np.ndarray, cand: np.ndarray, k: int) -> np.ndarray:
    # lexsort: primary key descending score, secondary ascending index
    order = np.lexsort((cand, -scores))
    return order[:k]


def most_similar(embeddings: EmbeddingSet, vocab, hotel_id: str, k: int = 10, scope: str = "all",
                 kind: str = "enriched") -> list:
    """Top-k (hotel_id, cosine) neighbours of one hotel, query excluded."""
    i = vocab.index(hotel_id)
    V = _unit(embeddings.vectors(kind))
    if scope == "market":
        cand = np.flatnonzero(np.asarray(vocab.market_of) == vocab.market_of[i])
    elif scope == "all":
        cand = np.arange(len(vocab))
    else:
        raise ValueError("scope must be 'all' or 'market'")
    cand = cand[cand != i]
    scores = V[cand] @ V[i]
    top = _topk(scores, cand, k)
    return [(vocab.id(int(cand[j])), float(scores[j])) for j in top]


def analogy(embeddings: EmbeddingSet, vocab, h1: str, h2: str, h3: str, k: int = 10,
            kind: str = "enriched") -> list:
    """Hotels closest (cosine) to v1 - v2 + v3, excluding the three inputs."""
    idx = [vocab.index(h) for h in (h1, h2, h3)]
    X = np.asarray(embeddings.vectors(kind), dtype=np.float64)
    q = X[idx[0]] - X[idx[1]] + X[idx[2]]
    nq = np.linalg.norm(q)
    if nq == 0:
        raise ValueError("analogy query vector is zero")
    V = _unit(X)
    cand = np.setdiff1d(np.arange(len(vocab)), idx)
    scores = V[cand] @ (q / nq)
    return [vocab.id(int(cand[j])) for j in _topk(scores, cand, k)]


def cold_start_eval(held_out, pairs, variants: dict, market_of, train_sessions=None, ks=(10, 100),
                    amenities=None, geo=None) -> dict:
    """Filtered hits@k with held-out hotels as targets, one report per model variant.

    ``variants`` maps a label (e.g. ``session_random``, ``enriched_imputed``)
    to parameters.  Only pairs whose target is held out are scored.
    """
    held = np.asarray(sorted(set(int(h) for h in held_out)), dtype=np.int64)
    if train_sessions is not None:
        for s in train_sessions:
            if np.isin(np.asarray(s), held).any():
                raise ValueError("held-out hotel appears in the training sessions")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[np.isin(pairs[:, 0], held)]
    out = {}
    for name, params in variants.items():
        rep = hits_at_k(params, pairs, ks, market_of, FILTERED, MODEL_SCORE, amenities, geo,
                        task=f"cold_start:{name}")
        out[name] = rep
    return out


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
