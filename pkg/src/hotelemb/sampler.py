"""Negative sampling: half from a smoothed unigram^alpha table, half in-market.

The global half follows the word2vec recipe (click frequency raised to 0.75,
with add-one smoothing so never-clicked hotels can still be drawn); the other
half is uniform over the market of the positive context hotel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_REJECTIONS = 100


def alias_setup(probs):
    """Vose's alias table for O(1) draws from a discrete distribution."""
    probs = np.asarray(probs, dtype=np.float64)
    K = len(probs)
    q = probs * K
    J = np.zeros(K, dtype=np.int64)
    small = [i for i in range(K) if q[i] < 1.0]
    large = [i for i in range(K) if q[i] >= 1.0]
    while small and large:
        s, l = small.pop(), large.pop()
        J[s] = l
        q[l] = q[l] - (1.0 - q[s])
        (small if q[l] < 1.0 else large).append(l)
    # leftovers are 1 up to rounding
    for i in small + large:
        q[i] = 1.0
    return J, q


def alias_draw(J, q, size, rng):
    K = len(J)
    kk = rng.integers(0, K, size=size)
    keep = rng.random(size) < q[kk]
    return np.where(keep, kk, J[kk])


@dataclass
class NegativeSampler:
    probs: np.ndarray
    alias_J: np.ndarray
    alias_q: np.ndarray
    market_of: np.ndarray
    market_flat: np.ndarray
    market_start: np.ndarray
    market_size: np.ndarray
    n_negatives: int
    alpha: float = 0.75
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @property
    def half(self) -> int:
        return self.n_negatives // 2

    def market_list(self, market: int) -> np.ndarray:
        s = self.market_start[market]
        return self.market_flat[s:s + self.market_size[market]]

    def draw_global(self, size, rng=None):
        return alias_draw(self.alias_J, self.alias_q, size, rng or self.rng)

    def draw_market(self, markets, rng=None):
        rng = rng or self.rng
        markets = np.asarray(markets)
        offs = np.floor(rng.random(markets.shape) * self.market_size[markets]).astype(np.int64)
        return self.market_flat[self.market_start[markets] + offs]

    def sample_batch(self, targets, positives, rng=None, markets=None):
        """Negatives for a batch of pairs -> (indices (B, N), in-market flags (B, N)).

        Columns ``[:N/2]`` come from the global table and ``[N/2:]`` from the
        market list.  Draws equal to the target or positive are redrawn up to
        100 times and then accepted, so tiny markets cannot livelock.
        """
        rng = rng or self.rng
        targets = np.asarray(targets, dtype=np.int64)
        positives = np.asarray(positives, dtype=np.int64)
        if markets is None:
            markets = self.market_of[positives]
        B, h = len(targets), self.half
        mk = np.broadcast_to(np.asarray(markets)[:, None], (B, h))
        glob = self.draw_global((B, h), rng)
        local = self.draw_market(mk, rng)
        t, p = targets[:, None], positives[:, None]
        for _ in range(MAX_REJECTIONS):
            bad = (glob == t) | (glob == p)
            if not bad.any():
                break
            glob[bad] = self.draw_global(int(bad.sum()), rng)
        for _ in range(MAX_REJECTIONS):
            bad = (local == t) | (local == p)
            if not bad.any():
                break
            local[bad] = self.draw_market(mk[bad], rng)
        negs = np.concatenate([glob, local], axis=1)
        prov = np.zeros((B, 2 * h), dtype=bool)
        prov[:, h:] = True
        return negs, prov


def build_sampler(vocab, alpha: float = 0.75, n_negatives: int = 20, seed: int = 0) -> NegativeSampler:
    if n_negatives < 2 or n_negatives % 2:
        raise ValueError(f"number of negatives must be even and >= 2, got {n_negatives}")
    if len(vocab) == 0:
        raise ValueError("cannot build a sampler over an empty vocabulary")
    weights = (np.asarray(vocab.frequencies, dtype=np.float64) + 1.0) ** alpha
    probs = weights / weights.sum()
    J, q = alias_setup(probs)
    market_of = np.asarray(vocab.market_of, dtype=np.int64)
    n_markets = int(market_of.max()) + 1
    order = np.argsort(market_of, kind="stable")
    size = np.bincount(market_of, minlength=n_markets)
    start = np.concatenate([[0], np.cumsum(size)[:-1]])
    return NegativeSampler(probs, J, q, market_of, order, start, size, n_negatives, alpha,
                           np.random.default_rng(seed))


def sample_negatives(sampler: NegativeSampler, target: int, positive: int, market=None) -> list:
    """N negatives for one (target, positive) pair using the sampler's own stream."""
    markets = None if market is None else np.array([market])
    negs, _ = sampler.sample_batch([target], [positive], markets=markets)
    return negs[0].tolist()
