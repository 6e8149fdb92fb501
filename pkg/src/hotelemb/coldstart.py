"""Click-row imputation for hotels without training clicks.

A cold hotel's click row becomes the mean click row of the most
attribute-similar trained hotels in its market that lie within a geodesic
radius.  Amenity and geo inputs are never imputed: they exist for every
hotel and flow through the model as usual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .catalog import CATEGORICAL, FeatureSchema, HotelRecord

EARTH_RADIUS_KM = 6371.0
IMPUTATION_FEATURES = ("price_tier", "star_rating", "property_type", "room_count")


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; broadcasts over numpy arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass
class ImputationPolicy:
    weights: dict = field(default_factory=lambda: {f: 1.0 for f in IMPUTATION_FEATURES})
    radius_km: float = 5.0
    pool_size: int = 100

    def __post_init__(self):
        if not self.radius_km > 0:
            raise ValueError("radius_km must be > 0")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("feature weights must be non-negative")


def attribute_distance(a: HotelRecord, b: HotelRecord, schema: FeatureSchema, weights: dict) -> float:
    """Weighted mean of per-feature distances in [0, 1].

    Numeric features use |a - b| scaled by the schema range; categorical
    features contribute 0 on a match and 1 otherwise.  A value missing on
    either side counts as maximally distant.
    """
    total = wsum = 0.0
    for name, w in weights.items():
        if name not in schema or w == 0:
            continue
        feat = schema[name]
        va, vb = a.attributes.get(name), b.attributes.get(name)
        if va is None or vb is None:
            d = 1.0
        elif feat.kind == CATEGORICAL:
            d = 0.0 if va == vb else 1.0
        else:
            lo, hi = feat.bounds
            d = min(abs(float(va) - float(vb)) / (hi - lo), 1.0)
        total += w * d
        wsum += w
    return total / wsum if wsum else 0.0


def similar_pool(target: HotelRecord, catalog: Sequence[HotelRecord], vocab, schema: FeatureSchema,
                 policy: Optional[ImputationPolicy] = None, return_distances: bool = False):
    """Indices of trained same-market hotels within the radius, most similar first."""
    policy = policy or ImputationPolicy()
    cold = vocab.cold_start
    cands = [(vocab.index(r.hotel_id), r) for r in catalog
             if r.market_id == target.market_id and r.hotel_id != target.hotel_id
             and r.hotel_id in vocab and not cold[vocab.index(r.hotel_id)]]
    if not cands:
        return ([], []) if return_distances else []
    lat = np.array([r.latitude for _, r in cands])
    lon = np.array([r.longitude for _, r in cands])
    near = haversine_km(target.latitude, target.longitude, lat, lon) <= policy.radius_km
    scored = sorted((attribute_distance(target, r, schema, policy.weights), i)
                    for (i, r), ok in zip(cands, near) if ok)
    scored = scored[:policy.pool_size]
    idx = [i for _, i in scored]
    return (idx, [d for d, _ in scored]) if return_distances else idx


def impute_click_row(target_index: int, pool: Sequence[int], params, vocab) -> tuple:
    """(new click row, source) where source is 'pool', 'market' or 'global'."""
    trained = ~vocab.cold_start
    if not trained.any():
        raise ValueError("no trained hotels to impute from")
    if len(pool):
        return params.W_c[np.asarray(pool)].mean(axis=0), "pool"
    mates = np.flatnonzero(trained & (vocab.market_of == vocab.market_of[target_index]))
    if len(mates):
        return params.W_c[mates].mean(axis=0), "market"
    return params.W_c[trained].mean(axis=0), "global"


def impute_cold_rows(params, vocab, catalog: Sequence[HotelRecord], schema: FeatureSchema,
                     policy: Optional[ImputationPolicy] = None, targets=None) -> tuple:
    """Copy of ``params`` with imputed click rows for ``targets`` (default: all cold hotels).

    Returns ``(new_params, audit)`` with one audit dict per target.
    """
    policy = policy or ImputationPolicy()
    by_id = {r.hotel_id: r for r in catalog}
    if targets is None:
        targets = np.flatnonzero(vocab.cold_start)
    out = params.copy()
    audit = []
    for t in targets:
        t = int(t)
        rec = by_id[vocab.id(t)]
        pool = similar_pool(rec, catalog, vocab, schema, policy)
        row, source = impute_click_row(t, pool, params, vocab)
        out.W_c[t] = row.astype(out.W_c.dtype)
        audit.append({"target": rec.hotel_id, "pool_size": len(pool), "fallback": source})
    return out, audit
