"""Seeded synthetic hotel world for tests, demos and the acceptance suite.

Hotels belong to a market (city) and an amenity cluster (think brand or
segment).  Each market places its clusters in separate neighbourhoods.
Sessions mostly stay inside one market and mostly keep to the current
hotel's cluster, with popularity-weighted choices otherwise.  All numbers
here are fixture configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .catalog import HotelRecord, reference_schema
from .sessions import ClickEvent

PROPERTY_TYPES = ("hotel", "hostel", "resort", "apartment", "motel")


@dataclass
class SyntheticWorld:
    records: list
    schema: object
    events: list
    sessions: list
    cluster_of: dict
    market_of: dict
    popularity: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)


def _prototypes(n_clusters, rng):
    protos = []
    for k in range(n_clusters):
        star = int(rng.integers(1, 6))
        protos.append({
            "star_rating": star,
            "user_rating": float(np.clip(4 + star + rng.normal(0, 1), 1, 10)),
            "property_type": PROPERTY_TYPES[k % len(PROPERTY_TYPES)],
            "wifi": "yes" if rng.random() < 0.6 else "no",
            "breakfast": "yes" if rng.random() < 0.5 else "no",
            "pets": "yes" if rng.random() < 0.4 else "no",
            "room_count": float(np.clip(rng.lognormal(math.log(40 * star), 0.6), 1, 1000)),
            "price_tier": int(np.clip(star + rng.integers(-1, 2), 1, 5)),
        })
    return protos


def _hotel_attrs(proto, rng, flip=0.1, missing=0.03):
    attrs = {}
    for name, v in proto.items():
        if rng.random() < missing:
            attrs[name] = None
            continue
        if name in ("wifi", "breakfast", "pets"):
            attrs[name] = ("no" if v == "yes" else "yes") if rng.random() < flip else v
        elif name == "property_type":
            attrs[name] = PROPERTY_TYPES[rng.integers(len(PROPERTY_TYPES))] if rng.random() < flip else v
        elif name in ("star_rating", "price_tier"):
            attrs[name] = float(np.clip(v + (rng.integers(-1, 2) if rng.random() < flip else 0), 1, 5))
        elif name == "user_rating":
            attrs[name] = round(float(np.clip(v + rng.normal(0, 0.5), 1, 10)), 1)
        else:
            attrs[name] = float(round(np.clip(v * rng.lognormal(0, 0.2), 1, 1000)))
    return attrs


def _offset(lat, lon, dx_km, dy_km):
    dlat = dy_km / 111.0
    dlon = dx_km / (111.0 * max(math.cos(math.radians(lat)), 0.2))
    lon2 = (lon + dlon + 180.0) % 360.0 - 180.0
    return lat + dlat, (180.0 if lon2 == -180.0 else lon2)


def generate(n_hotels: int = 1000, n_markets: int = 25, n_clusters: int = 8, n_sessions: int = 50000,
             seed: int = 0, p_market: float = 0.9, p_cluster: float = 0.7, mean_length: float = 5.0,
             popularity_sigma: float = 1.5, sessions_per_user: int = 3) -> SyntheticWorld:
    """Build catalog records and a click log with known ground-truth sessions."""
    rng = np.random.default_rng(seed)
    protos = _prototypes(n_clusters, rng)
    centers = [(float(rng.uniform(-50, 60)), float(rng.uniform(-179, 179))) for _ in range(n_markets)]
    hoods = [[_offset(*centers[m], *rng.uniform(-6, 6, size=2)) for _ in range(n_clusters)]
             for m in range(n_markets)]

    records, cluster_of, market_of = [], {}, {}
    width = len(str(n_hotels - 1))
    for i in range(n_hotels):
        m, k = i % n_markets, int(rng.integers(n_clusters))
        lat, lon = _offset(*hoods[m][k], *rng.normal(0, 0.8, size=2))
        hid = f"h{i:0{width}d}"
        records.append(HotelRecord(hid, f"m{m:02d}", round(float(lat), 6), round(float(lon), 6), _hotel_attrs(protos[k], rng)))
        cluster_of[hid], market_of[hid] = k, m

    hotel_m = np.array([market_of[r.hotel_id] for r in records])
    hotel_k = np.array([cluster_of[r.hotel_id] for r in records])
    pop = rng.lognormal(0.0, popularity_sigma, size=n_hotels)
    in_market = [np.flatnonzero(hotel_m == m) for m in range(n_markets)]
    in_mk = {(m, k): np.flatnonzero((hotel_m == m) & (hotel_k == k))
             for m in range(n_markets) for k in range(n_clusters)}
    market_w = np.array([pop[ix].sum() for ix in in_market])
    market_w /= market_w.sum()

    def pick(pool, exclude):
        pool = pool[pool != exclude]
        if len(pool) == 0:
            return None
        w = pop[pool]
        return int(pool[np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right").clip(0, len(pool) - 1)])

    sessions, events = [], []
    t_user = {}
    for s in range(n_sessions):
        m = int(rng.choice(n_markets, p=market_w))
        cur = pick(in_market[m], -1)
        seq = [cur]
        length = 2 + int(rng.geometric(1.0 / max(mean_length - 1, 1.0))) - 1
        while len(seq) < length:
            cm, ck = hotel_m[cur], hotel_k[cur]
            if rng.random() >= p_market and n_markets > 1:
                cm = int(rng.choice([x for x in range(n_markets) if x != cm]))
            nxt = None
            if rng.random() < p_cluster:
                nxt = pick(in_mk[(cm, ck)], cur)
            if nxt is None:
                nxt = pick(in_market[cm], cur)
            if nxt is None:
                break
            seq.append(nxt)
            cur = nxt
        if len(seq) < 2:
            continue
        user = f"u{s // sessions_per_user:06d}"
        start = t_user.get(user, 1_600_000_000 + int(rng.integers(0, 86400)))
        ts = start
        for h in seq:
            events.append(ClickEvent(user, records[h].hotel_id, ts))
            ts += int(rng.integers(30, 3600))
        t_user[user] = ts + 10 * 86400
        sessions.append([records[h].hotel_id for h in seq])

    order = rng.permutation(len(events))
    events = [events[i] for i in order]
    popularity = {r.hotel_id: float(pop[i]) for i, r in enumerate(records)}
    return SyntheticWorld(records, reference_schema(), events, sessions, cluster_of, market_of, popularity,
                          dict(n_hotels=n_hotels, n_markets=n_markets, n_clusters=n_clusters,
                               n_sessions=n_sessions, seed=seed, p_market=p_market, p_cluster=p_cluster,
                               popularity_sigma=popularity_sigma))
