import math

import numpy as np
import pytest

from hotelemb.catalog import HotelRecord, Vocabulary, reference_schema
from hotelemb.coldstart import (ImputationPolicy, attribute_distance, haversine_km, impute_click_row,
                                impute_cold_rows, similar_pool)
from hotelemb.model import embed_all, init_params

SCHEMA = reference_schema()
BASE = {"price_tier": 3.0, "star_rating": 4.0, "property_type": "hotel", "room_count": 200.0}
LAT, LON = 40.0, -74.0


def km_north(km):
    return LAT + km / 111.195  # one degree of latitude on a 6371 km sphere


def make(records, cold_ids=()):
    ids = [r.hotel_id for r in records]
    freqs = np.array([0 if h in cold_ids else 10 for h in ids])
    markets = sorted({r.market_id for r in records})
    market_of = np.array([markets.index(r.market_id) for r in records])
    return Vocabulary(ids, freqs, market_of, markets)


def law_of_cosines_km(lat1, lon1, lat2, lon2, r=6371.0):
    p1, p2, dl = math.radians(lat1), math.radians(lat2), math.radians(lon2 - lon1)
    return r * math.acos(math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl))


def test_haversine_nyc_pair_matches_independent_formula():
    got = float(haversine_km(40.7128, -74.0060, 40.7484, -73.9857))
    assert got == pytest.approx(law_of_cosines_km(40.7128, -74.0060, 40.7484, -73.9857), abs=1e-6)
    assert got == pytest.approx(4.312, abs=0.005) and got < ImputationPolicy().radius_km


@pytest.mark.parametrize("a,b", [((0, 0), (0, 1)), ((45, 179.9), (45, -179.9)), ((-33.9, 18.4), (51.5, -0.1))])
def test_haversine_oracle_grid(a, b):
    assert float(haversine_km(*a, *b)) == pytest.approx(law_of_cosines_km(*a, *b), rel=1e-9)


def test_haversine_symmetric_and_zero():
    assert float(haversine_km(10, 20, 10, 20)) == 0.0
    assert float(haversine_km(1, 2, 3, 4)) == pytest.approx(float(haversine_km(3, 4, 1, 2)))


def test_twin_ranks_first_with_zero_distance():
    target = HotelRecord("t", "m", LAT, LON, dict(BASE))
    twin = HotelRecord("twin", "m", km_north(1), LON, dict(BASE))
    other = HotelRecord("o", "m", km_north(2), LON, dict(BASE, star_rating=1.0))
    cat = [target, twin, other]
    v = make(cat, cold_ids={"t"})
    idx, dist = similar_pool(target, cat, v, SCHEMA, return_distances=True)
    assert idx[0] == v.index("twin") and dist[0] == 0.0


def test_six_km_excluded():
    target = HotelRecord("t", "m", LAT, LON, dict(BASE))
    far = HotelRecord("far", "m", km_north(6), LON, dict(BASE))
    near = HotelRecord("near", "m", km_north(4.9), LON, dict(BASE))
    cat = [target, far, near]
    v = make(cat, cold_ids={"t"})
    assert similar_pool(target, cat, v, SCHEMA) == [v.index("near")]


def test_pool_excludes_other_markets_and_cold_hotels():
    target = HotelRecord("t", "m", LAT, LON, dict(BASE))
    cat = [target, HotelRecord("x", "other", LAT, LON, dict(BASE)),
           HotelRecord("c", "m", LAT, LON, dict(BASE))]
    v = make(cat, cold_ids={"t", "c"})
    assert similar_pool(target, cat, v, SCHEMA) == []


def test_crafted_market_ordering_matches_brute_force():
    target = HotelRecord("t", "m", LAT, LON, dict(BASE))
    variants = [dict(BASE, price_tier=5.0), dict(BASE, property_type="motel"),
                dict(BASE, room_count=600.0, star_rating=2.0), dict(BASE, star_rating=None),
                dict(BASE, price_tier=2.0)]
    cat = [target] + [HotelRecord(f"n{i}", "m", km_north(0.5 * i), LON, a) for i, a in enumerate(variants)]
    v = make(cat, cold_ids={"t"})
    # hand-derived per-feature distances: numeric |a-b| / range, categorical 0/1, missing 1
    expected_d = {"n0": (2 / 4) / 4, "n1": 1 / 4, "n2": (400 / 999 + 2 / 4) / 4, "n3": 1 / 4, "n4": (1 / 4) / 4}
    oracle = sorted(expected_d, key=lambda h: (expected_d[h], v.index(h)))
    idx, dist = similar_pool(target, cat, v, SCHEMA, return_distances=True)
    assert [v.id(i) for i in idx] == oracle
    np.testing.assert_allclose(dist, [expected_d[h] for h in oracle])


def test_pool_size_truncates():
    target = HotelRecord("t", "m", LAT, LON, dict(BASE))
    cat = [target] + [HotelRecord(f"n{i}", "m", LAT, LON, dict(BASE)) for i in range(7)]
    v = make(cat, cold_ids={"t"})
    assert len(similar_pool(target, cat, v, SCHEMA, ImputationPolicy(pool_size=3))) == 3


def test_attribute_distance_weights():
    a = HotelRecord("a", "m", 0, 0, dict(BASE))
    b = HotelRecord("b", "m", 0, 0, dict(BASE, property_type="motel"))
    assert attribute_distance(a, b, SCHEMA, {"property_type": 1.0}) == 1.0
    assert attribute_distance(a, b, SCHEMA, {"property_type": 0.0, "star_rating": 1.0}) == 0.0


def test_policy_validation():
    with pytest.raises(ValueError):
        ImputationPolicy(radius_km=0)
    with pytest.raises(ValueError):
        ImputationPolicy(pool_size=0)


def small_catalog():
    cat = [HotelRecord(f"h{i}", "m0" if i < 4 else "m1", LAT, LON + 0.01 * i, dict(BASE)) for i in range(6)]
    return cat, make(cat, cold_ids={"h0", "h5"})


def test_singleton_pool_copies_row():
    cat, v = small_catalog()
    p = init_params(6, 15, seed=0, dtype=np.float64)
    row, src = impute_click_row(v.index("h0"), [v.index("h2")], p, v)
    assert src == "pool" and np.array_equal(row, p.W_c[v.index("h2")])


def test_opposite_rows_give_zero_click_but_informative_enriched():
    cat, v = small_catalog()
    p = init_params(6, 15, seed=0, dtype=np.float64)
    i, j = v.index("h1"), v.index("h2")
    p.W_c[j] = -p.W_c[i]
    row, _ = impute_click_row(v.index("h0"), [i, j], p, v)
    np.testing.assert_allclose(row, 0, atol=1e-15)
    p.W_c[v.index("h0")] = row
    rng = np.random.default_rng(0)
    amen, geo = rng.random((6, 15)), rng.normal(size=(6, 3))
    e = embed_all(p, amen, geo)
    t = v.index("h0")
    assert np.all(e.click[t] == 0) and np.linalg.norm(e.amenity[t]) > 0 and np.linalg.norm(e.geo[t]) > 0


def test_fallbacks_market_then_global():
    cat, v = small_catalog()
    p = init_params(6, 15, seed=0, dtype=np.float64)
    row, src = impute_click_row(v.index("h0"), [], p, v)
    mates = [v.index(h) for h in ("h1", "h2", "h3")]
    assert src == "market" and np.allclose(row, p.W_c[mates].mean(axis=0))
    lone = [HotelRecord("a", "m0", 0, 0, {}), HotelRecord("b", "m1", 0, 0, {})]
    v2 = make(lone, cold_ids={"b"})
    p2 = init_params(2, 15, seed=0)
    row, src = impute_click_row(v2.index("b"), [], p2, v2)
    assert src == "global" and np.array_equal(row, p2.W_c[v2.index("a")])


def test_no_trained_hotels():
    cat = [HotelRecord("a", "m", 0, 0, {})]
    with pytest.raises(ValueError):
        impute_click_row(0, [], init_params(1, 15, seed=0), make(cat, cold_ids={"a"}))


def test_impute_cold_rows_leaves_input_untouched_and_bounds_hold():
    cat, v = small_catalog()
    p = init_params(6, 15, seed=3)
    before = {k: w.copy() for k, w in p.blocks().items()}
    new, audit = impute_cold_rows(p, v, cat, SCHEMA)
    for k, w in p.blocks().items():
        assert np.array_equal(w, before[k])
    cold = np.flatnonzero(v.cold_start)
    assert [a["target"] for a in audit] == [v.id(i) for i in cold]
    warm = np.flatnonzero(~v.cold_start)
    assert np.array_equal(new.W_c[warm], p.W_c[warm])
    rng = np.random.default_rng(0)
    e = embed_all(new, rng.random((6, 15)), rng.normal(size=(6, 3)))
    assert np.all(np.linalg.norm(e.click.astype(np.float64), axis=1) <= 1 + 1e-6)
