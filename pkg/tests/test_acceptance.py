"""End-to-end acceptance checks on the seeded synthetic corpus.

Each test prints one ``criterion n: PASS|FAIL`` line (also collected in the
terminal summary).  Training runs share session-scoped fixtures so the whole
file fits the stated runtime budgets on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from hotelemb import catalog as cat
from hotelemb import sessions as ses
from hotelemb.catalog import build_vocab, encode_catalog
from hotelemb.cli import strip_hotels
from hotelemb.coldstart import haversine_km, impute_cold_rows
from hotelemb.evaluator import cold_start_eval, hits_at_k, market_similarity
from hotelemb.model import (Checkpoint, checkpoint_bytes, checkpoint_from_bytes, embed_all, init_params,
                            log_sigmoid)
from hotelemb.sampler import build_sampler
from hotelemb.synthetic import generate
from hotelemb.trainer import TrainConfig, checkpoint_of, evaluate_validation, lr_at, pair_loss, train

LR_GRID = (0.01, 0.1, 0.5, 1.0, 2.5)
BATCH = 1024
EPOCHS = 5
COLD_EPOCHS = 20  # cold-start models are trained closer to convergence; no budget is prescribed there
SPLIT_SEED = 0
K = 10


class World:
    def __init__(self, world, corpus, vocab, amen, geo):
        self.world, self.corpus, self.vocab, self.amen, self.geo = world, corpus, vocab, amen, geo

    @property
    def chance(self):
        # analytic chance rate for filtered hits@k: k / (mean market size - 1)
        sizes = np.bincount(self.vocab.market_of)
        return 100.0 * K / (sizes.mean() - 1)

    def config(self, mode, lr, **kw):
        kw.setdefault("epochs", EPOCHS)
        return TrainConfig(mode=mode, learning_rate=lr, batch_size=BATCH, log_every=0, **kw)

    def train(self, mode, lr, **kw):
        return train(self.corpus, self.vocab, self.config(mode, lr, **kw), self.amen, self.geo)

    def test_hits(self, params, sessions=None, ks=(K,)):
        pairs = ses.next_click_pairs(self.corpus.test if sessions is None else sessions)
        return hits_at_k(params, pairs, ks, self.vocab.market_of, "filtered", "model_score",
                         self.amen, self.geo)


def build_world(world, holdout_frac=0.0, holdout_seed=0):
    sessions = ses.sessionize(world.events)
    corpus = ses.split_corpus(sessions, (0.8, 0.1, 0.1), SPLIT_SEED)
    held = []
    if holdout_frac:
        ids = sorted(r.hotel_id for r in world.records)
        rng = np.random.default_rng(holdout_seed)
        held = sorted(rng.choice(ids, size=int(round(holdout_frac * len(ids))), replace=False).tolist())
        corpus.train = strip_hotels(corpus.train, set(held))
    vocab = build_vocab(world.records, corpus.train)
    amen, geo = encode_catalog(world.records, world.schema, vocab)
    w = World(world, corpus.encode(vocab), vocab, amen.astype(np.float32), geo.astype(np.float32))
    w.sessions = sessions
    w.held = [vocab.index(h) for h in held]
    return w


@pytest.fixture(scope="session")
def synthetic():
    return generate(seed=0)


@pytest.fixture(scope="session")
def world(synthetic):
    return build_world(synthetic)


@pytest.fixture(scope="session")
def tuned(world):
    """Learning rate per mode picked from the grid by validation hits@10 after one epoch."""
    t0 = time.perf_counter()
    best, table = {}, {}
    for mode in ("enriched", "session_only"):
        scores = {lr: evaluate_validation(world.train(mode, lr, epochs=1), world.corpus, K, world.vocab,
                                          world.amen, world.geo) for lr in LR_GRID}
        table[mode] = scores
        best[mode] = max(scores, key=lambda lr: (scores[lr], -lr))
    return best, table, time.perf_counter() - t0


@pytest.fixture(scope="session")
def models(world, tuned):
    t0 = time.perf_counter()
    out = {mode: world.train(mode, lr) for mode, lr in tuned[0].items()}
    return out, time.perf_counter() - t0


# -- 1 ------------------------------------------------------------------------

def numeric_grad(f, W, h=1e-4):
    g = np.zeros_like(W)
    for i in np.ndindex(W.shape):
        old = W[i]
        W[i] = old + h
        up = f()
        W[i] = old - h
        down = f()
        W[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def test_criterion_1_gradients(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for point in range(10):
        d = int(rng.integers(4, 9))
        dims = (d, int(rng.integers(4, 9)), int(rng.integers(4, 9)), d)
        H, A = 9, 7
        for mode in ("enriched", "session_only"):
            p = init_params(H, A, mode, dims, seed=point, dtype=np.float64)
            for W in p.blocks().values():
                W[...] = rng.normal(0, 1, W.shape)
            amen, geo = rng.random((H, A)), rng.normal(0, 1, (H, 3))
            t, c, negs = int(rng.integers(H)), int(rng.integers(H)), rng.integers(0, H, 6)
            _, grads = pair_loss(t, c, negs, p, amen, geo)
            for name, W in p.blocks().items():
                num = numeric_grad(lambda: pair_loss(t, c, negs, p, amen, geo)[0], W)
                err = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(num), np.linalg.norm(grads[name]),
                                                              1e-10)
                worst = max(worst, err)
    secs = time.perf_counter() - t0
    ok = verdict(1, worst < 1e-3 and secs < 10, f"max relative error {worst:.2e} (< 1e-3), {secs:.1f} s (< 10 s)")
    assert ok


# -- 2 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_2_enriched_beats_session_only(world, tuned, models, verdict):
    best, table, tune_secs = tuned
    trained, train_secs = models
    e = world.test_hits(trained["enriched"].params).hits[K]
    s = world.test_hits(trained["session_only"].params).hits[K]
    floor = 3 * world.chance
    secs = tune_secs + train_secs
    ok = e >= 1.1 * s and e >= floor and s >= floor and secs < 600
    verdict(2, ok, f"filtered hits@10 enriched {e:.2f} vs session-only {s:.2f} (ratio {e / s:.3f}, need >= 1.1); "
                   f"3x chance = {floor:.2f}; lr {best}; {secs:.0f} s incl. tuning (< 600 s)")
    assert ok


# -- 3 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_3_cold_start(synthetic, tuned, verdict):
    t0 = time.perf_counter()
    w = build_world(synthetic, holdout_frac=0.1, holdout_seed=0)
    variants = {}
    for mode in ("enriched", "session_only"):
        p = w.train(mode, tuned[0][mode], epochs=COLD_EPOCHS).params
        imputed, _ = impute_cold_rows(p, w.vocab, synthetic.records, synthetic.schema, targets=w.held)
        variants[f"{mode}_random"], variants[f"{mode}_imputed"] = p, imputed
    all_sessions = [np.array([w.vocab.index(h) for h in s]) for s in w.sessions]
    pairs = ses.next_click_pairs(all_sessions)
    res = cold_start_eval(w.held, pairs, variants, w.vocab.market_of, w.corpus.train, [K], w.amen, w.geo)
    h = {name: r.hits[K] for name, r in res.items()}
    secs = time.perf_counter() - t0
    a = h["enriched_random"] >= 2 * h["session_only_random"]
    b = h["session_only_imputed"] > h["session_only_random"] and h["enriched_imputed"] > h["enriched_random"]
    ok = a and b and secs < 900
    verdict(3, ok, "held-out hits@10 random init enriched {enriched_random:.2f} vs session-only "
                   "{session_only_random:.2f} (need 2x); imputed enriched {enriched_imputed:.2f}, "
                   "session-only {session_only_imputed:.2f}; ".format(**h)
            + f"{res['enriched_random'].n_pairs} pairs, {secs:.0f} s (< 900 s)")
    assert ok


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_sampler_law(world, verdict):
    from scipy.stats import chisquare
    s = build_sampler(world.vocab, 0.75, 20, seed=4)
    rng = np.random.default_rng(0)
    # a fixed (target, positive) pair keeps the rejection rule's effect exactly computable
    t = int(world.vocab.index(world.world.records[0].hotel_id))
    p = int(np.flatnonzero((world.vocab.market_of == world.vocab.market_of[t]) & (np.arange(len(world.vocab)) != t))[0])
    B = 10_000
    negs, prov = s.sample_batch(np.full(B, t), np.full(B, p), rng)
    glob, local = negs[:, :10].ravel(), negs[:, 10:].ravel()
    law = (world.vocab.frequencies + 1.0) ** 0.75
    law[[t, p]] = 0
    law /= law.sum()
    counts = np.bincount(glob, minlength=len(law))
    # pool tail bins so every expected count is at least 5
    order = np.argsort(law)
    exp_sorted, obs_sorted = law[order] * len(glob), counts[order]
    cut = np.searchsorted(np.cumsum(exp_sorted), 5.0) + 1
    exp_b = np.concatenate([[exp_sorted[:cut].sum()], exp_sorted[cut:]])
    obs_b = np.concatenate([[obs_sorted[:cut].sum()], obs_sorted[cut:]])
    keep = exp_b > 0
    p_glob = chisquare(obs_b[keep], exp_b[keep] * obs_b[keep].sum() / exp_b[keep].sum()).pvalue
    members = [m for m in s.market_list(world.vocab.market_of[p]) if m not in (t, p)]
    in_market = np.isin(local, s.market_list(world.vocab.market_of[p])).mean()
    p_local = chisquare(np.bincount(local, minlength=len(law))[members]).pvalue
    exact_half = bool((prov.sum(axis=1) == 10).all())
    ok = p_glob > 0.01 and p_local > 0.01 and in_market == 1.0 and exact_half
    verdict(4, ok, f"{2 * B * 10} draws: global chi2 p={p_glob:.3f}, market chi2 p={p_local:.3f}, "
                   f"in-market fraction {in_market:.3f}, N/2 market provenance on every pair: {exact_half}")
    assert ok


# -- 5 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_market_structure(world, models, verdict):
    trained, _ = models
    markets = list(range(len(world.vocab.markets)))
    sep = {}
    for mode, st in trained.items():
        emb = embed_all(st.params, world.amen, world.geo)
        sep[mode] = market_similarity(emb, world.vocab.market_of, markets, "enriched").separation()
    ok = sep["enriched"] > 0.1 and sep["enriched"] > sep["session_only"]
    verdict(5, ok, f"market separation (mean diag - mean off-diag) enriched {sep['enriched']:.3f} (> 0.1), "
                   f"session-only {sep['session_only']:.3f}")
    assert ok


# -- 6 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_more_negatives_help(world, tuned, models, verdict):
    # same budget as criterion 2; its enriched model already is the N=20 run
    budget = EPOCHS * len(ses.pair_arrays(world.corpus.train, 3)[0])
    lr = tuned[0]["enriched"]
    runs = {N: world.train("enriched", lr, negatives=N) for N in (2, 10)}
    runs[20] = models[0]["enriched"]
    val = {N: evaluate_validation(st, world.corpus, K, world.vocab, world.amen, world.geo) for N, st in runs.items()}
    ok = val[2] <= val[10] <= val[20]
    verdict(6, ok, "validation hits@10 after {:,} pairs: N=2 {:.2f}, N=10 {:.2f}, N=20 {:.2f}".format(
        budget, val[2], val[10], val[20]))
    assert ok


# -- 7 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_invariants(world, models, verdict):
    trained, _ = models
    checks = {}
    for mode, st in trained.items():
        emb = embed_all(st.params, world.amen, world.geo)
        norms = [np.linalg.norm(b.astype(np.float64), axis=1).max() for b in (emb.click, emb.amenity, emb.geo)
                 if b.shape[1]]
        checks[f"{mode} norms"] = max(norms) <= 1 + 1e-6 and bool((emb.enriched >= 0).all())

        rep = world.test_hits(st.params, ks=(1, 5, 10, 50, 100))
        vals = [rep.hits[k] for k in rep.ks]
        checks[f"{mode} monotone k"] = vals == sorted(vals)

        pairs = ses.next_click_pairs(world.corpus.test)[:500]
        dots = emb.enriched[pairs[:, 0]].astype(np.float64) @ st.params.W_nce.T.astype(np.float64)
        checks[f"{mode} sigma-log permutation"] = np.array_equal(
            np.argsort(-dots, axis=1, kind="stable"), np.argsort(-log_sigmoid(dots), axis=1, kind="stable"))

        a = hits_at_k(None, pairs, [10], world.vocab.market_of, "filtered", "cosine:enriched", embeddings=emb)
        scaled = embed_all(st.params, world.amen, world.geo)
        scaled.enriched = scaled.enriched * 7.5
        b = hits_at_k(None, pairs, [10], world.vocab.market_of, "filtered", "cosine:enriched", embeddings=scaled)
        checks[f"{mode} cosine scale"] = np.array_equal(a.meta["ranks"], b.meta["ranks"])

        ck = checkpoint_of(st, world.vocab, world.amen, world.geo)
        data = checkpoint_bytes(ck)
        back = checkpoint_from_bytes(data)
        checks[f"{mode} checkpoint"] = checkpoint_bytes(back) == data and all(
            np.array_equal(v, back.params.blocks()[k]) for k, v in st.params.blocks().items())

    runs = [checkpoint_bytes(checkpoint_of(world.train("enriched", 0.5, max_pairs=60 * BATCH),
                                           world.vocab, world.amen, world.geo)) for _ in range(2)]
    checks["determinism"] = runs[0] == runs[1]
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    verdict(7, ok, f"{len(checks) - len(failed)}/{len(checks)} invariant checks green"
            + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


# -- 8 ------------------------------------------------------------------------

NYC = (40.7128, -74.0060, 40.7484, -73.9857)


def exact_oracles():
    N = 20
    p = init_params(30, 15, "session_only", seed=0, dtype=np.float64)
    p.W_nce[...] = 0
    return {
        "log sigma(0)": abs(float(log_sigmoid(0.0)) - (-0.693147)) < 1e-6,
        "zero-dot loss": abs(pair_loss(0, 1, list(range(2, 2 + N)), p)[0] - (N + 1) * math.log(2)) < 1e-6,
        "lr(2000)": lr_at(2000, 0.05, 0.5, 1000) == 0.0125,
    }


def test_criterion_8_exact_oracles(verdict):
    checks = exact_oracles()
    d = float(haversine_km(*NYC))
    hav_ok = abs(d - 4.13) < 0.05
    ok = all(checks.values()) and hav_ok
    verdict(8, ok, f"log sigma(0), zero-dot loss, lr(2000): {'ok' if all(checks.values()) else checks}; "
                   f"haversine NYC pair {d:.3f} km vs 4.13 +- 0.05"
            + ("" if hav_ok else " (great-circle distance of this pair is 4.31 km; see decisions ledger)"))
    assert all(checks.values())


@pytest.mark.xfail(strict=True, reason="the stated 4.13 km target disagrees with the great-circle distance "
                                       "of the given coordinates (4.31 km for any Earth radius)")
def test_criterion_8_haversine_target():
    assert abs(float(haversine_km(*NYC)) - 4.13) < 0.05
