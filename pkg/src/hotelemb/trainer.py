"""Negative-sampling training loop with exact analytic gradients.

Loss per (target, context) pair with sampled negatives ``n_1..n_N``::

    -log sigmoid(v . w_context) - sum_i log sigmoid(-v . w_{n_i})

where ``v`` is the target's enriched vector and ``w_*`` are output rows.
Batches average this over pairs.  Click rows and output rows are updated
sparsely (only rows touched by the batch); the dense amenity, geo and fusion
blocks are updated every step.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import DataValidationError, DivergenceError
from .model import (DEFAULT_DIMS, EPS_NORM, ENRICHED, MODES, SESSION_ONLY, Checkpoint,
                    ModelParams, init_params, save_checkpoint)
from .sampler import build_sampler
from .sessions import DEFAULT_WINDOW, next_click_pairs, pair_arrays

log = logging.getLogger(__name__)

DEFAULT_LR = {ENRICHED: 0.05, SESSION_ONLY: 0.5}
DIVERGENCE_WINDOW = 100
DIVERGENCE_FACTOR = 10.0
OPTIMIZERS = ("sgd", "adagrad", "adam")


@dataclass
class TrainConfig:
    mode: str = ENRICHED
    dims: tuple = DEFAULT_DIMS
    learning_rate: Optional[float] = None
    decay_rate: float = 0.95
    decay_steps: int = 10000
    batch_size: int = 4096
    epochs: int = 5
    max_pairs: Optional[int] = None
    window: int = DEFAULT_WINDOW
    negatives: int = 20
    alpha: float = 0.75
    init_seed: int = 0
    shuffle_seed: int = 1
    sampler_seed: int = 2
    optimizer: str = "sgd"
    checkpoint_every: int = 0
    eval_every: int = 0
    log_every: int = 100
    val_pairs: int = 10000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.mode]
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.optimizer != "sgd":
            log.warning("adaptive optimizer %r tends to overfit early batches; sgd is the default",
                        self.optimizer)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(TrainConfig)}
    if name not in types:
        raise DataValidationError(f"unknown config key {name!r}")
    raw = raw.strip()
    if name == "dims":
        return tuple(int(x) for x in raw.replace(" ", "").split(","))
    if name in ("mode", "optimizer"):
        return raw
    if raw == "" or raw.lower() == "none":
        return None
    if name in ("learning_rate", "decay_rate", "alpha"):
        return float(raw)
    return int(raw)


def parse_config(text: str, overrides: Optional[dict] = None) -> TrainConfig:
    """Read ``key = value`` lines; entries in ``overrides`` win over the file."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataValidationError(f"expected key = value, got {line!r}", line=lineno)
        k, v = (s.strip() for s in line.split("=", 1))
        values[k] = _coerce(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(k, v) if isinstance(v, str) else v
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise DataValidationError(str(exc)) from None


def load_config(path, overrides=None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8") if path else "", overrides)


def lr_at(step: int, lr0: float, decay_rate: float, decay_steps: int) -> float:
    return lr0 * decay_rate ** (step / decay_steps)


# -- forward / backward -------------------------------------------------------

@dataclass
class Grads:
    loss: float
    click_rows: np.ndarray
    click_vals: np.ndarray
    out_rows: np.ndarray
    out_vals: np.ndarray
    W_a: Optional[np.ndarray] = None
    W_g: Optional[np.ndarray] = None
    W_e: Optional[np.ndarray] = None

    def dense(self, params: ModelParams) -> dict:
        """Scatter the sparse row gradients into full-size arrays."""
        out = {"W_c": np.zeros_like(params.W_c), "W_nce": np.zeros_like(params.W_nce)}
        np.add.at(out["W_c"], self.click_rows, self.click_vals)
        np.add.at(out["W_nce"], self.out_rows, self.out_vals)
        if params.enriched:
            out.update(W_a=self.W_a, W_g=self.W_g, W_e=self.W_e)
        return out


def _project(y):
    n = np.sqrt((y * y).sum(axis=1, keepdims=True))
    ok = n > EPS_NORM
    u = np.where(ok, y / np.where(ok, n, 1), 0)
    return u, n, ok


def _project_back(u, n, ok, dV):
    # d relu(y/|y|) / dy = (I - u u^T) / |y| applied after the relu mask
    du = dV * (u > 0)
    dy = (du - u * (u * du).sum(axis=1, keepdims=True)) / np.where(ok, n, 1)
    return np.where(ok, dy, 0)


def forward_backward(params: ModelParams, targets, contexts, negatives,
                     amenities=None, geo=None) -> Grads:
    """Mean pair loss over a batch and its gradients w.r.t. every block."""
    targets = np.asarray(targets, dtype=np.int64)
    contexts = np.asarray(contexts, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(targets), -1)
    B = len(targets)
    uc, nc, okc = _project(params.W_c[targets])
    Vc = np.maximum(uc, 0)
    if params.enriched:
        xa, xg = amenities[targets], geo[targets]
        ua, na, oka = _project(xa @ params.W_a)
        ug, ng, okg = _project(xg @ params.W_g)
        z = np.concatenate([Vc, np.maximum(ua, 0), np.maximum(ug, 0)], axis=1)
        s = z @ params.W_e
        Ve = np.maximum(s, 0)
    else:
        Ve = Vc
    out_idx = np.concatenate([contexts[:, None], negatives], axis=1)
    O = params.W_nce[out_idx]
    logits = np.einsum("bd,bkd->bk", Ve, O)
    sign = np.full(out_idx.shape[1], -1.0, dtype=logits.dtype)
    sign[0] = 1.0
    margin = logits * sign
    loss = float(np.logaddexp(0.0, -margin.astype(np.float64)).sum() / B)
    g = (-sign * expit(-margin) / B).astype(Ve.dtype)
    dO = g[:, :, None] * Ve[:, None, :]
    dVe = np.einsum("bk,bkd->bd", g, O)
    grads = Grads(loss, targets, None, out_idx.ravel(), dO.reshape(-1, Ve.shape[1]))
    if params.enriched:
        d_c, d_a, _, _ = params.dims
        ds = dVe * (s > 0)
        grads.W_e = z.T @ ds
        dz = ds @ params.W_e.T
        grads.W_a = xa.T @ _project_back(ua, na, oka, dz[:, d_c:d_c + d_a])
        grads.W_g = xg.T @ _project_back(ug, ng, okg, dz[:, d_c + d_a:])
        dVc = dz[:, :d_c]
    else:
        dVc = dVe
    grads.click_vals = _project_back(uc, nc, okc, dVc)
    return grads


def pair_loss(target: int, context: int, negatives, params: ModelParams,
              amenities=None, geo=None) -> tuple:
    """(loss, dense gradient dict) for a single training pair."""
    g = forward_backward(params, [target], [context], [list(negatives)], amenities, geo)
    return g.loss, g.dense(params)


# -- optimizers ---------------------------------------------------------------

class _Optimizer:
    def __init__(self, params: ModelParams, kind: str):
        self.kind = kind
        self.t = 0
        if kind != "sgd":
            self.m = {k: np.zeros_like(v) for k, v in params.blocks().items()}
            self.v = {k: np.zeros_like(v) for k, v in params.blocks().items()}

    def _dense(self, name, W, grad, lr):
        if self.kind == "sgd":
            W -= lr * grad
        elif self.kind == "adagrad":
            self.v[name] += grad * grad
            W -= lr * grad / (np.sqrt(self.v[name]) + 1e-8)
        else:
            m, v = self.m[name], self.v[name]
            m *= 0.9
            m += 0.1 * grad
            v *= 0.999
            v += 0.001 * grad * grad
            W -= lr * (m / (1 - 0.9 ** self.t)) / (np.sqrt(v / (1 - 0.999 ** self.t)) + 1e-8)

    def _sparse(self, name, W, rows, vals, lr):
        if self.kind == "sgd":
            np.add.at(W, rows, -lr * vals)
            return
        uniq, inv = np.unique(rows, return_inverse=True)
        acc = np.zeros((len(uniq), W.shape[1]), dtype=W.dtype)
        np.add.at(acc, inv, vals)
        Wr = W[uniq]
        if self.kind == "adagrad":
            self.v[name][uniq] += acc * acc
            Wr -= lr * acc / (np.sqrt(self.v[name][uniq]) + 1e-8)
        else:
            m = 0.9 * self.m[name][uniq] + 0.1 * acc
            v = 0.999 * self.v[name][uniq] + 0.001 * acc * acc
            self.m[name][uniq], self.v[name][uniq] = m, v
            Wr -= lr * (m / (1 - 0.9 ** self.t)) / (np.sqrt(v / (1 - 0.999 ** self.t)) + 1e-8)
        W[uniq] = Wr

    def step(self, params: ModelParams, grads: Grads, lr: float):
        self.t += 1
        lr = np.float32(lr) if params.W_c.dtype == np.float32 else lr
        self._sparse("W_c", params.W_c, grads.click_rows, grads.click_vals, lr)
        self._sparse("W_nce", params.W_nce, grads.out_rows, grads.out_vals, lr)
        if params.enriched:
            self._dense("W_a", params.W_a, grads.W_a, lr)
            self._dense("W_g", params.W_g, grads.W_g, lr)
            self._dense("W_e", params.W_e, grads.W_e, lr)


# -- training loop ------------------------------------------------------------

@dataclass
class TrainState:
    params: ModelParams
    step: int = 0
    epoch: int = 0
    initial_loss: Optional[float] = None
    running_loss: float = float("nan")
    recent: deque = field(default_factory=lambda: deque(maxlen=DIVERGENCE_WINDOW))
    history: list = field(default_factory=list)
    best_val: float = -1.0

    def to_dict(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "initial_loss": self.initial_loss,
                "recent": list(self.recent), "best_val": self.best_val}

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainState":
        s = ckpt.state or {}
        st = cls(ckpt.params, int(s.get("step", 0)), int(s.get("epoch", 0)), s.get("initial_loss"))
        st.recent.extend(s.get("recent", []))
        st.best_val = float(s.get("best_val", -1.0))
        if st.recent:
            st.running_loss = float(np.mean(st.recent))
        return st


def validation_pairs(corpus, limit: int = 10000, seed: int = 0) -> np.ndarray:
    pairs = next_click_pairs(corpus.validation)
    if len(pairs) > limit:
        pick = np.sort(np.random.default_rng(seed).choice(len(pairs), size=limit, replace=False))
        pairs = pairs[pick]
    return pairs


def evaluate_validation(state, corpus, k: int = 10, vocab=None, amenities=None, geo=None,
                        limit: int = 10000) -> float:
    """Filtered hits@k (percent) on up to ``limit`` consecutive validation pairs."""
    from .evaluator import hits_at_k
    params = getattr(state, "params", state)
    pairs = validation_pairs(corpus, limit)
    if len(pairs) == 0:
        raise ValueError("validation split is empty")
    rep = hits_at_k(params, pairs, [k], vocab.market_of, candidates="filtered", scorer="model_score",
                    amenities=amenities, geo=geo)
    return rep.hits[k]


def train(corpus, vocab, config: TrainConfig, amenities=None, geo=None, out_dir=None,
          state: Optional[TrainState] = None, stop_at_step: Optional[int] = None,
          on_record=None) -> TrainState:
    """Run SGD over shuffled skip-gram pairs from ``corpus.train``.

    ``corpus`` must already be index-encoded.  Pass ``state`` (for example
    from :meth:`TrainState.from_checkpoint`) to resume; per-epoch shuffles and
    per-step negative draws are seeded from (seed, epoch/step), so a resumed
    run reproduces an uninterrupted one exactly.  ``stop_at_step`` ends the
    run early without changing the schedule.
    """
    cfg = config
    targets, contexts = pair_arrays(corpus.train, cfg.window)
    P = len(targets)
    if P == 0:
        raise DataValidationError("training split has no pairs")
    if cfg.mode == ENRICHED:
        if amenities is None or geo is None:
            raise ValueError("enriched training needs amenity and geo inputs")
        amenities = np.asarray(amenities, dtype=np.float32)
        geo = np.asarray(geo, dtype=np.float32)
    H = len(vocab)
    if state is None:
        A = amenities.shape[1] if amenities is not None else 0
        state = TrainState(init_params(H, A, cfg.mode, cfg.dims, cfg.init_seed))
    elif state.params.mode != cfg.mode:
        raise ValueError("checkpoint mode does not match config mode")
    params = state.params
    sampler = build_sampler(vocab, cfg.alpha, cfg.negatives, cfg.sampler_seed)
    opt = _Optimizer(params, cfg.optimizer)
    opt.t = state.step

    steps_per_epoch = math.ceil(P / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_pairs is not None:
        # a pair budget replaces the epoch count
        total = math.ceil(cfg.max_pairs / cfg.batch_size)
    end = total if stop_at_step is None else min(total, stop_at_step)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = (out_dir / "metrics.jsonl").open("a", encoding="utf-8") if out_dir else None
    has_val = len(corpus.validation) > 0

    perm_epoch, perm = -1, None
    t0 = time.perf_counter()
    acc_loss, acc_n = 0.0, 0
    try:
        while state.step < end:
            step = state.step
            epoch = step // steps_per_epoch
            if epoch != perm_epoch:
                perm = np.random.default_rng([cfg.shuffle_seed, epoch]).permutation(P)
                perm_epoch = epoch
            j = step % steps_per_epoch
            idx = perm[j * cfg.batch_size:(j + 1) * cfg.batch_size]
            t, c = targets[idx], contexts[idx]
            negs, _ = sampler.sample_batch(t, c, np.random.default_rng([cfg.sampler_seed, step]))
            grads = forward_backward(params, t, c, negs, amenities, geo)
            if not math.isfinite(grads.loss):
                raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch})")
            lr = lr_at(step, cfg.learning_rate, cfg.decay_rate, cfg.decay_steps)
            opt.step(params, grads, lr)
            if state.initial_loss is None:
                state.initial_loss = grads.loss
            state.recent.append(grads.loss)
            state.running_loss = float(np.mean(state.recent))
            if len(state.recent) == DIVERGENCE_WINDOW and \
                    state.running_loss > DIVERGENCE_FACTOR * state.initial_loss:
                raise DivergenceError(
                    f"mean loss {state.running_loss:.4g} over last {DIVERGENCE_WINDOW} steps exceeds "
                    f"{DIVERGENCE_FACTOR:g}x initial loss {state.initial_loss:.4g} at step {step}")
            state.step += 1
            state.epoch = state.step // steps_per_epoch
            acc_loss += grads.loss
            acc_n += 1

            last = state.step == end
            do_eval = has_val and vocab is not None and cfg.eval_every and \
                (state.step % cfg.eval_every == 0 or last)
            if (cfg.log_every and state.step % cfg.log_every == 0) or do_eval or last:
                rec = {"step": state.step, "epoch": epoch, "lr": lr, "loss": acc_loss / acc_n,
                       "val_hits10": None,
                       "wall_ms": int((time.perf_counter() - t0) * 1000)}
                if do_eval:
                    rec["val_hits10"] = evaluate_validation(params, corpus, 10, vocab, amenities, geo,
                                                            cfg.val_pairs)
                acc_loss, acc_n = 0.0, 0
                state.history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                if on_record:
                    on_record(rec)
                if do_eval and out_dir and rec["val_hits10"] > state.best_val:
                    state.best_val = rec["val_hits10"]
                    save_checkpoint(out_dir / "best.ckpt", _ckpt(state, vocab, amenities, geo))
            if out_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0 and not last:
                save_checkpoint(out_dir / "checkpoint.ckpt", _ckpt(state, vocab, amenities, geo))
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        save_checkpoint(out_dir / "checkpoint.ckpt", _ckpt(state, vocab, amenities, geo))
    return state


def _ckpt(state: TrainState, vocab, amenities, geo) -> Checkpoint:
    return Checkpoint(state.params, vocab, amenities, geo, state.to_dict())


def checkpoint_of(state: TrainState, vocab, amenities=None, geo=None) -> Checkpoint:
    if amenities is not None:
        amenities = np.asarray(amenities, dtype=np.float32)
        geo = np.asarray(geo, dtype=np.float32)
    return _ckpt(state, vocab, amenities, geo)
