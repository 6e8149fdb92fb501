"""Trainable parameters and forward computations.

Each facet (click, amenity, geo) goes through a normalized projection
``relu(xW / ||xW||)``; the enriched model concatenates the three facet
vectors and fuses them with ``relu(concat @ W_e)``.  Context hotels are
scored against rows of a separate output matrix ``W_nce``.

The session-only baseline keeps just the click projection, and its enriched
vector is the click vector itself.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .catalog import GEO_WIDTH, Vocabulary, encode_amenities, encode_geo

ENRICHED = "enriched"
SESSION_ONLY = "session_only"
MODES = (ENRICHED, SESSION_ONLY)
EPS_NORM = 1e-12
DEFAULT_DIMS = (32, 15, 5, 32)

MAGIC = b"HEMB"
FORMAT_VERSION = 1
_HAS_INPUTS = 1
_HAS_STATE = 2


@dataclass
class ModelParams:
    mode: str
    dims: tuple
    W_c: np.ndarray
    W_nce: np.ndarray
    W_a: Optional[np.ndarray] = None
    W_g: Optional[np.ndarray] = None
    W_e: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        d_c, d_a, d_g, d_e = self.dims
        H = self.W_c.shape[0]
        if self.W_c.shape != (H, d_c) or self.W_nce.shape != (H, d_e):
            raise ValueError("W_c / W_nce shapes inconsistent with dims")
        if self.mode == SESSION_ONLY:
            if d_e != d_c or any(w is not None for w in (self.W_a, self.W_g, self.W_e)):
                raise ValueError("session_only params carry only W_c and W_nce with d_e == d_c")
        else:
            if self.W_a is None or self.W_g is None or self.W_e is None:
                raise ValueError("enriched params need W_a, W_g and W_e")
            if self.W_a.shape[1] != d_a or self.W_g.shape != (GEO_WIDTH, d_g) \
                    or self.W_e.shape != (d_c + d_a + d_g, d_e):
                raise ValueError("enriched weight shapes inconsistent with dims")

    @property
    def enriched(self) -> bool:
        return self.mode == ENRICHED

    @property
    def n_hotels(self) -> int:
        return self.W_c.shape[0]

    @property
    def amenity_width(self) -> int:
        return self.W_a.shape[0] if self.W_a is not None else 0

    def blocks(self) -> dict:
        """Named parameter blocks in checkpoint order (absent blocks skipped)."""
        out = {"W_c": self.W_c}
        if self.enriched:
            out.update(W_a=self.W_a, W_g=self.W_g, W_e=self.W_e)
        out["W_nce"] = self.W_nce
        return out

    def n_parameters(self) -> int:
        return sum(w.size for w in self.blocks().values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.mode, tuple(self.dims),
                           **{k: v.copy() for k, v in self.blocks().items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.mode, tuple(self.dims),
                           **{k: v.astype(dtype) for k, v in self.blocks().items()})


def init_params(n_hotels: int, amenity_width: int, mode: str = ENRICHED, dims=DEFAULT_DIMS,
                seed: int = 0, dtype=np.float32) -> ModelParams:
    """Uniform init in +-0.5/fan_in.

    Dense projections use their input width as fan-in; the two lookup tables
    (click rows, output rows) use the embedding width, as in word2vec.
    """
    d_c, d_a, d_g, d_e = dims
    if mode == SESSION_ONLY:
        d_a = d_g = 0
        d_e = d_c
    rng = np.random.default_rng(seed)

    def uni(rows, cols, fan_in):
        lim = 0.5 / fan_in
        return rng.uniform(-lim, lim, size=(rows, cols)).astype(dtype)

    W_c = uni(n_hotels, d_c, d_c)
    if mode == SESSION_ONLY:
        W_nce = uni(n_hotels, d_e, d_e)
        return ModelParams(mode, (d_c, 0, 0, d_e), W_c=W_c, W_nce=W_nce)
    W_a = uni(amenity_width, d_a, max(amenity_width, 1))
    W_g = uni(GEO_WIDTH, d_g, GEO_WIDTH)
    W_e = uni(d_c + d_a + d_g, d_e, d_c + d_a + d_g)
    W_nce = uni(n_hotels, d_e, d_e)
    return ModelParams(mode, (d_c, d_a, d_g, d_e), W_c=W_c, W_nce=W_nce, W_a=W_a, W_g=W_g, W_e=W_e)


def relu(x):
    return np.maximum(x, 0)


def normalize_relu(y: np.ndarray) -> np.ndarray:
    """relu(y / ||y||) along the last axis; degenerate norms give zeros."""
    norm = np.sqrt((y * y).sum(axis=-1, keepdims=True))
    safe = np.where(norm > EPS_NORM, norm, 1)
    return np.where(norm > EPS_NORM, relu(y / safe), 0).astype(y.dtype, copy=False)


def _rowdot(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    # per-row reduction, so a hotel's result does not depend on batch size
    return (x[..., :, None] * W).sum(axis=-2)


def normalized_projection(x, W) -> np.ndarray:
    x = np.asarray(x)
    W = np.asarray(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"shape mismatch: input width {x.shape[-1]} vs {W.shape[0]} projection rows")
    return normalize_relu(_rowdot(x, W))


def fuse_enriched(V_c, V_a, V_g, W_e) -> np.ndarray:
    z = np.concatenate([np.asarray(V_c), np.asarray(V_a), np.asarray(V_g)], axis=-1)
    if z.shape[-1] != W_e.shape[0]:
        raise ValueError(f"shape mismatch: concatenated width {z.shape[-1]} vs fusion rows {W_e.shape[0]}")
    return relu(_rowdot(z, W_e))


def log_sigmoid(x):
    """log(1 / (1 + exp(-x))) without overflow for large |x|."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def score_context(V_e_t, context_index: int, params: ModelParams) -> float:
    if not 0 <= context_index < params.n_hotels:
        raise IndexError(f"context index {context_index} outside [0, {params.n_hotels})")
    dot = float(np.dot(np.asarray(V_e_t, dtype=np.float64), params.W_nce[context_index].astype(np.float64)))
    return float(log_sigmoid(dot))


def embed_hotel(hotel_index: int, I_a, I_g, params: ModelParams) -> tuple:
    """(V_c, V_a, V_g, V_e) for one hotel."""
    if not 0 <= hotel_index < params.n_hotels:
        raise IndexError(f"hotel index {hotel_index} outside [0, {params.n_hotels})")
    V_c = normalize_relu(params.W_c[hotel_index])
    if not params.enriched:
        empty = np.zeros(0, dtype=V_c.dtype)
        return V_c, empty, empty.copy(), V_c
    V_a = normalized_projection(np.asarray(I_a, dtype=params.W_a.dtype), params.W_a)
    V_g = normalized_projection(np.asarray(I_g, dtype=params.W_g.dtype), params.W_g)
    return V_c, V_a, V_g, fuse_enriched(V_c, V_a, V_g, params.W_e)


VECTOR_KINDS = ("click", "amenity", "geo", "concatenated", "enriched")


@dataclass
class EmbeddingSet:
    click: np.ndarray
    amenity: np.ndarray
    geo: np.ndarray
    enriched: np.ndarray

    @property
    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.click, self.amenity, self.geo], axis=1)

    def vectors(self, kind: str) -> np.ndarray:
        if kind not in VECTOR_KINDS:
            raise ValueError(f"unknown vector kind {kind!r}; expected one of {VECTOR_KINDS}")
        return getattr(self, kind)

    def __len__(self):
        return self.click.shape[0]

    def copy(self) -> "EmbeddingSet":
        return EmbeddingSet(self.click.copy(), self.amenity.copy(), self.geo.copy(), self.enriched.copy())


def embed_all(params: ModelParams, amenities=None, geo=None) -> EmbeddingSet:
    """Materialize every hotel's vectors; ``amenities``/``geo`` are (H, A)/(H, 3) inputs."""
    V_c = normalize_relu(params.W_c)
    H = params.n_hotels
    if not params.enriched:
        empty = np.zeros((H, 0), dtype=V_c.dtype)
        return EmbeddingSet(V_c, empty, empty.copy(), V_c)
    V_a = normalized_projection(np.asarray(amenities, dtype=params.W_a.dtype), params.W_a)
    V_g = normalized_projection(np.asarray(geo, dtype=params.W_g.dtype), params.W_g)
    return EmbeddingSet(V_c, V_a, V_g, fuse_enriched(V_c, V_a, V_g, params.W_e))


def refresh_embedding(embeddings: EmbeddingSet, hotel_index: int, record, schema,
                      params: ModelParams) -> EmbeddingSet:
    """Recompute one hotel's vectors from new attributes; weights stay untouched."""
    if not 0 <= hotel_index < params.n_hotels:
        raise IndexError(f"unknown hotel index {hotel_index}")
    out = embeddings.copy()
    I_a = encode_amenities(record, schema) if params.enriched else None
    I_g = encode_geo(record)
    V_c, V_a, V_g, V_e = embed_hotel(hotel_index, I_a, I_g, params)
    out.click[hotel_index] = V_c
    if params.enriched:
        out.amenity[hotel_index] = V_a
        out.geo[hotel_index] = V_g
    out.enriched[hotel_index] = V_e
    return out


# -- checkpoint container -----------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    vocab: Vocabulary
    amenities: Optional[np.ndarray] = None
    geo: Optional[np.ndarray] = None
    state: dict = field(default_factory=dict)

    def embeddings(self) -> EmbeddingSet:
        return embed_all(self.params, self.amenities, self.geo)


def _put_str(buf, s: str):
    b = s.encode("utf-8")
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _get_str(buf) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    buf = io.BytesIO()
    flags = (_HAS_INPUTS if ckpt.amenities is not None else 0) | (_HAS_STATE if ckpt.state else 0)
    A = p.amenity_width if p.enriched else (ckpt.amenities.shape[1] if ckpt.amenities is not None else 0)
    buf.write(MAGIC)
    buf.write(struct.pack("<HBB4IIII", FORMAT_VERSION, MODES.index(p.mode), flags,
                          *[int(d) for d in p.dims], p.n_hotels, A, GEO_WIDTH))
    for w in p.blocks().values():
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
    v = ckpt.vocab
    buf.write(struct.pack("<I", len(v.markets)))
    for m in v.markets:
        _put_str(buf, m)
    for i, h in enumerate(v.hotel_ids):
        _put_str(buf, h)
        buf.write(struct.pack("<IQ", int(v.market_of[i]), int(v.frequencies[i])))
    if flags & _HAS_INPUTS:
        buf.write(np.ascontiguousarray(ckpt.amenities, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(ckpt.geo, dtype="<f4").tobytes())
    if flags & _HAS_STATE:
        blob = json.dumps(ckpt.state, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, mode_i, flags, d_c, d_a, d_g, d_e, H, A, G = struct.unpack("<HBB4IIII", buf.read(32))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    mode = MODES[mode_i]

    def mat(r, c):
        return np.frombuffer(buf.read(4 * r * c), dtype="<f4").reshape(r, c).astype(np.float32)

    W_c = mat(H, d_c)
    extra = {}
    if mode == ENRICHED:
        extra = dict(W_a=mat(A, d_a), W_g=mat(G, d_g), W_e=mat(d_c + d_a + d_g, d_e))
    W_nce = mat(H, d_e)
    params = ModelParams(mode, (d_c, d_a, d_g, d_e), W_c=W_c, W_nce=W_nce, **extra)
    (n_markets,) = struct.unpack("<I", buf.read(4))
    markets = [_get_str(buf) for _ in range(n_markets)]
    ids, market_of, freq = [], [], []
    for _ in range(H):
        ids.append(_get_str(buf))
        m, f = struct.unpack("<IQ", buf.read(12))
        market_of.append(m)
        freq.append(f)
    vocab = Vocabulary(ids, np.array(freq, dtype=np.int64), np.array(market_of, dtype=np.int64), markets)
    amen = geo = None
    if flags & _HAS_INPUTS:
        amen, geo = mat(H, A), mat(H, G)
    state = {}
    if flags & _HAS_STATE:
        (n,) = struct.unpack("<I", buf.read(4))
        state = json.loads(buf.read(n).decode("utf-8"))
    return Checkpoint(params, vocab, amen, geo, state)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# -- TSV export ---------------------------------------------------------------

_BLOCK_PREFIX = {"enriched": "e", "click": "c", "amenity": "a", "geo": "g", "concatenated": "x"}


def export_tsv(path, vocab: Vocabulary, embeddings: EmbeddingSet, extra_blocks=()) -> None:
    """hotel_id then enriched components, then any requested extra blocks."""
    blocks = ["enriched"] + [b for b in extra_blocks if b != "enriched"]
    mats = [embeddings.vectors(b) for b in blocks]
    header = ["hotel_id"]
    for b, m in zip(blocks, mats):
        header += [f"{_BLOCK_PREFIX[b]}{j}" for j in range(m.shape[1])]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        full = np.concatenate(mats, axis=1)
        for h, row in zip(vocab.hotel_ids, full):
            fh.write(h + "\t" + "\t".join("%.9g" % x for x in row) + "\n")
    tmp.replace(path)


def read_tsv(path) -> tuple:
    """Inverse of :func:`export_tsv`: (hotel_ids, {block: matrix})."""
    inv = {v: k for k, v in _BLOCK_PREFIX.items()}
    with Path(path).open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        ids, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            ids.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    data = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    blocks, cols = {}, {}
    for j, name in enumerate(header[1:]):
        cols.setdefault(inv[name[0]], []).append(j)
    for b, js in cols.items():
        blocks[b] = data[:, js]
    return ids, blocks
