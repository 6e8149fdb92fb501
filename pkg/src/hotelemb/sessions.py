"""Click logs, sessionization, train/validation/test splits, and skip-gram pairs."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from itertools import groupby
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from .errors import DataValidationError

DAY_SECONDS = 86400
DEFAULT_WINDOW = 3
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class ClickEvent:
    user_id: str
    hotel_id: str
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataValidationError(f"negative timestamp {self.timestamp} for user {self.user_id}")


def parse_timestamp(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def load_click_log(path) -> list:
    path = Path(path)
    events = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return events
        if [h.strip() for h in header] != ["user_id", "hotel_id", "timestamp"]:
            raise DataValidationError("header must be user_id,hotel_id,timestamp", str(path), 1)
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataValidationError(f"expected 3 fields, got {len(row)}", str(path), reader.line_num)
            try:
                ts = parse_timestamp(row[2])
                events.append(ClickEvent(row[0].strip(), row[1].strip(), ts))
            except (ValueError, DataValidationError) as exc:
                raise DataValidationError(f"bad click row: {exc}", str(path), reader.line_num) from None
    return events


def write_click_log(path, events: Iterable[ClickEvent]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "hotel_id", "timestamp"])
        for e in events:
            w.writerow([e.user_id, e.hotel_id, e.timestamp])


def sessionize(events: Sequence[ClickEvent], gap_days: float = 7) -> list:
    """Group clicks per user into sessions split at gaps longer than ``gap_days``.

    Consecutive repeats of the same hotel collapse into one click and sessions
    shorter than two clicks are dropped.
    """
    gap = gap_days * DAY_SECONDS
    ordered = sorted(events, key=lambda e: (e.user_id, e.timestamp))
    sessions = []
    for _, clicks in groupby(ordered, key=lambda e: e.user_id):
        current: List[str] = []
        last_ts = None
        for e in clicks:
            if last_ts is not None and e.timestamp - last_ts > gap:
                if len(current) >= 2:
                    sessions.append(current)
                current = []
            if not current or current[-1] != e.hotel_id:
                current.append(e.hotel_id)
            last_ts = e.timestamp
        if len(current) >= 2:
            sessions.append(current)
    return sessions


def _session_key(session, seed: int) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(seed).encode())
    for item in session:
        h.update(b"\x1f" + str(item).encode())
    return h.digest()


@dataclass
class SessionCorpus:
    train: list
    validation: list
    test: list
    split_seed: int = 0
    split_ratios: tuple = DEFAULT_RATIOS

    def splits(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def encode(self, vocab) -> "SessionCorpus":
        """Map hotel-id sessions to index arrays; unknown ids are an error."""
        def enc(sessions):
            out = []
            for s in sessions:
                try:
                    out.append(np.array([vocab.index(h) for h in s], dtype=np.int64))
                except KeyError as exc:
                    raise DataValidationError(f"session references {exc.args[0]}") from None
            return out
        return SessionCorpus(enc(self.train), enc(self.validation), enc(self.test),
                             self.split_seed, tuple(self.split_ratios))

    def save(self, path) -> None:
        arrays = {}
        for name, sessions in self.splits().items():
            lengths = np.array([len(s) for s in sessions], dtype=np.int64)
            flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in sessions]) if sessions \
                else np.zeros(0, dtype=np.int64)
            arrays[f"{name}_flat"] = flat
            arrays[f"{name}_lengths"] = lengths
        arrays["split_seed"] = np.array(self.split_seed)
        arrays["split_ratios"] = np.array(self.split_ratios, dtype=np.float64)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "SessionCorpus":
        with np.load(path) as data:
            parts = {}
            for name in SPLITS:
                flat, lengths = data[f"{name}_flat"], data[f"{name}_lengths"]
                cuts = np.cumsum(lengths)[:-1]
                parts[name] = list(np.split(flat, cuts)) if len(lengths) else []
            return cls(parts["train"], parts["validation"], parts["test"],
                       int(data["split_seed"]), tuple(float(r) for r in data["split_ratios"]))


def split_corpus(sessions: Sequence, ratios=DEFAULT_RATIOS, seed: int = 0) -> SessionCorpus:
    """Deterministic split keyed on (session content, seed).

    Sessions are ordered by a seeded content hash and cut at the rounded
    ratio boundaries, so the assignment does not depend on input order and
    realized sizes are within one session of exact.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(sessions)
    nonzero = sum(r > 0 for r in ratios)
    if n < nonzero:
        raise ValueError(f"{n} sessions cannot fill {nonzero} non-empty splits")
    keyed = sorted(((_session_key(s, seed), tuple(s)) for s in sessions))
    ordered = [list(s) for _, s in keyed]
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    # keep every nonzero split populated when rounding would empty it
    if ratios[1] > 0 and n_val == 0:
        n_val = 1
    if ratios[2] > 0 and n - n_train - n_val <= 0:
        n_train = n - n_val - 1
    if ratios[2] == 0:
        n_val = n - n_train
    return SessionCorpus(ordered[:n_train], ordered[n_train:n_train + n_val],
                         ordered[n_train + n_val:], seed, ratios)


def generate_pairs(session: Sequence, window: int = DEFAULT_WINDOW) -> list:
    """All (target, context) pairs within ``window`` positions, t then c ascending."""
    if window < 1:
        raise ValueError("window must be >= 1")
    n = len(session)
    pairs = []
    for t in range(n):
        for c in range(max(0, t - window), min(n, t + window + 1)):
            if c != t:
                pairs.append((session[t], session[c]))
    return pairs


def pair_arrays(sessions: Sequence, window: int = DEFAULT_WINDOW) -> tuple:
    """Vectorized pair generation over many index sessions -> (targets, contexts)."""
    if not sessions:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy()
    lengths = np.array([len(s) for s in sessions], dtype=np.int64)
    flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in sessions])
    sid = np.repeat(np.arange(len(sessions)), lengths)
    targets, contexts = [], []
    for off in range(1, window + 1):
        same = sid[off:] == sid[:-off] if off < len(flat) else np.zeros(0, dtype=bool)
        left, right = flat[:-off][same], flat[off:][same]
        targets += [left, right]
        contexts += [right, left]
    return np.concatenate(targets), np.concatenate(contexts)


def next_click_pairs(sessions: Sequence) -> np.ndarray:
    """Consecutive (h_t, h_{t+1}) pairs as an (n, 2) array."""
    rows = [np.stack([np.asarray(s[:-1]), np.asarray(s[1:])], axis=1) for s in sessions if len(s) >= 2]
    if not rows:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(rows).astype(np.int64)


def pair_count(n: int, window: int) -> int:
    return sum(min(n - 1, t + window) - max(0, t - window) for t in range(n))
