"""Hotel catalog ingestion, attribute schema, and input encodings.

A catalog is a CSV with ``hotel_id, market_id, latitude, longitude`` followed
by one column per schema feature.  Features are described by a small
key-value schema file::

    # name = kind(args)
    star_rating = numeric(1, 5)
    property_type = categorical(hotel, hostel, resort)

Encoded inputs feed the amenity and geo projections of the model.
"""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DataValidationError

NUMERIC = "numeric"
CATEGORICAL = "categorical"
GEO_WIDTH = 3
CATALOG_COLUMNS = ("hotel_id", "market_id", "latitude", "longitude")

AttrValue = Union[float, str, None]


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    categories: tuple = ()
    bounds: tuple = (0.0, 1.0)

    @property
    def width(self) -> int:
        return 1 if self.kind == NUMERIC else len(self.categories)


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataValidationError(f"duplicate feature names in schema: {names}")
        for f in self.features:
            if f.kind == CATEGORICAL:
                if not f.categories:
                    raise DataValidationError(f"feature {f.name!r} has no categories")
                if len(set(f.categories)) != len(f.categories):
                    raise DataValidationError(f"feature {f.name!r} has duplicate categories")
            elif f.kind == NUMERIC:
                lo, hi = f.bounds
                if not hi > lo:
                    raise DataValidationError(f"feature {f.name!r} needs max > min, got {f.bounds}")
            else:
                raise DataValidationError(f"feature {f.name!r} has unknown kind {f.kind!r}")

    @property
    def width(self) -> int:
        """Encoded amenity width: one slot per numeric feature, m per categorical."""
        return sum(f.width for f in self.features)

    @property
    def names(self) -> list:
        return [f.name for f in self.features]

    def __getitem__(self, name: str) -> Feature:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(f.name == name for f in self.features)

    def offsets(self) -> dict:
        """Start slot of each feature inside the encoded amenity vector."""
        out, pos = {}, 0
        for f in self.features:
            out[f.name] = pos
            pos += f.width
        return out

    def to_text(self) -> str:
        lines = []
        for f in self.features:
            if f.kind == NUMERIC:
                lines.append(f"{f.name} = numeric({_fmt_num(f.bounds[0])}, {_fmt_num(f.bounds[1])})")
            else:
                lines.append(f"{f.name} = categorical({', '.join(f.categories)})")
        return "\n".join(lines) + "\n"


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


_SCHEMA_LINE = re.compile(r"^\s*([A-Za-z_][\w-]*)\s*=\s*(numeric|categorical)\s*\((.*)\)\s*$")


def parse_schema(text: str, source: str = "<schema>") -> FeatureSchema:
    features = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SCHEMA_LINE.match(line)
        if not m:
            raise DataValidationError(f"cannot parse schema line {raw!r}", source, lineno)
        name, kind, args = m.groups()
        parts = [p.strip() for p in args.split(",") if p.strip()]
        if kind == NUMERIC:
            if len(parts) != 2:
                raise DataValidationError(f"numeric feature {name!r} needs (min, max)", source, lineno)
            try:
                bounds = (float(parts[0]), float(parts[1]))
            except ValueError:
                raise DataValidationError(f"bad numeric bounds for {name!r}", source, lineno) from None
            features.append(Feature(name, NUMERIC, bounds=bounds))
        else:
            features.append(Feature(name, CATEGORICAL, categories=tuple(parts)))
    return FeatureSchema(tuple(features))


def load_schema(path) -> FeatureSchema:
    path = Path(path)
    return parse_schema(path.read_text(encoding="utf-8"), str(path))


def reference_schema() -> FeatureSchema:
    """Default attribute set used by the synthetic generator and examples."""
    return FeatureSchema((
        Feature("star_rating", NUMERIC, bounds=(1.0, 5.0)),
        Feature("user_rating", NUMERIC, bounds=(1.0, 10.0)),
        Feature("property_type", CATEGORICAL, categories=("hotel", "hostel", "resort", "apartment", "motel")),
        Feature("wifi", CATEGORICAL, categories=("yes", "no")),
        Feature("breakfast", CATEGORICAL, categories=("yes", "no")),
        Feature("pets", CATEGORICAL, categories=("yes", "no")),
        Feature("room_count", NUMERIC, bounds=(1.0, 1000.0)),
        Feature("price_tier", NUMERIC, bounds=(1.0, 5.0)),
    ))


@dataclass
class HotelRecord:
    hotel_id: str
    market_id: str
    latitude: float
    longitude: float
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise DataValidationError(f"hotel {self.hotel_id}: latitude {self.latitude} outside [-90, 90]")
        if not -180.0 < self.longitude <= 180.0:
            raise DataValidationError(f"hotel {self.hotel_id}: longitude {self.longitude} outside (-180, 180]")


def validate_record(record: HotelRecord, schema: FeatureSchema) -> None:
    for name, value in record.attributes.items():
        if name not in schema:
            raise DataValidationError(f"hotel {record.hotel_id}: unknown attribute {name!r}")
        if value is None:
            continue
        feat = schema[name]
        if feat.kind == CATEGORICAL and value not in feat.categories:
            raise DataValidationError(
                f"hotel {record.hotel_id}: unknown category {value!r} for {name!r}")
        if feat.kind == NUMERIC and not math.isfinite(float(value)):
            raise DataValidationError(f"hotel {record.hotel_id}: non-finite value for {name!r}")


def load_catalog(path, schema: FeatureSchema) -> list:
    """Read and validate a catalog CSV.  Errors carry the offending line number."""
    path = Path(path)
    records = []
    seen = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError("empty catalog file", str(path), 1) from None
        if tuple(header[:4]) != CATALOG_COLUMNS:
            raise DataValidationError(f"header must start with {','.join(CATALOG_COLUMNS)}", str(path), 1)
        feat_cols = header[4:]
        for name in feat_cols:
            if name not in schema:
                raise DataValidationError(f"unknown attribute column {name!r}", str(path), 1)
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataValidationError(
                    f"expected {len(header)} fields, got {len(row)}", str(path), lineno)
            hid, mid = row[0].strip(), row[1].strip()
            if not hid or not mid:
                raise DataValidationError("empty hotel_id or market_id", str(path), lineno)
            try:
                lat, lon = float(row[2]), float(row[3])
            except ValueError:
                raise DataValidationError("latitude/longitude must be numeric", str(path), lineno) from None
            attrs = {}
            for name, cell in zip(feat_cols, row[4:]):
                cell = cell.strip()
                if not cell:
                    attrs[name] = None
                elif schema[name].kind == NUMERIC:
                    try:
                        attrs[name] = float(cell)
                    except ValueError:
                        raise DataValidationError(
                            f"attribute {name!r} must be numeric, got {cell!r}", str(path), lineno) from None
                else:
                    attrs[name] = cell
            if hid in seen:
                raise DataValidationError(
                    f"duplicate hotel_id {hid!r} (first seen on line {seen[hid]})", str(path), lineno)
            seen[hid] = lineno
            try:
                rec = HotelRecord(hid, mid, lat, lon, attrs)
                validate_record(rec, schema)
            except DataValidationError as exc:
                raise DataValidationError(str(exc), str(path), lineno) from None
            records.append(rec)
    return records


def write_catalog(path, records: Sequence[HotelRecord], schema: FeatureSchema) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(CATALOG_COLUMNS) + schema.names)
        for r in records:
            cells = []
            for f in schema.features:
                v = r.attributes.get(f.name)
                if v is None:
                    cells.append("")
                elif f.kind == NUMERIC:
                    cells.append(_fmt_num(v))
                else:
                    cells.append(v)
            w.writerow([r.hotel_id, r.market_id, repr(float(r.latitude)), repr(float(r.longitude))] + cells)


def encode_amenities(record: HotelRecord, schema: FeatureSchema) -> np.ndarray:
    """Dense amenity input: min-max scaled numerics, one-hot categoricals, zeros if missing."""
    out = np.zeros(schema.width)
    pos = 0
    for f in schema.features:
        value = record.attributes.get(f.name)
        if value is not None:
            if f.kind == NUMERIC:
                lo, hi = f.bounds
                out[pos] = min(max((float(value) - lo) / (hi - lo), 0.0), 1.0)
            else:
                try:
                    out[pos + f.categories.index(value)] = 1.0
                except ValueError:
                    raise DataValidationError(
                        f"hotel {record.hotel_id}: unknown category {value!r} for {f.name!r}") from None
        pos += f.width
    return out


def encode_geo(record: HotelRecord) -> np.ndarray:
    # sin/cos keeps longitude continuous across the antimeridian
    lon = math.radians(record.longitude)
    return np.array([record.latitude / 90.0, math.sin(lon), math.cos(lon)])


@dataclass
class Vocabulary:
    """Dense index space over catalog hotels, most-clicked first."""

    hotel_ids: list
    frequencies: np.ndarray
    market_of: np.ndarray
    markets: list

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.int64)
        self.market_of = np.asarray(self.market_of, dtype=np.int64)
        self._index = {h: i for i, h in enumerate(self.hotel_ids)}
        if len(self._index) != len(self.hotel_ids):
            raise DataValidationError("vocabulary hotel ids are not unique")

    def __len__(self) -> int:
        return len(self.hotel_ids)

    def __contains__(self, hotel_id) -> bool:
        return hotel_id in self._index

    def index(self, hotel_id: str) -> int:
        try:
            return self._index[hotel_id]
        except KeyError:
            raise KeyError(f"unknown hotel id {hotel_id!r}") from None

    def id(self, index: int) -> str:
        return self.hotel_ids[index]

    @property
    def cold_start(self) -> np.ndarray:
        return self.frequencies == 0

    def market_members(self) -> list:
        """Per market index, sorted array of hotel indices."""
        order = np.argsort(self.market_of, kind="stable")
        bounds = np.searchsorted(self.market_of[order], np.arange(len(self.markets) + 1))
        return [order[bounds[m]:bounds[m + 1]] for m in range(len(self.markets))]


def build_vocab(catalog: Sequence[HotelRecord], train_sessions: Iterable) -> Vocabulary:
    """Index catalog hotels by descending training click count (ties by id).

    ``train_sessions`` holds sessions of hotel ids, or a corpus whose ``train``
    attribute does.  Hotels never clicked in training keep frequency 0 and are
    reported as cold-start.
    """
    sessions = getattr(train_sessions, "train", train_sessions)
    known = {r.hotel_id: r for r in catalog}
    counts = Counter()
    for s in sessions:
        for h in s:
            if h not in known:
                raise DataValidationError(f"session references hotel id {h!r} absent from catalog")
            counts[h] += 1
    ids = sorted(known, key=lambda h: (-counts[h], h))
    markets = sorted({r.market_id for r in catalog})
    midx = {m: i for i, m in enumerate(markets)}
    return Vocabulary(
        hotel_ids=ids,
        frequencies=np.array([counts[h] for h in ids], dtype=np.int64),
        market_of=np.array([midx[known[h].market_id] for h in ids], dtype=np.int64),
        markets=markets,
    )


def encode_catalog(records: Sequence[HotelRecord], schema: FeatureSchema,
                   vocab: Optional[Vocabulary] = None) -> tuple:
    """Stack amenity and geo inputs into (H, A) and (H, 3) arrays in vocabulary order."""
    if vocab is not None:
        by_id = {r.hotel_id: r for r in records}
        records = [by_id[h] for h in vocab.hotel_ids]
    amen = np.zeros((len(records), schema.width))
    geo = np.zeros((len(records), GEO_WIDTH))
    for i, r in enumerate(records):
        amen[i] = encode_amenities(r, schema)
        geo[i] = encode_geo(r)
    return amen, geo


def records_by_id(records: Sequence[HotelRecord]) -> Mapping[str, HotelRecord]:
    return {r.hotel_id: r for r in records}
